//! Small dense linear-algebra helpers shared by the filter, smoother and M-step.
//!
//! Every covariance that leaves a public routine passes through
//! [`repair_covariance`]: symmetrize, then clamp eigenvalues from below.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Result, SmdsError};

/// Eigenvalue floor used for covariance repair throughout the crate.
pub const COV_JITTER: f64 = 1e-9;

/// Diagonal loading tried, in order, when a Cholesky factorization fails.
const JITTER_LADDER: [f64; 5] = [0.0, 1e-9, 1e-8, 1e-7, 1e-6];

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Returns `(m + mᵀ)/2` with eigenvalues clamped at `jitter`.
///
/// The eigendecomposition is skipped when `sym - jitter·I` already admits a
/// Cholesky factor, since clamping is then the identity.
pub fn repair_covariance(m: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(SmdsError::dim(
            "repair_covariance",
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    let sym = symmetrize(m);
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(SmdsError::NotPositiveDefinite {
            what: "covariance contains non-finite entries".into(),
        });
    }
    let n = sym.nrows();
    if n == 0 {
        return Ok(sym);
    }
    let shifted = &sym - DMatrix::<f64>::identity(n, n) * jitter;
    if Cholesky::new(shifted).is_some() {
        return Ok(sym);
    }
    Ok(clamp_eigen(sym, jitter))
}

fn clamp_eigen(sym: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&vals) * v.transpose();
    symmetrize(&out)
}

/// Cholesky factorization with diagonal-loading escalation (0 → 1e-6).
pub fn cholesky_jitter(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let sym = symmetrize(m);
    for &j in JITTER_LADDER.iter() {
        let trial = if j == 0.0 {
            sym.clone()
        } else {
            &sym + DMatrix::<f64>::identity(n, n) * j
        };
        if let Some(c) = Cholesky::new(trial) {
            return Ok(c);
        }
    }
    Err(SmdsError::NotPositiveDefinite {
        what: what.to_string(),
    })
}

/// A square-root factor `S` with `S Sᵀ = m`: lower Cholesky when available
/// (with jitter escalation), otherwise the symmetric eigen square root.
pub fn sqrt_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Ok(c) = cholesky_jitter(m, "sqrt factor") {
        return c.l();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals)
}

/// Square-root factor that tolerates singular and zero matrices (sampling).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = Cholesky::new(symmetrize(m)) {
        return c.l();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals)
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let c = cholesky_jitter(m, what)?;
    Ok(symmetrize(&c.inverse()))
}

pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

pub fn spd_logdet(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    Ok(chol_logdet(&cholesky_jitter(m, what)?))
}

/// Solves the symmetric positive (semi)definite system `m x = b` with a ridge
/// fallback; returns the solution and whether the ridge was needed.
pub fn ridge_solve(m: &DMatrix<f64>, b: &DMatrix<f64>, ridge: f64) -> (DMatrix<f64>, bool) {
    let n = m.nrows();
    let sym = symmetrize(m);
    if let Some(c) = Cholesky::new(sym.clone()) {
        return (c.solve(b), false);
    }
    let mut r = ridge.max(f64::MIN_POSITIVE);
    loop {
        let loaded = &sym + DMatrix::<f64>::identity(n, n) * r;
        if let Some(c) = Cholesky::new(loaded) {
            return (c.solve(b), true);
        }
        r *= 10.0;
        if r > 1e12 {
            return (DMatrix::zeros(n, b.ncols()), true);
        }
    }
}

/// Stationary covariance `Σ = A Σ Aᵀ + Q` via the Kronecker linear system.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if spectral_radius(a) >= 1.0 {
        return Err(SmdsError::Numeric {
            step: 0,
            what: format!(
                "Lyapunov solve needs a stable dynamics matrix (spectral radius {:.6})",
                spectral_radius(a)
            ),
        });
    }
    let n = d * d;
    let kron = a.kronecker(a);
    let lhs = DMatrix::<f64>::identity(n, n) - kron;
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = lhs.lu().solve(&rhs).ok_or_else(|| SmdsError::Numeric {
        step: 0,
        what: "singular Lyapunov system".into(),
    })?;
    let sigma = DMatrix::from_column_slice(d, d, sol.as_slice());
    Ok(symmetrize(&sigma))
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Gaussian-mixture moment matching: returns the mean and covariance of
/// `Σ_k w_k N(m_k, P_k)` (weights assumed normalized).
pub fn mix_moments(
    weights: &[f64],
    means: &[&DVector<f64>],
    covs: &[&DMatrix<f64>],
) -> (DVector<f64>, DMatrix<f64>) {
    let d = means[0].len();
    let mut mean = DVector::zeros(d);
    for (w, m) in weights.iter().zip(means) {
        if *w != 0.0 {
            mean.axpy(*w, m, 1.0);
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for ((w, m), p) in weights.iter().zip(means).zip(covs) {
        if *w == 0.0 {
            continue;
        }
        let diff = *m - &mean;
        cov += *p * *w;
        cov.ger(*w, &diff, &diff, 1.0);
    }
    (mean, cov)
}
