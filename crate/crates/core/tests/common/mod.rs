#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use smds_core::learning::EmConfig;
use smds_core::series::periodic_mask;
use smds_core::smoothing::SmoothedStats;
use smds_core::{Modality, MultiscaleSeries, RegimeParams, SwitchingModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Random SPD matrix with eigenvalues in `[lo, lo + spread]`.
pub fn random_spd(d: usize, lo: f64, spread: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let q = randn(d, d, rng).qr().q();
    let vals = DVector::from_fn(d, |_, _| lo + spread * rng.random::<f64>());
    &q * DMatrix::from_diagonal(&vals) * q.transpose()
}

/// Random stable dynamics with spectral radius at most `radius`.
pub fn random_stable(d: usize, radius: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = randn(d, d, rng);
    let top = a.clone().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    a * (radius / top)
}

/// Gaussian-only switching model with `m` regimes.
pub fn gaussian_model(d: usize, f: usize, m: usize, seed: u64) -> SwitchingModel {
    let mut r = rng(seed);
    let regimes = (0..m)
        .map(|_| RegimeParams {
            a: random_stable(d, 0.9, &mut r),
            q: random_spd(d, 0.05, 0.2, &mut r),
            alpha: DVector::zeros(0),
            beta: DMatrix::zeros(0, d),
            c: randn(f, d, &mut r),
            r: random_spd(f, 0.3, 0.5, &mut r),
        })
        .collect();
    let phi = if m == 1 {
        DMatrix::from_element(1, 1, 1.0)
    } else {
        let off = 0.05 / (m as f64 - 1.0);
        DMatrix::from_fn(m, m, |i, j| if i == j { 0.95 } else { off })
    };
    SwitchingModel {
        regimes,
        phi,
        pi0: DVector::from_element(m, 1.0 / m as f64),
        mu0: DVector::from_fn(d, |i, _| 0.1 * i as f64),
        lambda0: random_spd(d, 0.5, 0.5, &mut r),
        tau: 1.0,
        dt_ms: 10.0,
        field_period_steps: 1,
    }
}

/// Small multiscale model: d=2, 3 neurons, 2 field features.
pub fn toy_model(m: usize) -> SwitchingModel {
    let d = 2;
    let regime = |s: f64| RegimeParams {
        a: DMatrix::from_row_slice(2, 2, &[0.9 * s, 0.1, -0.1, 0.8]),
        q: DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.2])),
        alpha: DVector::from_vec(vec![-2.0, -2.5, -3.0]),
        beta: DMatrix::from_row_slice(3, 2, &[0.3, 0.0, 0.0, 0.4, 0.2 * s, -0.2]),
        c: DMatrix::from_row_slice(2, 2, &[1.0, 0.5 * s, -0.3, 1.2]),
        r: DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.7])),
    };
    let phi = if m == 1 {
        DMatrix::from_element(1, 1, 1.0)
    } else {
        let off = 0.02 / (m as f64 - 1.0);
        DMatrix::from_fn(m, m, |i, j| if i == j { 0.98 } else { off })
    };
    SwitchingModel {
        regimes: (0..m).map(|j| regime(1.0 - 0.3 * j as f64)).collect(),
        phi,
        pi0: DVector::from_element(m, 1.0 / m as f64),
        mu0: DVector::zeros(d),
        lambda0: DMatrix::identity(d, d),
        tau: 1.0,
        dt_ms: 10.0,
        field_period_steps: 5,
    }
}

/// Nodes and weights of the `n`-point Gauss–Hermite rule for `N(0, 1)`
/// (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jac = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jac);
    let nodes = eig.eigenvalues.iter().copied().collect();
    let weights = (0..n).map(|k| eig.eigenvectors[(0, k)].powi(2)).collect();
    (nodes, weights)
}

pub fn log_normal_pdf(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let ch = cov.clone().cholesky().expect("SPD covariance");
    let diff = y - mean;
    let sol = ch.solve(&diff);
    let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (y.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + diff.dot(&sol))
}

/// Covariance-form Kalman predict + update. Returns the posterior, the
/// prediction, and the innovation log-likelihood (0 when `y` is absent).
pub fn kalman_step(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: Option<&DVector<f64>>,
) -> (DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>, f64) {
    let mp = a * mean;
    let pp = a * cov * a.transpose() + q;
    match y {
        None => (mp.clone(), pp.clone(), mp, pp, 0.0),
        Some(y) => {
            let s = c * &pp * c.transpose() + r;
            let k = &pp * c.transpose() * s.clone().try_inverse().expect("invertible innovation");
            let ll = log_normal_pdf(y, &(c * &mp), &s);
            let m = &mp + &k * (y - c * &mp);
            let i = DMatrix::identity(mean.len(), mean.len());
            // Joseph form keeps symmetry.
            let ikc = &i - &k * c;
            let p = &ikc * &pp * ikc.transpose() + &k * r * k.transpose();
            (m, p, mp, pp, ll)
        }
    }
}

pub struct RtsOutput {
    /// t = 0..T
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
    /// `Cov(x_t, x_{t−1} | all)` for t = 1..T (index t−1).
    pub lag_cov: Vec<DMatrix<f64>>,
    pub filt_mean: Vec<DVector<f64>>,
    pub filt_cov: Vec<DMatrix<f64>>,
    pub log_lik: f64,
}

/// Classical Kalman filter + fixed-interval smoother for a one-regime
/// Gaussian model, including the regime-free initial state `x_0`.
pub fn rts_oracle(model: &SwitchingModel, ys: &[Option<DVector<f64>>]) -> RtsOutput {
    let reg = &model.regimes[0];
    let t_len = ys.len();
    let mut fm = vec![model.mu0.clone()];
    let mut fc = vec![model.lambda0.clone()];
    let mut pm = vec![DVector::zeros(0)];
    let mut pc = vec![DMatrix::zeros(0, 0)];
    let mut ll = 0.0;
    for y in ys {
        let (m, p, mp, pp, l) = kalman_step(fm.last().unwrap(), fc.last().unwrap(), &reg.a, &reg.q, &reg.c, &reg.r, y.as_ref());
        fm.push(m);
        fc.push(p);
        pm.push(mp);
        pc.push(pp);
        ll += l;
    }
    let mut sm = fm.clone();
    let mut sc = fc.clone();
    let mut lag = vec![DMatrix::zeros(0, 0); t_len];
    for t in (0..t_len).rev() {
        // Smooth x_t (index t) from x_{t+1}.
        let j = &fc[t] * reg.a.transpose() * pc[t + 1].clone().try_inverse().unwrap();
        sm[t] = &fm[t] + &j * (&sm[t + 1] - &pm[t + 1]);
        sc[t] = &fc[t] + &j * (&sc[t + 1] - &pc[t + 1]) * j.transpose();
        lag[t] = &sc[t + 1] * j.transpose();
    }
    RtsOutput {
        mean: sm,
        cov: sc,
        lag_cov: lag,
        filt_mean: fm,
        filt_cov: fc,
        log_lik: ll,
    }
}

pub struct SkfStep {
    pub probs: DVector<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub merged_mean: DVector<f64>,
    pub merged_cov: DMatrix<f64>,
}

fn moment_match(w: &[f64], means: &[DVector<f64>], covs: &[DMatrix<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = means[0].len();
    let mut m = DVector::zeros(d);
    for (wi, mi) in w.iter().zip(means) {
        m += mi * *wi;
    }
    let mut p = DMatrix::zeros(d, d);
    for ((wi, mi), pi) in w.iter().zip(means).zip(covs) {
        let dm = mi - &m;
        p += (pi + &dm * dm.transpose()) * *wi;
    }
    (m, p)
}

/// Switching Kalman filter with one Gaussian collapse per target regime.
pub fn skf_oracle(model: &SwitchingModel, ys: &[Option<DVector<f64>>]) -> Vec<SkfStep> {
    let m = model.n_regimes();
    let mut out: Vec<SkfStep> = Vec::new();
    for (k, y) in ys.iter().enumerate() {
        let mut means = Vec::new();
        let mut covs = Vec::new();
        let mut logs = Vec::new();
        for j in 0..m {
            let (start_m, start_c, prior) = if k == 0 {
                (model.mu0.clone(), model.lambda0.clone(), model.pi0[j])
            } else {
                let prev = &out[k - 1];
                let raw: Vec<f64> = (0..m).map(|i| model.phi[(j, i)] * prev.probs[i]).collect();
                let tot: f64 = raw.iter().sum();
                let w: Vec<f64> = raw.iter().map(|v| v / tot).collect();
                let (mm, pp) = moment_match(&w, &prev.means, &prev.covs);
                (mm, pp, tot)
            };
            let reg = &model.regimes[j];
            let (mj, pj, _, _, l) = kalman_step(&start_m, &start_c, &reg.a, &reg.q, &reg.c, &reg.r, y.as_ref());
            means.push(mj);
            covs.push(pj);
            logs.push(prior.ln() + l);
        }
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - top).exp()).sum();
        let probs = DVector::from_iterator(m, logs.iter().map(|l| (l - top).exp() / z));
        let w: Vec<f64> = probs.iter().copied().collect();
        let (merged_mean, merged_cov) = moment_match(&w, &means, &covs);
        out.push(SkfStep {
            probs,
            means,
            covs,
            merged_mean,
            merged_cov,
        });
    }
    out
}

pub fn field_rows(series: &smds_core::MultiscaleSeries) -> Vec<Option<DVector<f64>>> {
    (0..series.len()).map(|k| series.field_row(k)).collect()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

pub fn max_abs_v(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// `E[∏ z_i^{k_i}]` for `z ~ N(0, I)`.
pub fn gaussian_moment(powers: &[usize]) -> f64 {
    powers
        .iter()
        .map(|&k| {
            if k % 2 == 1 {
                0.0
            } else {
                (1..k).step_by(2).map(|v| v as f64).product::<f64>()
            }
        })
        .product()
}

/// All exponent vectors of length `d` with total degree at most `max_deg`.
pub fn exponent_tuples(d: usize, max_deg: usize) -> Vec<Vec<usize>> {
    if d == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for k in 0..=max_deg {
        for mut rest in exponent_tuples(d - 1, max_deg - k) {
            rest.insert(0, k);
            out.push(rest);
        }
    }
    out
}

/// Posterior mean and variance of a scalar Gaussian prior times
/// `exp(log_lik)`, by dense grid integration over ±8 prior sd.
pub fn grid_posterior(mean: f64, var: f64, log_lik: impl Fn(f64) -> f64) -> (f64, f64) {
    let sd = var.sqrt();
    let n = 10_000;
    let xs: Vec<f64> = (0..n).map(|i| mean - 8.0 * sd + 16.0 * sd * i as f64 / (n - 1) as f64).collect();
    let logs: Vec<f64> = xs.iter().map(|&x| -0.5 * (x - mean).powi(2) / var + log_lik(x)).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ws: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = ws.iter().sum();
    let m = xs.iter().zip(&ws).map(|(x, w)| x * w).sum::<f64>() / z;
    let v = xs.iter().zip(&ws).map(|(x, w)| (x - m).powi(2) * w).sum::<f64>() / z;
    (m, v)
}

/// Poisson GLM with log link by iteratively reweighted least squares.
/// Returns `[intercept, slopes...]`.
pub fn irls(x: &DMatrix<f64>, n: &[f64]) -> DVector<f64> {
    let design = x.clone().insert_column(0, 1.0);
    let p = design.ncols();
    let mut theta = DVector::zeros(p);
    let mean_n = n.iter().sum::<f64>() / n.len() as f64;
    theta[0] = mean_n.ln();
    for _ in 0..100 {
        let eta = &design * &theta;
        let mu = eta.map(f64::exp);
        let z = DVector::from_fn(n.len(), |i, _| eta[i] + (n[i] - mu[i]) / mu[i]);
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwz = DVector::zeros(p);
        for i in 0..n.len() {
            let row = design.row(i).transpose();
            xtwx.ger(mu[i], &row, &row, 1.0);
            xtwz.axpy(mu[i] * z[i], &row, 1.0);
        }
        let next = xtwx.cholesky().unwrap().solve(&xtwz);
        let done = (&next - &theta).norm() < 1e-14;
        theta = next;
        if done {
            break;
        }
    }
    theta
}

pub fn single_regime_stats(means: &[DVector<f64>], covs: &[DMatrix<f64>], cross: Vec<DMatrix<f64>>) -> SmoothedStats {
    let t_len = means.len() - 1;
    let d = means[0].len();
    SmoothedStats {
        mean: means.to_vec(),
        cov: covs.to_vec(),
        regime_mean: (1..=t_len).map(|t| vec![means[t].clone()]).collect(),
        regime_cov: (1..=t_len).map(|t| vec![covs[t].clone()]).collect(),
        w: DMatrix::from_element(t_len, 1, 1.0),
        wpair: vec![DMatrix::from_element(1, 1, 1.0); t_len - 1],
        prev_mean: (0..t_len).map(|t| vec![means[t].clone()]).collect(),
        gain: vec![vec![DMatrix::zeros(d, d)]; t_len],
        cross: cross.into_iter().map(|c| vec![c]).collect(),
    }
}

pub fn series_from(spikes: DMatrix<u32>, fields: DMatrix<f64>) -> MultiscaleSeries {
    let t = spikes.nrows().max(fields.nrows());
    MultiscaleSeries {
        spikes,
        fields,
        field_mask: periodic_mask(t, 1),
        behavior: None,
        regimes: None,
        latents: None,
        dt_ms: 10.0,
        field_period_steps: 1,
    }
}

fn one_regime_start(d: usize, nc: usize, f: usize) -> SwitchingModel {
    SwitchingModel {
        regimes: vec![RegimeParams {
            a: DMatrix::identity(d, d) * 0.5,
            q: DMatrix::identity(d, d),
            alpha: DVector::from_element(nc, -2.0),
            beta: DMatrix::zeros(nc, d),
            c: DMatrix::zeros(f, d),
            r: DMatrix::identity(f, f),
        }],
        phi: DMatrix::from_element(1, 1, 1.0),
        pi0: DVector::from_element(1, 1.0),
        mu0: DVector::zeros(d),
        lambda0: DMatrix::identity(d, d),
        tau: 1.0,
        dt_ms: 10.0,
        field_period_steps: 1,
    }
}

/// Inputs of one M-step whose answer is known in closed form.
pub struct MStepCase {
    pub stats: SmoothedStats,
    pub series: MultiscaleSeries,
    pub prev: SwitchingModel,
    pub cfg: EmConfig,
    pub truth: RegimeParams,
}

/// Smoothed moments whose sums equal the population statistics of a known
/// linear-Gaussian model: means follow `m_t = A m_{t−1}`, covariances follow
/// `P_t = A P_{t−1} Aᵀ + Q`, and field residuals are built so that the
/// field sums match `C` and `R` exactly.
pub fn exact_lgssm_case(seed: u64) -> MStepCase {
    let mut r = rng(seed);
    let (d, f, t_len) = (2, 3, 400);
    let th: f64 = 0.2;
    let a = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]) * 0.999;
    let q = DMatrix::from_row_slice(2, 2, &[2e-4, 5e-5, 5e-5, 1e-4]);
    let c = randn(f, d, &mut r) * 0.5;
    let rr = random_spd(f, 1.0, 0.5, &mut r);

    let mut means = vec![DVector::from_vec(vec![10.0, -4.0])];
    let mut covs = vec![DMatrix::identity(d, d) * 0.01];
    let mut cross = Vec::new();
    for t in 1..=t_len {
        means.push(&a * &means[t - 1]);
        covs.push(&a * &covs[t - 1] * a.transpose() + &q);
        cross.push(&means[t] * means[t - 1].transpose() + &a * &covs[t - 1]);
    }

    // Field residuals e_t with Σ e mᵀ = C ΣP and Σ e eᵀ = T R − C ΣP Cᵀ.
    let mm = DMatrix::from_fn(t_len, d, |k, i| means[k + 1][i]);
    let sum_p = covs[1..].iter().fold(DMatrix::zeros(d, d), |acc, p| acc + p);
    let g = &c * &sum_p;
    let mtm_inv = mm.tr_mul(&mm).try_inverse().unwrap();
    let e_par = &mm * &mtm_inv * g.transpose();
    let z = randn(t_len, f, &mut r);
    let z_perp = &z - &mm * (&mtm_inv * mm.tr_mul(&z));
    let s = &rr * t_len as f64 - &c * &sum_p * c.transpose() - &g * &mtm_inv * g.transpose();
    let l = z_perp.tr_mul(&z_perp).cholesky().unwrap().l();
    let k = s.cholesky().expect("residual target is PD").l();
    let e_perp = &z_perp * l.transpose().try_inverse().unwrap() * k.transpose();
    let e = e_par + e_perp;
    let fields = &mm * c.transpose() + e;

    MStepCase {
        stats: single_regime_stats(&means, &covs, cross),
        series: series_from(DMatrix::zeros(t_len, 0), fields),
        prev: one_regime_start(d, 0, f),
        cfg: EmConfig {
            latent_dim: d,
            modality: Modality::GaussianOnly,
            ..Default::default()
        },
        truth: RegimeParams {
            a,
            q,
            alpha: DVector::zeros(0),
            beta: DMatrix::zeros(0, d),
            c,
            r: rr,
        },
    }
}

/// Poisson M-step inputs with point-mass latents (zero covariances) plus
/// the IRLS solution `[α, β...]` of every neuron.
pub struct PoissonCase {
    pub stats: SmoothedStats,
    pub series: MultiscaleSeries,
    pub prev: SwitchingModel,
    pub cfg: EmConfig,
    pub irls: Vec<DVector<f64>>,
}

pub fn poisson_glm_case(seed: u64) -> PoissonCase {
    let mut r = rng(seed);
    let (d, nc, t_len) = (3, 4, 2000);
    let alpha = DVector::from_vec(vec![-2.5, -1.8, -3.0, -2.2]);
    let beta = randn(nc, d, &mut r) * 0.4;
    let means: Vec<DVector<f64>> = (0..=t_len).map(|_| randn(d, 1, &mut r).column(0).into_owned()).collect();
    let covs = vec![DMatrix::zeros(d, d); t_len + 1];
    let spikes = DMatrix::from_fn(t_len, nc, |k, c| {
        let eta = alpha[c] + beta.row(c).dot(&means[k + 1].transpose());
        Poisson::new(eta.exp()).unwrap().sample(&mut r) as u32
    });
    let x = DMatrix::from_fn(t_len, d, |k, i| means[k + 1][i]);
    let irls = (0..nc)
        .map(|c| {
            let counts: Vec<f64> = spikes.column(c).iter().map(|&v| v as f64).collect();
            self::irls(&x, &counts)
        })
        .collect();
    PoissonCase {
        stats: single_regime_stats(&means, &covs, vec![DMatrix::zeros(d, d); t_len]),
        series: series_from(spikes, DMatrix::zeros(t_len, 0)),
        prev: one_regime_start(d, nc, 0),
        cfg: EmConfig {
            latent_dim: d,
            modality: Modality::PoissonOnly,
            ..Default::default()
        },
        irls,
    }
}
