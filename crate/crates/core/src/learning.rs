//! Unsupervised EM for switching and stationary multiscale models.
//!
//! The E-step is filter + smoother; the expected complete-data
//! log-likelihood is evaluated with all normalizing constants so that, added
//! to the posterior entropy, it gives an evidence lower bound that is exact
//! for linear-Gaussian single-regime models. The M-step is closed form except
//! for the Poisson parameters, which use damped Newton.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Result, SmdsError};
use crate::filtering::{collapse_weights, smsnf_filter_with, FilterContext, FilterOutput};
use crate::linalg::{
    cholesky_jitter, mix_moments, repair_covariance, spd_inverse, spd_logdet, symmetrize, COV_JITTER,
};
use crate::model::{RegimeParams, SwitchingModel};
use crate::series::{Modality, MultiscaleSeries};
use crate::simulate::transition_matrix;
use crate::smoothing::{sms_run, SmoothedStats};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Ridge added to every normal-equation matrix in the M-step.
pub const M_STEP_RIDGE: f64 = 1e-8;

/// Regimes whose total posterior weight falls below this keep their
/// previous parameters.
pub const DEGENERATE_WEIGHT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    #[serde(alias = "M")]
    pub regimes: usize,
    #[serde(alias = "d")]
    pub latent_dim: usize,
    pub max_iters: usize,
    pub modality: Modality,
    pub tau: f64,
    pub share_observation_params: bool,
    pub seed: u64,
    pub init_a_scale: f64,
    pub init_stay_prob: f64,
    /// Stop once the relative change of the expected log-likelihood stays
    /// below this for five consecutive iterations.
    pub convergence_tol: Option<f64>,
    pub newton_max_iters: usize,
    pub newton_tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            regimes: 1,
            latent_dim: 10,
            max_iters: 300,
            modality: Modality::Multiscale,
            tau: 1.0,
            share_observation_params: false,
            seed: 0,
            init_a_scale: 0.9,
            init_stay_prob: 0.995,
            convergence_tol: None,
            newton_max_iters: 50,
            newton_tol: 1e-8,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(SmdsError::Config(s.into()));
        if self.regimes == 0 {
            return bad("EM needs at least one regime");
        }
        if self.latent_dim == 0 {
            return bad("latent dimension must be at least 1");
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad("tau must be positive and finite");
        }
        if !(0.0..=1.0).contains(&self.init_stay_prob) {
            return bad("init_stay_prob must lie in [0,1]");
        }
        if !self.init_a_scale.is_finite() || !(self.newton_tol > 0.0) {
            return bad("init_a_scale must be finite and newton_tol positive");
        }
        Ok(())
    }
}

fn normal_matrix(rows: usize, cols: usize, seed: u64, stream: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let dist = Normal::new(0.0, 0.1).expect("fixed std");
    DMatrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
}

/// Stream carrying the random spike loadings of regime `j`; field loadings
/// use `FIELD_STREAM + j`. Separate streams make the initialization of a
/// single-modality method the restriction of the multiscale one, and regime 1
/// of a switching model the stationary model.
const SPIKE_STREAM: u64 = 100;
const FIELD_STREAM: u64 = 200;

/// Initial parameters: `A = init_a_scale·I`, `Q = I`, sticky `Φ`, uniform `π`,
/// `μ0 = 0`, `Λ0 = I`, baseline log-rates from mean counts, small random
/// loadings (entries `N(0, 0.01)`), `R` from field sample variances.
pub fn init_params(cfg: &EmConfig, series: &MultiscaleSeries) -> Result<SwitchingModel> {
    cfg.validate()?;
    if series.is_empty() {
        return Err(SmdsError::EmptySeries);
    }
    let series = series.select_modality(cfg.modality);
    let d = cfg.latent_dim;
    let t = series.len() as f64;
    let nc = series.n_neurons();
    let nf = series.n_fields();

    let alpha = DVector::from_fn(nc, |c, _| {
        let mean = series.spikes.column(c).iter().map(|&v| v as f64).sum::<f64>() / t;
        mean.max(1.0 / t).ln()
    });
    let frames: Vec<usize> = (0..series.len()).filter(|&k| series.field_mask[k]).collect();
    let rdiag = DVector::from_fn(nf, |f, _| {
        let n = frames.len() as f64;
        if frames.len() < 2 {
            return 1.0;
        }
        let mean = frames.iter().map(|&k| series.fields[(k, f)]).sum::<f64>() / n;
        let var = frames.iter().map(|&k| (series.fields[(k, f)] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        var.max(1e-6)
    });

    let regimes = (0..cfg.regimes)
        .map(|j| RegimeParams {
            a: DMatrix::identity(d, d) * cfg.init_a_scale,
            q: DMatrix::identity(d, d),
            alpha: alpha.clone(),
            beta: normal_matrix(nc, d, cfg.seed, SPIKE_STREAM + j as u64),
            c: normal_matrix(nf, d, cfg.seed, FIELD_STREAM + j as u64),
            r: DMatrix::from_diagonal(&rdiag),
        })
        .collect();
    let m = cfg.regimes;
    let model = SwitchingModel {
        regimes,
        phi: transition_matrix(m, cfg.init_stay_prob),
        pi0: DVector::from_element(m, 1.0 / m as f64),
        mu0: DVector::zeros(d),
        lambda0: DMatrix::identity(d, d),
        tau: cfg.tau,
        dt_ms: series.dt_ms,
        field_period_steps: series.field_period_steps,
    };
    model.validate()?;
    Ok(model)
}

/// Components of the expected complete-data log-likelihood.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ExpectedLogLik {
    pub regime: f64,
    pub initial: f64,
    pub dynamics: f64,
    pub spikes: f64,
    /// Already multiplied by τ.
    pub fields: f64,
}

impl ExpectedLogLik {
    pub fn total(&self) -> f64 {
        self.regime + self.initial + self.dynamics + self.spikes + self.fields
    }
}

#[derive(Debug, Clone)]
pub struct EStep {
    pub filter: FilterOutput,
    pub stats: SmoothedStats,
    pub expected: ExpectedLogLik,
    pub entropy: f64,
}

impl EStep {
    pub fn expected_log_lik(&self) -> f64 {
        self.expected.total()
    }
    /// Expected log-likelihood plus posterior entropy.
    pub fn elbo(&self) -> f64 {
        self.expected.total() + self.entropy
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Second moment `⟨x xᵀ⟩ = m mᵀ + P`.
fn second_moment(m: &DVector<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = p.clone();
    out.ger(1.0, m, m, 1.0);
    out
}

pub fn e_step(model: &SwitchingModel, series: &MultiscaleSeries) -> Result<EStep> {
    model.validate()?;
    let series = series.conform_to(model)?;
    series.validate()?;
    let ctx = FilterContext::new(model)?;
    e_step_with(model, &series, &ctx)
}

fn e_step_with(model: &SwitchingModel, series: &MultiscaleSeries, ctx: &FilterContext) -> Result<EStep> {
    let filter = smsnf_filter_with(model, series, ctx)?;
    let stats = sms_run(model, &filter)?;
    let expected = expected_log_likelihood(model, series, &stats)?;
    let entropy = posterior_entropy(model, &filter, &stats)?;
    Ok(EStep {
        filter,
        stats,
        expected,
        entropy,
    })
}

/// Expected complete-data log-likelihood of `model` under the posterior
/// summarized by `stats` (which may come from different parameters).
pub fn expected_log_likelihood(
    model: &SwitchingModel,
    series: &MultiscaleSeries,
    stats: &SmoothedStats,
) -> Result<ExpectedLogLik> {
    let m = model.n_regimes();
    let d = model.latent_dim() as f64;
    let t_len = stats.len();
    let mut out = ExpectedLogLik::default();

    for j in 0..m {
        out.regime += xlogy(stats.w[(0, j)], model.pi0[j]);
    }
    for p in &stats.wpair {
        for j in 0..m {
            for i in 0..m {
                out.regime += xlogy(p[(j, i)], model.phi[(j, i)]);
            }
        }
    }

    let l0_inv = spd_inverse(&model.lambda0, "Lambda0")?;
    let dx0 = &stats.mean[0] - &model.mu0;
    let e0 = &stats.cov[0] + &dx0 * dx0.transpose();
    out.initial = -0.5 * (d * LN_2PI + spd_logdet(&model.lambda0, "Lambda0")? + (&l0_inv * e0).trace());

    // Per-regime weighted sufficient statistics make the dynamics and field
    // terms linear traces.
    let suff = sufficient_stats(stats, series);
    for (j, reg) in model.regimes.iter().enumerate() {
        let s = &suff[j];
        if s.weight > 0.0 {
            let q_inv = spd_inverse(&reg.q, "Q")?;
            let resid = dynamics_residual(&reg.a, s);
            out.dynamics -= 0.5 * (s.weight * (d * LN_2PI + spd_logdet(&reg.q, "Q")?) + (&q_inv * resid).trace());
        }
        if reg.n_fields() > 0 && s.field_weight > 0.0 {
            let r_inv = spd_inverse(&reg.r, "R")?;
            let resid = field_residual(&reg.c, s);
            let f = reg.n_fields() as f64;
            out.fields -= 0.5
                * model.tau
                * (s.field_weight * (f * LN_2PI + spd_logdet(&reg.r, "R")?) + (&r_inv * resid).trace());
        }
    }

    if model.n_neurons() > 0 {
        for k in 0..t_len {
            let n = series.spike_row(k);
            let lnf: f64 = n.iter().map(|&v| ln_gamma(v + 1.0)).sum();
            for (j, reg) in model.regimes.iter().enumerate() {
                let w = stats.w[(k, j)];
                if w == 0.0 {
                    continue;
                }
                let x = &stats.regime_mean[k][j];
                let p = &stats.regime_cov[k][j];
                let eta = &reg.alpha + &reg.beta * x;
                let mut acc = -lnf;
                for c in 0..n.len() {
                    let b = reg.beta.row(c).transpose();
                    let half_var = 0.5 * (b.transpose() * p * &b)[(0, 0)];
                    acc += n[c] * eta[c] - (eta[c] + half_var).exp();
                }
                out.spikes += w * acc;
            }
        }
    }
    Ok(out)
}

/// Regime-weighted sums of the smoothed moments.
#[derive(Debug, Clone)]
pub struct RegimeSuffStats {
    /// `Σ_t W_t`
    pub weight: f64,
    /// `Σ W ⟨x_t x_tᵀ⟩`
    pub xx: DMatrix<f64>,
    /// `Σ W ⟨x_{t−1} x_{t−1}ᵀ⟩`
    pub xx_prev: DMatrix<f64>,
    /// `Σ W ⟨x_t x_{t−1}ᵀ⟩`
    pub cross: DMatrix<f64>,
    /// Field sums over available frames only.
    pub field_weight: f64,
    pub f_xx: DMatrix<f64>,
    pub f_yx: DMatrix<f64>,
    pub f_yy: DMatrix<f64>,
}

impl RegimeSuffStats {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            weight: 0.0,
            xx: DMatrix::zeros(d, d),
            xx_prev: DMatrix::zeros(d, d),
            cross: DMatrix::zeros(d, d),
            field_weight: 0.0,
            f_xx: DMatrix::zeros(d, d),
            f_yx: DMatrix::zeros(f, d),
            f_yy: DMatrix::zeros(f, f),
        }
    }

    fn add_fields(&mut self, other: &Self) {
        self.field_weight += other.field_weight;
        self.f_xx += &other.f_xx;
        self.f_yx += &other.f_yx;
        self.f_yy += &other.f_yy;
    }
}

pub fn sufficient_stats(stats: &SmoothedStats, series: &MultiscaleSeries) -> Vec<RegimeSuffStats> {
    let m = stats.n_regimes();
    let d = stats.mean[0].len();
    let nf = series.n_fields();
    let mut out = vec![RegimeSuffStats::zeros(d, nf); m];
    for k in 0..stats.len() {
        let y = series.field_row(k);
        for (j, s) in out.iter_mut().enumerate() {
            let w = stats.w[(k, j)];
            if w == 0.0 {
                continue;
            }
            let x = &stats.regime_mean[k][j];
            let xx = second_moment(x, &stats.cov[k + 1]);
            let xp = second_moment(&stats.prev_mean[k][j], &stats.cov[k]);
            s.weight += w;
            s.xx += &xx * w;
            s.xx_prev += xp * w;
            s.cross += &stats.cross[k][j] * w;
            if let Some(y) = &y {
                s.field_weight += w;
                s.f_xx += xx * w;
                s.f_yx.ger(w, y, x, 1.0);
                s.f_yy.ger(w, y, y, 1.0);
            }
        }
    }
    out
}

fn dynamics_residual(a: &DMatrix<f64>, s: &RegimeSuffStats) -> DMatrix<f64> {
    let a_cross_t = a * s.cross.transpose();
    &s.xx - &a_cross_t - a_cross_t.transpose() + a * &s.xx_prev * a.transpose()
}

fn field_residual(c: &DMatrix<f64>, s: &RegimeSuffStats) -> DMatrix<f64> {
    let c_yx_t = c * s.f_yx.transpose();
    &s.f_yy - &c_yx_t - c_yx_t.transpose() + c * &s.f_xx * c.transpose()
}

fn gauss_entropy(logdet: f64, d: f64) -> f64 {
    0.5 * (d * (LN_2PI + 1.0) + logdet)
}

/// Entropy of the approximate posterior over `(x_{0:T}, s_{1:T})`.
///
/// Exact for single-regime linear-Gaussian models, where the posterior is a
/// Gauss–Markov chain: `H(x_T) + Σ_t H(x_{t−1} | x_t)`. With several regimes
/// the regime chain is treated as Markov with the smoother's pairwise
/// posteriors, and each backward conditional uses the collapsed filter
/// belief of the regime active at `t`.
pub fn posterior_entropy(model: &SwitchingModel, filt: &FilterOutput, stats: &SmoothedStats) -> Result<f64> {
    let m = model.n_regimes();
    let d = model.latent_dim();
    let df = d as f64;
    let t_len = stats.len();
    let mut h = 0.0;

    for j in 0..m {
        h -= xlogy(stats.w[(0, j)], stats.w[(0, j)]);
    }
    for (k, p) in stats.wpair.iter().enumerate() {
        for j in 0..m {
            for i in 0..m {
                let w_prev = stats.w[(k, i)];
                if p[(j, i)] > 0.0 && w_prev > 0.0 {
                    h -= p[(j, i)] * (p[(j, i)] / w_prev).ln();
                }
            }
        }
    }

    let last = &filt.steps[t_len - 1];
    for j in 0..m {
        let wj = stats.w[(t_len - 1, j)];
        if wj > 0.0 {
            h += wj * gauss_entropy(spd_logdet(&last.per_regime[j].cov, "filtered covariance")?, df);
        }
    }

    for k in 0..t_len {
        let cur = &filt.steps[k];
        for j in 0..m {
            let wj = stats.w[(k, j)];
            if wj == 0.0 {
                continue;
            }
            let prior_cov = if k == 0 {
                model.lambda0.clone()
            } else if m == 1 {
                filt.steps[k - 1].per_regime[0].cov.clone()
            } else {
                let prev = &filt.steps[k - 1];
                let (w, _) = collapse_weights(&prev.regime_prob, &model.phi, j)?;
                let means: Vec<_> = prev.per_regime.iter().map(|b| &b.mean).collect();
                let covs: Vec<_> = prev.per_regime.iter().map(|b| &b.cov).collect();
                mix_moments(&w, &means, &covs).1
            };
            let a = &model.regimes[j].a;
            let pred_chol = cholesky_jitter(&cur.per_regime_pred[j].cov, "predicted covariance")?;
            let ap = a * &prior_cov;
            // Λ − Λ Aᵀ P⁻¹ A Λ
            let cond = &prior_cov - ap.transpose() * pred_chol.solve(&ap);
            let cond = repair_covariance(&cond, COV_JITTER)?;
            h += wj * gauss_entropy(spd_logdet(&cond, "backward conditional covariance")?, df);
        }
    }
    Ok(h)
}

/// Posterior moments shared by every neuron's Poisson M-step: weights,
/// means as columns, and covariances laid side by side.
#[derive(Debug, Clone)]
pub struct PoissonDesign {
    pub weights: DVector<f64>,
    /// d × P.
    pub means: DMatrix<f64>,
    /// d × (d·P); `None` means point estimates (zero covariance).
    pub covs: Option<DMatrix<f64>>,
}

impl PoissonDesign {
    pub fn new(weights: &[f64], means: &[&DVector<f64>], covs: Option<&[&DMatrix<f64>]>) -> Self {
        let np = weights.len();
        let d = means.first().map_or(0, |m| m.len());
        let mm = DMatrix::from_fn(d, np, |i, p| means[p][i]);
        let cc = covs.map(|cs| {
            let mut out = DMatrix::zeros(d, d * np);
            for (p, c) in cs.iter().enumerate() {
                out.columns_mut(p * d, d).copy_from(c);
            }
            out
        });
        Self {
            weights: DVector::from_column_slice(weights),
            means: mm,
            covs: cc,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    fn dim(&self) -> usize {
        self.means.nrows()
    }

    /// Per point: `P_p β` as columns (when covariances exist) and the linear
    /// and variance terms of the expected log-rate.
    fn terms(&self, alpha: f64, beta: &DVector<f64>) -> (Option<DMatrix<f64>>, DVector<f64>, DVector<f64>) {
        let np = self.len();
        let d = self.dim();
        let lin = self.means.tr_mul(beta).add_scalar(alpha);
        match &self.covs {
            Some(c) => {
                let flat = c.tr_mul(beta);
                let pb = DMatrix::from_column_slice(d, np, flat.as_slice());
                let hv = DVector::from_fn(np, |p, _| 0.5 * pb.column(p).dot(beta));
                (Some(pb), lin, hv)
            }
            None => (None, lin, DVector::zeros(np)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NewtonReport {
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub objective: f64,
}

/// `Σ w (n(α + βᵀm) − exp(α + βᵀm + ½βᵀPβ))`
pub fn poisson_objective(design: &PoissonDesign, counts: &[f64], alpha: f64, beta: &DVector<f64>) -> f64 {
    let (_, lin, hv) = design.terms(alpha, beta);
    (0..design.len())
        .map(|p| design.weights[p] * (counts[p] * lin[p] - (lin[p] + hv[p]).exp()))
        .sum()
}

fn poisson_grad_hess(
    design: &PoissonDesign,
    counts: &[f64],
    alpha: f64,
    beta: &DVector<f64>,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = beta.len();
    let np = design.len();
    let (pb, lin, hv) = design.terms(alpha, beta);
    let mut f = 0.0;
    let mut wn = DVector::zeros(np);
    let mut wm = DVector::zeros(np);
    for p in 0..np {
        let w = design.weights[p];
        let mu = (lin[p] + hv[p]).exp();
        f += w * (counts[p] * lin[p] - mu);
        wn[p] = w * counts[p];
        wm[p] = w * mu;
    }
    // Gradient of the expected rate moves along m + Pβ.
    let shift = match &pb {
        Some(pb) => &design.means + pb,
        None => design.means.clone(),
    };
    let mut g = DVector::zeros(d + 1);
    g[0] = wn.sum() - wm.sum();
    g.rows_mut(1, d).copy_from(&(&design.means * &wn - &shift * &wm));

    let mut scaled = shift.clone();
    for p in 0..np {
        scaled.column_mut(p).scale_mut(wm[p]);
    }
    let sw = &shift * &wm;
    let mut neg_h = DMatrix::zeros(d + 1, d + 1);
    neg_h[(0, 0)] = wm.sum();
    neg_h.view_mut((1, 0), (d, 1)).copy_from(&sw);
    neg_h.view_mut((0, 1), (1, d)).copy_from(&sw.transpose());
    let mut blk = &scaled * shift.transpose();
    if let Some(c) = &design.covs {
        let acc = blk.as_mut_slice();
        for (p, chunk) in c.as_slice().chunks_exact(d * d).enumerate() {
            for (o, v) in acc.iter_mut().zip(chunk) {
                *o += wm[p] * v;
            }
        }
    }
    neg_h.view_mut((1, 1), (d, d)).copy_from(&blk);
    (f, g, symmetrize(&neg_h))
}

/// Maximizes the Poisson M-step objective for one neuron by damped Newton
/// with Armijo backtracking, warm-started at `(alpha, beta)`.
pub fn fit_poisson_neuron(
    design: &PoissonDesign,
    counts: &[f64],
    alpha: f64,
    beta: &DVector<f64>,
    max_iters: usize,
    tol: f64,
) -> (f64, DVector<f64>, NewtonReport) {
    let d = beta.len();
    let mut a = alpha;
    let mut b = beta.clone();
    let (mut f, mut g, mut nh) = poisson_grad_hess(design, counts, a, &b);
    if !f.is_finite() {
        // Start from the state-independent optimum when the warm start overflows.
        let sw = design.weights.sum();
        let sn = design.weights.dot(&DVector::from_column_slice(counts));
        a = (sn.max(1e-12) / sw.max(1e-300)).ln();
        b = DVector::zeros(d);
        (f, g, nh) = poisson_grad_hess(design, counts, a, &b);
    }
    let mut iters = 0;
    let mut converged = g.norm() < tol;
    while !converged && iters < max_iters {
        iters += 1;
        let (step, _) = crate::linalg::ridge_solve(&nh, &DMatrix::from_column_slice(d + 1, 1, g.as_slice()), 1e-12);
        let step = step.column(0).into_owned();
        let slope = g.dot(&step);
        let mut s = 1.0;
        let mut accepted = false;
        // Roundoff regime: once the Newton decrement is below what the
        // objective can resolve, the full step is taken without the Armijo test.
        let tiny = slope.abs() <= 1e-10 * f.abs().max(1.0);
        for _ in 0..60 {
            let na = a + s * step[0];
            let nb = &b + step.rows(1, d) * s;
            let nf = poisson_objective(design, counts, na, &nb);
            if nf.is_finite() && (nf >= f + 1e-4 * s * slope || tiny) {
                a = na;
                b = nb;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            break;
        }
        (f, g, nh) = poisson_grad_hess(design, counts, a, &b);
        if g.norm() < tol {
            converged = true;
        }
    }
    let gn = g.norm();
    // Gradient sums carry roundoff proportional to their magnitude; treat a
    // stalled search at that level as converged.
    let scale: f64 = (0..design.len())
        .map(|p| design.weights[p] * counts[p].max(1.0))
        .sum::<f64>()
        .max(1.0);
    let converged = converged || gn < 1e-10 * scale;
    (
        a,
        b,
        NewtonReport {
            iterations: iters,
            grad_norm: gn,
            converged,
            objective: f,
        },
    )
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MStepReport {
    /// 1-based regimes that kept their previous parameters.
    pub degenerate_regimes: Vec<usize>,
    /// Normal-equation solves that needed more than the standard ridge.
    pub ridge_escalations: usize,
    /// `(regime, neuron)` pairs (1-based) whose Newton solve did not converge.
    pub newton_unconverged: Vec<(usize, usize)>,
}

/// `X (S + ridge·I)⁻¹` for symmetric PSD `S`.
fn right_solve(x: &DMatrix<f64>, s: &DMatrix<f64>, report: &mut MStepReport) -> DMatrix<f64> {
    let n = s.nrows();
    let loaded = symmetrize(s) + DMatrix::<f64>::identity(n, n) * M_STEP_RIDGE;
    let (sol, escalated) = crate::linalg::ridge_solve(&loaded, &x.transpose(), M_STEP_RIDGE);
    if escalated {
        report.ridge_escalations += 1;
    }
    sol.transpose()
}

/// Poisson parameters per regime (or one shared set copied to every regime).
pub fn m_step_poisson(
    stats: &SmoothedStats,
    series: &MultiscaleSeries,
    prev: &SwitchingModel,
    cfg: &EmConfig,
) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>, Vec<Vec<NewtonReport>>) {
    let m = prev.n_regimes();
    let nc = prev.n_neurons();
    let t_len = stats.len();
    let groups: Vec<Vec<usize>> = if cfg.share_observation_params {
        vec![(0..m).collect()]
    } else {
        (0..m).map(|j| vec![j]).collect()
    };
    let mut alphas: Vec<DVector<f64>> = prev.regimes.iter().map(|r| r.alpha.clone()).collect();
    let mut betas: Vec<DMatrix<f64>> = prev.regimes.iter().map(|r| r.beta.clone()).collect();
    let mut reports = vec![Vec::new(); m];
    for group in &groups {
        let lead = group[0];
        let weight: f64 = group.iter().map(|&j| stats.w.column(j).sum()).sum();
        if weight < DEGENERATE_WEIGHT {
            continue;
        }
        let mut counts = vec![Vec::with_capacity(t_len * group.len()); nc];
        let mut ws = Vec::with_capacity(t_len * group.len());
        let mut means = Vec::with_capacity(t_len * group.len());
        let mut covs = Vec::with_capacity(t_len * group.len());
        for k in 0..t_len {
            for &j in group {
                let w = stats.w[(k, j)];
                if w == 0.0 {
                    continue;
                }
                ws.push(w);
                means.push(&stats.regime_mean[k][j]);
                covs.push(&stats.regime_cov[k][j]);
                for (c, col) in counts.iter_mut().enumerate() {
                    col.push(series.spikes[(k, c)] as f64);
                }
            }
        }
        let design = PoissonDesign::new(&ws, &means, Some(&covs));
        for (c, col) in counts.iter().enumerate() {
            let b0 = prev.regimes[lead].beta.row(c).transpose();
            let (a, b, rep) = fit_poisson_neuron(
                &design,
                col,
                prev.regimes[lead].alpha[c],
                &b0,
                cfg.newton_max_iters,
                cfg.newton_tol,
            );
            for &j in group {
                alphas[j][c] = a;
                betas[j].row_mut(c).copy_from(&b.transpose());
                reports[j].push(rep.clone());
            }
        }
    }
    (alphas, betas, reports)
}

/// Closed-form M-step plus the Poisson solves.
pub fn m_step(
    stats: &SmoothedStats,
    series: &MultiscaleSeries,
    prev: &SwitchingModel,
    cfg: &EmConfig,
) -> Result<(SwitchingModel, MStepReport)> {
    let series = series.conform_to(prev)?;
    let m = prev.n_regimes();
    let d = prev.latent_dim();
    let mut report = MStepReport::default();
    let mut next = prev.clone();

    next.mu0 = stats.mean[0].clone();
    next.lambda0 = repair_covariance(&stats.cov[0], COV_JITTER)?;

    let w1: f64 = stats.w.row(0).sum();
    next.pi0 = stats.w.row(0).transpose() / w1;
    if !stats.wpair.is_empty() {
        let mut counts = DMatrix::zeros(m, m);
        for p in &stats.wpair {
            counts += p;
        }
        for i in 0..m {
            let col = counts.column(i).sum();
            if col > 0.0 {
                let c = counts.column(i) / col;
                next.phi.column_mut(i).copy_from(&c);
            }
        }
    }

    let suff = sufficient_stats(stats, &series);
    let mut shared = suff[0].clone();
    for s in suff.iter().skip(1) {
        shared.add_fields(s);
    }
    for j in 0..m {
        let s = &suff[j];
        if s.weight < DEGENERATE_WEIGHT {
            report.degenerate_regimes.push(j + 1);
            continue;
        }
        let a = right_solve(&s.cross, &s.xx_prev, &mut report);
        let q = repair_covariance(&(dynamics_residual(&a, s) / s.weight), COV_JITTER)?;
        let reg = &mut next.regimes[j];
        reg.a = a;
        reg.q = q;
        let fs = if cfg.share_observation_params { &shared } else { s };
        if reg.n_fields() > 0 && fs.field_weight >= DEGENERATE_WEIGHT {
            let c = right_solve(&fs.f_yx, &fs.f_xx, &mut report);
            let r = repair_covariance(&(field_residual(&c, fs) / fs.field_weight), COV_JITTER)?;
            reg.c = c;
            reg.r = r;
        }
    }
    if d > 0 && prev.n_neurons() > 0 {
        let (alphas, betas, reports) = m_step_poisson(stats, &series, prev, cfg);
        for j in 0..m {
            if report.degenerate_regimes.contains(&(j + 1)) && !cfg.share_observation_params {
                continue;
            }
            next.regimes[j].alpha = alphas[j].clone();
            next.regimes[j].beta = betas[j].clone();
            for (c, r) in reports[j].iter().enumerate() {
                if !r.converged {
                    report.newton_unconverged.push((j + 1, c + 1));
                }
            }
        }
    }
    next.validate()?;
    Ok((next, report))
}

/// Frobenius norm of the change across all estimated parameters.
pub fn parameter_change(a: &SwitchingModel, b: &SwitchingModel) -> f64 {
    let mut s = (&a.phi - &b.phi).norm_squared()
        + (&a.pi0 - &b.pi0).norm_squared()
        + (&a.mu0 - &b.mu0).norm_squared()
        + (&a.lambda0 - &b.lambda0).norm_squared();
    for (x, y) in a.regimes.iter().zip(&b.regimes) {
        s += (&x.a - &y.a).norm_squared()
            + (&x.q - &y.q).norm_squared()
            + (&x.alpha - &y.alpha).norm_squared()
            + (&x.beta - &y.beta).norm_squared()
            + (&x.c - &y.c).norm_squared()
            + (&x.r - &y.r).norm_squared();
    }
    s.sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct EmIteration {
    pub iter: usize,
    /// Expected complete-data log-likelihood at the E-step of this iteration.
    pub expected_log_lik: f64,
    pub elbo: f64,
    pub log_likelihood: f64,
    pub delta_params: f64,
    pub seconds: f64,
    pub m_step: MStepReport,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct EmTrace {
    pub iterations: Vec<EmIteration>,
    pub stopped_early: bool,
}

impl EmTrace {
    pub const LOG_HEADER: &'static str = "iter,expected_log_lik,elbo,log_likelihood,delta_params,seconds";

    /// Fit-log rows matching [`Self::LOG_HEADER`].
    pub fn log_lines(&self) -> Vec<String> {
        self.iterations
            .iter()
            .map(|it| {
                format!(
                    "{},{},{},{},{},{}",
                    it.iter, it.expected_log_lik, it.elbo, it.log_likelihood, it.delta_params, it.seconds
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EmFailure {
    pub error: SmdsError,
    pub trace: EmTrace,
    pub last_model: SwitchingModel,
}

impl std::fmt::Display for EmFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EM aborted after {} iterations: {}", self.trace.iterations.len(), self.error)
    }
}

impl std::error::Error for EmFailure {}

pub type EmResult = std::result::Result<(SwitchingModel, EmTrace), Box<EmFailure>>;

/// Initializes with [`init_params`] and runs EM.
pub fn em_fit(series: &MultiscaleSeries, cfg: &EmConfig) -> EmResult {
    let fail = |error| {
        Box::new(EmFailure {
            error,
            trace: EmTrace::default(),
            last_model: SwitchingModel {
                regimes: Vec::new(),
                phi: DMatrix::zeros(0, 0),
                pi0: DVector::zeros(0),
                mu0: DVector::zeros(0),
                lambda0: DMatrix::zeros(0, 0),
                tau: cfg.tau,
                dt_ms: series.dt_ms,
                field_period_steps: series.field_period_steps,
            },
        })
    };
    let init = init_params(cfg, series).map_err(fail)?;
    em_fit_from(init, series, cfg)
}

/// Runs EM from a given initial model; the series is reduced to the
/// modality in `cfg` and to the streams the model carries.
pub fn em_fit_from(init: SwitchingModel, series: &MultiscaleSeries, cfg: &EmConfig) -> EmResult {
    let fail = |error, trace: &EmTrace, model: &SwitchingModel| {
        Box::new(EmFailure {
            error,
            trace: trace.clone(),
            last_model: model.clone(),
        })
    };
    let mut trace = EmTrace::default();
    let mut model = init;
    if let Err(e) = cfg.validate().and_then(|_| model.validate()) {
        return Err(fail(e, &trace, &model));
    }
    let series = match series.select_modality(cfg.modality).conform_to(&model) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, &trace, &model)),
    };
    if let Err(e) = series.validate() {
        return Err(fail(e, &trace, &model));
    }

    let mut history: Vec<f64> = Vec::new();
    for iter in 1..=cfg.max_iters {
        let t0 = Instant::now();
        let est = match FilterContext::new(&model).and_then(|ctx| e_step_with(&model, &series, &ctx)) {
            Ok(e) => e,
            Err(e) => return Err(fail(e, &trace, &model)),
        };
        let (next, rep) = match m_step(&est.stats, &series, &model, cfg) {
            Ok(r) => r,
            Err(e) => return Err(fail(e, &trace, &model)),
        };
        let q = est.expected_log_lik();
        trace.iterations.push(EmIteration {
            iter,
            expected_log_lik: q,
            elbo: est.elbo(),
            log_likelihood: est.filter.log_likelihood,
            delta_params: parameter_change(&model, &next),
            seconds: t0.elapsed().as_secs_f64(),
            m_step: rep,
        });
        model = next;
        history.push(q);
        if let Some(tol) = cfg.convergence_tol {
            if history.len() > 5 {
                let n = history.len();
                let calm = (n - 5..n).all(|i| {
                    let (a, b) = (history[i - 1], history[i]);
                    (b - a).abs() <= tol * a.abs().max(f64::MIN_POSITIVE)
                });
                if calm {
                    trace.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok((model, trace))
}
