//! Causal inference: Kalman field update, cubature Poisson update, their
//! information-form fusion (MSNF), and the switching recursion (sMSNF).
//!
//! Every measurement update goes through [`fuse`], which adds information
//! terms to the prior precision. Keeping a single code path makes the
//! reductions (no spikes → Kalman, missing field → point-process update)
//! hold to the last bit rather than to a tolerance.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Result, SmdsError};
use crate::linalg::{
    chol_logdet, cholesky_jitter, mix_moments, repair_covariance, symmetrize, COV_JITTER,
};
use crate::model::{GaussianBelief, RegimeParams, SwitchingModel};
use crate::series::MultiscaleSeries;
use crate::simulate::MAX_LOG_RATE;

/// Smallest regime probability kept during the forward pass.
pub const PROB_FLOOR: f64 = 1e-300;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Fifth-degree spherical-radial rule for `N(0, I_d)`.
///
/// Points are laid out as the centre, then `±√(d+2)·e_j` for each `j`, then
/// `√(d+2)·(±e_j ± e_k)/√2` for each `j < k` in sign order `++, +−, −+, −−`.
#[derive(Debug, Clone)]
pub struct CubatureSet {
    points: DMatrix<f64>,
    weights: DVector<f64>,
}

impl CubatureSet {
    /// d × (2d²+1), one point per column.
    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.points.nrows()
    }
    fn radius(&self) -> f64 {
        (self.dim() as f64 + 2.0).sqrt()
    }

    /// `E[g(x)]` for `x ~ N(mean, S Sᵀ)` by the rule.
    pub fn expect(&self, mean: &DVector<f64>, sqrt_cov: &DMatrix<f64>, g: impl Fn(&DVector<f64>) -> f64) -> f64 {
        let pts = sqrt_cov * &self.points;
        (0..self.len())
            .map(|a| self.weights[a] * g(&(mean + pts.column(a))))
            .sum()
    }
}

/// Weights may be negative for `d > 4`; that is part of the rule.
pub fn cubature_points(d: usize) -> Result<CubatureSet> {
    if d == 0 {
        return Err(SmdsError::Config("cubature needs d >= 1".into()));
    }
    let n = 2 * d * d + 1;
    let df = d as f64;
    let s = (df + 2.0).sqrt();
    let mut points = DMatrix::zeros(d, n);
    let mut weights = DVector::zeros(n);
    weights[0] = 2.0 / (df + 2.0);
    let w_axis = (4.0 - df) / (2.0 * (df + 2.0).powi(2));
    let w_diag = 1.0 / (df + 2.0).powi(2);
    let mut a = 1;
    for j in 0..d {
        for sign in [1.0, -1.0] {
            points[(j, a)] = sign * s;
            weights[a] = w_axis;
            a += 1;
        }
    }
    let h = s / 2f64.sqrt();
    for j in 0..d {
        for k in (j + 1)..d {
            for (sj, sk) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                points[(j, a)] = sj * h;
                points[(k, a)] = sk * h;
                weights[a] = w_diag;
                a += 1;
            }
        }
    }
    debug_assert_eq!(a, n);
    Ok(CubatureSet { points, weights })
}

/// Spike-likelihood moments under the prior, and the effective linear
/// observation model they imply.
#[derive(Debug, Clone)]
pub struct PcfStats {
    pub n_hat: DVector<f64>,
    /// d × C
    pub l_xn: DMatrix<f64>,
    /// C × C
    pub l_nn: DMatrix<f64>,
    /// C × d
    pub c_tilde: DMatrix<f64>,
    /// C × C
    pub r_tilde: DMatrix<f64>,
}

/// One additive contribution to the posterior information: `info` adds to the
/// precision, `score` to the precision-weighted mean shift.
struct InfoTerm {
    info: DMatrix<f64>,
    score: DVector<f64>,
}

/// A factored prior: its inverse is needed by every update and by the regime
/// likelihood.
pub(crate) struct PriorFactor {
    pub(crate) precision: DMatrix<f64>,
    pub(crate) logdet: f64,
    /// Lower Cholesky factor (after any jitter), the `√Λ` of the cubature points.
    pub(crate) sqrt: DMatrix<f64>,
}

impl PriorFactor {
    pub(crate) fn new(prior: &GaussianBelief) -> Result<Self> {
        let chol = cholesky_jitter(&prior.cov, "prior covariance")?;
        Ok(Self {
            logdet: chol_logdet(&chol),
            precision: symmetrize(&chol.inverse()),
            sqrt: chol.l(),
        })
    }
}

/// Posterior plus the log-determinant of its covariance.
pub(crate) struct Fused {
    pub(crate) belief: GaussianBelief,
    pub(crate) logdet: f64,
}

fn fuse(prior: &GaussianBelief, factor: &PriorFactor, terms: &[InfoTerm]) -> Result<Fused> {
    if terms.is_empty() {
        return Ok(Fused {
            belief: prior.clone(),
            logdet: factor.logdet,
        });
    }
    let mut info = factor.precision.clone();
    let mut score = DVector::zeros(prior.dim());
    for t in terms {
        info += &t.info;
        score += &t.score;
    }
    let chol = cholesky_jitter(&info, "posterior information")?;
    let cov = repair_covariance(&chol.inverse(), COV_JITTER)?;
    let mean = &prior.mean + &cov * score;
    Ok(Fused {
        belief: GaussianBelief { mean, cov },
        logdet: -chol_logdet(&chol),
    })
}

/// Per-regime quantities of the Gaussian field model that do not change over
/// time.
#[derive(Debug, Clone)]
pub struct FieldCache {
    /// F × d, `R⁻¹C`
    pub rinv_c: DMatrix<f64>,
    /// d × d, `CᵀR⁻¹C`
    pub ct_rinv_c: DMatrix<f64>,
    pub r_logdet: f64,
    r_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl FieldCache {
    pub fn new(c: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Self> {
        let r_chol = cholesky_jitter(r, "field noise covariance R")?;
        let rinv_c = r_chol.solve(c);
        let ct_rinv_c = symmetrize(&(c.transpose() * &rinv_c));
        Ok(Self {
            rinv_c,
            ct_rinv_c,
            r_logdet: chol_logdet(&r_chol),
            r_chol,
        })
    }

    /// `log N(y; C x, R)`.
    pub fn log_density(&self, y: &DVector<f64>, c: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
        let resid = y - c * x;
        let white = self.r_chol.l().solve_lower_triangular(&resid).unwrap_or(resid);
        -0.5 * (y.len() as f64 * LN_2PI + self.r_logdet + white.norm_squared())
    }
}

fn field_term(cache: &FieldCache, c: &DMatrix<f64>, prior_mean: &DVector<f64>, y: &DVector<f64>, tau: f64) -> InfoTerm {
    let innov = y - c * prior_mean;
    InfoTerm {
        info: &cache.ct_rinv_c * tau,
        score: cache.rinv_c.tr_mul(&innov) * tau,
    }
}

fn spike_term(stats: &PcfStats, n: &DVector<f64>) -> Result<InfoTerm> {
    let r_chol = cholesky_jitter(&stats.r_tilde, "effective spike noise")?;
    let rinv_c = r_chol.solve(&stats.c_tilde);
    let innov = n - &stats.n_hat;
    Ok(InfoTerm {
        info: symmetrize(&stats.c_tilde.tr_mul(&rinv_c)),
        score: rinv_c.tr_mul(&innov),
    })
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(SmdsError::dim(what, expected, got));
    }
    Ok(())
}

/// Information-form Kalman update with the field log-likelihood scaled by `tau`.
pub fn kf_update(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    cmat: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tau: f64,
) -> Result<GaussianBelief> {
    check_len("kf_update C columns", prior.dim(), cmat.ncols())?;
    check_len("kf_update y", cmat.nrows(), y.len())?;
    let cache = FieldCache::new(cmat, r)?;
    let factor = PriorFactor::new(prior)?;
    let term = field_term(&cache, cmat, &prior.mean, y, tau);
    Ok(fuse(prior, &factor, &[term])?.belief)
}

/// Moments of the spike counts under the prior, by cubature.
pub fn pcf_moments(
    prior: &GaussianBelief,
    alpha: &DVector<f64>,
    beta: &DMatrix<f64>,
    cub: &CubatureSet,
) -> Result<PcfStats> {
    let factor = PriorFactor::new(prior)?;
    pcf_moments_with(prior, &factor, alpha, beta, cub)
}

/// Per-bin rates `exp(base_c + u_cᵀ ξ_a)` at every cubature point, points × neurons.
///
/// The rule's point layout means each rate is a product of at most three
/// exponentials from a table of `1 + 4d` per neuron, instead of one
/// exponential per point.
fn cubature_rates(base: &DVector<f64>, u: &DMatrix<f64>, cub: &CubatureSet) -> Result<DMatrix<f64>> {
    let (nc, d) = u.shape();
    let s = cub.radius();
    let h = s / 2f64.sqrt();
    let mut rates = DMatrix::zeros(cub.len(), nc);
    let mut hp = vec![0.0; d];
    let mut hm = vec![0.0; d];
    for c in 0..nc {
        let (mut top1, mut top2) = (0.0f64, 0.0f64);
        for j in 0..d {
            let v = u[(c, j)].abs();
            if v > top1 {
                top2 = top1;
                top1 = v;
            } else if v > top2 {
                top2 = v;
            }
        }
        let peak = base[c] + (s * top1).max(h * (top1 + top2));
        if !(peak <= MAX_LOG_RATE) {
            return Err(SmdsError::RateOverflow {
                neuron: c + 1,
                step: 0,
                log_rate: peak,
                limit: MAX_LOG_RATE,
            });
        }
        let len = cub.len();
        let out = &mut rates.as_mut_slice()[c * len..(c + 1) * len];
        let e0 = base[c].exp();
        out[0] = e0;
        let mut a = 1;
        for j in 0..d {
            let uj = u[(c, j)];
            out[a] = (base[c] + s * uj).exp();
            out[a + 1] = (base[c] - s * uj).exp();
            a += 2;
            hp[j] = (h * uj).exp();
            hm[j] = (-h * uj).exp();
        }
        for j in 0..d {
            let (pj, mj) = (e0 * hp[j], e0 * hm[j]);
            for k in (j + 1)..d {
                out[a] = pj * hp[k];
                out[a + 1] = pj * hm[k];
                out[a + 2] = mj * hp[k];
                out[a + 3] = mj * hm[k];
                a += 4;
            }
        }
    }
    Ok(rates)
}

fn pcf_moments_with(
    prior: &GaussianBelief,
    factor: &PriorFactor,
    alpha: &DVector<f64>,
    beta: &DMatrix<f64>,
    cub: &CubatureSet,
) -> Result<PcfStats> {
    let d = prior.dim();
    check_len("cubature dimension", d, cub.dim())?;
    check_len("beta columns", d, beta.ncols())?;
    check_len("alpha length", beta.nrows(), alpha.len())?;
    let nc = alpha.len();
    let k = cub.len();

    // Points are x̂ + L ξ_a, so the log-rate at point a is base + (βL) ξ_a.
    // Rates are laid out point × neuron.
    let base = beta * &prior.mean + alpha;
    let u = beta * &factor.sqrt;
    let mut centered = cubature_rates(&base, &u, cub)?;
    let n_hat = centered.tr_mul(&cub.weights);

    let mut weighted = DMatrix::zeros(k, nc);
    for c in 0..nc {
        let nh = n_hat[c];
        let cen = &mut centered.as_mut_slice()[c * k..(c + 1) * k];
        let wt = &mut weighted.as_mut_slice()[c * k..(c + 1) * k];
        for a in 0..k {
            cen[a] -= nh;
            wt[a] = cen[a] * cub.weights[a];
        }
    }
    let l_xn = &factor.sqrt * (&cub.points * &weighted);
    let mut l_nn = weighted.transpose() * &centered;
    for c in 0..nc {
        l_nn[(c, c)] += n_hat[c];
    }
    let l_nn = symmetrize(&l_nn);
    let c_tilde = (&factor.precision * &l_xn).transpose();
    let r_tilde = repair_covariance(&(&l_nn - &c_tilde * &prior.cov * c_tilde.transpose()), COV_JITTER)?;
    Ok(PcfStats {
        n_hat,
        l_xn,
        l_nn,
        c_tilde,
        r_tilde,
    })
}

/// Point-process update with the effective linear model of `stats`.
pub fn pcf_update(prior: &GaussianBelief, n: &DVector<f64>, stats: &PcfStats) -> Result<GaussianBelief> {
    check_len("spike counts", stats.n_hat.len(), n.len())?;
    let factor = PriorFactor::new(prior)?;
    let term = spike_term(stats, n)?;
    Ok(fuse(prior, &factor, &[term])?.belief)
}

pub fn msnf_predict(post_prev: &GaussianBelief, a: &DMatrix<f64>, q: &DMatrix<f64>) -> GaussianBelief {
    GaussianBelief {
        mean: a * &post_prev.mean,
        cov: symmetrize(&(a * &post_prev.cov * a.transpose() + q)),
    }
}

/// Fused spike + field update; `y = None` marks a missing field frame.
pub fn msnf_update(
    prior: &GaussianBelief,
    n: &DVector<f64>,
    y: Option<&DVector<f64>>,
    params: &RegimeParams,
    tau: f64,
    cub: &CubatureSet,
) -> Result<GaussianBelief> {
    let cache = FieldCache::new(&params.c, &params.r)?;
    Ok(msnf_update_detail(prior, n, y, params, &cache, tau, cub)?.0.belief)
}

pub(crate) fn msnf_update_detail(
    prior: &GaussianBelief,
    n: &DVector<f64>,
    y: Option<&DVector<f64>>,
    params: &RegimeParams,
    cache: &FieldCache,
    tau: f64,
    cub: &CubatureSet,
) -> Result<(Fused, PriorFactor)> {
    let factor = PriorFactor::new(prior)?;
    let mut terms = Vec::with_capacity(2);
    if params.n_neurons() > 0 {
        check_len("spike counts", params.n_neurons(), n.len())?;
        let stats = pcf_moments_with(prior, &factor, &params.alpha, &params.beta, cub)?;
        terms.push(spike_term(&stats, n)?);
    }
    if let Some(y) = y {
        if params.n_fields() > 0 {
            check_len("field frame", params.n_fields(), y.len())?;
            terms.push(field_term(cache, &params.c, &prior.mean, y, tau));
        }
    }
    let fused = fuse(prior, &factor, &terms)?;
    Ok((fused, factor))
}

/// Transition-conditioned weights `P(s_{t−1}=i | s_t=j, h_{1:t−1})` for one
/// `j`, and the predicted probability `P(s_t=j | h_{1:t−1})` they normalize by.
pub fn collapse_weights(probs: &DVector<f64>, phi: &DMatrix<f64>, j: usize) -> Result<(Vec<f64>, f64)> {
    let raw: Vec<f64> = (0..probs.len()).map(|i| phi[(j, i)] * probs[i]).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(SmdsError::Numeric {
            step: 0,
            what: format!("regime {} cannot be reached from any regime", j + 1),
        });
    }
    Ok((raw.iter().map(|w| w / total).collect(), total))
}

/// Moment-matched mixture of the previous per-regime posteriors as seen from
/// regime `j` at the next step.
pub fn smsnf_collapse(
    prev: &[GaussianBelief],
    probs: &DVector<f64>,
    phi: &DMatrix<f64>,
    j: usize,
) -> Result<GaussianBelief> {
    let (w, _) = collapse_weights(probs, phi, j)?;
    Ok(collapse_with(prev, &w))
}

fn collapse_with(prev: &[GaussianBelief], w: &[f64]) -> GaussianBelief {
    if prev.len() == 1 {
        return prev[0].clone();
    }
    let means: Vec<&DVector<f64>> = prev.iter().map(|b| &b.mean).collect();
    let covs: Vec<&DMatrix<f64>> = prev.iter().map(|b| &b.cov).collect();
    let (mean, cov) = mix_moments(w, &means, &covs);
    GaussianBelief {
        mean,
        cov: symmetrize(&cov),
    }
}

/// `log f(h_t | h_{1:t−1}, s_t=j)` evaluated from the regime's prediction and
/// update: observation log-likelihood at the posterior mean, field part scaled
/// by `tau`, plus the Gaussian prediction/posterior ratio at that mean.
#[allow(clippy::too_many_arguments)]
pub(crate) fn regime_log_likelihood(
    params: &RegimeParams,
    cache: &FieldCache,
    pred: &GaussianBelief,
    pred_factor: &PriorFactor,
    post: &GaussianBelief,
    post_logdet: f64,
    n: &DVector<f64>,
    log_n_fact: &[f64],
    y: Option<&DVector<f64>>,
    tau: f64,
) -> f64 {
    let x = &post.mean;
    let mut ll = 0.0;
    if params.n_neurons() > 0 {
        let eta = &params.alpha + &params.beta * x;
        for c in 0..eta.len() {
            ll += n[c] * eta[c] - eta[c].exp() - log_n_fact[c];
        }
    }
    if let (Some(y), true) = (y, params.n_fields() > 0) {
        ll += tau * cache.log_density(y, &params.c, x);
    }
    let delta = x - &pred.mean;
    let quad = (delta.transpose() * &pred_factor.precision * &delta)[(0, 0)];
    ll + 0.5 * (post_logdet - pred_factor.logdet) - 0.5 * quad
}

/// Posterior regime probabilities from predicted ones and per-regime
/// log-likelihoods, normalized in log space. Returns the probabilities and
/// the log of the normalizer.
pub fn regime_posterior(pred_probs: &DVector<f64>, log_lik: &[f64]) -> Result<(DVector<f64>, f64)> {
    let logs: Vec<f64> = pred_probs
        .iter()
        .zip(log_lik)
        .map(|(p, l)| p.max(PROB_FLOOR).ln() + l)
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(SmdsError::Numeric {
            step: 0,
            what: "all regime log-likelihoods are -inf or NaN".into(),
        });
    }
    let sum: f64 = logs.iter().map(|l| (l - top).exp()).sum();
    let lognorm = top + sum.ln();
    let mut probs = DVector::from_iterator(logs.len(), logs.iter().map(|l| (l - lognorm).exp().max(PROB_FLOOR)));
    let s = probs.sum();
    probs /= s;
    Ok((probs, lognorm))
}

/// Forward-pass state at one time step.
#[derive(Debug, Clone)]
pub struct SwitchPosterior {
    pub per_regime: Vec<GaussianBelief>,
    pub per_regime_pred: Vec<GaussianBelief>,
    pub regime_prob: DVector<f64>,
    pub regime_pred_prob: DVector<f64>,
    pub merged: GaussianBelief,
    /// M × M, entry `(j, i)` = `P(s_{t−1}=i | s_t=j, h_{1:t−1})`. At the
    /// first step every row is `π`.
    pub mix_weights: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub steps: Vec<SwitchPosterior>,
    /// `log f(h_t | h_{1:t−1})` per step.
    pub step_log_lik: Vec<f64>,
    pub log_likelihood: f64,
}

impl FilterOutput {
    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
    pub fn n_regimes(&self) -> usize {
        self.steps.first().map_or(0, |s| s.regime_prob.len())
    }
    /// T × d merged filtered means.
    pub fn merged_means(&self) -> DMatrix<f64> {
        let d = self.steps.first().map_or(0, |s| s.merged.dim());
        DMatrix::from_fn(self.len(), d, |t, k| self.steps[t].merged.mean[k])
    }
    /// T × M filtered regime probabilities.
    pub fn regime_probs(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.n_regimes(), |t, j| self.steps[t].regime_prob[j])
    }
    /// Most probable regime per step, 1-based.
    pub fn map_regimes(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.regime_prob.imax() + 1).collect()
    }
}

/// Cubature rule and field caches for a model, reusable across runs.
pub struct FilterContext {
    pub cub: CubatureSet,
    pub fields: Vec<FieldCache>,
}

impl FilterContext {
    pub fn new(model: &SwitchingModel) -> Result<Self> {
        Ok(Self {
            cub: cubature_points(model.latent_dim())?,
            fields: model
                .regimes
                .iter()
                .map(|r| FieldCache::new(&r.c, &r.r))
                .collect::<Result<_>>()?,
        })
    }
}

pub fn log_factorials(n: &DVector<f64>) -> Vec<f64> {
    n.iter().map(|&v| ln_gamma(v + 1.0)).collect()
}

/// Switching multiscale filter over a whole series.
pub fn smsnf_filter(model: &SwitchingModel, series: &MultiscaleSeries) -> Result<FilterOutput> {
    model.validate()?;
    let series = series.conform_to(model)?;
    series.validate()?;
    let ctx = FilterContext::new(model)?;
    smsnf_filter_with(model, &series, &ctx)
}

pub(crate) fn smsnf_filter_with(
    model: &SwitchingModel,
    series: &MultiscaleSeries,
    ctx: &FilterContext,
) -> Result<FilterOutput> {
    let m = model.n_regimes();
    let t_len = series.len();
    let init = GaussianBelief::new(model.mu0.clone(), model.lambda0.clone());
    let mut steps: Vec<SwitchPosterior> = Vec::with_capacity(t_len);
    let mut step_log_lik = Vec::with_capacity(t_len);
    let mut total = 0.0;

    for k in 0..t_len {
        let step = k + 1;
        let n = series.spike_row(k);
        let log_n_fact = log_factorials(&n);
        let y = series.field_row(k);

        let (collapsed, pred_prob, mix_weights) = if k == 0 {
            let mix = DMatrix::from_fn(m, m, |_, i| model.pi0[i]);
            (vec![init.clone(); m], model.pi0.clone(), mix)
        } else {
            let prev = &steps[k - 1];
            let mut collapsed = Vec::with_capacity(m);
            let mut pred = DVector::zeros(m);
            let mut mix = DMatrix::zeros(m, m);
            for j in 0..m {
                let (w, p) =
                    collapse_weights(&prev.regime_prob, &model.phi, j).map_err(|e| with_step(e, step))?;
                collapsed.push(collapse_with(&prev.per_regime, &w));
                pred[j] = p;
                for (i, wi) in w.iter().enumerate() {
                    mix[(j, i)] = *wi;
                }
            }
            (collapsed, pred, mix)
        };

        let mut per_regime = Vec::with_capacity(m);
        let mut per_regime_pred = Vec::with_capacity(m);
        let mut lls = Vec::with_capacity(m);
        for j in 0..m {
            let params = &model.regimes[j];
            let pred = msnf_predict(&collapsed[j], &params.a, &params.q);
            let (fused, factor) =
                msnf_update_detail(&pred, &n, y.as_ref(), params, &ctx.fields[j], model.tau, &ctx.cub)
                    .map_err(|e| with_step(e, step))?;
            let ll = regime_log_likelihood(
                params,
                &ctx.fields[j],
                &pred,
                &factor,
                &fused.belief,
                fused.logdet,
                &n,
                &log_n_fact,
                y.as_ref(),
                model.tau,
            );
            lls.push(ll);
            per_regime.push(fused.belief);
            per_regime_pred.push(pred);
        }

        let (regime_prob, lognorm) = if m == 1 {
            (DVector::from_element(1, 1.0), lls[0])
        } else {
            regime_posterior(&pred_prob, &lls).map_err(|e| with_step(e, step))?
        };
        if !lognorm.is_finite() {
            return Err(SmdsError::Numeric {
                step,
                what: "non-finite step log-likelihood".into(),
            });
        }
        total += lognorm;
        step_log_lik.push(lognorm);

        let merged = if m == 1 {
            per_regime[0].clone()
        } else {
            let w: Vec<f64> = regime_prob.iter().cloned().collect();
            collapse_with(&per_regime, &w)
        };
        steps.push(SwitchPosterior {
            per_regime,
            per_regime_pred,
            regime_prob,
            regime_pred_prob: pred_prob,
            merged,
            mix_weights,
        });
    }
    Ok(FilterOutput {
        steps,
        step_log_lik,
        log_likelihood: total,
    })
}

pub(crate) fn with_step(e: SmdsError, step: usize) -> SmdsError {
    match e {
        SmdsError::Numeric { what, .. } => SmdsError::Numeric { step, what },
        other => other.at_step(step),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn belief(mean: &[f64], cov: &[f64]) -> GaussianBelief {
        let d = mean.len();
        GaussianBelief::new(DVector::from_row_slice(mean), DMatrix::from_row_slice(d, d, cov))
    }

    #[test]
    fn cubature_d1_matches_closed_form() {
        let cub = cubature_points(1).unwrap();
        let s3 = 3f64.sqrt();
        assert_eq!(cub.len(), 3);
        assert_abs_diff_eq!(cub.points[(0, 0)], 0.0);
        assert_abs_diff_eq!(cub.points[(0, 1)], s3, epsilon = 1e-15);
        assert_abs_diff_eq!(cub.points[(0, 2)], -s3, epsilon = 1e-15);
        assert_abs_diff_eq!(cub.weights[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cub.weights[1], 1.0 / 6.0, epsilon = 1e-15);
        let m4: f64 = (0..3).map(|a| cub.weights[a] * cub.points[(0, a)].powi(4)).sum();
        assert_abs_diff_eq!(m4, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn cubature_counts_and_weights() {
        for d in 1..=8 {
            let cub = cubature_points(d).unwrap();
            assert_eq!(cub.len(), 2 * d * d + 1);
            assert_abs_diff_eq!(cub.weights.sum(), 1.0, epsilon = 1e-12);
        }
        assert!(cubature_points(0).is_err());
    }

    #[test]
    fn factored_rates_match_direct_exponentials() {
        let cub = cubature_points(4).unwrap();
        let base = DVector::from_vec(vec![-2.0, 0.3]);
        let u = DMatrix::from_row_slice(2, 4, &[0.2, -0.5, 0.1, 0.7, -1.1, 0.0, 0.4, 0.3]);
        let got = cubature_rates(&base, &u, &cub).unwrap();
        let eta = &u * cub.points();
        for c in 0..2 {
            for a in 0..cub.len() {
                let want = (base[c] + eta[(c, a)]).exp();
                assert!((got[(a, c)] - want).abs() <= 1e-14 * want, "{c} {a}");
            }
        }
    }

    #[test]
    fn kf_scalar_bayes() {
        let prior = belief(&[0.0], &[1.0]);
        let one = DMatrix::from_element(1, 1, 1.0);
        let y = DVector::from_element(1, 2.0);
        let post = kf_update(&prior, &y, &one, &one, 1.0).unwrap();
        assert_abs_diff_eq!(post.mean[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(post.cov[(0, 0)], 0.5, epsilon = 1e-14);
        let post = kf_update(&prior, &y, &one, &one, 2.0).unwrap();
        assert_abs_diff_eq!(post.mean[0], 4.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(post.cov[(0, 0)], 1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn kf_zero_observation_matrix_keeps_prior() {
        let prior = belief(&[0.3, -1.0], &[2.0, 0.1, 0.1, 1.0]);
        let c = DMatrix::zeros(1, 2);
        let r = DMatrix::from_element(1, 1, 1.0);
        let post = kf_update(&prior, &DVector::from_element(1, 5.0), &c, &r, 1.0).unwrap();
        assert_abs_diff_eq!(post.mean, prior.mean, epsilon = 1e-14);
        assert_abs_diff_eq!(post.cov, prior.cov, epsilon = 1e-14);
    }

    #[test]
    fn pcf_constant_rate() {
        let prior = belief(&[0.5, -0.2], &[1.0, 0.2, 0.2, 0.5]);
        let alpha = DVector::from_vec(vec![-2.0, 0.5]);
        let beta = DMatrix::zeros(2, 2);
        let cub = cubature_points(2).unwrap();
        let st = pcf_moments(&prior, &alpha, &beta, &cub).unwrap();
        assert_abs_diff_eq!(st.n_hat[0], (-2f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(st.n_hat[1], 0.5f64.exp(), epsilon = 1e-14);
        assert!(st.l_xn.iter().all(|v| v.abs() < 1e-14));
        assert!(st.c_tilde.iter().all(|v| v.abs() < 1e-12));
        let post = pcf_update(&prior, &DVector::from_vec(vec![3.0, 0.0]), &st).unwrap();
        assert_abs_diff_eq!(post.mean, prior.mean, epsilon = 1e-10);
        assert_abs_diff_eq!(post.cov, prior.cov, epsilon = 1e-10);
    }

    #[test]
    fn pcf_tiny_prior_rate_is_point_rate() {
        let prior = belief(&[0.4], &[1e-12]);
        let alpha = DVector::from_element(1, 0.06f64.ln());
        let beta = DMatrix::from_element(1, 1, 1.0);
        let st = pcf_moments(&prior, &alpha, &beta, &cubature_points(1).unwrap()).unwrap();
        assert_abs_diff_eq!(st.n_hat[0], 0.06 * 0.4f64.exp(), epsilon = 1e-12);
    }

    #[test]
    fn pcf_zero_innovation_keeps_mean_and_shrinks() {
        let prior = belief(&[0.1], &[0.3]);
        let alpha = DVector::from_element(1, 0.2);
        let beta = DMatrix::from_element(1, 1, 0.8);
        let st = pcf_moments(&prior, &alpha, &beta, &cubature_points(1).unwrap()).unwrap();
        let post = pcf_update(&prior, &st.n_hat.clone(), &st).unwrap();
        assert_abs_diff_eq!(post.mean[0], 0.1, epsilon = 1e-14);
        assert!(post.cov[(0, 0)] < 0.3);
    }

    #[test]
    fn pcf_rate_guard() {
        let prior = belief(&[0.0], &[1.0]);
        let alpha = DVector::from_element(1, 29.0);
        let beta = DMatrix::from_element(1, 1, 1.0);
        let err = pcf_moments(&prior, &alpha, &beta, &cubature_points(1).unwrap()).unwrap_err();
        assert!(matches!(err, SmdsError::RateOverflow { neuron: 1, .. }));
    }

    #[test]
    fn predict_special_cases() {
        let b = belief(&[1.0, 2.0], &[1.0, 0.3, 0.3, 2.0]);
        let i = DMatrix::identity(2, 2);
        let z = DMatrix::zeros(2, 2);
        let p = msnf_predict(&b, &i, &z);
        assert_eq!(p, b);
        let q = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
        let p = msnf_predict(&b, &z, &q);
        assert_eq!(p.mean, DVector::zeros(2));
        assert_eq!(p.cov, q);
    }

    #[test]
    fn predict_matches_direct_arithmetic() {
        let b = belief(&[0.2, -0.4, 1.1], &[1.0, 0.2, 0.0, 0.2, 0.8, 0.1, 0.0, 0.1, 0.6]);
        let a = DMatrix::from_row_slice(3, 3, &[0.9, 0.1, 0.0, -0.1, 0.8, 0.05, 0.0, 0.2, 0.7]);
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.02, 0.03]));
        let p = msnf_predict(&b, &a, &q);
        // Hand-expanded: mean_0 = 0.9·0.2 + 0.1·(−0.4) = 0.14
        assert_abs_diff_eq!(p.mean[0], 0.14, epsilon = 1e-12);
        let want = &a * &b.cov * a.transpose() + &q;
        assert_abs_diff_eq!(p.cov, want, epsilon = 1e-12);
    }

    #[test]
    fn msnf_reductions_are_exact() {
        let model = crate::model::tests::toy_model(1);
        let p = &model.regimes[0];
        let prior = belief(&[0.3, -0.2], &[0.8, 0.1, 0.1, 0.5]);
        let cub = cubature_points(2).unwrap();
        let n = DVector::from_vec(vec![1.0, 0.0, 2.0]);
        let y = DVector::from_vec(vec![0.4, -0.3]);

        let no_spikes = model.without_spikes();
        let got = msnf_update(&prior, &DVector::zeros(0), Some(&y), &no_spikes.regimes[0], 1.0, &cub).unwrap();
        let want = kf_update(&prior, &y, &p.c, &p.r, 1.0).unwrap();
        assert_eq!(got, want);

        let got = msnf_update(&prior, &n, None, p, 0.7, &cub).unwrap();
        let st = pcf_moments(&prior, &p.alpha, &p.beta, &cub).unwrap();
        let want = pcf_update(&prior, &n, &st).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn collapse_mixture_arithmetic() {
        let a = belief(&[0.0], &[1.0]);
        let b = belief(&[2.0], &[1.0]);
        let probs = DVector::from_vec(vec![0.5, 0.5]);
        let phi = DMatrix::from_element(2, 2, 0.5);
        let c = smsnf_collapse(&[a.clone(), b], &probs, &phi, 0).unwrap();
        assert_abs_diff_eq!(c.mean[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.cov[(0, 0)], 2.0, epsilon = 1e-15);

        let same = smsnf_collapse(&[a.clone(), a.clone()], &DVector::from_vec(vec![0.9, 0.1]), &phi, 1).unwrap();
        assert_abs_diff_eq!(same.mean, a.mean, epsilon = 1e-15);
        assert_abs_diff_eq!(same.cov, a.cov, epsilon = 1e-15);

        let one = smsnf_collapse(std::slice::from_ref(&a), &DVector::from_element(1, 1.0), &DMatrix::from_element(1, 1, 1.0), 0).unwrap();
        assert_eq!(one, a);
    }

    #[test]
    fn unreachable_regime_is_an_error() {
        let a = belief(&[0.0], &[1.0]);
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let probs = DVector::from_vec(vec![0.5, 0.5]);
        assert!(smsnf_collapse(&[a.clone(), a], &probs, &phi, 1).is_err());
    }

    #[test]
    fn softmax_gap_of_twenty_nats() {
        let pred = DVector::from_vec(vec![0.5, 0.5]);
        let (p, _) = regime_posterior(&pred, &[0.0, -20.0]).unwrap();
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(p[1], 2.061_153_6e-9, epsilon = 1e-15);
        assert!(regime_posterior(&pred, &[f64::NEG_INFINITY, f64::NAN]).is_err());
    }

    #[test]
    fn identical_regimes_keep_predicted_probs() {
        let mut model = crate::model::tests::toy_model(2);
        let r0 = model.regimes[0].clone();
        model.regimes[1] = r0;
        let sim = crate::simulate::simulate_series(&model, 30, &mut crate::simulate::rng_for(3, 1)).unwrap();
        let out = smsnf_filter(&model, &sim).unwrap();
        for s in &out.steps {
            assert_abs_diff_eq!(s.regime_prob, s.regime_pred_prob, epsilon = 1e-12);
        }
    }

    #[test]
    fn tau_zero_ignores_fields_in_regime_probs() {
        // The model contract requires τ > 0, so exercise the step-level
        // pieces directly.
        let model = crate::model::tests::toy_model(2);
        let ctx = FilterContext::new(&model).unwrap();
        let prior = belief(&[0.2, -0.1], &[0.7, 0.1, 0.1, 0.9]);
        let n = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let lnf = log_factorials(&n);
        let probs_for = |y: &DVector<f64>| {
            let lls: Vec<f64> = (0..2)
                .map(|j| {
                    let p = &model.regimes[j];
                    let (fused, factor) =
                        msnf_update_detail(&prior, &n, Some(y), p, &ctx.fields[j], 0.0, &ctx.cub).unwrap();
                    regime_log_likelihood(p, &ctx.fields[j], &prior, &factor, &fused.belief, fused.logdet, &n, &lnf, Some(y), 0.0)
                })
                .collect();
            regime_posterior(&DVector::from_vec(vec![0.3, 0.7]), &lls).unwrap().0
        };
        let a = probs_for(&DVector::from_vec(vec![0.1, 0.2]));
        let b = probs_for(&DVector::from_vec(vec![-40.0, 15.0]));
        assert_eq!(a, b);
    }
}
