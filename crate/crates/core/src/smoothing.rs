//! Switching multiscale smoother (SMS): a backward pass over the filter output
//! producing per-regime and merged smoothed moments, regime posteriors, and
//! the lag-one second moments the M-step consumes.
//!
//! Pairwise regime posteriors use the usual approximation
//! `P(s_{t−1}=i | s_t=j, h_{1:T}) ≈ P(s_{t−1}=i | s_t=j, h_{1:t−1})`, which is
//! exactly the collapse weight the filter already stored.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmdsError};
use crate::filtering::{with_step, FilterOutput};
use crate::linalg::{cholesky_jitter, mix_moments, repair_covariance, symmetrize, COV_JITTER};
use crate::model::SwitchingModel;

#[derive(Debug, Clone)]
pub struct SmoothedStats {
    /// Merged `x̂_{t|T}` for `t = 0..T`.
    pub mean: Vec<DVector<f64>>,
    /// Merged `Λ̂_{t|T}` for `t = 0..T`.
    pub cov: Vec<DMatrix<f64>>,
    /// `[k][j]`: `x̂^{(j)}_{t|T}` at `t = k + 1`.
    pub regime_mean: Vec<Vec<DVector<f64>>>,
    pub regime_cov: Vec<Vec<DMatrix<f64>>>,
    /// T × M, `W_t^{(j)} = P(s_t=j | h_{1:T})`.
    pub w: DMatrix<f64>,
    /// `[k]` for `t = k + 2`: M × M with entry `(j, i)` = `P(s_t=j, s_{t−1}=i | h_{1:T})`.
    pub wpair: Vec<DMatrix<f64>>,
    /// `[k][j]`: `E[x_{t−1} | s_t=j, h_{1:T}]` at `t = k + 1`.
    pub prev_mean: Vec<Vec<DVector<f64>>>,
    /// `[k][j]`: regime-marginalized smoother gain into `x_{t−1}`.
    pub gain: Vec<Vec<DMatrix<f64>>>,
    /// `[k][j]`: `⟨x_t x_{t−1}ᵀ⟩^{(j)}` at `t = k + 1`.
    pub cross: Vec<Vec<DMatrix<f64>>>,
}

impl SmoothedStats {
    pub fn len(&self) -> usize {
        self.regime_mean.len()
    }
    pub fn is_empty(&self) -> bool {
        self.regime_mean.is_empty()
    }
    pub fn n_regimes(&self) -> usize {
        self.w.ncols()
    }
    /// T × d merged smoothed means for `t = 1..T`.
    pub fn means(&self) -> DMatrix<f64> {
        let d = self.mean[0].len();
        DMatrix::from_fn(self.len(), d, |k, i| self.mean[k + 1][i])
    }
}

/// `P⁻¹ A Λ` transposed, i.e. `Λ Aᵀ P⁻¹` for symmetric `Λ` and `P`.
fn gain(prev_cov: &DMatrix<f64>, a: &DMatrix<f64>, pred_chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    pred_chol.solve(&(a * prev_cov)).transpose()
}

fn mixture(w: &[f64], means: &[DVector<f64>], covs: &[DMatrix<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if means.len() == 1 {
        return Ok((means[0].clone(), covs[0].clone()));
    }
    let mr: Vec<&DVector<f64>> = means.iter().collect();
    let cr: Vec<&DMatrix<f64>> = covs.iter().collect();
    let (m, c) = mix_moments(w, &mr, &cr);
    Ok((m, repair_covariance(&c, COV_JITTER)?))
}

pub fn sms_run(model: &SwitchingModel, filt: &FilterOutput) -> Result<SmoothedStats> {
    let t_len = filt.len();
    if t_len == 0 {
        return Err(SmdsError::EmptySeries);
    }
    let m = model.n_regimes();
    if filt.n_regimes() != m {
        return Err(SmdsError::dim("filter regimes", m, filt.n_regimes()));
    }
    let d = model.latent_dim();

    let mut mean = vec![DVector::zeros(d); t_len + 1];
    let mut cov = vec![DMatrix::zeros(d, d); t_len + 1];
    let mut regime_mean = vec![Vec::new(); t_len];
    let mut regime_cov = vec![Vec::new(); t_len];
    let mut w = DMatrix::zeros(t_len, m);
    let mut wpair = vec![DMatrix::zeros(m, m); t_len.saturating_sub(1)];
    let mut prev_mean = vec![Vec::new(); t_len];
    let mut gains = vec![Vec::new(); t_len];
    let mut cross = vec![Vec::new(); t_len];

    let last = &filt.steps[t_len - 1];
    regime_mean[t_len - 1] = last.per_regime.iter().map(|b| b.mean.clone()).collect();
    regime_cov[t_len - 1] = last.per_regime.iter().map(|b| b.cov.clone()).collect();
    w.row_mut(t_len - 1).copy_from(&last.regime_prob.transpose());
    mean[t_len] = last.merged.mean.clone();
    cov[t_len] = last.merged.cov.clone();

    // Walk t = T..1; each iteration smooths the state at t−1 (0-based k−1).
    for k in (0..t_len).rev() {
        let step = k + 1;
        let cur = &filt.steps[k];
        let chols = cur
            .per_regime_pred
            .iter()
            .map(|p| cholesky_jitter(&p.cov, "predicted covariance"))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| with_step(e, step))?;

        if k == 0 {
            // x_0 carries no regime; smooth it from the initial prior through
            // each regime's first prediction.
            let mut x0 = Vec::with_capacity(m);
            let mut p0 = Vec::with_capacity(m);
            let mut g0 = Vec::with_capacity(m);
            for j in 0..m {
                let jg = gain(&model.lambda0, &model.regimes[j].a, &chols[j]);
                let pred = &cur.per_regime_pred[j];
                let xm = &model.mu0 + &jg * (&regime_mean[0][j] - &pred.mean);
                let pc = &model.lambda0 + &jg * (&regime_cov[0][j] - &pred.cov) * jg.transpose();
                x0.push(xm);
                p0.push(repair_covariance(&pc, COV_JITTER)?);
                g0.push(jg);
            }
            let wt: Vec<f64> = w.row(0).iter().cloned().collect();
            let (mx, mc) = mixture(&wt, &x0, &p0)?;
            mean[0] = mx;
            cov[0] = mc;
            cross[0] = (0..m)
                .map(|j| &regime_mean[0][j] * x0[j].transpose() + &cov[1] * g0[j].transpose())
                .collect();
            prev_mean[0] = x0;
            gains[0] = g0;
            break;
        }

        let prev = &filt.steps[k - 1];
        let cw = &cur.mix_weights;
        let pair = DMatrix::from_fn(m, m, |j, i| cw[(j, i)] * w[(k, j)]);
        let w_prev: Vec<f64> = (0..m).map(|i| pair.column(i).sum()).collect();

        // Pairwise conditional smoothed moments of x_{t−1}.
        let mut xij = vec![Vec::with_capacity(m); m];
        let mut pij = vec![Vec::with_capacity(m); m];
        let mut jbar = vec![DMatrix::zeros(d, d); m];
        let mut pm = vec![DVector::zeros(d); m];
        for i in 0..m {
            let fi = &prev.per_regime[i];
            for j in 0..m {
                let jg = gain(&fi.cov, &model.regimes[j].a, &chols[j]);
                let pred = &cur.per_regime_pred[j];
                let xm = &fi.mean + &jg * (&regime_mean[k][j] - &pred.mean);
                let pc = &fi.cov + &jg * (&regime_cov[k][j] - &pred.cov) * jg.transpose();
                jbar[j] += &jg * cw[(j, i)];
                pm[j].axpy(cw[(j, i)], &xm, 1.0);
                xij[i].push(xm);
                pij[i].push(symmetrize(&pc));
            }
        }

        let mut rm = Vec::with_capacity(m);
        let mut rc = Vec::with_capacity(m);
        for i in 0..m {
            let cond: Vec<f64> = if w_prev[i] > 0.0 {
                (0..m).map(|j| pair[(j, i)] / w_prev[i]).collect()
            } else {
                vec![1.0 / m as f64; m]
            };
            let (xm, pc) = mixture(&cond, &xij[i], &pij[i])?;
            rm.push(xm);
            rc.push(pc);
        }
        let (mx, mc) = mixture(&w_prev, &rm, &rc)?;
        mean[k] = mx;
        cov[k] = mc;

        cross[k] = (0..m)
            .map(|j| &regime_mean[k][j] * pm[j].transpose() + &cov[k + 1] * jbar[j].transpose())
            .collect();
        prev_mean[k] = pm;
        gains[k] = jbar;
        regime_mean[k - 1] = rm;
        regime_cov[k - 1] = rc;
        for i in 0..m {
            w[(k - 1, i)] = w_prev[i];
        }
        wpair[k - 1] = pair;
    }

    Ok(SmoothedStats {
        mean,
        cov,
        regime_mean,
        regime_cov,
        w,
        wpair,
        prev_mean,
        gain: gains,
        cross,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::smsnf_filter;
    use crate::simulate::{rng_for, simulate_series};
    use approx::assert_abs_diff_eq;

    fn run(model: &SwitchingModel, t: usize, seed: u64) -> (FilterOutput, SmoothedStats) {
        let s = simulate_series(model, t, &mut rng_for(seed, 1)).unwrap();
        let f = smsnf_filter(model, &s).unwrap();
        let sm = sms_run(model, &f).unwrap();
        (f, sm)
    }

    #[test]
    fn last_step_matches_filter() {
        let model = crate::model::tests::toy_model(2);
        let (f, sm) = run(&model, 40, 2);
        assert_eq!(sm.mean[40], f.steps[39].merged.mean);
        assert_eq!(sm.cov[40], f.steps[39].merged.cov);
    }

    #[test]
    fn regime_weights_are_consistent() {
        let model = crate::model::tests::toy_model(3);
        let (_, sm) = run(&model, 50, 5);
        for k in 0..50 {
            assert_abs_diff_eq!(sm.w.row(k).sum(), 1.0, epsilon = 1e-10);
        }
        for (k, p) in sm.wpair.iter().enumerate() {
            assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-10);
            for j in 0..3 {
                assert_abs_diff_eq!(p.row(j).sum(), sm.w[(k + 1, j)], epsilon = 1e-8);
            }
            for i in 0..3 {
                assert_abs_diff_eq!(p.column(i).sum(), sm.w[(k, i)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn identical_regimes_keep_uniform_weights() {
        let mut model = crate::model::tests::toy_model(2);
        model.regimes[1] = model.regimes[0].clone();
        let (f, sm) = run(&model, 30, 8);
        for k in 0..30 {
            assert_abs_diff_eq!(sm.w[(k, 0)], 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(f.steps[k].regime_prob[0], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn smoothing_never_inflates_uncertainty_single_regime() {
        let model = crate::model::tests::toy_model(1).without_spikes();
        let (f, sm) = run(&model, 60, 3);
        for k in 0..60 {
            assert!(sm.cov[k + 1].trace() <= f.steps[k].merged.cov.trace() + 1e-10);
        }
    }
}
