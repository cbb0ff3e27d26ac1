//! Decoding and prediction metrics.
//!
//! Latent CC is computed after a least-squares linear alignment of the
//! estimates onto the truth; regime accuracy takes the best label
//! permutation; field prediction and spike predictive power are one-step-ahead
//! quantities read off the filter's predicted beliefs.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Result, SmdsError};
use crate::filtering::{cubature_points, smsnf_filter, FilterOutput};
use crate::linalg::{ridge_solve, sqrt_factor};
use crate::model::SwitchingModel;
use crate::series::MultiscaleSeries;
use crate::smoothing::sms_run;

pub use crate::stats::{bh_correct, paired_test, sign_test};

/// Ridge used when a least-squares design is rank deficient.
pub const FALLBACK_RIDGE: f64 = 1e-8;

/// Largest regime count for which the exhaustive permutation search runs
/// without an explicit override.
pub const MAX_EXHAUSTIVE_REGIMES: usize = 8;

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Column-wise CC, averaged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcReport {
    pub mean: f64,
    pub per_dim: Vec<f64>,
    /// 1-based columns with zero variance on either side (scored 0).
    pub degenerate: Vec<usize>,
}

pub fn columnwise_cc(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<CcReport> {
    if est.shape() != truth.shape() {
        return Err(SmdsError::dim(
            "CC inputs",
            format!("{:?}", truth.shape()),
            format!("{:?}", est.shape()),
        ));
    }
    if est.ncols() == 0 || est.nrows() == 0 {
        return Err(SmdsError::EmptySeries);
    }
    let mut per_dim = Vec::with_capacity(est.ncols());
    let mut degenerate = Vec::new();
    for j in 0..est.ncols() {
        let a: Vec<f64> = est.column(j).iter().copied().collect();
        let b: Vec<f64> = truth.column(j).iter().copied().collect();
        match pearson(&a, &b) {
            Some(r) => per_dim.push(r),
            None => {
                per_dim.push(0.0);
                degenerate.push(j + 1);
            }
        }
    }
    let mean = per_dim.iter().sum::<f64>() / per_dim.len() as f64;
    Ok(CcReport {
        mean,
        per_dim,
        degenerate,
    })
}

#[derive(Debug, Clone)]
pub struct Alignment {
    /// d × d map `W` with aligned = `x̂ W`.
    pub transform: DMatrix<f64>,
    pub aligned: DMatrix<f64>,
    pub ridge_used: bool,
}

/// Least-squares `W` minimizing `‖x̂W − x‖_F`, by QR; falls back to ridge
/// normal equations when `x̂` is numerically rank deficient.
pub fn similarity_align(x_hat: &DMatrix<f64>, x_true: &DMatrix<f64>) -> Result<Alignment> {
    if x_hat.nrows() != x_true.nrows() {
        return Err(SmdsError::dim("alignment rows", x_true.nrows(), x_hat.nrows()));
    }
    let (t, d) = x_hat.shape();
    if t <= d {
        return Err(SmdsError::Config(format!("alignment needs more steps ({t}) than dimensions ({d})")));
    }
    let qr = x_hat.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..d).map(|i| r[(i, i)].abs()).collect();
    let top = diag.iter().cloned().fold(0.0, f64::max);
    let low = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let (transform, ridge_used) = if top > 0.0 && low > 1e-12 * top {
        let qtx = qr.q().tr_mul(x_true);
        let w = r
            .solve_upper_triangular(&qtx)
            .ok_or_else(|| SmdsError::Numeric {
                step: 0,
                what: "singular alignment factor".into(),
            })?;
        (w, false)
    } else {
        let gram = x_hat.tr_mul(x_hat);
        let (w, _) = ridge_solve(&gram, &x_hat.tr_mul(x_true), FALLBACK_RIDGE);
        (w, true)
    };
    let aligned = x_hat * &transform;
    Ok(Alignment {
        transform,
        aligned,
        ridge_used,
    })
}

/// Pearson CC per dimension, averaged (inputs already aligned).
pub fn latent_cc(x_hat: &DMatrix<f64>, x_true: &DMatrix<f64>) -> Result<CcReport> {
    columnwise_cc(x_hat, x_true)
}

/// Aligns, then scores.
pub fn aligned_latent_cc(x_hat: &DMatrix<f64>, x_true: &DMatrix<f64>) -> Result<(CcReport, bool)> {
    let al = similarity_align(x_hat, x_true)?;
    Ok((latent_cc(&al.aligned, x_true)?, al.ridge_used))
}

/// Best agreement over all relabelings of `s_hat` (labels 1-based).
/// More than [`MAX_EXHAUSTIVE_REGIMES`] labels needs `allow_large`.
pub fn regime_accuracy(s_true: &[usize], s_hat: &[usize], allow_large: bool) -> Result<f64> {
    if s_true.len() != s_hat.len() {
        return Err(SmdsError::dim("regime sequences", s_true.len(), s_hat.len()));
    }
    if s_true.is_empty() {
        return Err(SmdsError::EmptySeries);
    }
    if s_true.iter().chain(s_hat).any(|&s| s == 0) {
        return Err(SmdsError::Config("regime labels are 1-based".into()));
    }
    let m = s_true.iter().chain(s_hat).copied().max().unwrap_or(1);
    if m > MAX_EXHAUSTIVE_REGIMES && !allow_large {
        return Err(SmdsError::Unsupported(format!(
            "exhaustive permutation search over {m} regimes ({m}! labelings) needs an explicit override"
        )));
    }
    // confusion[(hat, true)]
    let mut confusion = DMatrix::<usize>::zeros(m, m);
    for (&t, &h) in s_true.iter().zip(s_hat) {
        confusion[(h - 1, t - 1)] += 1;
    }
    let best = (0..m)
        .permutations(m)
        .map(|perm| (0..m).map(|h| confusion[(h, perm[h])]).sum::<usize>())
        .max()
        .unwrap_or(0);
    Ok(best as f64 / s_true.len() as f64)
}

/// One-step-ahead field predictions `Σ_j C^{(j)} x̂^{(j)}_{t|t−1} P(s_t=j | h_{1:t−1})`
/// at the field frames, with their 0-based step indices.
pub fn field_predictions(
    model: &SwitchingModel,
    series: &MultiscaleSeries,
    filt: &FilterOutput,
) -> Result<(Vec<usize>, DMatrix<f64>)> {
    if filt.len() != series.len() {
        return Err(SmdsError::dim("filter length", series.len(), filt.len()));
    }
    let frames: Vec<usize> = (0..series.len()).filter(|&k| series.field_mask[k]).collect();
    let nf = model.n_fields();
    let mut pred = DMatrix::zeros(frames.len(), nf);
    for (row, &k) in frames.iter().enumerate() {
        let step = &filt.steps[k];
        let mut y = DVector::zeros(nf);
        for (j, reg) in model.regimes.iter().enumerate() {
            y += &reg.c * &step.per_regime_pred[j].mean * step.regime_pred_prob[j];
        }
        pred.row_mut(row).copy_from(&y.transpose());
    }
    Ok((frames, pred))
}

pub fn field_prediction_cc(model: &SwitchingModel, series: &MultiscaleSeries, filt: &FilterOutput) -> Result<CcReport> {
    if model.n_fields() == 0 {
        return Err(SmdsError::Unsupported("model has no field features".into()));
    }
    let (frames, pred) = field_predictions(model, series, filt)?;
    if frames.is_empty() {
        return Err(SmdsError::Unsupported("no field frames to predict".into()));
    }
    let truth = DMatrix::from_fn(frames.len(), series.n_fields(), |r, f| series.fields[(frames[r], f)]);
    columnwise_cc(&pred, &truth)
}

/// T × C scores `P(n_t^c ≥ 1 | h_{1:t−1})`: the cubature expectation of
/// `1 − exp(−λ)` under each regime's predicted belief, mixed by the predicted
/// regime probabilities.
pub fn spike_scores(model: &SwitchingModel, filt: &FilterOutput) -> Result<DMatrix<f64>> {
    let d = model.latent_dim();
    let nc = model.n_neurons();
    let cub = cubature_points(d)?;
    let mut scores = DMatrix::zeros(filt.len(), nc);
    for (k, step) in filt.steps.iter().enumerate() {
        for (j, reg) in model.regimes.iter().enumerate() {
            let p = step.regime_pred_prob[j];
            if p == 0.0 {
                continue;
            }
            let pred = &step.per_regime_pred[j];
            let base = &reg.beta * &pred.mean + &reg.alpha;
            let eta = &reg.beta * sqrt_factor(&pred.cov) * cub.points();
            for c in 0..nc {
                let e: f64 = (0..cub.len())
                    .map(|a| cub.weights()[a] * -(-(base[c] + eta[(c, a)]).exp()).exp_m1())
                    .sum();
                scores[(k, c)] += p * e.clamp(0.0, 1.0);
            }
        }
    }
    Ok(scores)
}

/// Mann–Whitney AUC with midranked ties; `None` when one class is empty.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 || scores.len() != labels.len() {
        return None;
    }
    let ranks = crate::stats::midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpikePp {
    pub auc: f64,
    pub pp: f64,
    /// Per neuron; `None` for neurons left out of the average.
    pub per_neuron_auc: Vec<Option<f64>>,
    /// 1-based neurons whose labels are all zero or all spiking.
    pub excluded: Vec<usize>,
}

/// AUC and PP = 2·AUC − 1 from precomputed scores.
pub fn spike_pp_from_scores(scores: &DMatrix<f64>, spikes: &DMatrix<u32>) -> Result<SpikePp> {
    if scores.shape() != spikes.shape() {
        return Err(SmdsError::dim(
            "spike scores",
            format!("{:?}", spikes.shape()),
            format!("{:?}", scores.shape()),
        ));
    }
    let mut per_neuron_auc = Vec::with_capacity(scores.ncols());
    let mut excluded = Vec::new();
    for c in 0..scores.ncols() {
        let s: Vec<f64> = scores.column(c).iter().copied().collect();
        let l: Vec<bool> = spikes.column(c).iter().map(|&n| n >= 1).collect();
        let a = auc(&s, &l);
        if a.is_none() {
            excluded.push(c + 1);
        }
        per_neuron_auc.push(a);
    }
    let used: Vec<f64> = per_neuron_auc.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(SmdsError::Unsupported("no neuron has both spiking and silent bins".into()));
    }
    let auc = used.iter().sum::<f64>() / used.len() as f64;
    Ok(SpikePp {
        auc,
        pp: 2.0 * auc - 1.0,
        per_neuron_auc,
        excluded,
    })
}

pub fn spike_pp(model: &SwitchingModel, series: &MultiscaleSeries, filt: &FilterOutput) -> Result<SpikePp> {
    if model.n_neurons() == 0 {
        return Err(SmdsError::Unsupported("model has no spike channels".into()));
    }
    if filt.len() != series.len() {
        return Err(SmdsError::dim("filter length", series.len(), filt.len()));
    }
    spike_pp_from_scores(&spike_scores(model, filt)?, &series.spikes)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeReport {
    pub cc: CcReport,
    pub ridge_used: bool,
}

/// Linear map with intercept fit on training pairs, scored on test pairs.
pub fn behavior_decode_cc(
    train_latents: &DMatrix<f64>,
    train_behavior: &DMatrix<f64>,
    test_latents: &DMatrix<f64>,
    test_behavior: &DMatrix<f64>,
) -> Result<DecodeReport> {
    if train_latents.nrows() != train_behavior.nrows() {
        return Err(SmdsError::dim("training pairs", train_latents.nrows(), train_behavior.nrows()));
    }
    if test_latents.nrows() != test_behavior.nrows() {
        return Err(SmdsError::dim("test pairs", test_latents.nrows(), test_behavior.nrows()));
    }
    if train_latents.ncols() != test_latents.ncols() || train_behavior.ncols() != test_behavior.ncols() {
        return Err(SmdsError::dim(
            "decoder columns",
            train_latents.ncols() + train_behavior.ncols(),
            test_latents.ncols() + test_behavior.ncols(),
        ));
    }
    let with_one = |x: &DMatrix<f64>| x.clone().insert_column(x.ncols(), 1.0);
    let xtr = with_one(train_latents);
    let gram = xtr.tr_mul(&xtr);
    let rhs = xtr.tr_mul(train_behavior);
    let (w, escalated) = match gram.clone().cholesky() {
        Some(ch) if crate::linalg::min_eigenvalue(&gram) > 1e-12 * gram.diagonal().max().max(1.0) => (ch.solve(&rhs), false),
        _ => {
            let (w, _) = ridge_solve(&gram, &rhs, FALLBACK_RIDGE);
            (w, true)
        }
    };
    let pred = with_one(test_latents) * w;
    Ok(DecodeReport {
        cc: columnwise_cc(&pred, test_behavior)?,
        ridge_used: escalated,
    })
}

/// All metrics applicable to one model on one series.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub latent_cc: Option<f64>,
    pub latent_cc_smoothed: Option<f64>,
    pub latent_cc_normalized: Option<f64>,
    pub regime_accuracy: Option<f64>,
    pub field_pred_cc: Option<f64>,
    pub field_pred_cc_normalized: Option<f64>,
    pub spike_auc: Option<f64>,
    pub spike_pp: Option<f64>,
    pub spike_pp_normalized: Option<f64>,
    pub behavior_cc: Option<f64>,
    pub log_likelihood: f64,
    pub latent_cc_per_dim: Vec<f64>,
    pub field_cc_per_feature: Vec<f64>,
    pub spike_auc_per_neuron: Vec<Option<f64>>,
    pub flags: Vec<String>,
}

fn ratio(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) if y != 0.0 => Some(x / y),
        _ => None,
    }
}

impl EvalReport {
    /// `key=value` lines; absent metrics are omitted.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                out.push_str(&format!("{k}={v}\n"));
            }
        };
        put("latent_cc", self.latent_cc);
        put("latent_cc_smoothed", self.latent_cc_smoothed);
        put("latent_cc_normalized", self.latent_cc_normalized);
        put("regime_accuracy", self.regime_accuracy);
        put("field_pred_cc", self.field_pred_cc);
        put("field_pred_cc_normalized", self.field_pred_cc_normalized);
        put("spike_auc", self.spike_auc);
        put("spike_pp", self.spike_pp);
        put("spike_pp_normalized", self.spike_pp_normalized);
        put("behavior_cc", self.behavior_cc);
        put("log_likelihood", Some(self.log_likelihood));
        for f in &self.flags {
            out.push_str(&format!("flag={f}\n"));
        }
        out
    }

    /// `kind,index,value` rows (1-based index) for the per-dimension breakdowns.
    pub fn per_dimension_rows(&self) -> Vec<(&'static str, usize, Option<f64>)> {
        let mut rows = Vec::new();
        rows.extend(self.latent_cc_per_dim.iter().enumerate().map(|(i, v)| ("latent_cc", i + 1, Some(*v))));
        rows.extend(self.field_cc_per_feature.iter().enumerate().map(|(i, v)| ("field_pred_cc", i + 1, Some(*v))));
        rows.extend(self.spike_auc_per_neuron.iter().enumerate().map(|(i, v)| ("spike_auc", i + 1, *v)));
        rows
    }

    /// Fills the normalized metrics from a reference (true-model) report.
    pub fn normalize_by(&mut self, reference: &EvalReport) {
        self.latent_cc_normalized = ratio(self.latent_cc, reference.latent_cc);
        self.field_pred_cc_normalized = ratio(self.field_pred_cc, reference.field_pred_cc);
        self.spike_pp_normalized = ratio(self.spike_pp, reference.spike_pp);
    }
}

/// Filters (and smooths) `series` with `model` and computes every metric the
/// available ground truth supports. Latent CC uses filtered means; the
/// smoothed variant is reported alongside. With `truth`, normalized metrics
/// divide by the true model's scores on the same series.
pub fn evaluate(model: &SwitchingModel, series: &MultiscaleSeries, truth: Option<&SwitchingModel>) -> Result<EvalReport> {
    let mut report = evaluate_raw(model, series)?;
    if let Some(tm) = truth {
        let reference = evaluate_raw(tm, series)?;
        report.normalize_by(&reference);
    }
    Ok(report)
}

fn evaluate_raw(model: &SwitchingModel, series: &MultiscaleSeries) -> Result<EvalReport> {
    let series = series.conform_to(model)?;
    let filt = smsnf_filter(model, &series)?;
    let mut r = EvalReport {
        log_likelihood: filt.log_likelihood,
        ..Default::default()
    };

    if let Some(x) = &series.latents {
        let truth = x.rows(1, series.len()).into_owned();
        if truth.ncols() == model.latent_dim() || series.len() > model.latent_dim() {
            let (cc, ridge) = aligned_latent_cc(&filt.merged_means(), &truth)?;
            if ridge {
                r.flags.push("latent alignment used ridge fallback".into());
            }
            for j in &cc.degenerate {
                r.flags.push(format!("latent dimension {j} has zero variance"));
            }
            r.latent_cc = Some(cc.mean);
            r.latent_cc_per_dim = cc.per_dim;
            let sm = sms_run(model, &filt)?;
            r.latent_cc_smoothed = Some(aligned_latent_cc(&sm.means(), &truth)?.0.mean);
        }
    }
    if let Some(s) = &series.regimes {
        r.regime_accuracy = Some(regime_accuracy(s, &filt.map_regimes(), false)?);
    }
    if model.n_fields() > 0 && series.n_field_frames() > 0 {
        let cc = field_prediction_cc(model, &series, &filt)?;
        for f in &cc.degenerate {
            r.flags.push(format!("field feature {f} has zero variance"));
        }
        r.field_pred_cc = Some(cc.mean);
        r.field_cc_per_feature = cc.per_dim;
    }
    if model.n_neurons() > 0 {
        match spike_pp(model, &series, &filt) {
            Ok(pp) => {
                for c in &pp.excluded {
                    r.flags.push(format!("neuron {c} excluded from PP (single class)"));
                }
                r.spike_auc = Some(pp.auc);
                r.spike_pp = Some(pp.pp);
                r.spike_auc_per_neuron = pp.per_neuron_auc;
            }
            Err(SmdsError::Unsupported(msg)) => r.flags.push(msg),
            Err(e) => return Err(e),
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn accuracy_swap_example() {
        assert_eq!(regime_accuracy(&[1, 1, 2], &[2, 2, 1], false).unwrap(), 1.0);
        assert_eq!(regime_accuracy(&[1, 2, 2, 1], &[1, 1, 2, 2], false).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_refuses_many_regimes() {
        let s: Vec<usize> = (1..=9).collect();
        assert!(matches!(regime_accuracy(&s, &s, false), Err(SmdsError::Unsupported(_))));
    }

    #[test]
    fn auc_extremes() {
        let l = [false, true, false, true, true];
        let s: Vec<f64> = l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        assert_eq!(auc(&s, &l), Some(1.0));
        assert_eq!(auc(&[0.5; 5], &l), Some(0.5));
        assert_eq!(auc(&[1.0, 2.0], &[true, true]), None);
    }

    #[test]
    fn scaled_estimates_align_exactly() {
        let x = DMatrix::from_fn(50, 2, |i, j| ((i * (j + 3)) as f64 * 0.37).sin());
        let al = similarity_align(&(&x * 2.0), &x).unwrap();
        assert_abs_diff_eq!(al.transform, DMatrix::identity(2, 2) * 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(latent_cc(&al.aligned, &x).unwrap().mean, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn negated_sequence_has_cc_minus_one() {
        let x = DMatrix::from_fn(20, 1, |i, _| (i as f64).sqrt());
        assert_abs_diff_eq!(latent_cc(&(-&x), &x).unwrap().mean, -1.0, epsilon = 1e-14);
    }

    #[test]
    fn constant_column_scores_zero() {
        let a = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let cc = columnwise_cc(&a, &a).unwrap();
        assert_eq!(cc.per_dim, vec![0.0, 1.0]);
        assert_eq!(cc.degenerate, vec![1]);
    }

    #[test]
    fn decoder_recovers_affine_behavior() {
        let x = DMatrix::from_fn(40, 2, |i, j| ((i + 7 * j) as f64 * 0.61).cos());
        let b = DMatrix::from_fn(40, 1, |i, _| 3.0 * x[(i, 0)] - x[(i, 1)] + 0.5);
        let rep = behavior_decode_cc(&x, &b, &x, &b).unwrap();
        assert_abs_diff_eq!(rep.cc.mean, 1.0, epsilon = 1e-12);
        assert!(!rep.ridge_used);
    }

    #[test]
    fn key_values_skip_missing_metrics() {
        let r = EvalReport {
            latent_cc: Some(0.5),
            ..Default::default()
        };
        let kv = r.to_key_values();
        assert!(kv.contains("latent_cc=0.5"));
        assert!(!kv.contains("regime_accuracy"));
    }
}
