//! Cross-validation, the τ sweep and channel-fusion sweeps.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use smds_core::evaluate::{bh_correct, evaluate, paired_test};
use smds_core::learning::{em_fit, EmConfig};
use smds_core::simulate::rng_for;
use smds_core::{Modality, MultiscaleSeries, SwitchingModel};

use crate::bundle::read_bundle;
use crate::config::{BaseModality, ExperimentConfig, Method, Mode};
use crate::error::{HarnessError, Result};
use crate::manifest::{digest_inputs, Manifest};
use crate::run::{behavior_cc, load_model, write_text, Context};

/// Stream offset of the channel draws of fusion repeat `r`.
const FUSION_STREAM: u64 = 1000;

/// Contiguous blocks `[iT/k, (i+1)T/k)`; they partition `0..T` exactly.
pub fn fold_bounds(len: usize, folds: usize) -> Result<Vec<Range<usize>>> {
    if folds < 2 || len / folds < 2 {
        return Err(HarnessError::config(format!("{len} steps are too few for {folds} folds")));
    }
    Ok((0..folds).map(|i| i * len / folds..(i + 1) * len / folds).collect())
}

/// Held-out block `fold` and the remaining blocks joined in time order.
pub fn split(series: &MultiscaleSeries, bounds: &[Range<usize>], fold: usize) -> Result<(MultiscaleSeries, MultiscaleSeries)> {
    let parts: Vec<MultiscaleSeries> = bounds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != fold)
        .map(|(_, r)| series.slice(r.clone()))
        .collect();
    Ok((MultiscaleSeries::concat(&parts)?, series.slice(bounds[fold].clone())))
}

/// Fits `em` on `train` (restricted to its modality).
pub fn fit(train: &MultiscaleSeries, em: &EmConfig) -> Result<SwitchingModel> {
    Ok(em_fit(&train.select_modality(em.modality), em)?.0)
}

fn require_behavior(series: &MultiscaleSeries, what: &str) -> Result<()> {
    if series.behavior.is_none() {
        return Err(HarnessError::config(format!("{what} needs a behavior stream (behavior.csv)")));
    }
    Ok(())
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauRow {
    pub tau: f64,
    pub fold: usize,
    pub behavior_cc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauSweep {
    pub chosen: f64,
    /// Empty when the grid has a single value.
    pub rows: Vec<TauRow>,
    /// `(tau, mean CC, standard error)` in ascending τ.
    pub summary: Vec<(f64, f64, f64)>,
}

/// Picks τ by inner cross-validated behavior decoding with the stationary
/// multiscale method. Ties (within 1e-12) go to the smallest τ.
pub fn sweep_tau(cfg: &ExperimentConfig, series: &MultiscaleSeries, ctx: &Context) -> Result<TauSweep> {
    let mut grid = cfg.tau_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.len() == 1 {
        return Ok(TauSweep {
            chosen: grid[0],
            rows: Vec::new(),
            summary: Vec::new(),
        });
    }
    require_behavior(series, "sweep-tau")?;
    if series.n_neurons() == 0 || series.n_fields() == 0 {
        return Err(HarnessError::config("sweep-tau needs both spikes and fields"));
    }
    let bounds = fold_bounds(series.len(), cfg.inner_folds)?;
    let items: Vec<(f64, usize)> = grid.iter().flat_map(|&t| (0..bounds.len()).map(move |f| (t, f))).collect();
    let rows: Vec<Result<TauRow>> = ctx.install(|| {
        items
            .par_iter()
            .map(|&(tau, fold)| {
                let em = EmConfig {
                    tau,
                    ..Method::MsnfEm.em_config(&cfg.em)
                };
                let (train, test) = split(series, &bounds, fold)?;
                let model = fit(&train, &em)?;
                Ok(TauRow {
                    tau,
                    fold: fold + 1,
                    behavior_cc: behavior_cc(&model, &train, &test)?,
                })
            })
            .collect()
    })?;
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let summary: Vec<(f64, f64, f64)> = grid
        .iter()
        .map(|&t| {
            let v: Vec<f64> = rows.iter().filter(|r| r.tau == t).map(|r| r.behavior_cc).collect();
            let (m, se) = mean_se(&v);
            (t, m, se)
        })
        .collect();
    let mut chosen = summary[0];
    for s in &summary[1..] {
        if s.1 > chosen.1 + 1e-12 {
            chosen = *s;
        }
    }
    Ok(TauSweep {
        chosen: chosen.0,
        rows,
        summary,
    })
}

pub fn cmd_sweep_tau(cfg: &ExperimentConfig, ctx: &Context) -> Result<(TauSweep, Manifest)> {
    cfg.validate(Mode::SweepTau)?;
    let dir = cfg
        .paths
        .bundle
        .as_ref()
        .ok_or_else(|| HarnessError::config("paths.bundle is required"))?;
    let bundle = read_bundle(dir)?;
    if cfg.tau_grid.len() > 1 {
        require_behavior(&bundle.series, "sweep-tau")?;
    }
    ctx.prepare()?;
    let sweep = sweep_tau(cfg, &bundle.series, ctx)?;

    let mut table = String::from("tau,fold,behavior_cc\n");
    for r in &sweep.rows {
        table.push_str(&format!("{},{},{}\n", r.tau, r.fold, fmt(r.behavior_cc)));
    }
    write_text(&ctx.out.join("tau_table.csv"), &table)?;
    let mut summary = String::from("tau,mean_behavior_cc,se\n");
    for (t, m, se) in &sweep.summary {
        summary.push_str(&format!("{t},{},{}\n", fmt(*m), fmt(*se)));
    }
    write_text(&ctx.out.join("tau_summary.csv"), &summary)?;
    write_text(&ctx.out.join("chosen_tau.txt"), &format!("{}\n", sweep.chosen))?;

    let mut man = Manifest::new("sweep-tau", cfg, ctx.workers);
    man.inputs = digest_inputs(dir)?;
    man.outputs = vec!["tau_table.csv".into(), "tau_summary.csv".into(), "chosen_tau.txt".into()];
    man.notes.push(format!("tau grid {:?}", cfg.tau_grid));
    if sweep.rows.is_empty() {
        man.notes.push("single grid value: returned without cross-validation".into());
    } else {
        man.notes.push(format!(
            "tau learned with msnf-em over {} inner folds; apply it to every multiscale method",
            cfg.inner_folds
        ));
    }
    man.write(&ctx.out)?;
    Ok((sweep, man))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetric {
    pub method: Method,
    pub fold: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub a: Method,
    pub b: Method,
    pub metric: String,
    pub n: usize,
    pub mean_diff: f64,
    pub p_value: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, Default)]
pub struct XvalResult {
    pub rows: Vec<FoldMetric>,
    pub comparisons: Vec<Comparison>,
}

impl XvalResult {
    pub fn values(&self, method: Method, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }
}

fn metric_rows(method: Method, fold: usize, rep: &smds_core::evaluate::EvalReport, behavior: Option<f64>) -> Vec<FoldMetric> {
    let named = [
        ("behavior_cc", behavior),
        ("latent_cc", rep.latent_cc),
        ("latent_cc_normalized", rep.latent_cc_normalized),
        ("regime_accuracy", rep.regime_accuracy),
        ("field_pred_cc", rep.field_pred_cc),
        ("field_pred_cc_normalized", rep.field_pred_cc_normalized),
        ("spike_pp", rep.spike_pp),
        ("spike_pp_normalized", rep.spike_pp_normalized),
        ("log_likelihood", Some(rep.log_likelihood)),
    ];
    named
        .into_iter()
        .filter_map(|(k, v)| {
            v.map(|value| FoldMetric {
                method,
                fold,
                metric: k.to_string(),
                value,
            })
        })
        .collect()
}

/// k-fold cross-validation of every compared method on one series. With
/// more than one method, each metric shared by a pair of methods is
/// compared by the paired signed-rank test across folds, and BH runs over
/// all comparisons.
pub fn xval(
    cfg: &ExperimentConfig,
    series: &MultiscaleSeries,
    truth: Option<&SwitchingModel>,
    ctx: &Context,
) -> Result<XvalResult> {
    let bounds = fold_bounds(series.len(), cfg.folds)?;
    let methods = cfg.compared_methods();
    let items: Vec<(Method, usize)> = methods.iter().flat_map(|&m| (0..bounds.len()).map(move |f| (m, f))).collect();
    let per_item: Vec<Result<Vec<FoldMetric>>> = ctx.install(|| {
        items
            .par_iter()
            .map(|&(method, fold)| {
                let (train, test) = split(series, &bounds, fold)?;
                let model = fit(&train, &method.em_config(&cfg.em))?;
                let rep = evaluate(&model, &test, truth)?;
                let b = if series.behavior.is_some() {
                    Some(behavior_cc(&model, &train, &test)?)
                } else {
                    None
                };
                Ok(metric_rows(method, fold + 1, &rep, b))
            })
            .collect()
    })?;
    let mut out = XvalResult::default();
    for r in per_item {
        out.rows.extend(r?);
    }
    if methods.len() > 1 {
        let metrics: Vec<String> = {
            let mut m: Vec<String> = out.rows.iter().map(|r| r.metric.clone()).collect();
            m.sort();
            m.dedup();
            m
        };
        for (i, &a) in methods.iter().enumerate() {
            for &b in &methods[i + 1..] {
                for metric in &metrics {
                    let va = out.values(a, metric);
                    let vb = out.values(b, metric);
                    if va.is_empty() || va.len() != vb.len() {
                        continue;
                    }
                    let diff: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x - y).collect();
                    out.comparisons.push(Comparison {
                        a,
                        b,
                        metric: metric.clone(),
                        n: va.len(),
                        mean_diff: mean_se(&diff).0,
                        p_value: paired_test(&va, &vb)?,
                        reject: false,
                    });
                }
            }
        }
        let p: Vec<f64> = out.comparisons.iter().map(|c| c.p_value).collect();
        let rej = bh_correct(&p, cfg.fdr_q)?;
        for (c, r) in out.comparisons.iter_mut().zip(rej) {
            c.reject = r;
        }
    }
    Ok(out)
}

pub fn cmd_xval(cfg: &ExperimentConfig, ctx: &Context) -> Result<(XvalResult, Manifest)> {
    cfg.validate(Mode::Xval)?;
    let dir = cfg
        .paths
        .bundle
        .as_ref()
        .ok_or_else(|| HarnessError::config("paths.bundle is required"))?;
    let bundle = read_bundle(dir)?;
    fold_bounds(bundle.series.len(), cfg.folds)?;
    let truth = match &cfg.paths.true_model {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    ctx.prepare()?;
    let res = xval(cfg, &bundle.series, truth.as_ref(), ctx)?;

    let mut folds = String::from("method,fold,metric,value\n");
    for r in &res.rows {
        folds.push_str(&format!("{},{},{},{}\n", r.method, r.fold, r.metric, fmt(r.value)));
    }
    write_text(&ctx.out.join("fold_metrics.csv"), &folds)?;

    let mut groups: BTreeMap<(Method, String), Vec<f64>> = BTreeMap::new();
    for r in &res.rows {
        groups.entry((r.method, r.metric.clone())).or_default().push(r.value);
    }
    let mut agg = String::from("method,metric,mean,se,n\n");
    for ((m, k), v) in &groups {
        let (mean, se) = mean_se(v);
        agg.push_str(&format!("{m},{k},{},{},{}\n", fmt(mean), fmt(se), v.len()));
    }
    write_text(&ctx.out.join("aggregate.csv"), &agg)?;

    let mut man = Manifest::new("xval", cfg, ctx.workers);
    man.inputs = digest_inputs(dir)?;
    man.outputs = vec!["fold_metrics.csv".into(), "aggregate.csv".into()];
    if !res.comparisons.is_empty() {
        let mut cmp = format!("method_a,method_b,metric,n,mean_diff,p_value,bh_reject_q{}\n", cfg.fdr_q);
        for c in &res.comparisons {
            cmp.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.a,
                c.b,
                c.metric,
                c.n,
                fmt(c.mean_diff),
                c.p_value,
                c.reject
            ));
        }
        write_text(&ctx.out.join("comparisons.csv"), &cmp)?;
        man.outputs.push("comparisons.csv".into());
    }
    man.notes.push(format!(
        "{} contiguous folds; training blocks are joined in time order",
        cfg.folds
    ));
    man.write(&ctx.out)?;
    Ok((res, man))
}

/// Base channels and the ordered pool of added channels (0-based) for one
/// fusion repeat. Added subsets are prefixes of the pool, so they nest.
pub fn fusion_channels(cfg: &ExperimentConfig, series: &MultiscaleSeries, repeat: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (n_base, n_added) = match cfg.fusion.base_modality {
        BaseModality::Fields => (series.n_fields(), series.n_neurons()),
        BaseModality::Spikes => (series.n_neurons(), series.n_fields()),
    };
    let max_added = cfg.fusion.added_channels.iter().copied().max().unwrap_or(0);
    if cfg.fusion.base_channels > n_base || max_added > n_added {
        return Err(HarnessError::config(format!(
            "fusion asks for {} base and up to {max_added} added channels; bundle has {n_base} and {n_added}",
            cfg.fusion.base_channels
        )));
    }
    let mut rng = rng_for(cfg.seed, FUSION_STREAM + repeat as u64);
    let mut base: Vec<usize> = (0..n_base).collect();
    base.shuffle(&mut rng);
    base.truncate(cfg.fusion.base_channels);
    let mut pool: Vec<usize> = (0..n_added).collect();
    pool.shuffle(&mut rng);
    Ok((base, pool))
}

/// Restricts `series` to the base channels plus the first `added` pool
/// channels; returns the method that fits it.
pub fn fusion_subset(
    cfg: &ExperimentConfig,
    series: &MultiscaleSeries,
    base: &[usize],
    pool: &[usize],
    added: usize,
) -> (MultiscaleSeries, Method) {
    let extra = &pool[..added];
    let (sub, single) = match cfg.fusion.base_modality {
        BaseModality::Fields => (series.select_channels(extra, base), Modality::GaussianOnly),
        BaseModality::Spikes => (series.select_channels(base, extra), Modality::PoissonOnly),
    };
    let method = if added == 0 { cfg.method.single_scale(single) } else { cfg.method };
    (sub, method)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionRow {
    pub base_count: usize,
    pub added_count: usize,
    pub repeat: usize,
    pub method: Method,
    pub behavior_cc: f64,
    pub base: Vec<usize>,
    pub added: Vec<usize>,
}

/// Fusion curves: per repeat, fixed random base channels of one modality
/// and growing nested sets of the other. The last of `folds` contiguous
/// blocks is held out for decoding.
pub fn fusion_sweep(cfg: &ExperimentConfig, series: &MultiscaleSeries, ctx: &Context) -> Result<Vec<FusionRow>> {
    require_behavior(series, "fusion-sweep")?;
    if series.n_neurons() == 0 || series.n_fields() == 0 {
        return Err(HarnessError::config("fusion-sweep needs both spikes and fields"));
    }
    if cfg.method.modality() != Modality::Multiscale {
        return Err(HarnessError::config("fusion-sweep needs a multiscale method (msnf-em or smsnf-em)"));
    }
    let bounds = fold_bounds(series.len(), cfg.folds)?;
    let (train, test) = split(series, &bounds, bounds.len() - 1)?;
    let mut items = Vec::new();
    for r in 0..cfg.fusion.repeats {
        let (base, pool) = fusion_channels(cfg, series, r)?;
        for &a in &cfg.fusion.added_channels {
            items.push((r, a, base.clone(), pool.clone()));
        }
    }
    let rows: Vec<Result<FusionRow>> = ctx.install(|| {
        items
            .par_iter()
            .map(|(r, a, base, pool)| {
                let (tr, method) = fusion_subset(cfg, &train, base, pool, *a);
                let (te, _) = fusion_subset(cfg, &test, base, pool, *a);
                let model = fit(&tr, &method.em_config(&cfg.em))?;
                Ok(FusionRow {
                    base_count: base.len(),
                    added_count: *a,
                    repeat: r + 1,
                    method,
                    behavior_cc: behavior_cc(&model, &tr, &te)?,
                    base: base.clone(),
                    added: pool[..*a].to_vec(),
                })
            })
            .collect()
    })?;
    rows.into_iter().collect()
}

pub fn cmd_fusion_sweep(cfg: &ExperimentConfig, ctx: &Context) -> Result<(Vec<FusionRow>, Manifest)> {
    cfg.validate(Mode::FusionSweep)?;
    let dir: &PathBuf = cfg
        .paths
        .bundle
        .as_ref()
        .ok_or_else(|| HarnessError::config("paths.bundle is required"))?;
    let bundle = read_bundle(dir)?;
    ctx.prepare()?;
    let rows = fusion_sweep(cfg, &bundle.series, ctx)?;
    let list = |v: &[usize]| v.iter().map(|c| (c + 1).to_string()).collect::<Vec<_>>().join(";");
    let mut csv = String::from("base_modality,base_count,added_count,repeat,method,behavior_cc,base_channels,added_channels\n");
    let base_name = match cfg.fusion.base_modality {
        BaseModality::Fields => "fields",
        BaseModality::Spikes => "spikes",
    };
    for r in &rows {
        csv.push_str(&format!(
            "{base_name},{},{},{},{},{},{},{}\n",
            r.base_count,
            r.added_count,
            r.repeat,
            r.method,
            fmt(r.behavior_cc),
            list(&r.base),
            list(&r.added)
        ));
    }
    write_text(&ctx.out.join("fusion_curve.csv"), &csv)?;
    let mut man = Manifest::new("fusion-sweep", cfg, ctx.workers);
    man.inputs = digest_inputs(dir)?;
    man.outputs = vec!["fusion_curve.csv".into()];
    man.notes.push(format!(
        "held-out block {} of {}; channel lists are 1-based",
        cfg.folds, cfg.folds
    ));
    man.write(&ctx.out)?;
    Ok((rows, man))
}
