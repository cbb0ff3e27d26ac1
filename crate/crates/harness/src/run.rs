//! `simulate`, `fit` and `eval`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use smds_core::evaluate::{behavior_decode_cc, evaluate, EvalReport};
use smds_core::filtering::smsnf_filter;
use smds_core::learning::{em_fit, EmConfig, EmTrace};
use smds_core::model::{deserialize_model, serialize_model};
use smds_core::simulate::{simulate_system, SimulatedSystem};
use smds_core::{MultiscaleSeries, SwitchingModel};

use crate::bundle::{read_bundle, write_bundle};
use crate::config::{ExperimentConfig, Mode};
use crate::error::{HarnessError, Result};
use crate::manifest::{digest_inputs, Manifest};

/// Where and how a command runs.
#[derive(Debug, Clone)]
pub struct Context {
    pub out: PathBuf,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    pub force: bool,
}

impl Context {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            workers: 1,
            force: false,
        }
    }

    /// Creates the output directory, refusing to reuse a non-empty one
    /// unless forced.
    pub fn prepare(&self) -> Result<()> {
        if self.out.exists() {
            let non_empty = fs::read_dir(&self.out)
                .map_err(|e| HarnessError::io(&self.out, e))?
                .next()
                .is_some();
            if non_empty && !self.force {
                return Err(HarnessError::io(
                    &self.out,
                    std::io::Error::new(
                        std::io::ErrorKind::AlreadyExists,
                        "output directory is not empty (use --force to overwrite)",
                    ),
                ));
            }
        }
        fs::create_dir_all(&self.out).map_err(|e| HarnessError::io(&self.out, e))
    }

    /// Runs `f` on a pool with the configured worker count.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| HarnessError::config(format!("worker pool: {e}")))?;
        Ok(pool.install(f))
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<SwitchingModel> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(deserialize_model(&text)?)
}

pub fn save_model(path: &Path, model: &SwitchingModel) -> Result<()> {
    write_text(path, &(serialize_model(model)? + "\n"))
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| HarnessError::config(format!("paths.{what} is required")))
}

/// Simulated system plus a behavior stream made of the first `b` latent
/// coordinates (x_1..x_T), when requested.
pub fn simulate_with_behavior(cfg: &ExperimentConfig, seed: u64) -> Result<SimulatedSystem> {
    let sim = smds_core::simulate::SimConfig {
        seed,
        ..cfg.sim.clone()
    };
    let mut sys = simulate_system(&sim)?;
    if cfg.behavior_from_latents > 0 {
        for s in [&mut sys.train, &mut sys.test] {
            let x = s.latents.as_ref().expect("simulator keeps latents");
            s.behavior = Some(x.view((1, 0), (s.len(), cfg.behavior_from_latents)).into_owned());
        }
    }
    Ok(sys)
}

/// Writes `train/`, `test/` and `true_model.json` per system; several
/// systems go to `system_001/`, `system_002/`, ... with seeds `seed + k`.
pub fn cmd_simulate(cfg: &ExperimentConfig, ctx: &Context) -> Result<Manifest> {
    cfg.validate(Mode::Simulate)?;
    ctx.prepare()?;
    let dirs: Vec<(u64, PathBuf)> = (0..cfg.systems)
        .map(|k| {
            let dir = if cfg.systems == 1 {
                ctx.out.clone()
            } else {
                ctx.out.join(format!("system_{:03}", k + 1))
            };
            (cfg.sim.seed + k as u64, dir)
        })
        .collect();
    let results: Vec<Result<()>> = ctx.install(|| {
        dirs.par_iter()
            .map(|(seed, dir)| {
                let sys = simulate_with_behavior(cfg, *seed)?;
                let m = Some(sys.model.n_regimes());
                write_bundle(&dir.join("train"), &sys.train, m)?;
                write_bundle(&dir.join("test"), &sys.test, m)?;
                save_model(&dir.join("true_model.json"), &sys.model)
            })
            .collect()
    })?;
    results.into_iter().collect::<Result<Vec<()>>>()?;

    let mut man = Manifest::new("simulate", cfg, ctx.workers);
    for (_, dir) in &dirs {
        let rel = dir.strip_prefix(&ctx.out).unwrap_or(dir).to_path_buf();
        for f in ["train", "test", "true_model.json"] {
            man.outputs.push(rel.join(f));
        }
    }
    man.write(&ctx.out)?;
    Ok(man)
}

pub struct FitOutcome {
    pub model: SwitchingModel,
    pub trace: EmTrace,
    pub manifest: Manifest,
}

fn fit_log(trace: &EmTrace) -> String {
    let mut s = String::from(EmTrace::LOG_HEADER);
    s.push('\n');
    for l in trace.log_lines() {
        s.push_str(&l);
        s.push('\n');
    }
    s
}

/// Fits the configured method to `paths.bundle`; writes `model.json` and
/// `fit_log.csv`. A failed fit still writes its partial log.
pub fn cmd_fit(cfg: &ExperimentConfig, ctx: &Context) -> Result<FitOutcome> {
    cfg.validate(Mode::Fit)?;
    let bundle_dir = required(&cfg.paths.bundle, "bundle")?;
    let bundle = read_bundle(bundle_dir)?;
    ctx.prepare()?;
    let series = bundle.series.select_modality(cfg.em.modality);
    let em: EmConfig = cfg.em.clone();
    let result = ctx.install(|| em_fit(&series, &em))?;
    let (model, trace) = match result {
        Ok(r) => r,
        Err(f) => {
            write_text(&ctx.out.join("fit_log.csv"), &fit_log(&f.trace))?;
            return Err(f.into());
        }
    };
    save_model(&ctx.out.join("model.json"), &model)?;
    write_text(&ctx.out.join("fit_log.csv"), &fit_log(&trace))?;

    let mut man = Manifest::new("fit", cfg, ctx.workers);
    man.inputs = digest_inputs(bundle_dir)?;
    man.outputs = vec!["model.json".into(), "fit_log.csv".into()];
    man.notes.push(format!(
        "method {} with modality {:?}, M = {}, d = {}, tau = {}",
        cfg.method, cfg.em.modality, cfg.em.regimes, cfg.em.latent_dim, cfg.em.tau
    ));
    if trace.stopped_early {
        man.notes.push(format!("stopped early after {} iterations", trace.iterations.len()));
    }
    man.write(&ctx.out)?;
    Ok(FitOutcome {
        model,
        trace,
        manifest: man,
    })
}

/// Filtered (causal) latent means of `series` under `model`.
pub fn filtered_latents(model: &SwitchingModel, series: &MultiscaleSeries) -> Result<DMatrix<f64>> {
    Ok(smsnf_filter(model, &series.conform_to(model)?)?.merged_means())
}

/// Behavior decoding CC: a linear map from filtered latents to behavior is
/// fit on `train` and applied to `test`.
pub fn behavior_cc(model: &SwitchingModel, train: &MultiscaleSeries, test: &MultiscaleSeries) -> Result<f64> {
    let (bt, be) = match (&train.behavior, &test.behavior) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(HarnessError::config("behavior decoding needs behavior in both series")),
    };
    let xt = filtered_latents(model, train)?;
    let xe = filtered_latents(model, test)?;
    Ok(behavior_decode_cc(&xt, bt, &xe, be)?.cc.mean)
}

/// Evaluates `paths.model` on `paths.test_bundle` (or `paths.bundle`).
/// Normalized metrics need `paths.true_model`; behavior CC needs behavior
/// in both `paths.bundle` (decoder training) and the evaluated bundle.
pub fn cmd_eval(cfg: &ExperimentConfig, ctx: &Context) -> Result<(EvalReport, Manifest)> {
    cfg.validate(Mode::Eval)?;
    let model_path = required(&cfg.paths.model, "model")?;
    let model = load_model(model_path)?;
    let eval_dir = cfg
        .paths
        .test_bundle
        .as_ref()
        .or(cfg.paths.bundle.as_ref())
        .ok_or_else(|| HarnessError::config("paths.test_bundle or paths.bundle is required"))?;
    let test = read_bundle(eval_dir)?;
    let truth = match &cfg.paths.true_model {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    ctx.prepare()?;
    let mut report = ctx.install(|| evaluate(&model, &test.series, truth.as_ref()))??;

    let mut man = Manifest::new("eval", cfg, ctx.workers);
    man.inputs = digest_inputs(model_path)?;
    man.inputs.extend(digest_inputs(eval_dir)?);
    if let Some(p) = &cfg.paths.true_model {
        man.inputs.extend(digest_inputs(p)?);
    }
    match (&cfg.paths.bundle, &cfg.paths.test_bundle) {
        (Some(train_dir), Some(_)) if test.series.behavior.is_some() => {
            let train = read_bundle(train_dir)?;
            if train.series.behavior.is_some() {
                report.behavior_cc = Some(behavior_cc(&model, &train.series, &test.series)?);
                man.inputs.extend(digest_inputs(train_dir)?);
            }
        }
        _ => {}
    }
    write_text(&ctx.out.join("report.txt"), &report.to_key_values())?;
    let mut csv = String::from("kind,index,value\n");
    for (kind, i, v) in report.per_dimension_rows() {
        csv.push_str(&format!("{kind},{i},{}\n", v.map_or(String::new(), |v| v.to_string())));
    }
    write_text(&ctx.out.join("per_dimension.csv"), &csv)?;
    man.outputs = vec!["report.txt".into(), "per_dimension.csv".into()];
    man.write(&ctx.out)?;
    Ok((report, man))
}
