use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smds_harness::cv::{cmd_fusion_sweep, cmd_sweep_tau, cmd_xval};
use smds_harness::run::{cmd_eval, cmd_fit, cmd_simulate};
use smds_harness::{Context, ExperimentConfig, HarnessError, Result};

#[derive(Parser)]
#[command(name = "smds", version, about = "Switching multiscale dynamical system experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate train/test bundles and the true model.
    Simulate(Common),
    /// Fit a model to a bundle with EM.
    Fit(Common),
    /// Evaluate a model on a bundle.
    Eval(Common),
    /// k-fold cross-validation with paired comparisons across methods.
    Xval(Common),
    /// Choose the field-likelihood scale τ by inner cross-validation.
    SweepTau(Common),
    /// Behavior decoding as channels of one modality are added to the other.
    FusionSweep(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the top-level, simulation and EM seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides paths.out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, Context)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.sim.seed = s;
            cfg.em.seed = s;
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.paths.out.clone())
            .ok_or_else(|| HarnessError::config("an output directory is required (--out or paths.out)"))?;
        cfg.paths.out = Some(out.clone());
        Ok((
            cfg,
            Context {
                out,
                workers: self.workers,
                force: self.force,
            },
        ))
    }
}

fn run(cli: Cli) -> Result<String> {
    Ok(match cli.command {
        Command::Simulate(c) => {
            let (cfg, ctx) = c.load()?;
            cmd_simulate(&cfg, &ctx)?;
            format!("wrote {} system(s) to {}", cfg.systems, ctx.out.display())
        }
        Command::Fit(c) => {
            let (cfg, ctx) = c.load()?;
            let fit = cmd_fit(&cfg, &ctx)?;
            let last = fit.trace.iterations.last();
            format!(
                "{}: {} iterations, final log-likelihood {}",
                cfg.method,
                fit.trace.iterations.len(),
                last.map_or(f64::NAN, |i| i.log_likelihood)
            )
        }
        Command::Eval(c) => {
            let (cfg, ctx) = c.load()?;
            cmd_eval(&cfg, &ctx)?.0.to_key_values().trim_end().to_string()
        }
        Command::Xval(c) => {
            let (cfg, ctx) = c.load()?;
            let (res, _) = cmd_xval(&cfg, &ctx)?;
            format!(
                "{} fold metrics, {} comparisons written to {}",
                res.rows.len(),
                res.comparisons.len(),
                ctx.out.display()
            )
        }
        Command::SweepTau(c) => {
            let (cfg, ctx) = c.load()?;
            format!("tau={}", cmd_sweep_tau(&cfg, &ctx)?.0.chosen)
        }
        Command::FusionSweep(c) => {
            let (cfg, ctx) = c.load()?;
            format!("{} fusion rows written to {}", cmd_fusion_sweep(&cfg, &ctx)?.0.len(), ctx.out.display())
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("smds: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
