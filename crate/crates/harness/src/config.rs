//! Experiment configuration: one JSON document drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smds_core::learning::EmConfig;
use smds_core::simulate::SimConfig;
use smds_core::Modality;

use crate::error::{HarnessError, Result};

pub const DEFAULT_TAU_GRID: [f64; 6] = [0.01, 0.05, 0.1, 0.2, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Fit,
    Eval,
    Xval,
    SweepTau,
    FusionSweep,
}

/// The learning methods: filter family × stationary/switching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    KfEm,
    PcfEm,
    MsnfEm,
    SkfEm,
    SpcfEm,
    SmsnfEm,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::KfEm,
        Method::PcfEm,
        Method::MsnfEm,
        Method::SkfEm,
        Method::SpcfEm,
        Method::SmsnfEm,
    ];

    pub fn modality(self) -> Modality {
        match self {
            Method::KfEm | Method::SkfEm => Modality::GaussianOnly,
            Method::PcfEm | Method::SpcfEm => Modality::PoissonOnly,
            Method::MsnfEm | Method::SmsnfEm => Modality::Multiscale,
        }
    }

    pub fn switching(self) -> bool {
        matches!(self, Method::SkfEm | Method::SpcfEm | Method::SmsnfEm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::KfEm => "kf-em",
            Method::PcfEm => "pcf-em",
            Method::MsnfEm => "msnf-em",
            Method::SkfEm => "skf-em",
            Method::SpcfEm => "spcf-em",
            Method::SmsnfEm => "smsnf-em",
        }
    }

    /// The method with the same switching structure restricted to one modality.
    pub fn single_scale(self, modality: Modality) -> Method {
        match (modality, self.switching()) {
            (Modality::GaussianOnly, false) => Method::KfEm,
            (Modality::GaussianOnly, true) => Method::SkfEm,
            (Modality::PoissonOnly, false) => Method::PcfEm,
            (Modality::PoissonOnly, true) => Method::SpcfEm,
            (Modality::Multiscale, false) => Method::MsnfEm,
            (Modality::Multiscale, true) => Method::SmsnfEm,
        }
    }

    /// Checks that an explicit EM configuration is the one this method implies.
    pub fn check(self, em: &EmConfig) -> Result<()> {
        if em.modality != self.modality() {
            return Err(HarnessError::config(format!(
                "method {} needs modality {:?}, config has {:?}",
                self.name(),
                self.modality(),
                em.modality
            )));
        }
        match (self.switching(), em.regimes) {
            (false, 1) => Ok(()),
            (true, m) if m >= 2 => Ok(()),
            (false, m) => Err(HarnessError::config(format!(
                "method {} is stationary (M = 1), config has M = {m}",
                self.name()
            ))),
            (true, m) => Err(HarnessError::config(format!(
                "method {} is switching (M >= 2), config has M = {m}",
                self.name()
            ))),
        }
    }

    /// EM settings for this method derived from a base configuration:
    /// modality from the method, one regime for stationary methods and the
    /// base regime count (at least two) for switching ones.
    pub fn em_config(self, base: &EmConfig) -> EmConfig {
        EmConfig {
            modality: self.modality(),
            regimes: if self.switching() { base.regimes.max(2) } else { 1 },
            ..base.clone()
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which modality supplies the fixed base channels of a fusion sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseModality {
    Fields,
    Spikes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub base_modality: BaseModality,
    pub base_channels: usize,
    pub added_channels: Vec<usize>,
    pub repeats: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            base_modality: BaseModality::Fields,
            base_channels: 5,
            added_channels: vec![0, 5, 10, 20],
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset bundle to fit / evaluate / cross-validate.
    pub bundle: Option<PathBuf>,
    /// Held-out bundle for `eval` (defaults to `bundle`).
    pub test_bundle: Option<PathBuf>,
    /// Model file for `eval`.
    pub model: Option<PathBuf>,
    /// Ground-truth model for normalized metrics.
    pub true_model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub sim: SimConfig,
    pub em: EmConfig,
    pub method: Method,
    /// Methods compared by `xval`; empty means `[method]`.
    pub methods: Vec<Method>,
    pub folds: usize,
    /// Folds of the inner cross-validation used by `sweep-tau`.
    pub inner_folds: usize,
    pub tau_grid: Vec<f64>,
    pub fusion: FusionConfig,
    /// Number of simulated systems written by `simulate`.
    pub systems: usize,
    /// Write the first `B` latent coordinates as a behavior stream when
    /// simulating (0 = no behavior file).
    pub behavior_from_latents: usize,
    /// False-discovery level for the paired comparisons of `xval`.
    pub fdr_q: f64,
    pub paths: Paths,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            sim: SimConfig::default(),
            em: EmConfig::default(),
            method: Method::SmsnfEm,
            methods: Vec::new(),
            folds: 5,
            inner_folds: 4,
            tau_grid: DEFAULT_TAU_GRID.to_vec(),
            fusion: FusionConfig::default(),
            systems: 1,
            behavior_from_latents: 0,
            fdr_q: 0.05,
            paths: Paths::default(),
            seed: 0,
        }
    }
}

/// The JSON document may leave `em.modality` / `em.M` to the method; these
/// raw fields record whether they were given.
#[derive(Deserialize)]
struct EmPresence {
    #[serde(default)]
    em: Option<serde_json::Map<String, serde_json::Value>>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::config(format!("{}: {e}", origin.display())))?;
        let presence: EmPresence =
            serde_json::from_str(text).map_err(|e| HarnessError::config(format!("{}: {e}", origin.display())))?;
        let em = presence.em.unwrap_or_default();
        let has = |keys: &[&str]| keys.iter().any(|k| em.contains_key(*k));
        if !has(&["modality"]) {
            cfg.em.modality = cfg.method.modality();
        }
        if !has(&["regimes", "M"]) {
            cfg.em.regimes = if cfg.method.switching() { cfg.em.regimes.max(2) } else { 1 };
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Methods compared by `xval`.
    pub fn compared_methods(&self) -> Vec<Method> {
        if self.methods.is_empty() {
            vec![self.method]
        } else {
            self.methods.clone()
        }
    }

    /// Consistency checks that run before any computation.
    pub fn validate(&self, mode: Mode) -> Result<()> {
        if let Some(m) = self.mode {
            if m != mode {
                return Err(HarnessError::config(format!("config is for mode {m:?}, command is {mode:?}")));
            }
        }
        match mode {
            Mode::Simulate => {
                self.sim.validate()?;
                if self.systems == 0 {
                    return Err(HarnessError::config("systems must be at least 1"));
                }
                if self.behavior_from_latents > self.sim.latent_dim {
                    return Err(HarnessError::config("behavior_from_latents exceeds the latent dimension"));
                }
            }
            Mode::Eval => {}
            _ => {
                self.em.validate()?;
                self.method.check(&self.em)?;
            }
        }
        if mode == Mode::Xval {
            if self.folds < 2 {
                return Err(HarnessError::config("xval needs at least 2 folds"));
            }
            if !(self.fdr_q > 0.0 && self.fdr_q < 1.0) {
                return Err(HarnessError::config("fdr_q must lie in (0,1)"));
            }
            let mut seen = self.compared_methods();
            seen.sort();
            seen.dedup();
            if seen.len() != self.compared_methods().len() {
                return Err(HarnessError::config("methods must be distinct"));
            }
        }
        if mode == Mode::SweepTau {
            if self.tau_grid.is_empty() || self.tau_grid.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
                return Err(HarnessError::config("tau_grid must be a non-empty list of positive values"));
            }
            if self.tau_grid.len() > 1 && self.inner_folds < 2 {
                return Err(HarnessError::config("inner_folds must be at least 2"));
            }
        }
        if mode == Mode::FusionSweep {
            if self.fusion.repeats == 0 || self.fusion.base_channels == 0 {
                return Err(HarnessError::config("fusion needs at least one repeat and one base channel"));
            }
            if self.folds < 2 {
                return Err(HarnessError::config("fusion holds out one of `folds` blocks; folds must be at least 2"));
            }
        }
        Ok(())
    }

    /// Stable SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
