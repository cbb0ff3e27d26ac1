//! Random switching multiscale systems and synthetic spike/field series.
//!
//! All randomness flows from a `ChaCha8Rng` seeded with a 64-bit seed; model
//! construction uses stream 0 and series generation uses the stream passed to
//! [`rng_for`]. Draws happen in a fixed, documented order so a `(config, seed)`
//! pair always reproduces the same system and data.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmdsError};
use crate::linalg::{psd_sqrt, solve_discrete_lyapunov};
use crate::model::{RegimeParams, SwitchingModel};
use crate::series::{periodic_mask, MultiscaleSeries};

/// Largest per-bin log rate the simulator and filters accept.
pub const MAX_LOG_RATE: f64 = 30.0;

/// Stream used for the training series of a simulated system.
pub const TRAIN_STREAM: u64 = 1;
/// Stream used for the test series of a simulated system.
pub const TEST_STREAM: u64 = 2;

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    #[serde(alias = "d")]
    pub latent_dim: usize,
    #[serde(alias = "C")]
    pub neurons: usize,
    #[serde(alias = "F")]
    pub field_features: usize,
    #[serde(alias = "M")]
    pub regimes: usize,
    pub t_train: usize,
    pub t_test: usize,
    pub dt_ms: f64,
    pub field_period_steps: usize,
    pub stay_prob: f64,
    pub eig_radius_range: [f64; 2],
    pub eig_angle_range: [f64; 2],
    pub shared_mode_pairs: usize,
    pub spike_only_pairs: usize,
    pub field_only_pairs: usize,
    pub q_eig_range: [f64; 2],
    pub base_rate_hz_range: [f64; 2],
    pub max_rate_hz_range: [f64; 2],
    pub field_value_range: [f64; 2],
    pub snr_range: [f64; 2],
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            latent_dim: 10,
            neurons: 30,
            field_features: 30,
            regimes: 2,
            t_train: 10_000,
            t_test: 10_000,
            dt_ms: 10.0,
            field_period_steps: 5,
            stay_prob: 0.99,
            eig_radius_range: [0.99, 0.995],
            eig_angle_range: [0.0, 0.063],
            shared_mode_pairs: 3,
            spike_only_pairs: 1,
            field_only_pairs: 1,
            q_eig_range: [0.01, 0.04],
            base_rate_hz_range: [6.0, 9.0],
            max_rate_hz_range: [40.0, 50.0],
            field_value_range: [26.0, 30.0],
            snr_range: [0.3, 0.35],
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(SmdsError::Config(s));
        if self.latent_dim == 0 || self.latent_dim % 2 != 0 {
            return bad(format!("latent dimension must be even and positive, got {}", self.latent_dim));
        }
        let pairs = self.shared_mode_pairs + self.spike_only_pairs + self.field_only_pairs;
        if pairs * 2 != self.latent_dim {
            return bad(format!(
                "mode pairs ({pairs}) must cover d/2 = {}",
                self.latent_dim / 2
            ));
        }
        if self.regimes == 0 {
            return bad("at least one regime required".into());
        }
        if !(0.0..=1.0).contains(&self.stay_prob) {
            return bad(format!("stay_prob {} outside [0,1]", self.stay_prob));
        }
        if !(self.dt_ms > 0.0) || self.field_period_steps == 0 {
            return bad("dt_ms must be positive and field_period_steps at least 1".into());
        }
        for (name, r) in [
            ("eig_radius_range", self.eig_radius_range),
            ("eig_angle_range", self.eig_angle_range),
            ("q_eig_range", self.q_eig_range),
            ("base_rate_hz_range", self.base_rate_hz_range),
            ("max_rate_hz_range", self.max_rate_hz_range),
            ("field_value_range", self.field_value_range),
            ("snr_range", self.snr_range),
        ] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return bad(format!("{name} must satisfy lo <= hi, got {:?}", r));
            }
        }
        if self.eig_radius_range[1] >= 1.0 || self.eig_radius_range[0] < 0.0 {
            return bad("eigenvalue radii must lie in [0, 1)".into());
        }
        if self.q_eig_range[0] < 0.0 || self.base_rate_hz_range[0] <= 0.0 {
            return bad("noise eigenvalues must be >= 0 and base rates > 0".into());
        }
        if self.max_rate_hz_range[0] < self.base_rate_hz_range[1] {
            return bad("max firing rates must not fall below base rates".into());
        }
        if self.snr_range[0] <= 0.0 {
            return bad("SNR must be positive".into());
        }
        Ok(())
    }
}

/// Which modality an eigenvalue pair (2×2 block of the latent state) drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeTag {
    Shared,
    SpikeOnly,
    FieldOnly,
}

impl ModeTag {
    pub fn drives_spikes(self) -> bool {
        matches!(self, ModeTag::Shared | ModeTag::SpikeOnly)
    }
    pub fn drives_fields(self) -> bool {
        matches!(self, ModeTag::Shared | ModeTag::FieldOnly)
    }
}

/// Pair layout: shared pairs first, then spike-only, then field-only.
pub fn mode_layout(cfg: &SimConfig) -> Vec<ModeTag> {
    let mut tags = vec![ModeTag::Shared; cfg.shared_mode_pairs];
    tags.extend(std::iter::repeat_n(ModeTag::SpikeOnly, cfg.spike_only_pairs));
    tags.extend(std::iter::repeat_n(ModeTag::FieldOnly, cfg.field_only_pairs));
    tags
}

#[derive(Debug, Clone)]
pub struct Dynamics {
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub mode_tags: Vec<ModeTag>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * rng.random::<f64>()
}

/// Block-diagonal rotation-scaling dynamics with diagonal process noise.
///
/// Draw order: `(r_i, θ_i)` for each pair, then `q_k` for each dimension.
pub fn random_dynamics<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<Dynamics> {
    cfg.validate()?;
    let d = cfg.latent_dim;
    let mut a = DMatrix::zeros(d, d);
    for p in 0..d / 2 {
        let r = uniform(rng, cfg.eig_radius_range);
        let th = uniform(rng, cfg.eig_angle_range);
        let (s, c) = th.sin_cos();
        let k = 2 * p;
        a[(k, k)] = r * c;
        a[(k, k + 1)] = -r * s;
        a[(k + 1, k)] = r * s;
        a[(k + 1, k + 1)] = r * c;
    }
    let q = DVector::from_fn(d, |_, _| uniform(rng, cfg.q_eig_range));
    Ok(Dynamics {
        a,
        q: DMatrix::from_diagonal(&q),
        mode_tags: mode_layout(cfg),
    })
}

fn allowed_dims(tags: &[ModeTag], pick: impl Fn(ModeTag) -> bool) -> Vec<bool> {
    tags.iter().flat_map(|&t| [pick(t), pick(t)]).collect()
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R, allowed: &[bool]) -> DVector<f64> {
    let mut v = DVector::from_fn(allowed.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    for (k, &ok) in allowed.iter().enumerate() {
        if !ok {
            v[k] = 0.0;
        }
    }
    let n = v.norm();
    if n > 0.0 {
        v /= n;
    }
    v
}

/// Spike parameters from base/max firing rates.
///
/// `alpha_c = ln(base_c · Δ)`; `beta_c` points in a random direction over the
/// spike-driving dimensions with length chosen so the rate reaches `max_c`
/// at three stationary standard deviations of `beta_cᵀ x`.
/// Draw order per neuron: base, max, then `d` direction normals.
pub fn random_poisson_params<R: Rng + ?Sized>(
    cfg: &SimConfig,
    mode_tags: &[ModeTag],
    stationary_cov: &DMatrix<f64>,
    rng: &mut R,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = cfg.latent_dim;
    let dt_s = cfg.dt_ms / 1000.0;
    let allowed = allowed_dims(mode_tags, ModeTag::drives_spikes);
    let mut alpha = DVector::zeros(cfg.neurons);
    let mut beta = DMatrix::zeros(cfg.neurons, d);
    for c in 0..cfg.neurons {
        let base = uniform(rng, cfg.base_rate_hz_range);
        let max = uniform(rng, cfg.max_rate_hz_range);
        let u = random_direction(rng, &allowed);
        alpha[c] = (base * dt_s).ln();
        let spread = (u.transpose() * stationary_cov * &u)[(0, 0)].max(0.0).sqrt();
        if spread > 0.0 && max > base {
            let k = (max / base).ln() / (3.0 * spread);
            beta.row_mut(c).copy_from(&(u * k).transpose());
        }
    }
    (alpha, beta)
}

/// Field parameters from an amplitude range and an SNR range.
///
/// Each row of `C` is a random direction over the field-driving dimensions
/// scaled so `2·std(C_f x)` equals an amplitude drawn from
/// `field_value_range`; `R_f = C_f Σ C_fᵀ / SNR_f²` with `SNR_f` drawn from
/// `snr_range`. Draw order per feature: amplitude, SNR, `d` direction normals.
pub fn random_field_params<R: Rng + ?Sized>(
    cfg: &SimConfig,
    mode_tags: &[ModeTag],
    stationary_cov: &DMatrix<f64>,
    rng: &mut R,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = cfg.latent_dim;
    let allowed = allowed_dims(mode_tags, ModeTag::drives_fields);
    let mut cmat = DMatrix::zeros(cfg.field_features, d);
    let mut rdiag = DVector::zeros(cfg.field_features);
    for f in 0..cfg.field_features {
        let amp = uniform(rng, cfg.field_value_range);
        let snr = uniform(rng, cfg.snr_range);
        let u = random_direction(rng, &allowed);
        let sd = (u.transpose() * stationary_cov * &u)[(0, 0)].max(0.0).sqrt();
        let row = if sd > 0.0 { u * (amp / (2.0 * sd)) } else { u };
        let signal_var = (row.transpose() * stationary_cov * &row)[(0, 0)];
        rdiag[f] = field_noise_for_snr(signal_var, snr);
        cmat.row_mut(f).copy_from(&row.transpose());
    }
    (cmat, DMatrix::from_diagonal(&rdiag))
}

/// Noise variance giving `sqrt(signal_var / R) = snr`.
pub fn field_noise_for_snr(signal_var: f64, snr: f64) -> f64 {
    signal_var / (snr * snr)
}

pub fn transition_matrix(m: usize, stay_prob: f64) -> DMatrix<f64> {
    if m == 1 {
        return DMatrix::from_element(1, 1, 1.0);
    }
    let off = (1.0 - stay_prob) / (m as f64 - 1.0);
    DMatrix::from_fn(m, m, |i, j| if i == j { stay_prob } else { off })
}

/// A full random system: independent parameters per regime over a shared
/// mode layout, `Φ` with `stay_prob` on the diagonal, uniform `π`, `μ0 = 0`
/// and `Λ0` the stationary covariance of the first regime.
pub fn random_switching_model<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<SwitchingModel> {
    cfg.validate()?;
    let mut regimes = Vec::with_capacity(cfg.regimes);
    let mut lambda0 = None;
    for _ in 0..cfg.regimes {
        let dynamics = random_dynamics(cfg, rng)?;
        let sigma = solve_discrete_lyapunov(&dynamics.a, &dynamics.q)?;
        let (alpha, beta) = random_poisson_params(cfg, &dynamics.mode_tags, &sigma, rng);
        let (c, r) = random_field_params(cfg, &dynamics.mode_tags, &sigma, rng);
        if lambda0.is_none() {
            lambda0 = Some(sigma);
        }
        regimes.push(RegimeParams {
            a: dynamics.a,
            q: dynamics.q,
            alpha,
            beta,
            c,
            r,
        });
    }
    let m = cfg.regimes;
    let model = SwitchingModel {
        regimes,
        phi: transition_matrix(m, cfg.stay_prob),
        pi0: DVector::from_element(m, 1.0 / m as f64),
        mu0: DVector::zeros(cfg.latent_dim),
        lambda0: lambda0.unwrap(),
        tau: 1.0,
        dt_ms: cfg.dt_ms,
        field_period_steps: cfg.field_period_steps,
    };
    model.validate()?;
    Ok(model)
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.enumerate() {
        acc += p;
        last = k;
        if u < acc {
            return k;
        }
    }
    last
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sqrt_cov: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(sqrt_cov.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    sqrt_cov * z
}

/// Samples `T` steps from the model, keeping the ground-truth regimes and
/// latent trajectory `x_0..x_T`. Fields are emitted at rows with
/// `k mod field_period_steps == 0` (that is, `t = 1, 1+P, ...`); missing rows
/// hold NaN.
///
/// Draw order: `s_1`, `x_0`, then per step `s_t` (t ≥ 2), `w_t`, spike counts,
/// and the field frame when one is due.
pub fn simulate_series<R: Rng + ?Sized>(
    model: &SwitchingModel,
    len: usize,
    rng: &mut R,
) -> Result<MultiscaleSeries> {
    model.validate()?;
    let d = model.latent_dim();
    let c = model.n_neurons();
    let f = model.n_fields();
    let q_sqrt: Vec<DMatrix<f64>> = model.regimes.iter().map(|r| psd_sqrt(&r.q)).collect();
    let r_sqrt: Vec<DMatrix<f64>> = model.regimes.iter().map(|r| psd_sqrt(&r.r)).collect();
    let mask = periodic_mask(len, model.field_period_steps);

    let mut spikes = DMatrix::<u32>::zeros(len, c);
    let mut fields = DMatrix::<f64>::from_element(len, f, f64::NAN);
    let mut latents = DMatrix::<f64>::zeros(len + 1, d);
    let mut regimes = Vec::with_capacity(len);

    let mut s = categorical(rng, model.pi0.iter().cloned());
    let mut x = &model.mu0 + gaussian(rng, &psd_sqrt(&model.lambda0));
    latents.row_mut(0).copy_from(&x.transpose());

    for k in 0..len {
        if k > 0 {
            s = categorical(rng, model.phi.column(s).iter().cloned());
        }
        let reg = &model.regimes[s];
        x = &reg.a * &x + gaussian(rng, &q_sqrt[s]);
        latents.row_mut(k + 1).copy_from(&x.transpose());
        regimes.push(s + 1);

        if c > 0 {
            let eta = &reg.alpha + &reg.beta * &x;
            for n in 0..c {
                if !(eta[n] <= MAX_LOG_RATE) {
                    return Err(SmdsError::RateOverflow {
                        neuron: n + 1,
                        step: k + 1,
                        log_rate: eta[n],
                        limit: MAX_LOG_RATE,
                    });
                }
                let lam = eta[n].exp();
                let draw: f64 = Poisson::new(lam)
                    .map_err(|e| SmdsError::Numeric {
                        step: k + 1,
                        what: format!("poisson rate {lam}: {e}"),
                    })?
                    .sample(rng);
                spikes[(k, n)] = draw as u32;
            }
        }
        if mask[k] && f > 0 {
            let y = &reg.c * &x + gaussian(rng, &r_sqrt[s]);
            fields.row_mut(k).copy_from(&y.transpose());
        }
    }

    Ok(MultiscaleSeries {
        spikes,
        fields,
        field_mask: mask,
        behavior: None,
        regimes: Some(regimes),
        latents: Some(latents),
        dt_ms: model.dt_ms,
        field_period_steps: model.field_period_steps,
    })
}

/// A simulated system with its training and test series.
#[derive(Debug, Clone)]
pub struct SimulatedSystem {
    pub model: SwitchingModel,
    pub train: MultiscaleSeries,
    pub test: MultiscaleSeries,
}

/// Model from stream 0 of `cfg.seed`, training and test series from
/// [`TRAIN_STREAM`] and [`TEST_STREAM`].
pub fn simulate_system(cfg: &SimConfig) -> Result<SimulatedSystem> {
    let model = random_switching_model(cfg, &mut rng_for(cfg.seed, 0))?;
    let train = simulate_series(&model, cfg.t_train, &mut rng_for(cfg.seed, TRAIN_STREAM))?;
    let test = simulate_series(&model, cfg.t_test, &mut rng_for(cfg.seed, TEST_STREAM))?;
    Ok(SimulatedSystem { model, train, test })
}
