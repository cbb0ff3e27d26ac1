use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmdsError};
use crate::model::SwitchingModel;

/// Which observation streams a model or fit uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Multiscale,
    GaussianOnly,
    PoissonOnly,
}

impl Modality {
    pub fn uses_spikes(self) -> bool {
        !matches!(self, Modality::GaussianOnly)
    }
    pub fn uses_fields(self) -> bool {
        !matches!(self, Modality::PoissonOnly)
    }
}

/// Time-aligned spike counts and field features.
///
/// Row `k` holds the observation at time `t = k + 1`; the latent trajectory,
/// when present, has `T + 1` rows with row 0 holding `x_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleSeries {
    /// T×C spike counts.
    pub spikes: DMatrix<u32>,
    /// T×F field features; rows where `field_mask` is false are ignored.
    pub fields: DMatrix<f64>,
    pub field_mask: Vec<bool>,
    pub behavior: Option<DMatrix<f64>>,
    /// Ground-truth regimes, 1-based.
    pub regimes: Option<Vec<usize>>,
    /// Ground-truth latent states x_0..x_T.
    pub latents: Option<DMatrix<f64>>,
    pub dt_ms: f64,
    pub field_period_steps: usize,
}

/// Field availability of the simulator: a frame at every `period`-th step
/// starting with the first.
pub fn periodic_mask(len: usize, period: usize) -> Vec<bool> {
    (0..len).map(|k| k % period.max(1) == 0).collect()
}

impl MultiscaleSeries {
    pub fn len(&self) -> usize {
        self.field_mask.len()
    }
    pub fn is_empty(&self) -> bool {
        self.field_mask.is_empty()
    }
    pub fn n_neurons(&self) -> usize {
        self.spikes.ncols()
    }
    pub fn n_fields(&self) -> usize {
        self.fields.ncols()
    }

    pub fn spike_row(&self, k: usize) -> DVector<f64> {
        DVector::from_iterator(self.n_neurons(), self.spikes.row(k).iter().map(|&v| v as f64))
    }

    /// Field frame at row `k`, or `None` when the frame is missing.
    pub fn field_row(&self, k: usize) -> Option<DVector<f64>> {
        if self.field_mask[k] && self.n_fields() > 0 {
            Some(self.fields.row(k).transpose())
        } else {
            None
        }
    }

    pub fn n_field_frames(&self) -> usize {
        self.field_mask.iter().filter(|&&m| m).count()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if t == 0 {
            return Err(SmdsError::EmptySeries);
        }
        if self.spikes.nrows() != t {
            return Err(SmdsError::dim("spikes rows", t, self.spikes.nrows()));
        }
        if self.fields.nrows() != t {
            return Err(SmdsError::dim("fields rows", t, self.fields.nrows()));
        }
        if let Some(b) = &self.behavior {
            if b.nrows() != t {
                return Err(SmdsError::dim("behavior rows", t, b.nrows()));
            }
        }
        if let Some(r) = &self.regimes {
            if r.len() != t {
                return Err(SmdsError::dim("regimes length", t, r.len()));
            }
            if r.iter().any(|&s| s == 0) {
                return Err(SmdsError::Config("regime labels are 1-based".into()));
            }
        }
        if let Some(x) = &self.latents {
            if x.nrows() != t + 1 {
                return Err(SmdsError::dim("latents rows", t + 1, x.nrows()));
            }
        }
        for k in 0..t {
            if self.field_mask[k] && self.fields.row(k).iter().any(|v| !v.is_finite()) {
                return Err(SmdsError::Numeric {
                    step: k + 1,
                    what: "non-finite field value at an available frame".into(),
                });
            }
        }
        Ok(())
    }

    /// Drops the observation streams the modality does not use.
    pub fn select_modality(&self, modality: Modality) -> Self {
        let mut s = self.clone();
        if !modality.uses_spikes() {
            s.spikes = DMatrix::zeros(self.len(), 0);
        }
        if !modality.uses_fields() {
            s.fields = DMatrix::zeros(self.len(), 0);
        }
        s
    }

    /// Keeps the listed neuron and field columns, in the given order.
    pub fn select_channels(&self, neurons: &[usize], fields: &[usize]) -> Self {
        let t = self.len();
        let mut s = self.clone();
        s.spikes = DMatrix::from_fn(t, neurons.len(), |r, c| self.spikes[(r, neurons[c])]);
        s.fields = DMatrix::from_fn(t, fields.len(), |r, c| self.fields[(r, fields[c])]);
        s
    }

    /// Drops streams the model has no parameters for, then checks dimensions.
    pub fn conform_to(&self, model: &SwitchingModel) -> Result<Self> {
        let mut s = self.clone();
        if model.n_neurons() == 0 && s.n_neurons() > 0 {
            s.spikes = DMatrix::zeros(s.len(), 0);
        }
        if model.n_fields() == 0 && s.n_fields() > 0 {
            s.fields = DMatrix::zeros(s.len(), 0);
        }
        if s.n_neurons() != model.n_neurons() {
            return Err(SmdsError::dim("spike channels", model.n_neurons(), s.n_neurons()));
        }
        if s.n_fields() != model.n_fields() {
            return Err(SmdsError::dim("field channels", model.n_fields(), s.n_fields()));
        }
        Ok(s)
    }

    /// Contiguous sub-series over observation rows `range`. The latent
    /// trajectory keeps the state preceding the first row as its row 0.
    pub fn slice(&self, range: Range<usize>) -> Self {
        let n = range.len();
        let start = range.start;
        Self {
            spikes: self.spikes.rows(start, n).into_owned(),
            fields: self.fields.rows(start, n).into_owned(),
            field_mask: self.field_mask[range.clone()].to_vec(),
            behavior: self.behavior.as_ref().map(|b| b.rows(start, n).into_owned()),
            regimes: self.regimes.as_ref().map(|r| r[range.clone()].to_vec()),
            latents: self.latents.as_ref().map(|x| x.rows(start, n + 1).into_owned()),
            dt_ms: self.dt_ms,
            field_period_steps: self.field_period_steps,
        }
    }

    /// Concatenates segments in order. Latent ground truth is dropped since
    /// the joined series is not one trajectory.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(SmdsError::EmptySeries)?;
        let t: usize = parts.iter().map(|p| p.len()).sum();
        let c = first.n_neurons();
        let f = first.n_fields();
        let mut spikes = DMatrix::<u32>::zeros(t, c);
        let mut fields = DMatrix::<f64>::zeros(t, f);
        let mut mask = Vec::with_capacity(t);
        let has_b = parts.iter().all(|p| p.behavior.is_some());
        let has_r = parts.iter().all(|p| p.regimes.is_some());
        let bdim = first.behavior.as_ref().map_or(0, |b| b.ncols());
        let mut behavior = DMatrix::<f64>::zeros(t, bdim);
        let mut regimes = Vec::new();
        let mut off = 0;
        for p in parts {
            if p.n_neurons() != c || p.n_fields() != f {
                return Err(SmdsError::dim(
                    "concat channels",
                    format!("{c}/{f}"),
                    format!("{}/{}", p.n_neurons(), p.n_fields()),
                ));
            }
            let n = p.len();
            spikes.rows_mut(off, n).copy_from(&p.spikes);
            fields.rows_mut(off, n).copy_from(&p.fields);
            mask.extend_from_slice(&p.field_mask);
            if has_b {
                behavior.rows_mut(off, n).copy_from(p.behavior.as_ref().unwrap());
            }
            if has_r {
                regimes.extend_from_slice(p.regimes.as_ref().unwrap());
            }
            off += n;
        }
        Ok(Self {
            spikes,
            fields,
            field_mask: mask,
            behavior: has_b.then_some(behavior),
            regimes: has_r.then_some(regimes),
            latents: None,
            dt_ms: first.dt_ms,
            field_period_steps: first.field_period_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MultiscaleSeries {
        let t = 6;
        MultiscaleSeries {
            spikes: DMatrix::from_fn(t, 2, |r, c| (r + c) as u32),
            fields: DMatrix::from_fn(t, 3, |r, c| (r * 10 + c) as f64),
            field_mask: periodic_mask(t, 2),
            behavior: Some(DMatrix::from_fn(t, 1, |r, _| r as f64)),
            regimes: Some(vec![1, 1, 2, 2, 1, 1]),
            latents: Some(DMatrix::from_fn(t + 1, 2, |r, c| (r + c) as f64)),
            dt_ms: 10.0,
            field_period_steps: 2,
        }
    }

    #[test]
    fn periodic_mask_starts_at_first_step() {
        assert_eq!(periodic_mask(7, 3), vec![true, false, false, true, false, false, true]);
    }

    #[test]
    fn missing_frames_are_none() {
        let s = small();
        assert!(s.field_row(0).is_some());
        assert!(s.field_row(1).is_none());
    }

    #[test]
    fn slice_keeps_preceding_latent() {
        let s = small();
        let part = s.slice(2..5);
        assert_eq!(part.len(), 3);
        assert_eq!(part.latents.as_ref().unwrap().nrows(), 4);
        assert_eq!(part.latents.as_ref().unwrap()[(0, 0)], 2.0);
        assert_eq!(part.regimes.as_ref().unwrap(), &vec![2, 2, 1]);
        part.validate().unwrap();
    }

    #[test]
    fn concat_roundtrips_rows() {
        let s = small();
        let joined = MultiscaleSeries::concat(&[s.slice(0..2), s.slice(2..6)]).unwrap();
        assert_eq!(joined.spikes, s.spikes);
        assert_eq!(joined.field_mask, s.field_mask);
        assert!(joined.latents.is_none());
    }

    #[test]
    fn modality_selection_drops_columns() {
        let s = small();
        assert_eq!(s.select_modality(Modality::GaussianOnly).n_neurons(), 0);
        assert_eq!(s.select_modality(Modality::PoissonOnly).n_fields(), 0);
        let ch = s.select_channels(&[1], &[2, 0]);
        assert_eq!(ch.fields[(1, 0)], 12.0);
        assert_eq!(ch.fields[(1, 1)], 10.0);
    }

    #[test]
    fn nonfinite_available_field_is_rejected() {
        let mut s = small();
        s.fields[(1, 0)] = f64::NAN; // masked out: fine
        s.validate().unwrap();
        s.fields[(2, 0)] = f64::NAN;
        assert!(s.validate().is_err());
    }
}
