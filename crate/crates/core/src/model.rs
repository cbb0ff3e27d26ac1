//! Parameterization of a switching multiscale dynamical system.
//!
//! Regime `j` (0-based in code, reported 1-based) evolves the latent state as
//! `x_t = A_j x_{t-1} + w_t`, `w_t ~ N(0, Q_j)`, emits Poisson spike counts with
//! per-bin rate `exp(alpha_j + beta_j x_t)` and Gaussian field features
//! `y_t = C_j x_t + r_t`, `r_t ~ N(0, R_j)`.
//!
//! **Transition orientation.** `phi` is column-stochastic:
//! `phi[(j, i)] = P(s_t = j | s_{t-1} = i)`, so each column sums to one.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmdsError};
use crate::linalg::{max_asymmetry, min_eigenvalue};

pub const SYMMETRY_TOL: f64 = 1e-10;
pub const PSD_TOL: f64 = 1e-10;
pub const STOCHASTIC_TOL: f64 = 1e-12;
pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeParams {
    /// d×d latent dynamics.
    pub a: DMatrix<f64>,
    /// d×d process-noise covariance.
    pub q: DMatrix<f64>,
    /// Per-neuron baseline log rate per bin (length C).
    pub alpha: DVector<f64>,
    /// C×d spike modulation, one row per neuron.
    pub beta: DMatrix<f64>,
    /// F×d field observation map.
    pub c: DMatrix<f64>,
    /// F×F field-noise covariance.
    pub r: DMatrix<f64>,
}

impl RegimeParams {
    pub fn latent_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_neurons(&self) -> usize {
        self.alpha.len()
    }
    pub fn n_fields(&self) -> usize {
        self.c.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingModel {
    pub regimes: Vec<RegimeParams>,
    /// Column-stochastic transition matrix, `phi[(j, i)] = P(s_t=j | s_{t-1}=i)`.
    pub phi: DMatrix<f64>,
    /// Distribution of the first regime `s_1`.
    pub pi0: DVector<f64>,
    pub mu0: DVector<f64>,
    pub lambda0: DMatrix<f64>,
    /// Exponent on the field likelihood.
    pub tau: f64,
    pub dt_ms: f64,
    pub field_period_steps: usize,
}

impl SwitchingModel {
    pub fn n_regimes(&self) -> usize {
        self.regimes.len()
    }
    pub fn latent_dim(&self) -> usize {
        self.mu0.len()
    }
    pub fn n_neurons(&self) -> usize {
        self.regimes.first().map_or(0, |r| r.n_neurons())
    }
    pub fn n_fields(&self) -> usize {
        self.regimes.first().map_or(0, |r| r.n_fields())
    }

    /// Same model with every regime's spike parameters removed (field-only).
    pub fn without_spikes(&self) -> Self {
        let mut m = self.clone();
        let d = m.latent_dim();
        for r in &mut m.regimes {
            r.alpha = DVector::zeros(0);
            r.beta = DMatrix::zeros(0, d);
        }
        m
    }

    /// Same model with every regime's field parameters removed (spike-only).
    pub fn without_fields(&self) -> Self {
        let mut m = self.clone();
        let d = m.latent_dim();
        for r in &mut m.regimes {
            r.c = DMatrix::zeros(0, d);
            r.r = DMatrix::zeros(0, 0);
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let v = validate_model(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(SmdsError::InvalidModel(v))
        }
    }
}

/// One failed invariant: which field, where, and by how much.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub index: Option<String>,
    pub deviation: f64,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.index {
            Some(i) => write!(
                f,
                "{}[{}]: {} (deviation {:.3e})",
                self.field, i, self.message, self.deviation
            ),
            None => write!(
                f,
                "{}: {} (deviation {:.3e})",
                self.field, self.message, self.deviation
            ),
        }
    }
}

fn violation(field: &str, index: Option<String>, deviation: f64, message: &str) -> Violation {
    Violation {
        field: field.to_string(),
        index,
        deviation,
        message: message.to_string(),
    }
}

fn check_cov(out: &mut Vec<Violation>, field: &str, index: Option<String>, m: &DMatrix<f64>) {
    if m.iter().any(|v| !v.is_finite()) {
        out.push(violation(field, index, f64::NAN, "non-finite entry"));
        return;
    }
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL {
        out.push(violation(field, index.clone(), asym, "not symmetric"));
    }
    let lo = min_eigenvalue(m);
    if lo < -PSD_TOL {
        out.push(violation(field, index, -lo, "not positive semidefinite"));
    }
}

fn check_shape(
    out: &mut Vec<Violation>,
    field: &str,
    index: Option<String>,
    m: &DMatrix<f64>,
    rows: usize,
    cols: usize,
) -> bool {
    if m.nrows() != rows || m.ncols() != cols {
        out.push(violation(
            field,
            index,
            f64::NAN,
            &format!(
                "shape {}x{} expected {}x{}",
                m.nrows(),
                m.ncols(),
                rows,
                cols
            ),
        ));
        return false;
    }
    if m.iter().any(|v| !v.is_finite()) {
        out.push(violation(field, None, f64::NAN, "non-finite entry"));
    }
    true
}

fn check_distribution(out: &mut Vec<Violation>, field: &str, index: Option<String>, p: &[f64]) {
    for (k, &v) in p.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            let dev = if v < 0.0 { -v } else { v - 1.0 };
            let idx = match &index {
                Some(i) => format!("{i},{}", k + 1),
                None => format!("{}", k + 1),
            };
            out.push(violation(field, Some(idx), dev, "probability outside [0,1]"));
        }
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL || !s.is_finite() {
        out.push(violation(field, index, (s - 1.0).abs(), "does not sum to 1"));
    }
}

/// Lists every violated invariant; empty iff the model is valid.
/// Regime and column indices in the report are 1-based.
pub fn validate_model(model: &SwitchingModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let m = model.n_regimes();
    if m == 0 {
        out.push(violation("regimes", None, 0.0, "at least one regime required"));
        return out;
    }
    if !(model.tau > 0.0 && model.tau.is_finite()) {
        out.push(violation("tau", None, model.tau, "must be positive and finite"));
    }
    if !(model.dt_ms > 0.0 && model.dt_ms.is_finite()) {
        out.push(violation("dt_ms", None, model.dt_ms, "must be positive"));
    }
    if model.field_period_steps == 0 {
        out.push(violation("field_period_steps", None, 0.0, "must be at least 1"));
    }
    let d = model.latent_dim();
    let c = model.n_neurons();
    let f = model.n_fields();

    if model.mu0.iter().any(|v| !v.is_finite()) {
        out.push(violation("mu0", None, f64::NAN, "non-finite entry"));
    }
    if check_shape(&mut out, "Lambda0", None, &model.lambda0, d, d) {
        check_cov(&mut out, "Lambda0", None, &model.lambda0);
    }
    for (j, r) in model.regimes.iter().enumerate() {
        let idx = Some(format!("{}", j + 1));
        check_shape(&mut out, "A", idx.clone(), &r.a, d, d);
        if check_shape(&mut out, "Q", idx.clone(), &r.q, d, d) {
            check_cov(&mut out, "Q", idx.clone(), &r.q);
        }
        if r.alpha.len() != c {
            out.push(violation(
                "alpha",
                idx.clone(),
                f64::NAN,
                &format!("length {} expected {c}", r.alpha.len()),
            ));
        } else if r.alpha.iter().any(|v| !v.is_finite()) {
            out.push(violation("alpha", idx.clone(), f64::NAN, "non-finite entry"));
        }
        check_shape(&mut out, "beta", idx.clone(), &r.beta, c, d);
        check_shape(&mut out, "C", idx.clone(), &r.c, f, d);
        if check_shape(&mut out, "R", idx.clone(), &r.r, f, f) {
            check_cov(&mut out, "R", idx, &r.r);
        }
    }

    if model.phi.nrows() != m || model.phi.ncols() != m {
        out.push(violation(
            "Phi",
            None,
            f64::NAN,
            &format!("shape {}x{} expected {m}x{m}", model.phi.nrows(), model.phi.ncols()),
        ));
    } else {
        for i in 0..m {
            let col: Vec<f64> = model.phi.column(i).iter().cloned().collect();
            check_distribution(&mut out, "Phi", Some(format!("column {}", i + 1)), &col);
        }
    }
    if model.pi0.len() != m {
        out.push(violation(
            "pi0",
            None,
            f64::NAN,
            &format!("length {} expected {m}", model.pi0.len()),
        ));
    } else {
        check_distribution(&mut out, "pi0", None, model.pi0.as_slice());
    }
    out
}

/// Latent-state density summarized by its first two moments.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

// ---------------------------------------------------------------------------
// Serialized form
// ---------------------------------------------------------------------------

/// Row-major matrix with explicit dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixDoc {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixDoc {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        if self.rows * self.cols != self.data.len() {
            return Err(SmdsError::dim(
                name,
                format!("{} values for {}x{}", self.rows * self.cols, self.rows, self.cols),
                self.data.len(),
            ));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegimeDoc {
    #[serde(rename = "A")]
    a: MatrixDoc,
    #[serde(rename = "Q")]
    q: MatrixDoc,
    alpha: Vec<f64>,
    beta: MatrixDoc,
    #[serde(rename = "C")]
    c: MatrixDoc,
    #[serde(rename = "R")]
    r: MatrixDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ModelDoc {
    version: u32,
    M: usize,
    d: usize,
    C: usize,
    F: usize,
    dt_ms: f64,
    field_period_steps: usize,
    tau: f64,
    pi0: Vec<f64>,
    Phi: MatrixDoc,
    mu0: Vec<f64>,
    Lambda0: MatrixDoc,
    regimes: Vec<RegimeDoc>,
}

/// Writes the model as a versioned JSON document. Non-finite parameters are
/// rejected since JSON cannot carry them.
pub fn serialize_model(model: &SwitchingModel) -> Result<String> {
    model.validate()?;
    let doc = ModelDoc {
        version: MODEL_SCHEMA_VERSION,
        M: model.n_regimes(),
        d: model.latent_dim(),
        C: model.n_neurons(),
        F: model.n_fields(),
        dt_ms: model.dt_ms,
        field_period_steps: model.field_period_steps,
        tau: model.tau,
        pi0: model.pi0.iter().cloned().collect(),
        Phi: MatrixDoc::from_matrix(&model.phi),
        mu0: model.mu0.iter().cloned().collect(),
        Lambda0: MatrixDoc::from_matrix(&model.lambda0),
        regimes: model
            .regimes
            .iter()
            .map(|r| RegimeDoc {
                a: MatrixDoc::from_matrix(&r.a),
                q: MatrixDoc::from_matrix(&r.q),
                alpha: r.alpha.iter().cloned().collect(),
                beta: MatrixDoc::from_matrix(&r.beta),
                c: MatrixDoc::from_matrix(&r.c),
                r: MatrixDoc::from_matrix(&r.r),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| SmdsError::Document(e.to_string()))
}

pub fn deserialize_model(text: &str) -> Result<SwitchingModel> {
    let doc: ModelDoc =
        serde_json::from_str(text).map_err(|e| SmdsError::Document(e.to_string()))?;
    if doc.version != MODEL_SCHEMA_VERSION {
        return Err(SmdsError::Document(format!(
            "unsupported schema version {} (expected {MODEL_SCHEMA_VERSION})",
            doc.version
        )));
    }
    if doc.regimes.len() != doc.M {
        return Err(SmdsError::dim("regimes", doc.M, doc.regimes.len()));
    }
    let expect = |name: &str, m: &DMatrix<f64>, r: usize, c: usize| -> Result<()> {
        if m.nrows() != r || m.ncols() != c {
            Err(SmdsError::dim(
                name,
                format!("{r}x{c}"),
                format!("{}x{}", m.nrows(), m.ncols()),
            ))
        } else {
            Ok(())
        }
    };
    let mut regimes = Vec::with_capacity(doc.M);
    for rd in &doc.regimes {
        let a = rd.a.to_matrix("A")?;
        let q = rd.q.to_matrix("Q")?;
        let beta = rd.beta.to_matrix("beta")?;
        let c = rd.c.to_matrix("C")?;
        let r = rd.r.to_matrix("R")?;
        expect("A", &a, doc.d, doc.d)?;
        expect("Q", &q, doc.d, doc.d)?;
        expect("beta", &beta, doc.C, doc.d)?;
        expect("C", &c, doc.F, doc.d)?;
        expect("R", &r, doc.F, doc.F)?;
        if rd.alpha.len() != doc.C {
            return Err(SmdsError::dim("alpha", doc.C, rd.alpha.len()));
        }
        regimes.push(RegimeParams {
            a,
            q,
            alpha: DVector::from_vec(rd.alpha.clone()),
            beta,
            c,
            r,
        });
    }
    let phi = doc.Phi.to_matrix("Phi")?;
    expect("Phi", &phi, doc.M, doc.M)?;
    let lambda0 = doc.Lambda0.to_matrix("Lambda0")?;
    expect("Lambda0", &lambda0, doc.d, doc.d)?;
    if doc.mu0.len() != doc.d {
        return Err(SmdsError::dim("mu0", doc.d, doc.mu0.len()));
    }
    if doc.pi0.len() != doc.M {
        return Err(SmdsError::dim("pi0", doc.M, doc.pi0.len()));
    }
    let model = SwitchingModel {
        regimes,
        phi,
        pi0: DVector::from_vec(doc.pi0),
        mu0: DVector::from_vec(doc.mu0),
        lambda0,
        tau: doc.tau,
        dt_ms: doc.dt_ms,
        field_period_steps: doc.field_period_steps,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy_model(m: usize) -> SwitchingModel {
        let d = 2;
        let regime = |s: f64| RegimeParams {
            a: DMatrix::from_row_slice(2, 2, &[0.9 * s, 0.1, -0.1, 0.8]),
            q: DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.2])),
            alpha: DVector::from_vec(vec![-2.0, -2.5, -3.0]),
            beta: DMatrix::from_row_slice(3, 2, &[0.3, 0.0, 0.0, 0.4, 0.2, -0.2]),
            c: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 1.2]),
            r: DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.7])),
        };
        let phi = if m == 1 {
            DMatrix::from_element(1, 1, 1.0)
        } else {
            let off = 0.01 / (m as f64 - 1.0);
            DMatrix::from_fn(m, m, |i, j| if i == j { 0.99 } else { off })
        };
        SwitchingModel {
            regimes: (0..m).map(|j| regime(1.0 - 0.05 * j as f64)).collect(),
            phi,
            pi0: DVector::from_element(m, 1.0 / m as f64),
            mu0: DVector::zeros(d),
            lambda0: DMatrix::identity(d, d),
            tau: 1.0,
            dt_ms: 10.0,
            field_period_steps: 5,
        }
    }

    #[test]
    fn valid_model_has_no_violations() {
        assert!(validate_model(&toy_model(2)).is_empty());
    }

    #[test]
    fn phi_column_sum_violation_names_column() {
        let mut m = toy_model(2);
        m.phi[(0, 0)] -= 0.02;
        let v = validate_model(&m);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].field, "Phi");
        assert_eq!(v[0].index.as_deref(), Some("column 1"));
        assert!((v[0].deviation - 0.02).abs() < 1e-12);
    }

    #[test]
    fn indefinite_r_is_reported() {
        let mut m = toy_model(1);
        m.regimes[0].r = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-3]));
        let v = validate_model(&m);
        assert!(v.iter().any(|x| x.field == "R" && x.message.contains("semidefinite")));
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for m in [1, 2, 3] {
            let mut model = toy_model(m);
            model.regimes[0].a[(0, 1)] = 0.1 + 0.2; // not representable in short decimal
            model.tau = 1.0 / 3.0;
            let text = serialize_model(&model).unwrap();
            let back = deserialize_model(&text).unwrap();
            assert_eq!(back, model);
        }
    }

    #[test]
    fn missing_phi_is_a_document_error() {
        let text = serialize_model(&toy_model(2)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("Phi");
        let err = deserialize_model(&v.to_string()).unwrap_err();
        assert!(matches!(err, SmdsError::Document(ref s) if s.contains("Phi")), "{err}");
    }

    #[test]
    fn dimension_mismatch_on_load() {
        let text = serialize_model(&toy_model(1)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["d"] = serde_json::json!(3);
        assert!(matches!(
            deserialize_model(&v.to_string()),
            Err(SmdsError::Dimension { .. })
        ));
    }

    #[test]
    fn invariant_violation_on_load() {
        let text = serialize_model(&toy_model(2)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["tau"] = serde_json::json!(-1.0);
        assert!(matches!(
            deserialize_model(&v.to_string()),
            Err(SmdsError::InvalidModel(_))
        ));
    }
}
