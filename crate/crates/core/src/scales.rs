//! Static norm-input scales computed from the weights of the preceding block.
//!
//! Each norm that follows a block gets the Frobenius norm of the linearized
//! map from the normalized block input to the block output plus residual:
//!
//! | block          | scale                              |
//! |----------------|------------------------------------|
//! | standard MLP   | `‖Γ (E G + I)‖_F`                  |
//! | gated MLP      | `‖Γ (‖Γ E‖₂ · B G + I)‖_F`         |
//! | attention      | `‖Γ (W_V P + I)‖_F`                |
//!
//! where `Γ = diag(γ)` belongs to the norm feeding the block. The norm fed by
//! raw embeddings has scale 1. A norm scaled by `s` divides its input by `s`
//! and its epsilon by `s²`, which leaves its output unchanged.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, frobenius_norm, matmul, spectral_norm, LinalgError, PowerIteration, RealMatrix, RealVector};
use crate::model::{MlpKind, ModelGraph, NormFeed, NormSite};

/// Scales below this (2^-24, the smallest binary16 subnormal) are rejected.
pub const DEGENERATE_THRESHOLD: f64 = 5.960464477539063e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScaleError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("{what} has non-finite entry at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("degenerate scale {value:e}{}", norm_id.as_ref().map(|n| format!(" for norm `{n}`")).unwrap_or_default())]
    Degenerate { value: f64, norm_id: Option<String> },
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

impl ScaleError {
    fn at_norm(self, id: &str) -> Self {
        match self {
            ScaleError::Degenerate { value, .. } => ScaleError::Degenerate {
                value,
                norm_id: Some(id.to_string()),
            },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScaleFormula {
    StandardMlp,
    LlamaMlp,
    Attention,
    Unit,
    /// Measured from calibration data rather than derived from weights.
    Dynamic,
}

impl fmt::Display for ScaleFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormScale {
    pub norm_id: String,
    #[serde(rename = "layer")]
    pub layer_index: i64,
    pub formula: ScaleFormula,
    pub s: f64,
    pub reciprocal: f64,
    #[serde(rename = "eps_adjusted")]
    pub epsilon_adjusted: f64,
}

impl NormScale {
    pub fn new(
        norm_id: impl Into<String>,
        layer_index: i64,
        formula: ScaleFormula,
        s: f64,
        epsilon: f64,
    ) -> Result<Self, ScaleError> {
        let norm_id = norm_id.into();
        let s = check_scale(s).map_err(|e| e.at_norm(&norm_id))?;
        Ok(Self {
            norm_id,
            layer_index,
            formula,
            s,
            reciprocal: 1.0 / s,
            epsilon_adjusted: adjust_epsilon(epsilon, s),
        })
    }

    pub fn unit(norm_id: impl Into<String>, layer_index: i64, epsilon: f64) -> Self {
        Self::new(norm_id, layer_index, ScaleFormula::Unit, 1.0, epsilon).expect("unit scale")
    }
}

/// Per-norm scales of one model, in graph order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTable {
    pub fingerprint: String,
    pub entries: Vec<NormScale>,
}

impl ScaleTable {
    pub fn get(&self, norm_id: &str) -> Option<&NormScale> {
        self.entries.iter().find(|e| e.norm_id == norm_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// JSON with all doubles at 17 significant digits.
    pub fn to_json(&self) -> String {
        crate::json::to_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn check_scale(s: f64) -> Result<f64, ScaleError> {
    if s.is_finite() && s >= DEGENERATE_THRESHOLD {
        Ok(s)
    } else {
        Err(ScaleError::Degenerate {
            value: s,
            norm_id: None,
        })
    }
}

fn check_finite(what: &'static str, data: &[f64]) -> Result<(), ScaleError> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(ScaleError::NonFinite { what, index }),
        None => Ok(()),
    }
}

fn dims(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> ScaleError {
    ScaleError::Linalg(LinalgError::DimensionMismatch { op, lhs, rhs })
}

/// `‖diag(gamma) (M + I)‖_F` for square `M`.
fn gamma_residual_frobenius(gamma: &RealVector, m: &RealMatrix) -> Result<f64, ScaleError> {
    let d = gamma.len();
    if m.shape() != (d, d) {
        return Err(dims("residual", (d, d), m.shape()));
    }
    let with_identity = linalg::add(m, &linalg::identity(d))?;
    Ok(frobenius_norm(&with_identity.scale_rows(gamma)?))
}

/// `‖Γ (E G + I)‖_F`.
pub fn scale_standard_mlp(gamma: &RealVector, e: &RealMatrix, g: &RealMatrix) -> Result<f64, ScaleError> {
    let d = gamma.len();
    if e.rows() != d || g.rows() != e.cols() || g.cols() != d {
        return Err(dims("standard_mlp", e.shape(), g.shape()));
    }
    check_finite("gamma", gamma.as_slice())?;
    check_finite("e", e.data())?;
    check_finite("g", g.data())?;
    check_scale(gamma_residual_frobenius(gamma, &matmul(e, g)?)?)
}

/// `‖Γ (‖Γ E‖₂ · B G + I)‖_F`.
pub fn scale_llama_mlp(
    gamma: &RealVector,
    e: &RealMatrix,
    b: &RealMatrix,
    g: &RealMatrix,
    power: PowerIteration,
) -> Result<f64, ScaleError> {
    let d = gamma.len();
    if e.rows() != d || b.shape() != e.shape() || g.rows() != b.cols() || g.cols() != d {
        return Err(dims("llama_mlp", b.shape(), g.shape()));
    }
    check_finite("gamma", gamma.as_slice())?;
    check_finite("e", e.data())?;
    check_finite("b", b.data())?;
    check_finite("g", g.data())?;
    let gate = spectral_norm(&e.scale_rows(gamma)?, power)?.value;
    let bg = linalg::scale(&matmul(b, g)?, gate);
    check_scale(gamma_residual_frobenius(gamma, &bg)?)
}

/// `‖Γ (W_V P + I)‖_F`, with `W_V` the concatenated per-head value projections.
pub fn scale_attention(gamma: &RealVector, w_v: &RealMatrix, p: &RealMatrix) -> Result<f64, ScaleError> {
    let d = gamma.len();
    if w_v.rows() != d || p.rows() != w_v.cols() || p.cols() != d {
        return Err(dims("attention", w_v.shape(), p.shape()));
    }
    check_finite("gamma", gamma.as_slice())?;
    check_finite("w_v", w_v.data())?;
    check_finite("p", p.data())?;
    check_scale(gamma_residual_frobenius(gamma, &matmul(w_v, p)?)?)
}

/// `epsilon / s²`.
#[inline]
pub fn adjust_epsilon(epsilon: f64, s: f64) -> f64 {
    epsilon / (s * s)
}

pub fn compute_scale_table(graph: &ModelGraph) -> Result<ScaleTable, ScaleError> {
    compute_scale_table_with(graph, PowerIteration::default())
}

pub fn compute_scale_table_with(graph: &ModelGraph, power: PowerIteration) -> Result<ScaleTable, ScaleError> {
    let report = graph.validate();
    if !report.is_valid() {
        return Err(ScaleError::InvalidModel(report.to_string()));
    }
    let entries = graph
        .norm_sites()
        .iter()
        .map(|site| scale_for_site(graph, site, power))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScaleTable {
        fingerprint: graph.fingerprint(),
        entries,
    })
}

/// Scale of one norm from the block that feeds it. The graph is assumed valid.
pub fn scale_for_site(graph: &ModelGraph, site: &NormSite, power: PowerIteration) -> Result<NormScale, ScaleError> {
    let eps = graph.config.epsilon;
    let layer = site.layer_index();
    Ok(match site.feed {
        NormFeed::Embeddings => NormScale::unit(site.id.clone(), layer, eps),
        NormFeed::Attention(i) => {
            let gamma = graph.block_input_gamma(site.feed).expect("block-fed norm");
            let l = &graph.layers[i];
            let s = scale_attention(gamma, &l.w_v, &l.p).map_err(|e| e.at_norm(&site.id))?;
            NormScale::new(site.id.clone(), layer, ScaleFormula::Attention, s, eps)?
        }
        NormFeed::Mlp(i) => {
            let gamma = graph.block_input_gamma(site.feed).expect("block-fed norm");
            let l = &graph.layers[i];
            let (formula, s) = match graph.config.mlp_kind {
                MlpKind::Standard => (ScaleFormula::StandardMlp, scale_standard_mlp(gamma, &l.e, &l.g)),
                MlpKind::LlamaGated => {
                    let b = l.b.as_ref().expect("validated gated MLP");
                    (ScaleFormula::LlamaMlp, scale_llama_mlp(gamma, &l.e, b, &l.g, power))
                }
            };
            let s = s.map_err(|e| e.at_norm(&site.id))?;
            NormScale::new(site.id.clone(), layer, formula, s, eps)?
        }
    })
}
