//! Audit and comparison reports built from forward-pass results.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::{ForwardResult, Log2Histogram, PrecisionPolicy, HISTOGRAM_MAX_EXP, HISTOGRAM_MIN_EXP};
use crate::fp16::Fp16Bits;
use crate::json;
use crate::linalg::RealMatrix;
use crate::model::ModelGraph;
use crate::scales::ScaleTable;

/// Per-norm summary of one audited forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormAudit {
    pub norm_id: String,
    pub layer: i64,
    pub scale: f64,
    pub tokens: usize,
    pub overflow_count: usize,
    pub underflow_count: usize,
    #[serde(with = "json::maybe_finite")]
    pub min_raw_sum_of_squares: f64,
    #[serde(with = "json::maybe_finite")]
    pub max_raw_sum_of_squares: f64,
    pub histogram: Log2Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub fingerprint: String,
    pub policy: PrecisionPolicy,
    pub scaled: bool,
    pub n_tokens: usize,
    /// Largest finite binary16 value, for the overflow cut-off line.
    pub fp16_max: f64,
    /// Smallest normal binary16 value, for the underflow cut-off line.
    pub fp16_min_normal: f64,
    pub histogram_min_exp: i32,
    pub histogram_max_exp: i32,
    pub norms: Vec<NormAudit>,
}

impl AuditReport {
    pub fn new(
        graph: &ModelGraph,
        result: &ForwardResult,
        policy: PrecisionPolicy,
        scales: Option<&ScaleTable>,
        n_tokens: usize,
    ) -> Self {
        let norms = graph
            .norm_sites()
            .iter()
            .zip(&result.histograms)
            .map(|(site, hist)| {
                let records: Vec<_> = result.audit.iter().filter(|r| r.norm_id == site.id).collect();
                let raw = records.iter().map(|r| r.raw_sum_of_squares);
                NormAudit {
                    norm_id: site.id.clone(),
                    layer: site.layer_index(),
                    scale: scales.and_then(|t| t.get(&site.id)).map_or(1.0, |e| e.s),
                    tokens: records.len(),
                    overflow_count: records.iter().filter(|r| r.overflowed).count(),
                    underflow_count: records.iter().filter(|r| r.underflowed_to_zero).count(),
                    min_raw_sum_of_squares: raw.clone().fold(f64::INFINITY, nan_min),
                    max_raw_sum_of_squares: raw.fold(0.0, nan_max),
                    histogram: hist.histogram.clone(),
                }
            })
            .collect();
        Self {
            fingerprint: graph.fingerprint(),
            policy,
            scaled: scales.is_some(),
            n_tokens,
            fp16_max: Fp16Bits::MAX_VALUE,
            fp16_min_normal: Fp16Bits::MIN_NORMAL_VALUE,
            histogram_min_exp: HISTOGRAM_MIN_EXP,
            histogram_max_exp: HISTOGRAM_MAX_EXP,
            norms,
        }
    }

    pub fn overflow_count(&self) -> usize {
        self.norms.iter().map(|n| n.overflow_count).sum()
    }

    pub fn underflow_count(&self) -> usize {
        self.norms.iter().map(|n| n.underflow_count).sum()
    }

    pub fn to_json(&self) -> String {
        json::to_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Histogram table: one row per bin, one column per norm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lower_bound");
        for n in &self.norms {
            out.push(',');
            out.push_str(&n.norm_id);
        }
        out.push('\n');
        let mut row = |label: &str, lower: &str, pick: &dyn Fn(&Log2Histogram) -> u64| {
            let _ = write!(out, "{label},{lower}");
            for n in &self.norms {
                let _ = write!(out, ",{}", pick(&n.histogram));
            }
            out.push('\n');
        };
        row("underflow", "0", &|h| h.underflow);
        for (k, exp) in (HISTOGRAM_MIN_EXP..=HISTOGRAM_MAX_EXP).enumerate() {
            row(&exp.to_string(), &format!("{:e}", 2f64.powi(exp)), &|h| h.buckets[k]);
        }
        row("overflow", &format!("{:e}", 2f64.powi(HISTOGRAM_MAX_EXP + 1)), &|h| {
            h.overflow
        });
        out
    }

    /// One aligned line per norm.
    pub fn to_text(&self) -> String {
        let width = self.norms.iter().map(|n| n.norm_id.len()).max().unwrap_or(4).max(4);
        let mut out = format!(
            "{:<width$} {:>12} {:>8} {:>9} {:>9} {:>14} {:>14}\n",
            "norm", "scale", "tokens", "overflow", "underflow", "min_raw", "max_raw"
        );
        for n in &self.norms {
            let _ = writeln!(
                out,
                "{:<width$} {:>12.5e} {:>8} {:>9} {:>9} {:>14.6e} {:>14.6e}",
                n.norm_id,
                n.scale,
                n.tokens,
                n.overflow_count,
                n.underflow_count,
                n.min_raw_sum_of_squares,
                n.max_raw_sum_of_squares
            );
        }
        out
    }
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn nan_min(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.min(b)
    }
}

/// Elementwise relative differences of `actual` against `reference`.
///
/// Each difference is divided by `max(|reference|, rms(reference row))` so
/// that entries near zero do not blow up the ratio; non-finite results
/// count as infinite.
pub fn relative_errors(actual: &RealMatrix, reference: &RealMatrix) -> Vec<f64> {
    assert_eq!(actual.shape(), reference.shape(), "mismatched outputs");
    let mut errs = Vec::with_capacity(reference.data().len());
    for t in 0..reference.rows() {
        let r = reference.row(t);
        let rms = (r.iter().map(|x| x * x).sum::<f64>() / r.len().max(1) as f64).sqrt();
        for (a, b) in actual.row(t).iter().zip(r) {
            let e = (a - b).abs() / b.abs().max(rms);
            errs.push(if e.is_finite() { e } else { f64::INFINITY });
        }
    }
    errs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mode: String,
    #[serde(with = "json::maybe_finite")]
    pub median_mismatch: f64,
    #[serde(with = "json::maybe_finite")]
    pub max_mismatch: f64,
    pub overflow_count: usize,
    pub underflow_count: usize,
    /// Set when the pass stopped on a numerical failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl CompareRow {
    pub fn reference(result: &ForwardResult) -> Self {
        Self {
            mode: "FP64".into(),
            median_mismatch: 0.0,
            max_mismatch: 0.0,
            overflow_count: result.overflow_count(),
            underflow_count: result.underflow_count(),
            failure: None,
        }
    }

    pub fn against(mode: &str, result: &ForwardResult, reference: &ForwardResult) -> Self {
        let mut errs = relative_errors(&result.output, &reference.output);
        let (median, max) = if errs.is_empty() {
            (0.0, 0.0)
        } else {
            errs.sort_by(f64::total_cmp);
            let n = errs.len();
            let median = if n % 2 == 1 {
                errs[n / 2]
            } else {
                0.5 * (errs[n / 2 - 1] + errs[n / 2])
            };
            (median, errs[n - 1])
        };
        Self {
            mode: mode.into(),
            median_mismatch: median,
            max_mismatch: max,
            overflow_count: result.overflow_count(),
            underflow_count: result.underflow_count(),
            failure: None,
        }
    }

    pub fn failed(mode: &str, message: String) -> Self {
        Self {
            mode: mode.into(),
            median_mismatch: f64::INFINITY,
            max_mismatch: f64::INFINITY,
            overflow_count: 0,
            underflow_count: 0,
            failure: Some(message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub fingerprint: String,
    pub n_tokens: usize,
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn row(&self, mode: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_json(&self) -> String {
        json::to_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,median_rel,max_rel,overflow,underflow,failure\n");
        for r in &self.rows {
            let failure = r.failure.as_deref().unwrap_or("").replace(['"', '\n'], " ");
            let _ = writeln!(
                out,
                "{},{:e},{:e},{},{},\"{failure}\"",
                r.mode, r.median_mismatch, r.max_mismatch, r.overflow_count, r.underflow_count
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>14} {:>14} {:>10} {:>10}\n",
            "mode", "median_rel", "max_rel", "overflow", "underflow"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>14.6e} {:>14.6e} {:>10} {:>10}",
                r.mode, r.median_mismatch, r.max_mismatch, r.overflow_count, r.underflow_count
            );
            if let Some(f) = &r.failure {
                let _ = writeln!(out, "  {}: {f}", r.mode);
            }
        }
        out
    }
}
