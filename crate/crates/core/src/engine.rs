//! Instrumented forward pass of the toy decoder stack.
//!
//! Two precision knobs are modelled. The norm's sum of squares is either
//! accumulated in double precision or sequentially in emulated binary16, and
//! activations are either kept in double precision or rounded to binary16
//! after every operation (matmuls still accumulate in double). Every norm
//! evaluation leaves a [`NormAuditRecord`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fp16::{self, Fp16Bits};
use crate::linalg::{matmul, LinalgError, RealMatrix};
use crate::model::{DecoderWeights, MlpKind, ModelConfig, ModelGraph, Nonlinearity, NormKind, ResidualPlacement};
use crate::scales::{NormScale, ScaleError, ScaleFormula, ScaleTable};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("scale table fingerprint {table} does not match model {model}")]
    FingerprintMismatch { table: String, model: String },
    #[error("scale table has no entry for norm `{0}`")]
    MissingScale(String),
    #[error("non-positive variance at norm `{}` token {}", .0.norm_id, .0.token_index)]
    NonPositiveVariance(Box<NormAuditRecord>),
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Scale(#[from] ScaleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Accumulation {
    FP64,
    FP16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Storage {
    FP64,
    /// Round to binary16 between operations.
    FP16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    pub norm_accumulation: Accumulation,
    pub activations: Storage,
}

impl PrecisionPolicy {
    pub const REFERENCE: Self = Self {
        norm_accumulation: Accumulation::FP64,
        activations: Storage::FP64,
    };
    /// Binary16 activations and binary16 sum-of-squares accumulation.
    pub const FP16: Self = Self {
        norm_accumulation: Accumulation::FP16,
        activations: Storage::FP16,
    };
    /// Only the norm's accumulation is binary16.
    pub const FP16_ACCUMULATION: Self = Self {
        norm_accumulation: Accumulation::FP16,
        activations: Storage::FP64,
    };

    pub fn is_reference(self) -> bool {
        self == Self::REFERENCE
    }

    #[inline]
    fn store(self, x: f64) -> f64 {
        match self.activations {
            Storage::FP64 => x,
            Storage::FP16 => fp16::round_trip(x),
        }
    }

    fn store_all(self, m: &mut RealMatrix) {
        if self.activations == Storage::FP16 {
            m.data_mut().iter_mut().for_each(|x| *x = fp16::round_trip(*x));
        }
    }
}

/// What happened inside one norm evaluation for one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormAuditRecord {
    pub norm_id: String,
    pub token_index: usize,
    /// Exact sum of squares of the (scaled) norm input.
    pub raw_sum_of_squares: f64,
    /// The emulated binary16 sum, when the accumulation ran in binary16.
    pub fp16_sum: Option<Fp16Bits>,
    pub overflowed: bool,
    pub underflowed_to_zero: bool,
    pub scale_applied: f64,
}

pub struct NormParams<'a> {
    pub id: &'a str,
    pub kind: NormKind,
    pub gamma: &'a [f64],
    pub beta: Option<&'a [f64]>,
    /// Used as-is when no scale is supplied.
    pub epsilon: f64,
}

/// LayerNorm/RMSNorm of one row.
///
/// The input is first multiplied by the scale's reciprocal. The sum of
/// squares is accumulated raw and divided by `d` afterwards; the mean, the
/// division, the square root and the gamma/beta epilogue are in double
/// precision under every policy.
pub fn norm_forward(
    x: &[f64],
    params: &NormParams<'_>,
    policy: PrecisionPolicy,
    scale: Option<&NormScale>,
    token_index: usize,
) -> Result<(Vec<f64>, NormAuditRecord), EngineError> {
    let d = x.len();
    if d == 0 || params.gamma.len() != d || params.beta.is_some_and(|b| b.len() != d) {
        return Err(EngineError::Shape(format!(
            "norm `{}`: input {d}, gamma {}",
            params.id,
            params.gamma.len()
        )));
    }
    let (s, reciprocal, eps) = match scale {
        Some(sc) => (sc.s, sc.reciprocal, sc.epsilon_adjusted),
        None => (1.0, 1.0, params.epsilon),
    };
    let binary16_input = policy.norm_accumulation == Accumulation::FP16 || policy.activations == Storage::FP16;
    let scaled: Vec<f64> = x
        .iter()
        .map(|&v| {
            let v = v * reciprocal;
            if binary16_input {
                fp16::round_trip(v)
            } else {
                v
            }
        })
        .collect();

    let (sum_sq, record) = match policy.norm_accumulation {
        Accumulation::FP16 => {
            let bits: Vec<Fp16Bits> = scaled.iter().copied().map(fp16::encode).collect();
            let trace = fp16::accumulate_squares(&bits).expect("non-empty row");
            (
                fp16::decode(trace.final_sum),
                NormAuditRecord {
                    norm_id: params.id.to_string(),
                    token_index,
                    raw_sum_of_squares: trace.exact_sum,
                    fp16_sum: Some(trace.final_sum),
                    overflowed: trace.overflowed,
                    underflowed_to_zero: trace.underflowed_to_zero,
                    scale_applied: s,
                },
            )
        }
        Accumulation::FP64 => {
            let sum: f64 = scaled.iter().map(|v| v * v).sum();
            (
                sum,
                NormAuditRecord {
                    norm_id: params.id.to_string(),
                    token_index,
                    raw_sum_of_squares: sum,
                    fp16_sum: None,
                    overflowed: false,
                    underflowed_to_zero: false,
                    scale_applied: s,
                },
            )
        }
    };

    let n = d as f64;
    let mean = match params.kind {
        NormKind::LayerNorm => scaled.iter().sum::<f64>() / n,
        NormKind::RMSNorm => 0.0,
    };
    let variance = sum_sq / n - mean * mean + eps;
    if variance <= 0.0 {
        return Err(EngineError::NonPositiveVariance(Box::new(record)));
    }
    let sigma = variance.sqrt();
    let beta = match params.kind {
        NormKind::LayerNorm => params.beta,
        NormKind::RMSNorm => None,
    };
    let y = scaled
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut out = (v - mean) / sigma * params.gamma[i];
            if let Some(b) = beta {
                out += b[i];
            }
            policy.store(out)
        })
        .collect();
    Ok((y, record))
}

fn check_cols(x: &RealMatrix, d: usize, what: &str) -> Result<(), EngineError> {
    if x.cols() != d {
        return Err(EngineError::Shape(format!(
            "{what}: expected {d} columns, got {}",
            x.cols()
        )));
    }
    Ok(())
}

fn project(x: &RealMatrix, w: &RealMatrix, policy: PrecisionPolicy) -> Result<RealMatrix, EngineError> {
    let mut out = matmul(x, w)?;
    policy.store_all(&mut out);
    Ok(out)
}

/// Causal softmax weights of one head, `n x n`, zero above the diagonal.
pub fn attention_weights(q: &RealMatrix, k: &RealMatrix, head: usize, head_dim: usize) -> RealMatrix {
    let n = q.rows();
    let cols = head * head_dim..(head + 1) * head_dim;
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut w = RealMatrix::zeros(n, n);
    for i in 0..n {
        let qi = &q.row(i)[cols.clone()];
        let scores: Vec<f64> = (0..=i)
            .map(|j| {
                let kj = &k.row(j)[cols.clone()];
                qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            w.set(i, j, e / total);
        }
    }
    w
}

/// Multi-head causal self-attention, output projection included, residual not.
pub fn attention_forward(
    x: &RealMatrix,
    layer: &DecoderWeights,
    config: &ModelConfig,
    policy: PrecisionPolicy,
) -> Result<RealMatrix, EngineError> {
    check_cols(x, config.d_model, "attention input")?;
    let q = project(x, &layer.w_q, policy)?;
    let k = project(x, &layer.w_k, policy)?;
    let v = project(x, &layer.w_v, policy)?;
    let n = x.rows();
    let hd = config.head_dim;
    let mut heads = RealMatrix::zeros(n, config.d_model);
    for h in 0..config.n_heads {
        let w = attention_weights(&q, &k, h, hd);
        for i in 0..n {
            let mut acc = vec![0.0; hd];
            for j in 0..=i {
                let wij = w.get(i, j);
                let vj = &v.row(j)[h * hd..(h + 1) * hd];
                for (a, &vv) in acc.iter_mut().zip(vj) {
                    *a += wij * vv;
                }
            }
            heads.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(&acc);
        }
    }
    policy.store_all(&mut heads);
    project(&heads, &layer.p, policy)
}

/// `F(X E) G` or `(F(X E) ⊙ X B) G`; residual not included.
pub fn mlp_forward(
    x: &RealMatrix,
    layer: &DecoderWeights,
    kind: MlpKind,
    nonlinearity: Nonlinearity,
    policy: PrecisionPolicy,
) -> Result<RealMatrix, EngineError> {
    let mut hidden = project(x, &layer.e, policy)?;
    hidden
        .data_mut()
        .iter_mut()
        .for_each(|h| *h = policy.store(nonlinearity.apply(*h)));
    if kind == MlpKind::LlamaGated {
        let b = layer
            .b
            .as_ref()
            .ok_or_else(|| EngineError::Shape("gated MLP without up projection".into()))?;
        let up = project(x, b, policy)?;
        hidden
            .data_mut()
            .iter_mut()
            .zip(up.data())
            .for_each(|(h, &u)| *h = policy.store(*h * u));
    }
    project(&hidden, &layer.g, policy)
}

pub const HISTOGRAM_MIN_EXP: i32 = -30;
pub const HISTOGRAM_MAX_EXP: i32 = 30;

/// Counts of values by binary exponent: bucket `k` holds `[2^k, 2^(k+1))`
/// for `k` in -30..=30; smaller values (zero included) go to `underflow`,
/// larger or non-finite ones to `overflow`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Log2Histogram {
    pub underflow: u64,
    pub buckets: Vec<u64>,
    pub overflow: u64,
}

impl Default for Log2Histogram {
    fn default() -> Self {
        Self {
            underflow: 0,
            buckets: vec![0; (HISTOGRAM_MAX_EXP - HISTOGRAM_MIN_EXP + 1) as usize],
            overflow: 0,
        }
    }
}

impl Log2Histogram {
    pub fn add(&mut self, x: f64) {
        if !x.is_finite() {
            self.overflow += 1;
            return;
        }
        let x = x.abs();
        if x < 2f64.powi(HISTOGRAM_MIN_EXP) {
            self.underflow += 1;
            return;
        }
        let exp = ((x.to_bits() >> 52) & 0x7FF) as i32 - 1023;
        if exp > HISTOGRAM_MAX_EXP {
            self.overflow += 1;
        } else {
            self.buckets[(exp - HISTOGRAM_MIN_EXP) as usize] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.underflow + self.overflow + self.buckets.iter().sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormHistogram {
    pub norm_id: String,
    pub histogram: Log2Histogram,
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub output: RealMatrix,
    /// Norm-major: every token of the first norm, then the next norm.
    pub audit: Vec<NormAuditRecord>,
    pub histograms: Vec<NormHistogram>,
}

impl ForwardResult {
    pub fn overflow_count(&self) -> usize {
        self.audit.iter().filter(|r| r.overflowed).count()
    }

    pub fn underflow_count(&self) -> usize {
        self.audit.iter().filter(|r| r.underflowed_to_zero).count()
    }
}

struct Pass<'a> {
    graph: &'a ModelGraph,
    policy: PrecisionPolicy,
    scales: Option<&'a ScaleTable>,
    audit: Vec<NormAuditRecord>,
}

impl Pass<'_> {
    fn norm(&mut self, site: &crate::model::NormSite, x: &RealMatrix) -> Result<RealMatrix, EngineError> {
        let (gamma, beta) = self.graph.norm_params(site.slot);
        let params = NormParams {
            id: &site.id,
            kind: self.graph.config.norm_kind,
            gamma: gamma.as_slice(),
            beta: beta.map(|b| b.as_slice()),
            epsilon: self.graph.config.epsilon,
        };
        let scale = match self.scales {
            Some(t) => Some(
                t.get(&site.id)
                    .ok_or_else(|| EngineError::MissingScale(site.id.clone()))?,
            ),
            None => None,
        };
        let mut out = RealMatrix::zeros(x.rows(), x.cols());
        for t in 0..x.rows() {
            let (y, record) = norm_forward(x.row(t), &params, self.policy, scale, t)?;
            out.row_mut(t).copy_from_slice(&y);
            self.audit.push(record);
        }
        Ok(out)
    }

    fn residual(&self, a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix, EngineError> {
        let mut sum = crate::linalg::add(a, b)?;
        self.policy.store_all(&mut sum);
        Ok(sum)
    }
}

/// Run the decoder stack over one sequence `x0` (`n_tokens x d_model`).
pub fn forward(
    graph: &ModelGraph,
    x0: &RealMatrix,
    policy: PrecisionPolicy,
    scales: Option<&ScaleTable>,
) -> Result<ForwardResult, EngineError> {
    let cfg = &graph.config;
    check_cols(x0, cfg.d_model, "input")?;
    if graph.layers.len() != cfg.n_layers {
        return Err(EngineError::Shape(format!(
            "config has {} layers, graph {}",
            cfg.n_layers,
            graph.layers.len()
        )));
    }
    if let Some(t) = scales {
        let model = graph.fingerprint();
        if t.fingerprint != model {
            return Err(EngineError::FingerprintMismatch {
                table: t.fingerprint.clone(),
                model,
            });
        }
    }
    let sites = graph.norm_sites();
    let mut pass = Pass {
        graph,
        policy,
        scales,
        audit: Vec::with_capacity(sites.len() * x0.rows()),
    };

    let mut h = x0.clone();
    policy.store_all(&mut h);
    let n = cfg.n_layers;
    match cfg.residual_placement {
        _ if n == 0 => {}
        ResidualPlacement::PostLN => {
            h = pass.norm(&sites[0], &h)?;
            for (i, layer) in graph.layers.iter().enumerate() {
                let a = attention_forward(&h, layer, cfg, policy)?;
                h = pass.residual(&h, &a)?;
                h = pass.norm(&sites[1 + 2 * i], &h)?;
                let m = mlp_forward(&h, layer, cfg.mlp_kind, cfg.nonlinearity, policy)?;
                h = pass.residual(&h, &m)?;
                h = pass.norm(&sites[2 + 2 * i], &h)?;
            }
        }
        ResidualPlacement::PreLN => {
            for (i, layer) in graph.layers.iter().enumerate() {
                let normed = pass.norm(&sites[2 * i], &h)?;
                let a = attention_forward(&normed, layer, cfg, policy)?;
                h = pass.residual(&h, &a)?;
                let normed = pass.norm(&sites[2 * i + 1], &h)?;
                let m = mlp_forward(&normed, layer, cfg.mlp_kind, cfg.nonlinearity, policy)?;
                h = pass.residual(&h, &m)?;
            }
            h = pass.norm(&sites[2 * n], &h)?;
        }
    }

    let audit = pass.audit;
    let histograms = sites
        .iter()
        .map(|site| {
            let mut histogram = Log2Histogram::default();
            audit
                .iter()
                .filter(|r| r.norm_id == site.id)
                .for_each(|r| histogram.add(r.raw_sum_of_squares));
            NormHistogram {
                norm_id: site.id.clone(),
                histogram,
            }
        })
        .collect();
    Ok(ForwardResult {
        output: h,
        audit,
        histograms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Statistic {
    Mean,
    Median,
}

impl Statistic {
    pub fn apply(self, values: &mut [f64]) -> f64 {
        match self {
            Statistic::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Statistic::Median => {
                values.sort_by(f64::total_cmp);
                let n = values.len();
                if n % 2 == 1 {
                    values[n / 2]
                } else {
                    0.5 * (values[n / 2 - 1] + values[n / 2])
                }
            }
        }
    }
}

/// Scales measured from data: each norm's scale is the chosen statistic of
/// the Euclidean norms of its input rows over all calibration tokens, taken
/// from an unscaled reference pass.
pub fn calibrate_dynamic(
    graph: &ModelGraph,
    inputs: &[RealMatrix],
    statistic: Statistic,
) -> Result<ScaleTable, EngineError> {
    if inputs.is_empty() || inputs.iter().all(|x| x.rows() == 0) {
        return Err(EngineError::EmptyCalibration);
    }
    let sites = graph.norm_sites();
    let mut norms: Vec<Vec<f64>> = vec![Vec::new(); sites.len()];
    for x in inputs {
        let result = forward(graph, x, PrecisionPolicy::REFERENCE, None)?;
        for (k, chunk) in result.audit.chunks(x.rows().max(1)).enumerate() {
            norms[k].extend(chunk.iter().map(|r| r.raw_sum_of_squares.sqrt()));
        }
    }
    let entries = sites
        .iter()
        .zip(norms.iter_mut())
        .map(|(site, values)| {
            let s = statistic.apply(values);
            NormScale::new(
                site.id.clone(),
                site.layer_index(),
                ScaleFormula::Dynamic,
                s,
                graph.config.epsilon,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScaleTable {
        fingerprint: graph.fingerprint(),
        entries,
    })
}

/// `n_tokens x d` i.i.d. standard normal activations.
pub fn gaussian_inputs(n_tokens: usize, d: usize, seed: u64) -> RealMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n_tokens * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    RealMatrix::new(n_tokens, d, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_synthetic, InitSpec};
    use crate::scales::compute_scale_table;

    fn rms(x: &[f64], scale: Option<&NormScale>, eps: f64, policy: PrecisionPolicy) -> Vec<f64> {
        let gamma = vec![1.0; x.len()];
        let p = NormParams {
            id: "n",
            kind: NormKind::RMSNorm,
            gamma: &gamma,
            beta: None,
            epsilon: eps,
        };
        norm_forward(x, &p, policy, scale, 0).unwrap().0
    }

    #[test]
    fn rms_norm_example() {
        let y = rms(&[2.0, 0.0, 0.0, 0.0], None, 1e-300, PrecisionPolicy::REFERENCE);
        assert_eq!(y, [2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_of_constant_is_beta() {
        let gamma = [1.5, -2.0, 0.5];
        let beta = [0.1, 0.2, -0.3];
        let p = NormParams {
            id: "n",
            kind: NormKind::LayerNorm,
            gamma: &gamma,
            beta: Some(&beta),
            epsilon: 1e-5,
        };
        for c in [0.0, 1.0, -7.25, 1e3] {
            let (y, _) = norm_forward(&[c; 3], &p, PrecisionPolicy::REFERENCE, None, 0).unwrap();
            for (a, b) in y.iter().zip(beta) {
                assert!((a - b).abs() < 1e-9, "{c}: {y:?}");
            }
        }
    }

    #[test]
    fn rms_homogeneity_by_hand() {
        let x = [0.3, -1.7, 2.2, 0.05, -0.9];
        let a = rms(&x, None, 1e-5, PrecisionPolicy::REFERENCE);
        let x10: Vec<f64> = x.iter().map(|v| v / 10.0).collect();
        let b = rms(&x10, None, 1e-7, PrecisionPolicy::REFERENCE);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }

    #[test]
    fn fp16_norm_flags_overflow() {
        let x = vec![16.0; 300];
        let gamma = vec![1.0; 300];
        let p = NormParams {
            id: "n",
            kind: NormKind::RMSNorm,
            gamma: &gamma,
            beta: None,
            epsilon: 1e-5,
        };
        let (y, rec) = norm_forward(&x, &p, PrecisionPolicy::FP16, None, 4).unwrap();
        assert!(rec.overflowed);
        assert_eq!(rec.fp16_sum, Some(Fp16Bits::INFINITY));
        assert_eq!(rec.raw_sum_of_squares, 76800.0);
        assert_eq!(rec.token_index, 4);
        assert!(y.iter().all(|&v| v == 0.0));

        let scale = NormScale::new("n", 0, ScaleFormula::Attention, 16.0, 1e-5).unwrap();
        let (y, rec) = norm_forward(&x, &p, PrecisionPolicy::FP16, Some(&scale), 0).unwrap();
        assert!(!rec.overflowed);
        assert_eq!(rec.raw_sum_of_squares, 300.0);
        assert_eq!(rec.scale_applied, 16.0);
        assert!(y.iter().all(|&v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn fp16_layer_norm_can_report_non_positive_variance() {
        // Tiny inputs: every square underflows to zero but the mean survives.
        let x = vec![1e-4; 8];
        let gamma = vec![1.0; 8];
        let p = NormParams {
            id: "ln",
            kind: NormKind::LayerNorm,
            gamma: &gamma,
            beta: None,
            epsilon: 1e-12,
        };
        match norm_forward(&x, &p, PrecisionPolicy::FP16, None, 2) {
            Err(EngineError::NonPositiveVariance(rec)) => {
                assert!(rec.underflowed_to_zero);
                assert_eq!(rec.token_index, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let g = generate_synthetic(&ModelConfig::toy(8, 1), &InitSpec::uniform_std(0.3), 5).unwrap();
        let x = gaussian_inputs(1, 8, 1);
        let out = attention_forward(&x, &g.layers[0], &g.config, PrecisionPolicy::REFERENCE).unwrap();
        let expected = matmul(&matmul(&x, &g.layers[0].w_v).unwrap(), &g.layers[0].p).unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }

    #[test]
    fn mlp_zero_cases() {
        let cfg = ModelConfig {
            mlp_kind: MlpKind::Standard,
            nonlinearity: Nonlinearity::ReLU,
            ..ModelConfig::toy(4, 1)
        };
        let mut g = generate_synthetic(&cfg, &InitSpec::uniform_std(0.5), 1).unwrap();
        g.layers[0].e = g.layers[0].e.map(|v| -v.abs());
        let x = RealMatrix::new(2, 4, vec![1.0, 2.0, 0.5, 3.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let out = mlp_forward(
            &x,
            &g.layers[0],
            MlpKind::Standard,
            Nonlinearity::ReLU,
            PrecisionPolicy::REFERENCE,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let mut g = generate_synthetic(&ModelConfig::toy(4, 1), &InitSpec::uniform_std(0.5), 1).unwrap();
        g.layers[0].b = Some(RealMatrix::zeros(4, 16));
        let out = mlp_forward(
            &x,
            &g.layers[0],
            MlpKind::LlamaGated,
            Nonlinearity::SiLU,
            PrecisionPolicy::REFERENCE,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_stack_is_identity() {
        let g = generate_synthetic(&ModelConfig::toy(8, 0), &InitSpec::default(), 1).unwrap();
        let x = gaussian_inputs(3, 8, 2);
        let r = forward(&g, &x, PrecisionPolicy::REFERENCE, None).unwrap();
        assert_eq!(r.output, x);
        assert!(r.audit.is_empty());
    }

    #[test]
    fn forward_rejects_foreign_table() {
        let g = generate_synthetic(&ModelConfig::toy(8, 1), &InitSpec::default(), 1).unwrap();
        let other = generate_synthetic(&ModelConfig::toy(8, 1), &InitSpec::default(), 2).unwrap();
        let t = compute_scale_table(&other).unwrap();
        let x = gaussian_inputs(2, 8, 2);
        assert!(matches!(
            forward(&g, &x, PrecisionPolicy::REFERENCE, Some(&t)),
            Err(EngineError::FingerprintMismatch { .. })
        ));
        assert!(matches!(
            forward(&g, &gaussian_inputs(2, 7, 0), PrecisionPolicy::REFERENCE, None),
            Err(EngineError::Shape(_))
        ));
    }

    #[test]
    fn histogram_bins() {
        let mut h = Log2Histogram::default();
        for x in [
            0.0,
            1e-12,
            1.0,
            1.5,
            2.0,
            65504.0,
            2f64.powi(31),
            f64::INFINITY,
            f64::NAN,
        ] {
            h.add(x);
        }
        assert_eq!(h.underflow, 2);
        assert_eq!(h.overflow, 3);
        assert_eq!(h.buckets[30], 2);
        assert_eq!(h.buckets[31], 1);
        assert_eq!(h.buckets[45], 1);
        assert_eq!(h.total(), 9);
    }

    #[test]
    fn dynamic_calibration_singleton() {
        // One post-LN layer with zero weights: the embedding norm sees the raw token.
        let g = generate_synthetic(&ModelConfig::toy(4, 1), &InitSpec::uniform_std(0.0), 0).unwrap();
        let x = RealMatrix::new(1, 4, vec![8.0, 0.0, 0.0, 0.0]).unwrap();
        for stat in [Statistic::Mean, Statistic::Median] {
            let t = calibrate_dynamic(&g, std::slice::from_ref(&x), stat).unwrap();
            assert_eq!(t.entries[0].s, 8.0);
            assert_eq!(t.entries[0].formula, ScaleFormula::Dynamic);
        }
        assert!(matches!(
            calibrate_dynamic(&g, &[], Statistic::Mean),
            Err(EngineError::EmptyCalibration)
        ));
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(Statistic::Median.apply(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(Statistic::Median.apply(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(Statistic::Mean.apply(&mut [1.0, 2.0, 6.0]), 3.0);
    }
}
