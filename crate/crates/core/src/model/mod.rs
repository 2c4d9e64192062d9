//! Model configuration, decoder weights and the norm topology of the toy
//! transformer, plus synthetic weight generation and validation.

mod loader;
pub mod safetensors;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{RealMatrix, RealVector};

pub use loader::{graph_to_safetensors, load_safetensors, load_safetensors_bytes, NameMap};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid init spec: {0}")]
    InvalidInit(String),
    #[error("missing required tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("tensor `{0}` is referenced by more than one role")]
    DuplicateTensor(String),
    #[error("name map: {0}")]
    NameMap(String),
    #[error("model has no decoder layers under template `{0}`")]
    NoLayers(String),
    #[error("invalid model:\n{0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Safetensors(#[from] safetensors::SafetensorsError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormKind {
    LayerNorm,
    RMSNorm,
}

/// Where the residual branch leaves the main path relative to each norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResidualPlacement {
    /// sublayer -> add residual -> norm
    PostLN,
    /// norm -> sublayer -> add residual
    PreLN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MlpKind {
    /// `F(xE) G`
    Standard,
    /// `(F(xE) * xB) G`
    LlamaGated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Nonlinearity {
    ReLU,
    /// Tanh approximation.
    GeLU,
    SiLU,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::ReLU => x.max(0.0),
            Nonlinearity::GeLU => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
            }
            Nonlinearity::SiLU => x / (1.0 + (-x).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub n_layers: usize,
    pub norm_kind: NormKind,
    pub residual_placement: ResidualPlacement,
    pub mlp_kind: MlpKind,
    pub nonlinearity: Nonlinearity,
    pub epsilon: f64,
}

impl ModelConfig {
    /// Small post-LN RMSNorm model with a gated MLP.
    pub fn toy(d_model: usize, n_layers: usize) -> Self {
        Self {
            d_model,
            n_heads: if d_model.is_multiple_of(2) { 2 } else { 1 },
            head_dim: if d_model.is_multiple_of(2) {
                d_model / 2
            } else {
                d_model
            },
            mlp_hidden: 4 * d_model,
            n_layers,
            norm_kind: NormKind::RMSNorm,
            residual_placement: ResidualPlacement::PostLN,
            mlp_kind: MlpKind::LlamaGated,
            nonlinearity: Nonlinearity::SiLU,
            epsilon: 1e-5,
        }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(problems.join("; ")))
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if self.n_heads * self.head_dim != self.d_model {
            out.push(format!(
                "n_heads * head_dim = {} * {} != d_model = {}",
                self.n_heads, self.head_dim, self.d_model
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            out.push(format!("epsilon must be positive and finite, got {}", self.epsilon));
        }
        out
    }

    /// Number of norm operators: two per decoder plus the boundary norm
    /// (embedding norm for post-LN, final norm for pre-LN). An empty stack
    /// has no norms at all.
    pub fn norm_count(&self) -> usize {
        if self.n_layers == 0 {
            0
        } else {
            2 * self.n_layers + 1
        }
    }

    pub fn has_beta(&self) -> bool {
        self.norm_kind == NormKind::LayerNorm
    }

    pub fn has_up_proj(&self) -> bool {
        self.mlp_kind == MlpKind::LlamaGated
    }
}

/// Static weights of one decoder layer. Projections multiply row vectors
/// from the right (`x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    /// Attention-side norm (post-attention for post-LN, pre-attention for pre-LN).
    pub gamma1: RealVector,
    pub beta1: Option<RealVector>,
    /// MLP-side norm.
    pub gamma2: RealVector,
    pub beta2: Option<RealVector>,
    pub w_q: RealMatrix,
    pub w_k: RealMatrix,
    pub w_v: RealMatrix,
    /// Attention output projection.
    pub p: RealMatrix,
    /// `d x mlp_hidden`; gate projection for the gated MLP.
    pub e: RealMatrix,
    /// `d x mlp_hidden` up projection, gated MLP only.
    pub b: Option<RealMatrix>,
    /// `mlp_hidden x d` down projection.
    pub g: RealMatrix,
}

/// Which sublayer produced the input of a norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormFeed {
    Embeddings,
    Attention(usize),
    Mlp(usize),
}

/// Which parameter slot a norm reads its gamma/beta from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormSlot {
    Boundary,
    Attention(usize),
    Mlp(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormSite {
    pub id: String,
    pub feed: NormFeed,
    pub slot: NormSlot,
}

impl NormSite {
    /// Decoder whose block feeds this norm, -1 for the embedding-fed norm.
    pub fn layer_index(&self) -> i64 {
        match self.feed {
            NormFeed::Embeddings => -1,
            NormFeed::Attention(i) | NormFeed::Mlp(i) => i as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub config: ModelConfig,
    /// Embedding norm (post-LN) or final norm (pre-LN).
    pub boundary_gamma: RealVector,
    pub boundary_beta: Option<RealVector>,
    pub layers: Vec<DecoderWeights>,
}

impl ModelGraph {
    /// Norm operators in execution order.
    pub fn norm_sites(&self) -> Vec<NormSite> {
        norm_sites(&self.config)
    }

    pub fn norm_params(&self, slot: NormSlot) -> (&RealVector, Option<&RealVector>) {
        match slot {
            NormSlot::Boundary => (&self.boundary_gamma, self.boundary_beta.as_ref()),
            NormSlot::Attention(i) => (&self.layers[i].gamma1, self.layers[i].beta1.as_ref()),
            NormSlot::Mlp(i) => (&self.layers[i].gamma2, self.layers[i].beta2.as_ref()),
        }
    }

    /// Gamma of the norm whose output enters the given block.
    pub fn block_input_gamma(&self, feed: NormFeed) -> Option<&RealVector> {
        let post = self.config.residual_placement == ResidualPlacement::PostLN;
        match feed {
            NormFeed::Embeddings => None,
            NormFeed::Attention(0) if post => Some(&self.boundary_gamma),
            NormFeed::Attention(i) if post => Some(&self.layers[i - 1].gamma2),
            NormFeed::Attention(i) => Some(&self.layers[i].gamma1),
            NormFeed::Mlp(i) if post => Some(&self.layers[i].gamma1),
            NormFeed::Mlp(i) => Some(&self.layers[i].gamma2),
        }
    }

    /// Every tensor under its canonical role name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = vec![("boundary_gamma".to_string(), TensorRef::Vector(&self.boundary_gamma))];
        if let Some(b) = &self.boundary_beta {
            out.push(("boundary_beta".to_string(), TensorRef::Vector(b)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (role, t) in l.roles() {
                out.push((format!("layers.{i}.{role}"), t));
            }
        }
        out
    }

    /// SHA-256 over the config and every weight (as little-endian f64), hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.tensors() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            let (shape, data) = t.shape_and_data();
            h.update((shape.len() as u64).to_le_bytes());
            for s in shape {
                h.update((s as u64).to_le_bytes());
            }
            for x in data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TensorRef<'a> {
    Vector(&'a RealVector),
    Matrix(&'a RealMatrix),
}

impl TensorRef<'_> {
    pub fn shape_and_data(&self) -> (Vec<usize>, &[f64]) {
        match self {
            TensorRef::Vector(v) => (vec![v.len()], v.as_slice()),
            TensorRef::Matrix(m) => (vec![m.rows(), m.cols()], m.data()),
        }
    }
}

/// Per-layer weight roles, as used by name maps.
pub const LAYER_ROLES: [&str; 11] = [
    "gamma1", "beta1", "gamma2", "beta2", "w_q", "w_k", "w_v", "p", "e", "b", "g",
];

impl DecoderWeights {
    pub fn roles(&self) -> Vec<(&'static str, TensorRef<'_>)> {
        let mut out = vec![("gamma1", TensorRef::Vector(&self.gamma1))];
        if let Some(b) = &self.beta1 {
            out.push(("beta1", TensorRef::Vector(b)));
        }
        out.push(("gamma2", TensorRef::Vector(&self.gamma2)));
        if let Some(b) = &self.beta2 {
            out.push(("beta2", TensorRef::Vector(b)));
        }
        out.push(("w_q", TensorRef::Matrix(&self.w_q)));
        out.push(("w_k", TensorRef::Matrix(&self.w_k)));
        out.push(("w_v", TensorRef::Matrix(&self.w_v)));
        out.push(("p", TensorRef::Matrix(&self.p)));
        out.push(("e", TensorRef::Matrix(&self.e)));
        if let Some(b) = &self.b {
            out.push(("b", TensorRef::Matrix(b)));
        }
        out.push(("g", TensorRef::Matrix(&self.g)));
        out
    }

    pub fn role_mut(&mut self, role: &str) -> Option<&mut RealMatrix> {
        match role {
            "w_q" => Some(&mut self.w_q),
            "w_k" => Some(&mut self.w_k),
            "w_v" => Some(&mut self.w_v),
            "p" => Some(&mut self.p),
            "e" => Some(&mut self.e),
            "b" => self.b.as_mut(),
            "g" => Some(&mut self.g),
            _ => None,
        }
    }
}

/// Expected shape of a per-layer role under a config.
pub fn role_shape(config: &ModelConfig, role: &str) -> Option<Vec<usize>> {
    let d = config.d_model;
    let m = config.mlp_hidden;
    Some(match role {
        "gamma1" | "beta1" | "gamma2" | "beta2" => vec![d],
        "w_q" | "w_k" | "w_v" | "p" => vec![d, d],
        "e" | "b" => vec![d, m],
        "g" => vec![m, d],
        _ => return None,
    })
}

pub fn norm_sites(config: &ModelConfig) -> Vec<NormSite> {
    let n = config.n_layers;
    let mut out = Vec::with_capacity(config.norm_count());
    if n == 0 {
        return out;
    }
    match config.residual_placement {
        ResidualPlacement::PostLN => {
            out.push(NormSite {
                id: "embed_norm".into(),
                feed: NormFeed::Embeddings,
                slot: NormSlot::Boundary,
            });
            for i in 0..n {
                out.push(NormSite {
                    id: format!("layers.{i}.post_attn_norm"),
                    feed: NormFeed::Attention(i),
                    slot: NormSlot::Attention(i),
                });
                out.push(NormSite {
                    id: format!("layers.{i}.post_mlp_norm"),
                    feed: NormFeed::Mlp(i),
                    slot: NormSlot::Mlp(i),
                });
            }
        }
        ResidualPlacement::PreLN => {
            for i in 0..n {
                out.push(NormSite {
                    id: format!("layers.{i}.input_norm"),
                    feed: if i == 0 {
                        NormFeed::Embeddings
                    } else {
                        NormFeed::Mlp(i - 1)
                    },
                    slot: NormSlot::Attention(i),
                });
                out.push(NormSite {
                    id: format!("layers.{i}.pre_mlp_norm"),
                    feed: NormFeed::Attention(i),
                    slot: NormSlot::Mlp(i),
                });
            }
            out.push(NormSite {
                id: "final_norm".into(),
                feed: NormFeed::Mlp(n - 1),
                slot: NormSlot::Boundary,
            });
        }
    }
    out
}

/// One problem found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Config(String),
    LayerCount {
        expected: usize,
        actual: usize,
    },
    Shape {
        tensor: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    NonFinite {
        tensor: String,
        index: usize,
        value: f64,
    },
    MissingTensor(String),
    UnexpectedTensor(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Config(s) => write!(f, "config: {s}"),
            Violation::LayerCount { expected, actual } => {
                write!(f, "config says {expected} layers, graph has {actual}")
            }
            Violation::Shape {
                tensor,
                expected,
                actual,
            } => {
                write!(f, "{tensor}: shape {actual:?}, expected {expected:?}")
            }
            Violation::NonFinite { tensor, index, value } => {
                write!(f, "{tensor}[{index}] = {value} is not finite")
            }
            Violation::MissingTensor(t) => write!(f, "{t}: missing"),
            Violation::UnexpectedTensor(t) => write!(f, "{t}: present but not used by this config"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

pub fn validate(graph: &ModelGraph) -> ValidationReport {
    let cfg = &graph.config;
    let mut out: Vec<Violation> = cfg.problems().into_iter().map(Violation::Config).collect();
    if graph.layers.len() != cfg.n_layers {
        out.push(Violation::LayerCount {
            expected: cfg.n_layers,
            actual: graph.layers.len(),
        });
    }

    let mut check = |name: String, t: Option<TensorRef<'_>>, expected: Option<Vec<usize>>| match (t, expected) {
        (None, Some(_)) => out.push(Violation::MissingTensor(name)),
        (Some(_), None) => out.push(Violation::UnexpectedTensor(name)),
        (None, None) => {}
        (Some(t), Some(expected)) => {
            let (shape, data) = t.shape_and_data();
            if shape != expected {
                out.push(Violation::Shape {
                    tensor: name.clone(),
                    expected,
                    actual: shape,
                });
            }
            if let Some(index) = data.iter().position(|x| !x.is_finite()) {
                out.push(Violation::NonFinite {
                    tensor: name,
                    index,
                    value: data[index],
                });
            }
        }
    };

    let d = vec![cfg.d_model];
    let beta_shape = cfg.has_beta().then(|| d.clone());
    check(
        "boundary_gamma".into(),
        Some(TensorRef::Vector(&graph.boundary_gamma)),
        Some(d.clone()),
    );
    check(
        "boundary_beta".into(),
        graph.boundary_beta.as_ref().map(TensorRef::Vector),
        beta_shape.clone(),
    );
    for (i, l) in graph.layers.iter().enumerate() {
        let shape = |role: &str| role_shape(cfg, role);
        let v = TensorRef::Vector;
        let m = TensorRef::Matrix;
        let name = |role: &str| format!("layers.{i}.{role}");
        check(name("gamma1"), Some(v(&l.gamma1)), shape("gamma1"));
        check(name("beta1"), l.beta1.as_ref().map(v), beta_shape.clone());
        check(name("gamma2"), Some(v(&l.gamma2)), shape("gamma2"));
        check(name("beta2"), l.beta2.as_ref().map(v), beta_shape.clone());
        check(name("w_q"), Some(m(&l.w_q)), shape("w_q"));
        check(name("w_k"), Some(m(&l.w_k)), shape("w_k"));
        check(name("w_v"), Some(m(&l.w_v)), shape("w_v"));
        check(name("p"), Some(m(&l.p)), shape("p"));
        check(name("e"), Some(m(&l.e)), shape("e"));
        check(
            name("b"),
            l.b.as_ref().map(m),
            cfg.has_up_proj().then(|| shape("b").unwrap()),
        );
        check(name("g"), Some(m(&l.g)), shape("g"));
    }
    ValidationReport { violations: out }
}

/// Weight families that can be amplified in synthetic models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightFamily {
    Q,
    K,
    V,
    P,
    E,
    B,
    G,
}

impl WeightFamily {
    pub fn role(self) -> &'static str {
        match self {
            WeightFamily::Q => "w_q",
            WeightFamily::K => "w_k",
            WeightFamily::V => "w_v",
            WeightFamily::P => "p",
            WeightFamily::E => "e",
            WeightFamily::B => "b",
            WeightFamily::G => "g",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "q" | "w_q" => WeightFamily::Q,
            "k" | "w_k" => WeightFamily::K,
            "v" | "w_v" => WeightFamily::V,
            "p" | "o" => WeightFamily::P,
            "e" | "gate" => WeightFamily::E,
            "b" | "up" => WeightFamily::B,
            "g" | "down" => WeightFamily::G,
            _ => return None,
        })
    }
}

/// Multiply the chosen families in the chosen layers by `factor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Amplification {
    pub families: Vec<WeightFamily>,
    pub factor: f64,
    pub layers: Vec<usize>,
}

impl Amplification {
    /// Parse `e,g:8` style specs.
    pub fn parse(spec: &str, layers: Vec<usize>) -> Result<Self, ModelError> {
        let (fams, factor) = spec
            .split_once(':')
            .ok_or_else(|| ModelError::InvalidInit(format!("amplify spec `{spec}` lacks `:factor`")))?;
        let families = fams
            .split(',')
            .map(|f| {
                WeightFamily::parse(f).ok_or_else(|| ModelError::InvalidInit(format!("unknown weight family `{f}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let factor: f64 = factor
            .trim()
            .parse()
            .map_err(|_| ModelError::InvalidInit(format!("bad amplification factor `{factor}`")))?;
        Ok(Self {
            families,
            factor,
            layers,
        })
    }
}

/// Gaussian initialization per weight family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    /// Std of W_Q, W_K, W_V, P.
    pub attn_std: f64,
    /// Std of E, B, G.
    pub mlp_std: f64,
    /// Norm gains are `1 + gamma_std * N(0, 1)`.
    pub gamma_std: f64,
    pub beta_std: f64,
    pub amplify: Option<Amplification>,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            attn_std: 0.02,
            mlp_std: 0.02,
            gamma_std: 0.0,
            beta_std: 0.0,
            amplify: None,
        }
    }
}

impl InitSpec {
    pub fn uniform_std(std: f64) -> Self {
        Self {
            attn_std: std,
            mlp_std: std,
            ..Self::default()
        }
    }

    fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        for (name, v) in [
            ("attn_std", self.attn_std),
            ("mlp_std", self.mlp_std),
            ("gamma_std", self.gamma_std),
            ("beta_std", self.beta_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ModelError::InvalidInit(format!("{name} must be >= 0, got {v}")));
            }
        }
        if let Some(a) = &self.amplify {
            if !(a.factor > 0.0 && a.factor.is_finite()) {
                return Err(ModelError::InvalidInit(format!(
                    "amplification must be > 0, got {}",
                    a.factor
                )));
            }
            if let Some(&l) = a.layers.iter().find(|&&l| l >= config.n_layers) {
                return Err(ModelError::InvalidInit(format!(
                    "amplified layer {l} out of range for {} layers",
                    config.n_layers
                )));
            }
            if a.families.contains(&WeightFamily::B) && !config.has_up_proj() {
                return Err(ModelError::InvalidInit("family `b` needs a gated MLP".into()));
            }
        }
        Ok(())
    }
}

/// Round to the nearest f32 so the weights survive an F32 file round trip.
#[inline]
fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

/// Deterministic synthetic weights.
///
/// Weights are drawn in a fixed order from a ChaCha8 stream seeded with
/// `seed` and rounded to f32-representable values, so writing the graph as
/// F32 safetensors and reading it back reproduces it exactly.
pub fn generate_synthetic(config: &ModelConfig, init: &InitSpec, seed: u64) -> Result<ModelGraph, ModelError> {
    config.check()?;
    init.check(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d = config.d_model;
    let m = config.mlp_hidden;

    let vector = |rng: &mut ChaCha8Rng, base: f64, std: f64| {
        RealVector::new((0..d).map(|_| f32_exact(base + std * std_normal.sample(rng))).collect())
    };
    let matrix = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64| {
        let data = (0..rows * cols)
            .map(|_| f32_exact(std * std_normal.sample(rng)))
            .collect();
        RealMatrix::new(rows, cols, data).expect("shape")
    };

    let with_beta = config.has_beta();
    let boundary_gamma = vector(&mut rng, 1.0, init.gamma_std);
    let boundary_beta = with_beta.then(|| vector(&mut rng, 0.0, init.beta_std));
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let gamma1 = vector(&mut rng, 1.0, init.gamma_std);
        let beta1 = with_beta.then(|| vector(&mut rng, 0.0, init.beta_std));
        let gamma2 = vector(&mut rng, 1.0, init.gamma_std);
        let beta2 = with_beta.then(|| vector(&mut rng, 0.0, init.beta_std));
        let w_q = matrix(&mut rng, d, d, init.attn_std);
        let w_k = matrix(&mut rng, d, d, init.attn_std);
        let w_v = matrix(&mut rng, d, d, init.attn_std);
        let p = matrix(&mut rng, d, d, init.attn_std);
        let e = matrix(&mut rng, d, m, init.mlp_std);
        let b = config.has_up_proj().then(|| matrix(&mut rng, d, m, init.mlp_std));
        let g = matrix(&mut rng, m, d, init.mlp_std);
        layers.push(DecoderWeights {
            gamma1,
            beta1,
            gamma2,
            beta2,
            w_q,
            w_k,
            w_v,
            p,
            e,
            b,
            g,
        });
    }

    let mut graph = ModelGraph {
        config: config.clone(),
        boundary_gamma,
        boundary_beta,
        layers,
    };
    if let Some(a) = &init.amplify {
        amplify(&mut graph, a);
    }
    Ok(graph)
}

fn amplify(graph: &mut ModelGraph, a: &Amplification) {
    for &l in &a.layers {
        for fam in &a.families {
            if let Some(w) = graph.layers[l].role_mut(fam.role()) {
                w.data_mut().iter_mut().for_each(|x| *x = f32_exact(*x * a.factor));
            }
        }
    }
}

/// Bound on the unscaled sum of squares at the norms fed by the amplified blocks.
///
/// With a block input of mean square one, the squared static scale bounds
/// the squared norm of the block output plus residual, so the largest `s^2`
/// among those norms bounds the raw accumulation the unscaled path attempts.
pub fn predicted_sum_of_squares(graph: &ModelGraph, layers: &[usize]) -> Result<f64, crate::scales::ScaleError> {
    let mut worst = 0.0f64;
    for site in graph.norm_sites() {
        let fed_by = match site.feed {
            NormFeed::Attention(i) | NormFeed::Mlp(i) => Some(i),
            NormFeed::Embeddings => None,
        };
        if fed_by.is_some_and(|i| layers.contains(&i)) {
            let entry = crate::scales::scale_for_site(graph, &site, crate::linalg::PowerIteration::default())?;
            worst = worst.max(entry.s * entry.s);
        }
    }
    Ok(worst)
}

/// Smallest amplification factor for which the bound of
/// [`predicted_sum_of_squares`] reaches `margin * 65504`.
///
/// The bound is loose, so actual overflow usually needs a larger factor;
/// below the returned factor the unscaled path cannot overflow at those
/// norms for unit-mean-square block inputs. Returns `None` when no factor up
/// to 2^20 gets there (for example when only W_Q/W_K are amplified, which
/// the scale does not see).
pub fn overflow_amplification_threshold(
    config: &ModelConfig,
    init: &InitSpec,
    seed: u64,
    margin: f64,
) -> Result<Option<f64>, ModelError> {
    let Some(amp) = init.amplify.clone() else {
        return Ok(None);
    };
    let base = generate_synthetic(
        config,
        &InitSpec {
            amplify: None,
            ..init.clone()
        },
        seed,
    )?;
    let target = margin * crate::fp16::Fp16Bits::MAX_VALUE;
    let reaches = |factor: f64| -> bool {
        let mut g = base.clone();
        amplify(&mut g, &Amplification { factor, ..amp.clone() });
        predicted_sum_of_squares(&g, &amp.layers).is_ok_and(|s| s >= target)
    };
    let (mut lo, mut hi) = (1.0f64, 2.0f64);
    if reaches(lo) {
        return Ok(Some(1.0));
    }
    while !reaches(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > (1u64 << 20) as f64 {
            return Ok(None);
        }
    }
    for _ in 0..16 {
        let mid = (lo * hi).sqrt();
        if reaches(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}
