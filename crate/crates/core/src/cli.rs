//! `slanc` command-line front end.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::engine::{self, gaussian_inputs, EngineError, PrecisionPolicy};
use crate::linalg::RealMatrix;
use crate::model::{
    self, generate_synthetic, graph_to_safetensors, load_safetensors, Amplification, InitSpec, MlpKind, ModelConfig,
    ModelError, ModelGraph, NameMap, Nonlinearity, NormKind, ResidualPlacement,
};
use crate::report::{AuditReport, CompareReport, CompareRow};
use crate::scales::{compute_scale_table, ScaleError, ScaleTable};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Degenerate(ScaleError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0} overflowed norm evaluations")]
    OverflowFound(usize),
}

impl CliError {
    /// 0 success, 1 usage or I/O, 2 degenerate scale, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } | CliError::Model(_) | CliError::OverflowFound(_) => 1,
            CliError::Degenerate(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<ScaleError> for CliError {
    fn from(e: ScaleError) -> Self {
        match e {
            ScaleError::Degenerate { .. } => CliError::Degenerate(e),
            ScaleError::InvalidModel(_) => CliError::Usage(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::NonPositiveVariance(_) | EngineError::Linalg(_) => CliError::Numerical(e.to_string()),
            EngineError::Scale(s) => s.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "slanc", version, about = "Static norm-input scales for binary16 inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a deterministic synthetic model as safetensors plus config JSON.
    GenModel(GenModelArgs),
    /// Compute the static scale table of a model.
    Scales(ScalesArgs),
    /// Run one forward pass and report sum-of-squares statistics per norm.
    Audit(AuditArgs),
    /// Compare FP16 with and without scales against the FP64 reference.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormArg {
    Rms,
    Layer,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PlacementArg {
    Post,
    Pre,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MlpArg {
    Gated,
    Standard,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ActArg {
    Silu,
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    /// Binary16 activations and binary16 norm accumulation.
    Fp16,
    /// Binary16 norm accumulation only.
    Fp16acc,
    Fp64,
}

impl From<PolicyArg> for PrecisionPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Fp16 => PrecisionPolicy::FP16,
            PolicyArg::Fp16acc => PrecisionPolicy::FP16_ACCUMULATION,
            PolicyArg::Fp64 => PrecisionPolicy::REFERENCE,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
    Text,
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Defaults to 4 * d.
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = NormArg::Rms)]
    pub norm: NormArg,
    #[arg(long, value_enum, default_value_t = PlacementArg::Post)]
    pub placement: PlacementArg,
    #[arg(long, value_enum, default_value_t = MlpArg::Gated)]
    pub mlp: MlpArg,
    #[arg(long, value_enum, default_value_t = ActArg::Silu)]
    pub act: ActArg,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Std of every projection weight.
    #[arg(long, default_value_t = 0.02)]
    pub std: f64,
    #[arg(long, default_value_t = 0.0)]
    pub gamma_std: f64,
    #[arg(long, default_value_t = 0.0)]
    pub beta_std: f64,
    /// Families and factor, e.g. `e,g:32`.
    #[arg(long)]
    pub amplify: Option<String>,
    /// Layers the amplification applies to.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub amplify_layers: Vec<usize>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Safetensors model file.
    pub model: PathBuf,
    /// JSON map from weight roles to tensor names.
    #[arg(long)]
    pub name_map: Option<PathBuf>,
    /// Model config JSON, overriding any config stored in the file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Number of Gaussian input tokens.
    #[arg(long, default_value_t = 512)]
    pub tokens: usize,
    /// Seed of the Gaussian input tokens.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Safetensors file with one `n_tokens x d_model` activation tensor.
    #[arg(long, conflicts_with_all = ["tokens", "seed"])]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScalesArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value_t = PolicyArg::Fp16)]
    pub policy: PolicyArg,
    /// Scale table JSON to apply.
    #[arg(long)]
    pub scales: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Exit nonzero when any norm evaluation overflows.
    #[arg(long)]
    pub fail_on_overflow: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// Scale table JSON; computed from the model when omitted.
    #[arg(long)]
    pub scales: Option<PathBuf>,
    /// Format written to stdout.
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    pub format: FormatArg,
    /// Also write the JSON report here.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

/// Path of the config JSON written next to a generated model.
pub fn config_path_for(model: &Path) -> PathBuf {
    model.with_extension("config.json")
}

/// Everything a command prints on stdout.
pub struct Outcome {
    pub stdout: String,
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::GenModel(a) => gen_model(&a),
        Command::Scales(a) => scales(&a),
        Command::Audit(a) => audit(&a),
        Command::Compare(a) => compare(&a),
    }
}

pub fn gen_model(a: &GenModelArgs) -> Result<Outcome, CliError> {
    if a.heads == 0 || !a.d.is_multiple_of(a.heads) {
        return Err(CliError::Usage(format!("--heads {} must divide --d {}", a.heads, a.d)));
    }
    let config = ModelConfig {
        d_model: a.d,
        n_heads: a.heads,
        head_dim: a.d / a.heads,
        mlp_hidden: a.mlp_hidden.unwrap_or(4 * a.d),
        n_layers: a.layers,
        norm_kind: match a.norm {
            NormArg::Rms => NormKind::RMSNorm,
            NormArg::Layer => NormKind::LayerNorm,
        },
        residual_placement: match a.placement {
            PlacementArg::Post => ResidualPlacement::PostLN,
            PlacementArg::Pre => ResidualPlacement::PreLN,
        },
        mlp_kind: match a.mlp {
            MlpArg::Gated => MlpKind::LlamaGated,
            MlpArg::Standard => MlpKind::Standard,
        },
        nonlinearity: match a.act {
            ActArg::Silu => Nonlinearity::SiLU,
            ActArg::Gelu => Nonlinearity::GeLU,
            ActArg::Relu => Nonlinearity::ReLU,
        },
        epsilon: a.eps,
    };
    let amplify = a
        .amplify
        .as_deref()
        .map(|s| Amplification::parse(s, a.amplify_layers.clone()))
        .transpose()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let init = InitSpec {
        attn_std: a.std,
        mlp_std: a.std,
        gamma_std: a.gamma_std,
        beta_std: a.beta_std,
        amplify,
    };
    let graph = generate_synthetic(&config, &init, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let bytes = graph_to_safetensors(&graph, &NameMap::default())?;
    write_atomic(&a.output, &bytes)?;
    write_atomic(&config_path_for(&a.output), crate::json::to_string(&config).as_bytes())?;

    let mut stdout = format!("fingerprint {}\n", graph.fingerprint());
    if init.amplify.is_some() {
        match model::overflow_amplification_threshold(&config, &init, a.seed, 1.0)? {
            Some(f) => stdout.push_str(&format!("overflow bound reached at amplification {f:.6e}\n")),
            None => stdout.push_str("overflow bound not reached by any amplification\n"),
        }
    }
    Ok(Outcome { stdout })
}

pub fn load_model(a: &ModelArgs) -> Result<ModelGraph, CliError> {
    let map = match &a.name_map {
        Some(p) => NameMap::from_file(p)?,
        None => NameMap::default(),
    };
    let config: Option<ModelConfig> = match &a.config {
        Some(p) => {
            Some(serde_json::from_str(&read_text(p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    Ok(load_safetensors(&a.model, &map, config.as_ref())?)
}

fn load_inputs(a: &InputArgs, d: usize) -> Result<RealMatrix, CliError> {
    let x = match &a.input {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(io_err(path))?;
            let st =
                model::safetensors::parse(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let t = match st.tensors.len() {
                1 => st.tensors.values().next().unwrap(),
                _ => st.tensors.get("activations").ok_or_else(|| {
                    CliError::Usage(format!(
                        "{}: expected one tensor or one named `activations`",
                        path.display()
                    ))
                })?,
            };
            if t.shape.len() != 2 || t.shape[1] != d {
                return Err(CliError::Usage(format!(
                    "{}: activation shape {:?}, expected [n, {d}]",
                    path.display(),
                    t.shape
                )));
            }
            RealMatrix::new(t.shape[0], d, t.data.clone()).expect("shape checked")
        }
        None => gaussian_inputs(a.tokens, d, a.seed),
    };
    if x.rows() == 0 {
        return Err(CliError::Usage("no input tokens".into()));
    }
    Ok(x)
}

fn load_table(path: &Path) -> Result<ScaleTable, CliError> {
    ScaleTable::from_json(&read_text(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn emit(output: Option<&Path>, text: String) -> Result<Outcome, CliError> {
    match output {
        Some(p) => {
            write_atomic(p, text.as_bytes())?;
            Ok(Outcome { stdout: String::new() })
        }
        None => Ok(Outcome { stdout: text }),
    }
}

pub fn scales(a: &ScalesArgs) -> Result<Outcome, CliError> {
    let graph = load_model(&a.model)?;
    let table = compute_scale_table(&graph)?;
    emit(a.output.as_deref(), table.to_json())
}

pub fn audit(a: &AuditArgs) -> Result<Outcome, CliError> {
    let graph = load_model(&a.model)?;
    let x = load_inputs(&a.input, graph.config.d_model)?;
    let table = a.scales.as_deref().map(load_table).transpose()?;
    let policy = PrecisionPolicy::from(a.policy);
    let result = engine::forward(&graph, &x, policy, table.as_ref())?;
    let report = AuditReport::new(&graph, &result, policy, table.as_ref(), x.rows());
    let text = match a.format {
        FormatArg::Csv => report.to_csv(),
        FormatArg::Json => report.to_json(),
        FormatArg::Text => report.to_text(),
    };
    let out = emit(a.output.as_deref(), text)?;
    if a.fail_on_overflow && report.overflow_count() > 0 {
        return Err(CliError::OverflowFound(report.overflow_count()));
    }
    Ok(out)
}

/// Run the three precision modes on identical inputs.
pub fn compare_graph(graph: &ModelGraph, x: &RealMatrix, table: &ScaleTable) -> Result<CompareReport, CliError> {
    let ((reference, fp16), scaled) = rayon::join(
        || {
            rayon::join(
                || engine::forward(graph, x, PrecisionPolicy::REFERENCE, None),
                || engine::forward(graph, x, PrecisionPolicy::FP16, None),
            )
        },
        || engine::forward(graph, x, PrecisionPolicy::FP16, Some(table)),
    );
    let reference = reference?;
    let row = |mode: &str, r: Result<engine::ForwardResult, EngineError>| -> Result<CompareRow, CliError> {
        match r {
            Ok(r) => Ok(CompareRow::against(mode, &r, &reference)),
            Err(e @ EngineError::NonPositiveVariance(_)) => Ok(CompareRow::failed(mode, e.to_string())),
            Err(e) => Err(e.into()),
        }
    };
    Ok(CompareReport {
        fingerprint: graph.fingerprint(),
        n_tokens: x.rows(),
        rows: vec![
            CompareRow::reference(&reference),
            row("FP16", fp16)?,
            row("FP16+SLaNC", scaled)?,
        ],
    })
}

pub fn compare(a: &CompareArgs) -> Result<Outcome, CliError> {
    let graph = load_model(&a.model)?;
    let x = load_inputs(&a.input, graph.config.d_model)?;
    let table = match &a.scales {
        Some(p) => load_table(p)?,
        None => compute_scale_table(&graph)?,
    };
    let report = compare_graph(&graph, &x, &table)?;
    if let Some(p) = &a.output {
        write_atomic(p, report.to_json().as_bytes())?;
    }
    let stdout = match a.format {
        FormatArg::Json => report.to_json(),
        FormatArg::Text => report.to_text(),
        FormatArg::Csv => report.to_csv(),
    };
    Ok(Outcome { stdout })
}
