//! JSON config schemas for the experiment runner. Every file carries a
//! `schema_version` and unknown keys are rejected.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::moe::train::TrainConfig;
use crate::numerics::matrix::Matrix;

pub const SCHEMA_VERSION: u32 = 1;

pub fn check_schema_version(version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "schema_version {version} unsupported (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

/// Covariance matrix in config files: a diagonal, a full matrix, or a
/// scaled identity.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CovSpec {
    Diag { diag: Vec<f64> },
    Full { full: Vec<Vec<f64>> },
    ScaledIdentity { dim: usize, scale: f64 },
}

impl CovSpec {
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self {
            CovSpec::Diag { diag } => Ok(Matrix::diag(diag)),
            CovSpec::Full { full } => Matrix::from_rows(full),
            CovSpec::ScaledIdentity { dim, scale } => Ok(Matrix::identity(*dim).scale(*scale)),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRows {
    pub clusters: usize,
    pub dim: usize,
    /// Dispersions drawn uniformly from this range.
    #[serde(default = "default_range")]
    pub range: (f64, f64),
}

fn default_range() -> (f64, f64) {
    (0.01, 10.0)
}

/// `solve-weights`: explicit dispersion rows or a synthetic draw.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveWeightsConfig {
    pub schema_version: u32,
    pub lambda: f64,
    #[serde(default)]
    pub rows: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub synthetic: Option<SyntheticRows>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Misassignment,
    Robustness,
    Separation,
    Conditioning,
    EigenGap,
}

/// One simulation scenario; which fields are required depends on `kind`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub kind: ScenarioKind,
    #[serde(default)]
    pub mu_star: Option<Vec<f64>>,
    #[serde(default)]
    pub mu_other: Option<Vec<f64>>,
    #[serde(default)]
    pub cov_star: Option<CovSpec>,
    #[serde(default)]
    pub cov_eps: Option<CovSpec>,
    #[serde(default)]
    pub cov: Option<CovSpec>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl Scenario {
    pub fn require<'a, T>(&self, field: Option<&'a T>, name: &str) -> Result<&'a T> {
        field.ok_or_else(|| {
            Error::Config(format!("scenario '{}' ({:?}) needs '{}'", self.name, self.kind, name))
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub schema_version: u32,
    pub scenarios: Vec<Scenario>,
}

/// `train`: the library train config plus runner options.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCliConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: crate::moe::model::ModelConfig,
    #[serde(default)]
    pub task: crate::moe::task::GmmTaskSpec,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    /// Run standard and transformed modes on the same stream and compare
    /// steps-to-threshold.
    #[serde(default)]
    pub paired: bool,
    /// Evaluation contamination sigma for the robustness gap report.
    #[serde(default)]
    pub contamination_sigma: Option<f64>,
}

fn default_steps() -> u64 {
    500
}
fn default_batch() -> usize {
    64
}
fn default_eval_every() -> u64 {
    25
}
fn default_eval_size() -> usize {
    512
}

impl TrainCliConfig {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            task: self.task.clone(),
            steps: self.steps,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            eval_size: self.eval_size,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub schema_version: u32,
    #[serde(default = "default_tokens")]
    pub tokens: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_ff_dim")]
    pub ff_dim: usize,
    #[serde(default = "default_experts")]
    pub num_experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Batch sizes for the transform-construction scaling fit.
    #[serde(default = "default_scaling")]
    pub scaling_tokens: Vec<usize>,
}

fn default_tokens() -> usize {
    4096
}
fn default_dim() -> usize {
    64
}
fn default_ff_dim() -> usize {
    256
}
fn default_experts() -> usize {
    16
}
fn default_top_k() -> usize {
    2
}
fn default_iters() -> usize {
    9
}
fn default_warmup() -> usize {
    2
}
fn default_scaling() -> Vec<usize> {
    vec![1_000, 10_000, 100_000]
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            schema_version: SCHEMA_VERSION,
            tokens: default_tokens(),
            dim: default_dim(),
            ff_dim: default_ff_dim(),
            num_experts: default_experts(),
            top_k: default_top_k(),
            iters: default_iters(),
            warmup: default_warmup(),
            scaling_tokens: default_scaling(),
        }
    }
}

/// `metrics`: inline per-layer assignments and/or an eval-curve CSV.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub assignments: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub num_experts: Option<usize>,
    /// Path to an eval CSV (step,eval_loss) produced by `train`.
    #[serde(default)]
    pub eval_csv: Option<String>,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub window: Option<usize>,
}

pub fn parse_config<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Config(e.to_string()))
}
