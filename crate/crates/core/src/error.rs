use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: model expects {expected:?}, got {got:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("training diverged in epoch {epoch}: loss became non-finite")]
    TrainingDiverged { epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("artifact not found: {}", .0.display())]
    ArtifactNotFound(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("IDX dimension mismatch: {0}")]
    IdxDims(String),

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("payload length mismatch: manifest implies {expected} bytes, file has {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("checkpoint parameter `{name}` has shape {found:?}, architecture requires {expected:?}")]
    ParameterShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("insufficient samples: need {needed}, only {available} eligible")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("class {class} has only {available} samples, {needed} required")]
    ClassTooSmall { class: usize, available: usize, needed: usize },

    #[error("no perturbation within budget {eps_max} reaches the target (best margin {best_margin})")]
    Infeasible { eps_max: f64, best_margin: f64 },

    #[error("iteration budget exhausted after {passes} passes (best fooling rate {best_rate})")]
    BudgetExceeded { passes: usize, best_rate: f64 },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InputShape { .. } | Error::Shape(_) => "input-shape",
            Error::LabelOutOfRange { .. } => "domain",
            Error::TrainingDiverged { .. } => "training-diverged",
            Error::Config(_) => "config",
            Error::Precondition(_) | Error::InsufficientSamples { .. } | Error::ClassTooSmall { .. } => {
                "precondition"
            }
            Error::ArtifactNotFound(_) => "artifact-not-found",
            Error::Io { .. } => "io",
            Error::BadMagic { .. }
            | Error::IdxDims(_)
            | Error::CountMismatch { .. }
            | Error::Format(_)
            | Error::Version { .. }
            | Error::PayloadLength { .. }
            | Error::ParameterShape { .. }
            | Error::Json(_)
            | Error::Csv(_) => "format",
            Error::Infeasible { .. } => "infeasible",
            Error::BudgetExceeded { .. } => "budget-exceeded",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::ArtifactNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
