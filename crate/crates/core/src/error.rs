use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm vector cannot be normalized")]
    ZeroVector,
    #[error("registry holds no known classes")]
    EmptyRegistry,
    #[error("mean known embedding is degenerate (norm {0:e})")]
    DegenerateMean(f64),
    #[error("class `{0}` is already registered")]
    DuplicateClass(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("projection produced a zero vector at layer {layer}, location {index}")]
    DegenerateProjection { layer: usize, index: usize },
    #[error("no samples to evaluate the loss")]
    NoSamples,
    #[error("no MSCAL modules supplied")]
    NoModules,
    #[error("cannot calibrate a threshold from an empty score set")]
    EmptyScores,
    #[error("detection source {0:?} is outside the score map")]
    SourceOutOfRange((usize, usize, usize)),
    #[error("known-class recall {target} is unreachable (max {reached})")]
    UndefinedOperatingPoint { target: f64, reached: f64 },
    #[error("infeasible world spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("parameter `{0}` changes training; pass --retrain to sweep it")]
    RetrainRequired(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
