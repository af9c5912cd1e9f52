use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A sample carries a token or language id outside the model's domain.
    #[error("input domain error in sample {sample}: {message}")]
    InputDomain { sample: usize, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint {path} was written for config {found}, current config is {expected}; pass the override flag to resume anyway")]
    ConfigHashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("stage {stage} aborted at epoch {epoch}, step {step}: non-finite loss (pre {pre}, post {post}, total {total})")]
    StageAborted {
        stage: usize,
        epoch: usize,
        step: usize,
        pre: f64,
        post: f64,
        total: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
