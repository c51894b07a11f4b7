use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown config key `{key}`, did you mean `{suggestion}`?")]
    UnknownKey { key: String, suggestion: String },

    #[error("band count mismatch: expected {expected} bands, got {actual}")]
    BandMismatch { expected: usize, actual: usize },

    #[error(
        "infeasible sample counts for class {class} (`{name}`): requested {requested}, \
         only {available} labeled pixels available"
    )]
    InfeasibleCount {
        class: usize,
        name: String,
        requested: usize,
        available: usize,
    },

    #[error("raster payload size mismatch for {path}: expected {expected} bytes, got {actual}")]
    PayloadSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported raster dtype `{0}` (supported: f32, i16)")]
    UnknownDtype(String),

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("checkpoint tensor `{name}`: {detail}")]
    Checkpoint { name: String, detail: String },

    #[error("class id {id} outside palette of {palette_len} colors")]
    PaletteRange { id: i64, palette_len: usize },

    #[error("non-finite loss at epoch {epoch}, step {step} (loss = {loss})")]
    NanLoss { epoch: usize, step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
