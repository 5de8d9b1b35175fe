use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate box: width {width} x height {height}")]
    DegenerateBox { width: f64, height: f64 },
    #[error("invalid depth {0}: must be > 0")]
    InvalidDepth(f64),
    #[error("box lies entirely outside the feature map")]
    EmptyRegion,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    Numeric(String),
    #[error("attention row {row} has no allowed key")]
    AllMasked { row: usize },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
