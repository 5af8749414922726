use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("shape contract violated ({relation}): {detail}")]
    ShapeContract { relation: &'static str, detail: String },
    #[error("non-finite activation in {head} layer {layer}")]
    NumericFailure { head: &'static str, layer: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("pretrained weights: {0}")]
    Pretrained(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl NetError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;
