use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: triple references unknown {kind} `{key}`")]
    DanglingId {
        path: PathBuf,
        line: usize,
        kind: &'static str,
        key: String,
    },

    #[error("dialogue `{dialogue}`: unknown speaker label `{label}`")]
    UnknownSpeaker { dialogue: String, label: String },

    #[error("dialogue `{0}` has no turns")]
    EmptyDialogue(String),

    #[error("dialogue `{dialogue}` turn {turn}: utterance has no tokens")]
    EmptyUtterance { dialogue: String, turn: usize },

    #[error("unknown entity id {0}")]
    UnknownEntity(u32),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss in {stage} at epoch {epoch} (step {step}): {detail}")]
    NonFinite {
        stage: &'static str,
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid message: {0}")]
    InvalidMessage(String),

    #[error("stage order: {0}")]
    StageOrder(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
