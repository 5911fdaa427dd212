use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model architecture: {0}")]
    InvalidArch(String),

    #[error("invalid parallelism layout: {0}")]
    InvalidLayout(String),

    #[error("invalid sequence specification: {0}")]
    InvalidSequence(String),

    #[error("unknown preset `{name}` (known presets: {known})")]
    UnknownPreset { name: String, known: String },

    #[error("hidden size {hidden_size} is not divisible by tensor-parallel degree {tp}")]
    IndivisibleHidden { hidden_size: u64, tp: u64 },

    #[error("degenerate layout: baseline communication volume is zero")]
    DegenerateLayout,

    #[error("invalid hardware profile: {0}")]
    InvalidProfile(String),

    #[error("no feasible layout for {gpus} GPU(s)")]
    NoFeasibleLayout { gpus: usize },

    #[error("invalid advisor weights: {0}")]
    InvalidWeights(String),

    #[error("line {line}: {message}: {text}")]
    Parse {
        line: usize,
        message: String,
        text: String,
    },

    #[error("line {line}: unknown collective kind `{found}` (expected one of Allreduce, Allgather, Gather, Send, Recv)")]
    UnknownKind { line: usize, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
