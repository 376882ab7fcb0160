use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("arch parse error at token {position}: {message}")]
    ArchParse { position: usize, message: String },

    #[error("bad magic in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { what: String, expected: u32, found: u32 },

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("truncated input while reading {what} at byte offset {offset}")]
    Truncated { what: String, offset: u64 },

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { loss: f32, epoch: usize, batch: usize },

    #[error("degenerate swarm: all importance weights are zero")]
    DegenerateSwarm,

    #[error("infeasible pruning target: {0}")]
    Infeasible(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("config error on line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
