use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty data set")]
    EmptyData,
    #[error("numeric overflow: {0}")]
    Overflow(String),
    #[error("rank deficient regressor: {0}")]
    RankDeficient(String),
    #[error("linear algebra failure: {0}")]
    Numerical(String),
    #[error("synthesis failure: {0}")]
    Synthesis(String),
    #[error("controller recovery failed: {0}")]
    Recovery(String),
    #[error("simulation diverged at step {step}")]
    Divergence { step: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed artifact: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io(_) | Error::Parse(_) => 3,
            _ => 2,
        }
    }
}
