use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("infinite loss: {0}")]
    InfiniteLoss(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("run failed: {0}")]
    Run(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}
