use thiserror::Error;

/// Errors raised by the design engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite value at epoch {epoch} (design {design:?}): {detail}")]
    Diverged {
        epoch: usize,
        design: Vec<f64>,
        detail: String,
    },

    #[error("model `{0}` has no design Jacobian; optimise it with the Bayesian-optimisation path")]
    NoGradients(String),

    #[error("singular parameters: {0}")]
    Singular(String),

    #[error("degenerate importance weights: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            actual,
        })
    }
}
