use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("all candidate pairs are degenerate (points closer than {min_distance:e})")]
    DegeneratePairs { min_distance: f64 },
    #[error("requested {requested} neurons but only {available} distinct admissible pairs exist")]
    InsufficientPairs { requested: usize, available: usize },
    #[error("gradient-weighted sampling needs targets")]
    MissingTargets,
    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
    },
    #[error("state left the admissible region at step {step}")]
    BlowUp { step: usize },
    #[error("controlled system requires an input")]
    MissingInput,
    #[error("model has no input dictionary but an input was supplied")]
    UnexpectedInput,
    #[error("unsupported model schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("corrupt model document: {0}")]
    Corrupt(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
