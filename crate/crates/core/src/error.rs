use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    /// A precondition on the inputs was not met.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A value lies outside the domain of the operation (e.g. a nonpositive variance).
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value in {term}")]
    NonFinite { term: &'static str },
    #[error("config error: {0}")]
    Config(String),
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}
