use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("paths live on different time grids")]
    GridMismatch,

    #[error("non-finite value in {context} at t = {t}, x = {x:?}")]
    NonFinite {
        context: &'static str,
        t: f64,
        x: Vec<f64>,
    },

    #[error("coefficient `{name}` evaluated to {value} at t = {t}, x = {x:?}, exceeding its declared bound {bound}")]
    BoundExceeded {
        name: &'static str,
        value: f64,
        bound: f64,
        t: f64,
        x: Vec<f64>,
    },

    #[error("measures have different atom counts ({left} vs {right})")]
    AtomCountMismatch { left: usize, right: usize },

    #[error("exact assignment is capped at {cap} atoms in dimension {dim} (got {atoms}); subsample the clouds first")]
    AssignmentCapExceeded { atoms: usize, dim: usize, cap: usize },

    #[error("growth certificate failed: {0}")]
    GrowthCertificate(String),

    #[error("enumeration guard exceeded: {words} control words > limit {limit}")]
    EnumerationGuard { words: u128, limit: u128 },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
