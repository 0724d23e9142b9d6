use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SeqparError {
    #[error("no ranks given")]
    NoRanks,
    #[error("{what} on rank {rank} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { what: &'static str, rank: usize, expected: (usize, usize), found: (usize, usize) },
    #[error("length {len} does not split into {parts} equal parts")]
    NotDivisible { len: usize, parts: usize },
    #[error("invalid block configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("saved state is missing {0}")]
    MissingSaved(&'static str),
    #[error("recomputed {0} differs from the stored original")]
    RecomputeMismatch(&'static str),
}
