use thiserror::Error;

pub type Result<T, E = TapeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite gradient accumulated at node {node}")]
    NonFiniteGradient { node: usize },

    #[error("unsupported primitive `{0}`")]
    Unsupported(String),

    #[error("variable belongs to tape {found}, not tape {expected}")]
    ForeignVariable { expected: u64, found: u64 },

    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("replayed node {node} differs from its recorded value")]
    ReplayMismatch { node: usize },

    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),

    #[error("function value is not finite (perturbed coordinate: {coordinate:?})")]
    NonFiniteEvaluation { coordinate: Option<usize> },
}
