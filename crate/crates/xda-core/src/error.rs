use thiserror::Error;

/// Errors raised by tensor operations and the autodiff graph.
#[derive(Debug, Clone, Error)]
pub enum CoreError {
    /// Two operands have incompatible shapes.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single operand has an invalid shape or dimension.
    #[error("{op}: dimension error: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// Non-finite values where finite ones are required.
    #[error("{op}: numeric error: {msg}")]
    Numeric { op: &'static str, msg: String },

    /// An input is outside the mathematical domain of the operation.
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    /// A caller-side contract was violated (wrong arity, out-of-range
    /// hyperparameter, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),
}

impl CoreError {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        CoreError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::Dimension { op, msg: msg.into() }
    }

    pub fn numeric(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::Numeric { op, msg: msg.into() }
    }

    pub fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::Domain { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
