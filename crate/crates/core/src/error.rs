use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with inputs that break its shape contract.
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("weight `{name}` has shape {actual:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("weight `{0}` contains a non-finite value")]
    NonFinite(String),

    #[error("batch-norm entries under `{0}` have no matching convolution")]
    OrphanBatchNorm(String),

    #[error("malformed container at byte {offset}: {message}")]
    Container { offset: usize, message: String },

    #[error("container truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("tensor `{name}` has unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("invalid annotations: {0}")]
    Annotation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    /// True for shape-contract violations; false for load and I/O failures.
    pub fn is_contract_violation(&self) -> bool {
        matches!(self, Error::Contract { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Returns a contract violation from the enclosing function unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $op:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::Error::contract($op, format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
