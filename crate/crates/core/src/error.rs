use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("dimension error in {op}: lhs={lhs:?}, rhs={rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A documented precondition does not hold.
    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A value became NaN or infinite.
    #[error("non-finite value in {op}: {detail}")]
    Numeric { op: String, detail: String },

    /// An invalid configuration field.
    #[error("invalid configuration field `{field}`: {detail}")]
    Config { field: String, detail: String },

    /// A metric is undefined for the given input (e.g. AUROC with one class).
    #[error("undefined metric {metric}: {detail}")]
    UndefinedMetric { metric: &'static str, detail: String },

    /// Training diverged.
    #[error("non-finite loss at step {step}; parameter norms: {norms}")]
    Diverged { step: usize, norms: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// Prefixes the op name of a numeric error, leaving other variants untouched.
    pub fn tagged(self, tag: &str) -> Self {
        match self {
            Error::Numeric { op, detail } => Error::Numeric {
                op: format!("{tag}/{op}"),
                detail,
            },
            other => other,
        }
    }
}
