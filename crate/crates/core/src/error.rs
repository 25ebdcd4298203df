use thiserror::Error;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Numerical,
    Convergence,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    UnparseableValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: {detail}")]
    OutOfDomain { row: usize, detail: String },
    #[error("subject `{0}` has no observations")]
    EmptySubject(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("penalized system is singular in the null-space block")]
    SingularSystem,
    #[error("non-finite input to the solver")]
    NonFiniteInput,
    #[error("degenerate smoothing trace: tr(I - A) = {0:e}")]
    DegenerateTrace(f64),
    #[error("GCV optimization failed: every grid evaluation was degenerate")]
    OptimFailure,
    #[error("degenerate covariance: sigma^2 = {0:e}")]
    DegenerateCovariance(f64),
    #[error("cluster {0} lost all of its members")]
    EmptyCluster(usize),
    #[error("every EM chain failed")]
    AllChainsFailed,
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::MissingColumn(_)
            | Error::UnparseableValue { .. }
            | Error::OutOfDomain { .. }
            | Error::EmptySubject(_)
            | Error::Domain(_)
            | Error::InvalidConfig(_)
            | Error::LengthMismatch(..)
            | Error::Io(_)
            | Error::Csv(_) => ErrorClass::Data,
            Error::SingularSystem
            | Error::NonFiniteInput
            | Error::DegenerateTrace(_)
            | Error::OptimFailure
            | Error::DegenerateCovariance(_)
            | Error::EmptyCluster(_) => ErrorClass::Numerical,
            Error::AllChainsFailed => ErrorClass::Convergence,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
