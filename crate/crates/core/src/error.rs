use alloc::string::String;

/// Errors produced by the computational core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("loss is undefined: every target position is ignored")]
    UndefinedLoss,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of length {len} exceeds the limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown parameter or layer `{0}`")]
    UnknownName(String),
    #[error("step {step} is outside the schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("corrupted quantized tensor: {0}")]
    Corrupt(String),
    #[error("Hessian is not positive definite after damping")]
    SingularHessian,
    #[error("missing calibration activations for `{0}`")]
    MissingCalibration(String),
}

impl Error {
    /// True for failures of the arithmetic itself (divergence, singular systems)
    /// as opposed to bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::UndefinedLoss | Error::SingularHessian
        )
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
