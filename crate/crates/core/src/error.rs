use thiserror::Error;

use crate::adapters::AdapterError;
use crate::kernel::KernelError;
use crate::linalg::LinalgError;
use crate::protocol::ProtocolError;
use crate::store::StoreError;
use crate::synth::SynthError;

/// Top-level error used by the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Usage(String),
}

/// Process exit status for each error category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Validation = 1,
    Io = 2,
    Numerical = 3,
}

fn adapter_kind(e: &AdapterError) -> ExitKind {
    match e {
        AdapterError::SingularSystem(_) | AdapterError::NonFiniteLoss { .. } => ExitKind::Numerical,
        _ => ExitKind::Validation,
    }
}

impl Error {
    pub fn kind(&self) -> ExitKind {
        match self {
            Error::Store(e) | Error::Synth(SynthError::Store(e)) => {
                if e.is_io() {
                    ExitKind::Io
                } else {
                    ExitKind::Validation
                }
            }
            Error::Adapter(e) | Error::Protocol(ProtocolError::Adapter(e)) => adapter_kind(e),
            _ => ExitKind::Validation,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind() as i32
    }
}

impl From<LinalgError> for Error {
    fn from(e: LinalgError) -> Self {
        Error::Adapter(AdapterError::SingularSystem(e))
    }
}
