//! Error-to-exit-code mapping.
//!
//! 0 success, 1 usage or data error, 2 I/O error, 3 numeric failure.

use std::fmt;

use sigver_core::ink::{LoadError, ParseError};
use sigver_core::models::ModelError;
use sigver_core::nn::NnError;
use sigver_core::pipeline::PipelineError;
use sigver_core::preprocess::PreprocessError;
use sigver_core::psf::PsfError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Data(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Io(m) | CliError::Numeric(m) => {
                write!(f, "{m}")
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ParseError> for CliError {
    fn from(e: ParseError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PsfError> for CliError {
    fn from(e: PsfError) -> Self {
        match e {
            PsfError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFiniteGradient | NnError::NonFinite { .. } => {
                CliError::Numeric(e.to_string())
            }
            NnError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Nn(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            PipelineError::Nn(inner) => inner.into(),
            PipelineError::Model(inner) => inner.into(),
            PipelineError::Psf(inner) => inner.into(),
            PipelineError::InvalidRange(_) | PipelineError::InvalidConfig(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}
