use std::path::PathBuf;

use molpatch_core::dqt::DqtError;
use molpatch_core::eval::EvalError;
use molpatch_core::nap::NapError;
use molpatch_core::objectives::ObjectiveError;
use molpatch_core::patching::PatchError;
use molpatch_core::persistence::PersistError;
use molpatch_core::smiles::{CorpusError, SmilesError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Smiles(#[from] SmilesError),
    #[error("{0}")]
    Corpus(#[from] CorpusError),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: PersistError,
    },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Nap(NapError),
    #[error(transparent)]
    Dqt(DqtError),
    #[error(transparent)]
    Patch(PatchError),
    #[error(transparent)]
    Objective(ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Smiles(_) | Self::Corpus(_) => 3,
            Self::Config(_) => 4,
            Self::Io { .. } | Self::Checkpoint { .. } => 5,
            Self::Objective(ObjectiveError::Smiles(_)) => 3,
            Self::Objective(ObjectiveError::InvalidConfig(_)) => 4,
            Self::Patch(PatchError::InvalidParams(_) | PatchError::ZeroWidth | PatchError::NoSegments) => 4,
            Self::Patch(PatchError::Io(_)) => 5,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub fn checkpoint(path: impl Into<PathBuf>) -> impl FnOnce(PersistError) -> Self {
        let path = path.into();
        move |source| match source {
            PersistError::Io(source) => Self::Io { path, source },
            source => Self::Checkpoint { path, source },
        }
    }
}

impl From<NapError> for CliError {
    fn from(e: NapError) -> Self {
        match e {
            NapError::InvalidConfig(m) => Self::Config(m),
            e => Self::Nap(e),
        }
    }
}

impl From<DqtError> for CliError {
    fn from(e: DqtError) -> Self {
        match e {
            DqtError::InvalidConfig(m) => Self::Config(m),
            e => Self::Dqt(e),
        }
    }
}

impl From<PatchError> for CliError {
    fn from(e: PatchError) -> Self {
        Self::Patch(e)
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::Dqt(e) => e.into(),
            ObjectiveError::Smiles(e) => Self::Smiles(e),
            e => Self::Objective(e),
        }
    }
}
