//! Crate-wide error wrapping each module's error type.

use thiserror::Error;

use crate::dqt::DqtError;
use crate::eval::EvalError;
use crate::nap::NapError;
use crate::numeric::NumericError;
use crate::objectives::ObjectiveError;
use crate::patching::PatchError;
use crate::persistence::PersistError;
use crate::smiles::{CorpusError, SmilesError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Smiles(#[from] SmilesError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Nap(#[from] NapError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Dqt(#[from] DqtError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
