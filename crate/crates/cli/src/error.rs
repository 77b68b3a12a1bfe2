//! Failure classes and their process exit codes.

use std::path::PathBuf;

use hardneg::curriculum::CurriculumError;
use hardneg::datastore::DatastoreError;
use hardneg::encoder::{CheckpointError, EncoderError};
use hardneg::evalkit::EvalError;
use hardneg::synth::SynthError;
use hardneg::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot access {}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("validation failed: {0}")]
    Validation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitClass {
    Other = 1,
    Config = 2,
    File = 3,
    Transport = 4,
    Validation = 5,
}

impl ExitClass {
    pub fn code(self) -> i32 {
        self as i32
    }
}

fn encoder_class(e: &EncoderError) -> ExitClass {
    match e {
        EncoderError::Config(_) => ExitClass::Config,
        _ => ExitClass::Other,
    }
}

fn train_class(e: &TrainError) -> ExitClass {
    match e {
        TrainError::Config(_) | TrainError::Schedule(CurriculumError::Config(_)) => ExitClass::Config,
        TrainError::Encoder(e) => encoder_class(e),
        _ => ExitClass::Other,
    }
}

fn classify_one(e: &(dyn std::error::Error + 'static)) -> Option<ExitClass> {
    if let Some(e) = e.downcast_ref::<CliError>() {
        return Some(match e {
            CliError::Config(_) => ExitClass::Config,
            CliError::File { .. } => ExitClass::File,
            CliError::Validation(_) => ExitClass::Validation,
        });
    }
    if let Some(e) = e.downcast_ref::<SynthError>() {
        return Some(match e {
            SynthError::Transport { .. } => ExitClass::Transport,
            SynthError::Config(_) => ExitClass::Config,
            SynthError::Format { .. } | SynthError::Validation(_) | SynthError::Precondition(_) => {
                ExitClass::Validation
            }
        });
    }
    if let Some(e) = e.downcast_ref::<DatastoreError>() {
        return Some(match e {
            DatastoreError::Io { .. } => ExitClass::File,
            DatastoreError::Config(_) => ExitClass::Config,
            DatastoreError::Invalid { .. } | DatastoreError::InvalidTriplet { .. } => ExitClass::Validation,
        });
    }
    if let Some(e) = e.downcast_ref::<CheckpointError>() {
        return Some(match e {
            CheckpointError::Io { .. } => ExitClass::File,
            CheckpointError::Format { .. } | CheckpointError::Model(_) => ExitClass::Validation,
        });
    }
    if let Some(e) = e.downcast_ref::<TrainError>() {
        return Some(train_class(e));
    }
    if let Some(e) = e.downcast_ref::<EvalError>() {
        return Some(match e {
            EvalError::Config(_) => ExitClass::Config,
            EvalError::Train(t) => train_class(t),
            EvalError::Encoder(t) => encoder_class(t),
            _ => ExitClass::Other,
        });
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return Some(ExitClass::File);
    }
    None
}

/// The class of the outermost recognised error in the chain.
pub fn classify(err: &anyhow::Error) -> ExitClass {
    err.chain().find_map(classify_one).unwrap_or(ExitClass::Other)
}
