//! Command-line surface of the hardneg toolkit: run configuration, the
//! synth/augment/train/eval/inspect subcommands, and exit-code mapping.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{
    cmd_augment, cmd_eval, cmd_inspect, cmd_synth, cmd_train, AugmentOutcome, CliManifest, EvalOutcome, SynthOutcome,
    TrainOutcome, LOSS_LOG_FILE, MANIFEST_FILE, RESOLVED_CONFIG,
};
pub use config::{apply_override, fan_out, load_config, BackendKind, EvalMode, RunConfig, CONFIG_VERSION};
pub use error::{classify, CliError, ExitClass};
