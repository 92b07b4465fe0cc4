//! Command layer: run configuration, checkpoints, plots and the commands
//! behind the `catnet` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod plot;

pub use checkpoint::Checkpoint;
pub use commands::{
    cmd_ablate, cmd_eval, cmd_gen, cmd_gradcheck, cmd_train, threads_from_env, AblationCell, AblationTable, EvalModel,
    TrainSummary,
};
pub use config::{RunConfig, SettingChoice};
