//! Library surface of the pipeline, shared by the `lap` binary and the
//! acceptance suite.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_evaluate, cmd_generate, cmd_interpret, cmd_train, load_split, run_full_pipeline,
    LoadedSplit,
};
pub use config::Config;
