//! Files, checkpoints, configuration and the training driver around
//! `concl-core`, plus the command implementations behind the `concl` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod io;
pub mod report;
pub mod run;
