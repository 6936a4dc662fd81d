//! File formats, run configuration, reports and subcommands on top of
//! [`gpvae_core`].

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod idx;
pub mod report;
