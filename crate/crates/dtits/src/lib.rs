//! File formats, checkpoints and the `dtits` command-line tool built on
//! `dtits-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod svg;
