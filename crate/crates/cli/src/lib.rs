//! Command implementations behind the `denseflow` binary, exposed as a
//! library so integration tests drive the same code paths.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod ppm;
pub mod train;
