//! Library surface of the command-line driver: configuration parsing, the
//! dataset pipeline, and command implementations. The `flowgmm` binary is a
//! thin argument-parsing layer over this crate.

pub mod config;
pub mod error;
pub mod run;
