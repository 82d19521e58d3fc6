//! Experiment driver for the `ncp` command-line tool.

pub mod commands;
pub mod config;

use ncp_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_FORMAT: i32 = 5;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Divergence { .. } | Error::TrainingDivergence { .. } => EXIT_DIVERGENCE,
        Error::Format(_) | Error::BadMagic | Error::UnsupportedVersion { .. } | Error::Truncated(_) => EXIT_FORMAT,
        Error::Config(_) | Error::Dimension { .. } | Error::DegenerateReversal { .. } | Error::Structural(_) => EXIT_CONFIG,
    }
}
