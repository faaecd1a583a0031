//! Command-line pipeline: configuration, phases and exit codes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod phases;

use config::ConfigError;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

/// Process exit status for an error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        match cause.downcast_ref::<xdistill::Error>() {
            Some(xdistill::Error::Config(_)) => return EXIT_CONFIG,
            Some(xdistill::Error::NonFinite { .. }) => return EXIT_NON_FINITE,
            _ => {}
        }
    }
    EXIT_FAILURE
}
