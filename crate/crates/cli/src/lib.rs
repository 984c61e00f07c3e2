//! Driver for the `nearl` binary: configuration, commands and error
//! categories. Commands are plain functions so tests can run them in-process.

use std::fmt;

pub mod commands;
pub mod config;

pub use commands::{run, Command, Manifest, Outcome};
pub use config::{DataSection, RunConfig};

/// Malformed or inconsistent configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Machine-readable category of the first recognised error in the chain.
pub fn error_category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return "config";
        }
        if let Some(e) = cause.downcast_ref::<nearl_core::Error>() {
            return e.category();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "internal"
}

pub fn exit_code(category: &str) -> i32 {
    match category {
        "config" => 2,
        "io" => 3,
        "corrupt_file" => 4,
        "dim_mismatch" => 5,
        "non_finite" => 6,
        "orthogonality" => 7,
        "invalid_argument" => 8,
        _ => 1,
    }
}
