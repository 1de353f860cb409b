//! Command implementations behind the `xstnet` binary. Each command takes a
//! resolved [`RunConfig`] and writes its artifacts plus a `config.resolved`
//! echo into the output directory.

mod commands;
mod config;

pub use commands::*;
pub use config::{RunConfig, RESOLVED_CONFIG};
