//! File formats, experiment configuration and the command-line front end of
//! the `iunet-core` library.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod table;

pub use config::RunConfig;
pub use error::{AppError, AppResult};
