//! File formats, data pipeline, training loop and command-line front end
//! for the light-transfer network in `relight-core`.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod data;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod training;

pub use error::{Error, Result};
