pub mod artifact;
pub mod cli;
pub mod data;
pub mod experiment;
pub mod ingest;
pub mod models;
mod error;
pub mod numeric;
pub mod report;
pub mod synth;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
