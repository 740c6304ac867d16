//! Experiment pipeline around `sampled-rnn-core`: configuration documents,
//! dataset and model files, CSV ingestion, experiment and ablation drivers.

pub mod config;
mod error;
pub mod experiment;
pub mod ingest;
pub mod io;

pub use error::{Error, Result, Stage};
