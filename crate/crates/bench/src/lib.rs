//! Benchmark harness for CPoE and baseline GP regressors: data loading,
//! synthetic data, experiment configs, result tables and saved models.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod model_io;
pub mod synth;
