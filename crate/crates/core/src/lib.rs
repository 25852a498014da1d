//! Correlated product of experts (CPoE) for Gaussian process regression.
//!
//! The training data is split into spatially local experts. Each expert keeps a
//! set of inducing inputs, and the inducing values of an expert are correlated
//! with those of its `C - 1` nearest predecessors. The resulting prior
//! precision over all inducing values is block sparse, so the posterior, the
//! log marginal likelihood and its gradient scale linearly with the number of
//! experts for fixed expert size and correlation degree.
//!
//! The two extremes of the family are a product of independent local GPs
//! (`C = 1`, `gamma = 1`) and the full GP (`C = J`, `gamma = 1`).
//!
//! ```no_run
//! use cpoe::graph::{ExpertGraph, GraphConfig};
//! use cpoe::kernels::{GpParams, KernelSpec};
//! use cpoe::model::{CpoeModel, Variant};
//! use cpoe::prediction::PredictConfig;
//! # fn data() -> (nalgebra::DMatrix<f64>, nalgebra::DVector<f64>) { unimplemented!() }
//!
//! let (x, y) = data();
//! let params = GpParams::new(KernelSpec::se_ard(1.0, &[0.3, 0.3]), 0.01).unwrap();
//! let graph = ExpertGraph::build(&x, &GraphConfig::new(16, 0.5, 2, 7)).unwrap();
//! let model = CpoeModel::fit(&x, &y, graph, &params, Variant::Fitc).unwrap();
//! println!("lml = {}", model.log_marginal_likelihood());
//! let pred = model.predict_point(&[0.5, 0.5], &PredictConfig::default()).unwrap();
//! println!("{} +- {}", pred.mean, pred.variance.sqrt());
//! ```

pub mod baselines;
pub mod block_sparse;
pub mod config;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod prediction;
pub mod training;

pub use error::{CpoeError, Result};
