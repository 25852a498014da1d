//! The correlated product of experts model.
//!
//! Each expert `j` owns `L` inducing values `a_j`. The prior over all inducing
//! values factorises as `p(a_j | a_pi(j))` along the expert ordering, giving a
//! block sparse prior precision `S`. Each expert's observations are projected
//! from the inducing values of its correlation set `psi(j)`:
//! `y_j ~ N(H_j a_psi, V_j)`. The approximation variant decides how the
//! conditional covariance `D_j` enters `V_j` and which correction `lambda_j`
//! is subtracted from the log marginal likelihood.

mod factors;
mod gradient;
mod kl;
mod persist;
mod posterior;
mod stochastic;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::block_sparse::{BlockPattern, BlockSparseMatrix, PartialInverse, SymbolicCholesky};
use crate::error::{CpoeError, Result};
use crate::graph::ExpertGraph;
use crate::kernels::GpParams;
use crate::linalg::{select_rows, select_vec, vstack, JITTER_LEVELS};

pub(crate) use factors::{Cov, Factors};
pub use kl::{prior_kl_difference, KlDifference};
pub use persist::SavedModel;
pub(crate) use posterior::Posterior;
pub use stochastic::StochasticObjective;

/// How the conditional covariance `D_j` of each expert is treated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Deterministic training conditional: `D_j` dropped.
    Dtc,
    /// Fully independent training conditional: `diag(D_j)` kept.
    Fitc,
    /// Partially independent training conditional: the whole block `D_j` kept.
    Pitc,
    /// Variational free energy: `D_j` dropped, `tr(D_j) / 2 sigma^2` penalty.
    Vfe,
    /// Power expectation propagation with the diagonal of `D_j`.
    Pep { alpha: f64 },
    /// Power expectation propagation with the full block `D_j`.
    PepBlock { alpha: f64 },
}

impl Variant {
    pub fn validate(&self) -> Result<()> {
        match self {
            Variant::Pep { alpha } | Variant::PepBlock { alpha } if !(*alpha > 0.0 && *alpha <= 1.0) => {
                Err(CpoeError::config(format!("power EP alpha must lie in (0, 1], got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    /// Whether `V_j` and the `D_j` corrections use whole blocks.
    pub fn is_block(&self) -> bool {
        matches!(self, Variant::Pitc | Variant::PepBlock { .. })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Dtc => write!(f, "dtc"),
            Variant::Fitc => write!(f, "fitc"),
            Variant::Pitc => write!(f, "pitc"),
            Variant::Vfe => write!(f, "vfe"),
            Variant::Pep { alpha } => write!(f, "pep:{alpha}"),
            Variant::PepBlock { alpha } => write!(f, "pep_block:{alpha}"),
        }
    }
}

impl FromStr for Variant {
    type Err = CpoeError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.as_str(), None),
        };
        let alpha = || -> Result<f64> {
            arg.unwrap_or("0.5")
                .trim()
                .parse::<f64>()
                .map_err(|_| CpoeError::config(format!("bad alpha in variant '{s}'")))
        };
        let v = match name {
            "dtc" => Variant::Dtc,
            "fitc" => Variant::Fitc,
            "pitc" => Variant::Pitc,
            "vfe" => Variant::Vfe,
            "pep" => Variant::Pep { alpha: alpha()? },
            "pep_block" | "pepb" => Variant::PepBlock { alpha: alpha()? },
            _ => return Err(CpoeError::config(format!("unknown variant '{s}'"))),
        };
        v.validate()?;
        Ok(v)
    }
}

/// Per-expert data laid out for the factor computations.
#[derive(Debug, Clone)]
pub(crate) struct ExpertData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Inducing inputs of this expert.
    pub a: DMatrix<f64>,
    /// `exact[r] = Some(k)` when row `r` is inducing input `k` of this expert.
    pub exact: Vec<Option<usize>>,
    /// Predecessors followed by the expert itself.
    pub family: Vec<usize>,
    /// Experts the projection conditions on.
    pub psi: Vec<usize>,
    /// Expert whose family equals `psi`.
    pub psi_owner: usize,
    /// Stacked inducing inputs of `family`.
    pub a_family: DMatrix<f64>,
}

impl ExpertData {
    /// Column offset of this expert's own block inside `psi`.
    pub fn self_offset(&self, j: usize, l: usize) -> usize {
        self.psi.iter().position(|&k| k == j).expect("expert lies in its own set") * l
    }
}

/// Everything that depends on the data and graph but not on hyperparameters.
#[derive(Debug, Clone)]
pub struct CpoeStructure {
    pub graph: ExpertGraph,
    pub variant: Variant,
    pub(crate) experts: Vec<ExpertData>,
    pub(crate) pattern: Arc<BlockPattern>,
    pub(crate) symbolic: Arc<SymbolicCholesky>,
    n: usize,
    dim: usize,
}

impl CpoeStructure {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>, graph: ExpertGraph, variant: Variant) -> Result<Self> {
        variant.validate()?;
        if x.nrows() != y.len() {
            return Err(CpoeError::dims(format!("{} inputs but {} targets", x.nrows(), y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CpoeError::config("targets must be finite"));
        }
        if graph.n_points() != x.nrows() {
            return Err(CpoeError::dims("graph does not cover the training data"));
        }
        let jn = graph.n_experts;
        let c = graph.correlation;
        let mut experts = Vec::with_capacity(jn);
        for j in 0..jn {
            let rows = &graph.members[j];
            let ind_rows = graph.inducing_rows(j);
            let mut exact = vec![None; rows.len()];
            for (k, &local) in graph.inducing[j].iter().enumerate() {
                exact[local] = Some(k);
            }
            experts.push(ExpertData {
                x: select_rows(x, rows),
                y: select_vec(y, rows),
                a: select_rows(x, &ind_rows),
                exact,
                family: graph.family(j),
                psi: graph.correlation_sets[j].clone(),
                psi_owner: j.max(c - 1),
                a_family: DMatrix::zeros(0, 0),
            });
        }
        for j in 0..jn {
            let parts: Vec<&DMatrix<f64>> = experts[j].family.iter().map(|&k| &experts[k].a).collect();
            experts[j].a_family = vstack(&parts);
        }
        let pattern = Arc::new(BlockPattern::symmetric(jn, &graph.precision_pattern())?);
        let symbolic = Arc::new(SymbolicCholesky::new(&pattern)?);
        Ok(CpoeStructure {
            variant,
            experts,
            pattern,
            symbolic,
            n: x.nrows(),
            dim: x.ncols(),
            graph,
        })
    }

    pub fn n_points(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn n_experts(&self) -> usize {
        self.graph.n_experts
    }

    pub fn block_size(&self) -> usize {
        self.graph.n_inducing
    }

    /// Stacked inducing inputs of expert `j`'s correlation set.
    pub fn psi_inputs(&self, j: usize) -> &DMatrix<f64> {
        &self.experts[self.experts[j].psi_owner].a_family
    }

    pub fn correlation_set(&self, j: usize) -> &[usize] {
        &self.experts[j].psi
    }

    pub fn inducing_inputs(&self, j: usize) -> &DMatrix<f64> {
        &self.experts[j].a
    }

    /// Number of blocks in the Cholesky factor of the posterior precision.
    pub fn factor_blocks(&self) -> usize {
        self.symbolic.nnz_blocks()
    }
}

/// A CPoE model at fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct CpoeModel {
    structure: Arc<CpoeStructure>,
    params: GpParams,
    pub(crate) factors: Factors,
    pub(crate) posterior: Posterior,
}

impl CpoeModel {
    pub fn fit(
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        graph: ExpertGraph,
        params: &GpParams,
        variant: Variant,
    ) -> Result<Self> {
        let s = Arc::new(CpoeStructure::new(x, y, graph, variant)?);
        Self::with_structure(s, params)
    }

    /// Builds factors and posterior, escalating the jitter when a
    /// factorisation fails.
    pub fn with_structure(structure: Arc<CpoeStructure>, params: &GpParams) -> Result<Self> {
        params.validate()?;
        if let Some(d) = params.kernel.input_dim() {
            if d != structure.input_dim() {
                return Err(CpoeError::dims(format!(
                    "kernel expects {d} inputs, data has {}",
                    structure.input_dim()
                )));
            }
        }
        let mut last = None;
        for (step, &c) in JITTER_LEVELS.iter().enumerate() {
            let attempt = Factors::build(&structure, params, c)
                .and_then(|f| Posterior::assemble(&structure, params, &f).map(|p| (f, p)));
            match attempt {
                Ok((factors, posterior)) => {
                    if step > 0 {
                        log::warn!("factorisation needed jitter {c:e} x prior variance");
                    }
                    return Ok(CpoeModel {
                        structure,
                        params: params.clone(),
                        factors,
                        posterior,
                    });
                }
                Err(e @ (CpoeError::NotPositiveDefinite(_) | CpoeError::BlockNotPositiveDefinite { .. })) => {
                    last = Some(e)
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap())
    }

    /// Same structure, new hyperparameters.
    pub fn refit(&self, params: &GpParams) -> Result<Self> {
        Self::with_structure(self.structure.clone(), params)
    }

    pub fn structure(&self) -> &Arc<CpoeStructure> {
        &self.structure
    }

    pub fn graph(&self) -> &ExpertGraph {
        &self.structure.graph
    }

    pub fn params(&self) -> &GpParams {
        &self.params
    }

    pub fn variant(&self) -> Variant {
        self.structure.variant
    }

    /// Relative jitter that was needed to factorise.
    pub fn jitter(&self) -> f64 {
        self.factors.jitter
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.posterior.lml
    }

    /// Gradient of the log marginal likelihood with respect to the flattened
    /// hyperparameters.
    pub fn lml_gradient(&self) -> Result<Vec<f64>> {
        gradient::lml_gradient(&self.structure, &self.params, &self.factors, &self.posterior)
    }

    /// Block sparse prior precision `S` over all inducing values.
    pub fn prior_precision(&self) -> &BlockSparseMatrix {
        &self.factors.prior_precision
    }

    /// Posterior precision `S + sum_j H_j^T V_j^{-1} H_j`.
    pub fn posterior_precision(&self) -> &BlockSparseMatrix {
        &self.posterior.precision
    }

    /// `log |S + sum_j T_j|` from the sparse factor.
    pub fn posterior_precision_log_det(&self) -> f64 {
        self.posterior.chol.log_det()
    }

    /// Posterior mean of all inducing values, expert blocks in order.
    pub fn posterior_mean(&self) -> &DVector<f64> {
        &self.posterior.mean
    }

    /// Posterior covariance blocks on the factor pattern.
    pub fn posterior_covariance(&self) -> &PartialInverse {
        &self.posterior.cov
    }

    /// `sum_j log |Q_j|`, the log determinant of the prior covariance.
    pub fn prior_log_det(&self) -> f64 {
        self.factors.experts.iter().map(|e| e.logdet_q).sum()
    }

    /// Conditional covariance diagonal `diag(D_j)` of every expert.
    pub fn conditional_variances(&self) -> Vec<DVector<f64>> {
        self.factors.experts.iter().map(|e| e.d_diag.clone()).collect()
    }

    /// Projection matrix `H_j` of expert `j` (rows: expert points, columns:
    /// inducing values of its correlation set).
    pub fn projection(&self, j: usize) -> &DMatrix<f64> {
        &self.factors.experts[j].h
    }

    pub fn to_saved(&self) -> SavedModel {
        SavedModel::from_model(self)
    }
}
