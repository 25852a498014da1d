//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{CpoeError, Result};

/// Relative jitter levels tried in order when a factorisation fails.
pub const JITTER_LEVELS: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

pub type Chol = Cholesky<f64, Dyn>;

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Chol> {
    Cholesky::new(m.clone()).ok_or_else(|| CpoeError::NotPositiveDefinite(what.to_string()))
}

/// Adds `c * k0` to the diagonal.
pub fn add_diag(m: &mut DMatrix<f64>, v: f64) {
    for i in 0..m.nrows() {
        m[(i, i)] += v;
    }
}

pub fn chol_logdet(c: &Chol) -> f64 {
    let l = c.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Solves `L x = b` for lower triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor has a zero on its diagonal")
}

/// Solves `L^T x = b` for lower triangular `L`.
pub fn solve_lower_tr(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.tr_solve_lower_triangular(b)
        .expect("triangular factor has a zero on its diagonal")
}

pub fn solve_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor has a zero on its diagonal")
}

pub fn solve_lower_tr_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(b)
        .expect("triangular factor has a zero on its diagonal")
}

/// Rows of `x` selected by `idx`.
pub fn select_rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

pub fn select_vec(y: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| y[idx[i]])
}

/// Stacks matrices with equal column counts vertically.
pub fn vstack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = parts.first().map_or(0, |p| p.ncols());
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        out.view_mut((r, 0), (p.nrows(), cols)).copy_from(p);
        r += p.nrows();
    }
    out
}

/// `sum_ij a_ij b_ij`.
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
