//! Block sparse row (BSR) matrices with uniform square blocks, a block
//! minimum-degree ordering, block Cholesky factorisation and the selected
//! (partial) inverse on the factor's sparsity pattern.

mod cholesky;
mod ordering;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{CpoeError, Result};

pub use cholesky::{BlockCholesky, PartialInverse, SymbolicCholesky};
pub use ordering::{fill_reducing_permutation, minimum_degree};

const NONE: usize = usize::MAX;

/// Positions of the stored blocks of an `n x n` block matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPattern {
    n_blocks: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    lookup: Vec<usize>,
}

impl BlockPattern {
    /// Pattern holding the given `(row, col)` pairs, their transposes and the
    /// whole diagonal.
    pub fn symmetric(n_blocks: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut all: Vec<(usize, usize)> = Vec::with_capacity(2 * pairs.len() + n_blocks);
        for &(a, b) in pairs {
            all.push((a, b));
            all.push((b, a));
        }
        all.extend((0..n_blocks).map(|i| (i, i)));
        Self::general(n_blocks, &all)
    }

    /// Pattern holding exactly the given pairs (duplicates allowed).
    pub fn general(n_blocks: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= n_blocks || b >= n_blocks) {
            return Err(CpoeError::PatternMismatch(format!(
                "block ({a}, {b}) outside a {n_blocks}x{n_blocks} block matrix"
            )));
        }
        let mut sorted = pairs.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut row_ptr = vec![0; n_blocks + 1];
        for &(a, _) in &sorted {
            row_ptr[a + 1] += 1;
        }
        for i in 0..n_blocks {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx: Vec<usize> = sorted.iter().map(|&(_, b)| b).collect();
        let mut lookup = vec![NONE; n_blocks * n_blocks];
        for (slot, &(a, b)) in sorted.iter().enumerate() {
            lookup[a * n_blocks + b] = slot;
        }
        Ok(BlockPattern {
            n_blocks,
            row_ptr,
            col_idx,
            lookup,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn nnz_blocks(&self) -> usize {
        self.col_idx.len()
    }

    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        match self.lookup[i * self.n_blocks + j] {
            NONE => None,
            s => Some(s),
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.n_blocks && j < self.n_blocks && self.slot(i, j).is_some()
    }

    /// Sorted block columns stored in block row `i`.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n_blocks).all(|i| self.row(i).iter().all(|&j| self.slot(j, i).is_some()))
    }

    /// Adjacency lists of the block graph (off-diagonal entries only).
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        (0..self.n_blocks)
            .map(|i| self.row(i).iter().copied().filter(|&j| j != i).collect())
            .collect()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n_blocks)
            .flat_map(|i| self.row(i).iter().map(move |&j| (i, j)))
            .collect()
    }
}

/// BSR matrix: a shared pattern plus one dense `bs x bs` block per slot.
#[derive(Debug, Clone)]
pub struct BlockSparseMatrix {
    pattern: Arc<BlockPattern>,
    block_size: usize,
    blocks: Vec<DMatrix<f64>>,
}

impl BlockSparseMatrix {
    pub fn zeros(pattern: Arc<BlockPattern>, block_size: usize) -> Self {
        let blocks = vec![DMatrix::zeros(block_size, block_size); pattern.nnz_blocks()];
        BlockSparseMatrix {
            pattern,
            block_size,
            blocks,
        }
    }

    /// Copies the pattern blocks of a dense matrix.
    pub fn from_dense(pattern: Arc<BlockPattern>, block_size: usize, dense: &DMatrix<f64>) -> Result<Self> {
        let n = pattern.n_blocks() * block_size;
        if dense.nrows() != n || dense.ncols() != n {
            return Err(CpoeError::dims(format!(
                "dense matrix is {}x{}, pattern needs {n}x{n}",
                dense.nrows(),
                dense.ncols()
            )));
        }
        let mut m = Self::zeros(pattern, block_size);
        for (i, j) in m.pattern.pairs() {
            let s = m.pattern.slot(i, j).unwrap();
            m.blocks[s] = dense
                .view((i * block_size, j * block_size), (block_size, block_size))
                .into_owned();
        }
        Ok(m)
    }

    pub fn pattern(&self) -> &Arc<BlockPattern> {
        &self.pattern
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.pattern.n_blocks()
    }

    pub fn dim(&self) -> usize {
        self.n_blocks() * self.block_size
    }

    pub fn block(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.pattern.slot(i, j).map(|s| &self.blocks[s])
    }

    pub fn block_mut(&mut self, i: usize, j: usize) -> Option<&mut DMatrix<f64>> {
        self.pattern.slot(i, j).map(move |s| &mut self.blocks[s])
    }

    pub fn add_to_block(&mut self, i: usize, j: usize, m: &DMatrix<f64>) -> Result<()> {
        let bs = self.block_size;
        if m.nrows() != bs || m.ncols() != bs {
            return Err(CpoeError::dims(format!("block is {}x{}, expected {bs}x{bs}", m.nrows(), m.ncols())));
        }
        let b = self
            .block_mut(i, j)
            .ok_or_else(|| CpoeError::PatternMismatch(format!("block ({i}, {j}) not in pattern")))?;
        *b += m;
        Ok(())
    }

    /// Adds a dense symmetric matrix laid out over the block list `blocks`.
    pub fn add_dense(&mut self, blocks: &[usize], m: &DMatrix<f64>) -> Result<()> {
        let bs = self.block_size;
        if m.nrows() != blocks.len() * bs || m.ncols() != blocks.len() * bs {
            return Err(CpoeError::dims("dense contribution does not match its block list"));
        }
        for (p, &a) in blocks.iter().enumerate() {
            for (q, &b) in blocks.iter().enumerate() {
                let sub = m.view((p * bs, q * bs), (bs, bs));
                let dst = self
                    .block_mut(a, b)
                    .ok_or_else(|| CpoeError::PatternMismatch(format!("block ({a}, {b}) not in pattern")))?;
                *dst += sub;
            }
        }
        Ok(())
    }

    /// Dense copy of the sub-matrix over the block list `blocks`. Blocks
    /// outside the pattern read as zero.
    pub fn dense_sub(&self, blocks: &[usize]) -> DMatrix<f64> {
        let bs = self.block_size;
        let mut out = DMatrix::zeros(blocks.len() * bs, blocks.len() * bs);
        for (p, &a) in blocks.iter().enumerate() {
            for (q, &b) in blocks.iter().enumerate() {
                if let Some(m) = self.block(a, b) {
                    out.view_mut((p * bs, q * bs), (bs, bs)).copy_from(m);
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let all: Vec<usize> = (0..self.n_blocks()).collect();
        self.dense_sub(&all)
    }

    pub fn matvec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(CpoeError::dims(format!("vector has length {}, matrix is {}", x.len(), self.dim())));
        }
        let bs = self.block_size;
        let mut y = DVector::zeros(self.dim());
        for i in 0..self.n_blocks() {
            for &j in self.pattern.row(i) {
                let b = self.block(i, j).unwrap();
                let mut yi = y.rows_mut(i * bs, bs);
                yi.gemv(1.0, b, &x.rows(j * bs, bs), 1.0);
            }
        }
        Ok(y)
    }

    /// `max |A_ij - A_ji|` over stored blocks.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, j) in self.pattern.pairs() {
            let a = self.block(i, j).unwrap();
            match self.block(j, i) {
                Some(b) => worst = worst.max((a - b.transpose()).amax()),
                None => worst = worst.max(a.amax()),
            }
        }
        worst
    }

    /// One `i j` line per stored block, for debugging.
    pub fn pattern_text(&self) -> String {
        self.pattern
            .pairs()
            .iter()
            .map(|(i, j)| format!("{i} {j}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_lookup_and_rows() {
        let p = BlockPattern::symmetric(4, &[(2, 0), (3, 1)]).unwrap();
        assert!(p.is_symmetric());
        assert_eq!(p.row(0), &[0, 2]);
        assert_eq!(p.row(3), &[1, 3]);
        assert!(p.contains(0, 2) && !p.contains(0, 1));
        assert_eq!(p.nnz_blocks(), 8);
        assert!(BlockPattern::symmetric(2, &[(2, 0)]).is_err());
    }

    #[test]
    fn dense_round_trip_and_matvec() {
        let p = Arc::new(BlockPattern::symmetric(3, &[(1, 0), (2, 1)]).unwrap());
        let mut dense = DMatrix::from_fn(6, 6, |i, j| (1 + i * 6 + j) as f64);
        dense.view_mut((4, 0), (2, 2)).fill(0.0);
        dense.view_mut((0, 4), (2, 2)).fill(0.0);
        let m = BlockSparseMatrix::from_dense(p, 2, &dense).unwrap();
        assert_eq!(m.to_dense(), dense);
        let x = DVector::from_fn(6, |i, _| i as f64 - 2.5);
        assert!((m.matvec(&x).unwrap() - &dense * &x).amax() < 1e-12);
        assert!(m.asymmetry() > 0.0);
    }

    #[test]
    fn add_outside_pattern_fails() {
        let p = Arc::new(BlockPattern::symmetric(3, &[(1, 0)]).unwrap());
        let mut m = BlockSparseMatrix::zeros(p, 2);
        assert!(m.add_to_block(2, 0, &DMatrix::identity(2, 2)).is_err());
        assert!(m.add_to_block(1, 0, &DMatrix::identity(3, 3)).is_err());
        m.add_to_block(1, 0, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(m.block(1, 0).unwrap()[(1, 1)], 1.0);
    }
}
