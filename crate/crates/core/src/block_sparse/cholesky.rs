use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{fill_reducing_permutation, BlockSparseMatrix, BlockPattern, NONE};
use crate::error::{CpoeError, Result};
use crate::kernels::symmetrize;
use crate::linalg::{solve_lower, solve_lower_tr_vec, solve_lower_vec};

/// Block structure of the Cholesky factor of `P A P^T`, including fill.
///
/// Depends only on the pattern and the permutation, so it is computed once
/// and shared by every numeric factorisation with the same pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
    /// `rows[i]`: sorted columns `k <= i` of block row `i` of `L`.
    rows: Vec<Vec<usize>>,
    /// `cols[j]`: sorted rows `i > j` of block column `j` of `L`.
    cols: Vec<Vec<usize>>,
    slot: Vec<usize>,
    n_slots: usize,
}

impl SymbolicCholesky {
    pub fn new(pattern: &BlockPattern) -> Result<Self> {
        Self::with_permutation(pattern, fill_reducing_permutation(pattern))
    }

    /// `perm[new] = old`.
    pub fn with_permutation(pattern: &BlockPattern, perm: Vec<usize>) -> Result<Self> {
        let n = pattern.n_blocks();
        let mut inv_perm = vec![NONE; n];
        if perm.len() != n {
            return Err(CpoeError::dims("permutation length differs from the block count"));
        }
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inv_perm[old] != NONE {
                return Err(CpoeError::config("not a permutation"));
            }
            inv_perm[old] = new;
        }
        if !pattern.is_symmetric() || (0..n).any(|i| !pattern.contains(i, i)) {
            return Err(CpoeError::PatternMismatch(
                "Cholesky needs a symmetric pattern with every diagonal block".into(),
            ));
        }

        let mut adj: Vec<Vec<bool>> = vec![vec![false; n]; n];
        for (a, b) in pattern.pairs() {
            adj[inv_perm[a]][inv_perm[b]] = true;
        }
        let mut cols = vec![Vec::new(); n];
        for k in 0..n {
            let later: Vec<usize> = ((k + 1)..n).filter(|&i| adj[i][k]).collect();
            for (p, &a) in later.iter().enumerate() {
                for &b in &later[p + 1..] {
                    adj[a][b] = true;
                    adj[b][a] = true;
                }
            }
            cols[k] = later;
        }
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (k, c) in cols.iter().enumerate() {
            for &i in c {
                rows[i].push(k);
            }
        }
        let mut slot = vec![NONE; n * n];
        let mut n_slots = 0;
        for (i, r) in rows.iter_mut().enumerate() {
            r.push(i);
            for &k in r.iter() {
                slot[i * n + k] = n_slots;
                n_slots += 1;
            }
        }
        Ok(SymbolicCholesky {
            n,
            perm,
            inv_perm,
            rows,
            cols,
            slot,
            n_slots,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.n
    }

    /// `perm[new] = old`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_permutation(&self) -> &[usize] {
        &self.inv_perm
    }

    /// Stored blocks of `L`, diagonal included.
    pub fn nnz_blocks(&self) -> usize {
        self.n_slots
    }

    /// Whether blocks `(a, b)` (original indices) lie in the factor pattern.
    pub fn covers(&self, a: usize, b: usize) -> bool {
        let (i, k) = self.lower(a, b);
        self.slot[i * self.n + k] != NONE
    }

    fn lower(&self, a: usize, b: usize) -> (usize, usize) {
        let (i, k) = (self.inv_perm[a], self.inv_perm[b]);
        if i >= k {
            (i, k)
        } else {
            (k, i)
        }
    }

    fn slot_of(&self, i: usize, k: usize) -> Option<usize> {
        match self.slot[i * self.n + k] {
            NONE => None,
            s => Some(s),
        }
    }
}

/// Numeric block Cholesky factor `P A P^T = L L^T`.
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    symbolic: Arc<SymbolicCholesky>,
    block_size: usize,
    l: Vec<DMatrix<f64>>,
}

impl BlockCholesky {
    /// Factorises with a freshly computed minimum-degree ordering.
    pub fn new(a: &BlockSparseMatrix) -> Result<Self> {
        let sym = Arc::new(SymbolicCholesky::new(a.pattern())?);
        Self::factor(a, sym)
    }

    pub fn with_permutation(a: &BlockSparseMatrix, perm: Vec<usize>) -> Result<Self> {
        let sym = Arc::new(SymbolicCholesky::with_permutation(a.pattern(), perm)?);
        Self::factor(a, sym)
    }

    /// Numeric factorisation reusing a symbolic analysis of `a`'s pattern.
    pub fn factor(a: &BlockSparseMatrix, symbolic: Arc<SymbolicCholesky>) -> Result<Self> {
        let n = symbolic.n;
        if a.n_blocks() != n {
            return Err(CpoeError::PatternMismatch(format!(
                "matrix has {} block rows, analysis has {n}",
                a.n_blocks()
            )));
        }
        let bs = a.block_size();
        let mut l = vec![DMatrix::<f64>::zeros(0, 0); symbolic.n_slots];
        for i in 0..n {
            for &k in &symbolic.rows[i] {
                let s = symbolic.slot_of(i, k).unwrap();
                l[s] = match a.block(symbolic.perm[i], symbolic.perm[k]) {
                    Some(b) => b.clone(),
                    None => DMatrix::zeros(bs, bs),
                };
            }
        }
        for (oi, ok) in a.pattern().pairs() {
            if !symbolic.covers(oi, ok) {
                return Err(CpoeError::PatternMismatch(format!(
                    "block ({oi}, {ok}) is outside the analysed pattern"
                )));
            }
        }

        for i in 0..n {
            let row_i = &symbolic.rows[i];
            for (p, &k) in row_i.iter().enumerate() {
                let s_ik = symbolic.slot_of(i, k).unwrap();
                let mut acc = l[s_ik].clone();
                // Sum over m < k present in both row i and row k.
                let row_k = &symbolic.rows[k];
                let (mut a_pos, mut b_pos) = (0, 0);
                while a_pos < p && b_pos < row_k.len() {
                    let (ma, mb) = (row_i[a_pos], row_k[b_pos]);
                    if mb >= k {
                        break;
                    }
                    match ma.cmp(&mb) {
                        std::cmp::Ordering::Less => a_pos += 1,
                        std::cmp::Ordering::Greater => b_pos += 1,
                        std::cmp::Ordering::Equal => {
                            let lim = &l[symbolic.slot_of(i, ma).unwrap()];
                            let lkm = &l[symbolic.slot_of(k, ma).unwrap()];
                            acc -= lim * lkm.transpose();
                            a_pos += 1;
                            b_pos += 1;
                        }
                    }
                }
                if k < i {
                    let lkk = &l[symbolic.slot_of(k, k).unwrap()];
                    l[s_ik] = solve_lower(lkk, &acc.transpose()).transpose();
                } else {
                    symmetrize(&mut acc);
                    let c = nalgebra::Cholesky::new(acc).ok_or(CpoeError::BlockNotPositiveDefinite {
                        block: symbolic.perm[i],
                    })?;
                    l[s_ik] = c.l();
                }
            }
        }
        Ok(BlockCholesky {
            symbolic,
            block_size: bs,
            l,
        })
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    fn lblock(&self, i: usize, k: usize) -> &DMatrix<f64> {
        &self.l[self.symbolic.slot_of(i, k).unwrap()]
    }

    pub fn log_det(&self) -> f64 {
        (0..self.symbolic.n)
            .map(|i| {
                let d = self.lblock(i, i);
                2.0 * (0..self.block_size).map(|r| d[(r, r)].ln()).sum::<f64>()
            })
            .sum()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let sym = &self.symbolic;
        let bs = self.block_size;
        if b.len() != sym.n * bs {
            return Err(CpoeError::dims(format!("right-hand side has length {}, expected {}", b.len(), sym.n * bs)));
        }
        let mut y: Vec<DVector<f64>> = (0..sym.n)
            .map(|i| b.rows(sym.perm[i] * bs, bs).into_owned())
            .collect();
        for i in 0..sym.n {
            let mut r = y[i].clone();
            for &k in &sym.rows[i] {
                if k < i {
                    r -= self.lblock(i, k) * &y[k];
                }
            }
            y[i] = solve_lower_vec(self.lblock(i, i), &r);
        }
        for i in (0..sym.n).rev() {
            let mut r = y[i].clone();
            for &m in &sym.cols[i] {
                r -= self.lblock(m, i).tr_mul(&y[m]);
            }
            y[i] = solve_lower_tr_vec(self.lblock(i, i), &r);
        }
        let mut x = DVector::zeros(b.len());
        for i in 0..sym.n {
            x.rows_mut(sym.perm[i] * bs, bs).copy_from(&y[i]);
        }
        Ok(x)
    }

    /// Dense `L` in the permuted ordering.
    pub fn l_dense(&self) -> DMatrix<f64> {
        let bs = self.block_size;
        let n = self.symbolic.n;
        let mut out = DMatrix::zeros(n * bs, n * bs);
        for i in 0..n {
            for &k in &self.symbolic.rows[i] {
                out.view_mut((i * bs, k * bs), (bs, bs)).copy_from(self.lblock(i, k));
            }
        }
        out
    }

    /// Blocks of `A^{-1}` on the factor pattern (Takahashi recursion).
    pub fn partial_inverse(&self) -> Result<PartialInverse> {
        let sym = &self.symbolic;
        let bs = self.block_size;
        let mut z = vec![DMatrix::<f64>::zeros(0, 0); sym.n_slots];
        let eye = DMatrix::<f64>::identity(bs, bs);
        let get = |z: &Vec<DMatrix<f64>>, i: usize, k: usize| -> Result<DMatrix<f64>> {
            let (a, b, tr) = if i >= k { (i, k, false) } else { (k, i, true) };
            let s = sym.slot_of(a, b).ok_or_else(|| {
                CpoeError::PatternMismatch(format!("factor pattern is not closed at ({a}, {b})"))
            })?;
            Ok(if tr { z[s].transpose() } else { z[s].clone() })
        };
        for j in (0..sym.n).rev() {
            let linv = solve_lower(self.lblock(j, j), &eye);
            let col = &sym.cols[j];
            let y: Vec<DMatrix<f64>> = col.iter().map(|&k| self.lblock(k, j) * &linv).collect();
            for &i in col {
                let mut acc = DMatrix::zeros(bs, bs);
                for (p, &k) in col.iter().enumerate() {
                    acc -= get(&z, i, k)? * &y[p];
                }
                z[sym.slot_of(i, j).unwrap()] = acc;
            }
            let mut zjj = linv.tr_mul(&linv);
            for (p, &k) in col.iter().enumerate() {
                zjj -= z[sym.slot_of(k, j).unwrap()].tr_mul(&y[p]);
            }
            symmetrize(&mut zjj);
            z[sym.slot_of(j, j).unwrap()] = zjj;
        }
        Ok(PartialInverse {
            symbolic: self.symbolic.clone(),
            block_size: bs,
            z,
        })
    }
}

/// Blocks of the inverse on the Cholesky factor pattern, addressed with
/// original (unpermuted) block indices.
#[derive(Debug, Clone)]
pub struct PartialInverse {
    symbolic: Arc<SymbolicCholesky>,
    block_size: usize,
    z: Vec<DMatrix<f64>>,
}

impl PartialInverse {
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn get(&self, a: usize, b: usize) -> Option<DMatrix<f64>> {
        let sym = &self.symbolic;
        if a >= sym.n || b >= sym.n {
            return None;
        }
        let (i, k) = (sym.inv_perm[a], sym.inv_perm[b]);
        if i >= k {
            sym.slot_of(i, k).map(|s| self.z[s].clone())
        } else {
            sym.slot_of(k, i).map(|s| self.z[s].transpose())
        }
    }

    /// Dense sub-matrix over the block list; every pair must be available.
    pub fn dense_sub(&self, blocks: &[usize]) -> Result<DMatrix<f64>> {
        let bs = self.block_size;
        let mut out = DMatrix::zeros(blocks.len() * bs, blocks.len() * bs);
        for (p, &a) in blocks.iter().enumerate() {
            for (q, &b) in blocks.iter().enumerate().skip(p) {
                let m = self.get(a, b).ok_or_else(|| {
                    CpoeError::PatternMismatch(format!("inverse block ({a}, {b}) not on the factor pattern"))
                })?;
                out.view_mut((p * bs, q * bs), (bs, bs)).copy_from(&m);
                if p != q {
                    out.view_mut((q * bs, p * bs), (bs, bs)).copy_from(&m.transpose());
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random SPD matrix with the given block pattern.
    fn random_spd(pattern: &Arc<BlockPattern>, bs: usize, seed: u64) -> BlockSparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = pattern.n_blocks() * bs;
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for (a, b) in pattern.pairs() {
            if a > b {
                let blk = DMatrix::from_fn(bs, bs, |_, _| rng.gen_range(-1.0..1.0));
                dense.view_mut((a * bs, b * bs), (bs, bs)).copy_from(&blk);
                dense.view_mut((b * bs, a * bs), (bs, bs)).copy_from(&blk.transpose());
            }
        }
        // Diagonal dominance makes it SPD.
        for i in 0..n {
            let row: f64 = dense.row(i).iter().map(|v: &f64| v.abs()).sum();
            dense[(i, i)] = row + 1.0 + rng.gen::<f64>();
        }
        BlockSparseMatrix::from_dense(pattern.clone(), bs, &dense).unwrap()
    }

    fn random_pattern(n: usize, density: f64, seed: u64) -> Arc<BlockPattern> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in 0..a {
                if rng.gen::<f64>() < density {
                    pairs.push((a, b));
                }
            }
        }
        Arc::new(BlockPattern::symmetric(n, &pairs).unwrap())
    }

    #[test]
    fn arrow_matrix_has_no_fill_after_ordering() {
        let n = 6;
        let pairs: Vec<(usize, usize)> = (1..n).map(|i| (i, 0)).collect();
        let p = Arc::new(BlockPattern::symmetric(n, &pairs).unwrap());
        let sym = SymbolicCholesky::new(&p).unwrap();
        assert_eq!(sym.nnz_blocks(), n + (n - 1));
        let natural = SymbolicCholesky::with_permutation(&p, (0..n).collect()).unwrap();
        assert_eq!(natural.nnz_blocks(), n * (n + 1) / 2);
    }

    #[test]
    fn non_pd_block_is_reported() {
        let p = Arc::new(BlockPattern::symmetric(2, &[(1, 0)]).unwrap());
        let mut dense = DMatrix::identity(4, 4);
        dense[(2, 2)] = -1.0;
        let a = BlockSparseMatrix::from_dense(p, 2, &dense).unwrap();
        match BlockCholesky::with_permutation(&a, vec![0, 1]) {
            Err(CpoeError::BlockNotPositiveDefinite { block }) => assert_eq!(block, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn factor_solve_logdet_inverse_match_dense(
            n in 1usize..8,
            bs in 1usize..4,
            density in 0.0f64..0.8,
            seed in 0u64..10_000,
        ) {
            let p = random_pattern(n, density, seed);
            let a = random_spd(&p, bs, seed + 1);
            let dense = a.to_dense();
            let chol = BlockCholesky::new(&a).unwrap();

            let perm = chol.symbolic().permutation().to_vec();
            let pm = DMatrix::from_fn(n * bs, n * bs, |r, c| {
                if perm[r / bs] * bs + r % bs == c { 1.0 } else { 0.0 }
            });
            let l = chol.l_dense();
            let recon = &l * l.transpose();
            let target = &pm * &dense * pm.transpose();
            prop_assert!((recon - target).amax() < 1e-10);

            let b = DVector::from_fn(n * bs, |i, _| (i as f64 * 0.37).sin());
            let x = chol.solve(&b).unwrap();
            prop_assert!((&dense * &x - &b).amax() < 1e-10);

            let dc = nalgebra::Cholesky::new(dense.clone()).unwrap();
            let ld: f64 = 2.0 * dc.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            prop_assert!((chol.log_det() - ld).abs() < 1e-9 * ld.abs().max(1.0));

            let inv = dc.inverse();
            let z = chol.partial_inverse().unwrap();
            for (i, j) in p.pairs() {
                let want = inv.view((i * bs, j * bs), (bs, bs)).into_owned();
                let got = z.get(i, j).unwrap();
                prop_assert!((got - want).amax() < 1e-10);
            }
        }
    }
}
