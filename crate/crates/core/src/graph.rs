//! Expert graph: spatial partition, inducing inputs, ordering and
//! predecessor sets.
//!
//! Experts are addressed by their *position* in the ordering throughout the
//! crate. `cell_of` maps a position back to the partition cell it came from.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CpoeError, Result};
use crate::linalg::select_rows;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    /// Number of experts `J`, a power of two.
    pub n_experts: usize,
    /// Fraction of each expert's points kept as inducing inputs.
    pub gamma: f64,
    /// Correlation degree `C`: each expert is linked to `C - 1` predecessors.
    pub correlation: usize,
    pub seed: u64,
}

impl GraphConfig {
    pub fn new(n_experts: usize, gamma: f64, correlation: usize, seed: u64) -> Self {
        GraphConfig {
            n_experts,
            gamma,
            correlation,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpertGraph {
    pub n_experts: usize,
    pub gamma: f64,
    /// Effective correlation degree, clamped to `n_experts`.
    pub correlation: usize,
    pub seed: u64,
    /// Inducing points per expert `L`.
    pub n_inducing: usize,
    /// Training row indices of each expert, ascending.
    pub members: Vec<Vec<usize>>,
    /// Indices into `members[j]` of the inducing rows of expert `j`.
    pub inducing: Vec<Vec<usize>>,
    pub cell_of: Vec<usize>,
    /// Mean of each expert's inducing inputs.
    pub centers: Vec<Vec<f64>>,
    /// `C - 1` (or fewer) nearest earlier experts, ascending positions.
    pub predecessors: Vec<Vec<usize>>,
    /// Experts whose inducing values each expert's projection conditions on.
    pub correlation_sets: Vec<Vec<usize>>,
}

impl ExpertGraph {
    pub fn build(x: &DMatrix<f64>, cfg: &GraphConfig) -> Result<Self> {
        let j = cfg.n_experts;
        let cells = kd_partition(x, j)?;
        let min_b = cells.iter().map(|c| c.len()).min().unwrap_or(0);
        let l = inducing_count(cfg.gamma, min_b)?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let inducing_by_cell: Vec<Vec<usize>> = cells
            .iter()
            .map(|c| select_inducing_count(c.len(), l, &mut rng))
            .collect();
        let centers_by_cell: Vec<Vec<f64>> = cells
            .iter()
            .zip(&inducing_by_cell)
            .map(|(c, ind)| {
                let rows: Vec<usize> = ind.iter().map(|&i| c[i]).collect();
                mean_row(x, &rows)
            })
            .collect();
        let ordering = order_partitions(&centers_by_cell, &mut rng);

        let members = ordering.iter().map(|&c| cells[c].clone()).collect();
        let inducing = ordering.iter().map(|&c| inducing_by_cell[c].clone()).collect();
        Self::assemble(x, members, inducing, ordering, cfg.gamma, cfg.correlation, cfg.seed)
    }

    /// Builds a graph from experts already listed in their final order.
    /// Predecessors are still chosen by center distance.
    pub fn from_parts(
        x: &DMatrix<f64>,
        members: Vec<Vec<usize>>,
        inducing: Vec<Vec<usize>>,
        correlation: usize,
    ) -> Result<Self> {
        if members.len() != inducing.len() || members.is_empty() {
            return Err(CpoeError::config("need one inducing set per expert"));
        }
        let l = inducing[0].len();
        if l == 0 || inducing.iter().any(|s| s.len() != l) {
            return Err(CpoeError::config("every expert needs the same non-zero number of inducing points"));
        }
        for (m, s) in members.iter().zip(&inducing) {
            if s.iter().any(|&i| i >= m.len()) || m.iter().any(|&r| r >= x.nrows()) {
                return Err(CpoeError::config("inducing or member index out of range"));
            }
        }
        let ordering = (0..members.len()).collect();
        let gamma = l as f64 / members.iter().map(|m| m.len()).min().unwrap() as f64;
        Self::assemble(x, members, inducing, ordering, gamma, correlation, 0)
    }

    fn assemble(
        x: &DMatrix<f64>,
        members: Vec<Vec<usize>>,
        inducing: Vec<Vec<usize>>,
        cell_of: Vec<usize>,
        gamma: f64,
        correlation: usize,
        seed: u64,
    ) -> Result<Self> {
        let j = members.len();
        if correlation == 0 {
            return Err(CpoeError::config("correlation degree must be at least 1"));
        }
        let c = if correlation > j {
            log::warn!("correlation degree {correlation} exceeds {j} experts; clamping to {j}");
            j
        } else {
            correlation
        };
        let centers: Vec<Vec<f64>> = members
            .iter()
            .zip(&inducing)
            .map(|(m, ind)| {
                let rows: Vec<usize> = ind.iter().map(|&i| m[i]).collect();
                mean_row(x, &rows)
            })
            .collect();
        let predecessors = build_predecessors(&centers, c);
        let correlation_sets = correlation_sets(&predecessors, c);
        Ok(ExpertGraph {
            n_experts: j,
            gamma,
            correlation: c,
            seed,
            n_inducing: inducing[0].len(),
            members,
            inducing,
            cell_of,
            centers,
            predecessors,
            correlation_sets,
        })
    }

    pub fn n_points(&self) -> usize {
        self.members.iter().map(|m| m.len()).sum()
    }

    /// Global training rows of the inducing inputs of expert `j`.
    pub fn inducing_rows(&self, j: usize) -> Vec<usize> {
        self.inducing[j].iter().map(|&i| self.members[j][i]).collect()
    }

    /// Predecessors of `j` followed by `j` itself.
    pub fn family(&self, j: usize) -> Vec<usize> {
        let mut f = self.predecessors[j].clone();
        f.push(j);
        f
    }

    /// Block pairs `(a, b)` with `a >= b` that may be non-zero in the prior
    /// precision over all inducing values.
    pub fn precision_pattern(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for j in 0..self.n_experts {
            let f = self.family(j);
            for &a in &f {
                for &b in &f {
                    if a >= b {
                        pairs.push((a, b));
                    }
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }
}

/// `floor(gamma * b)`, failing when no inducing point would remain.
pub fn inducing_count(gamma: f64, b: usize) -> Result<usize> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(CpoeError::config(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let l = (gamma * b as f64 + 1e-9).floor() as usize;
    if l == 0 {
        return Err(CpoeError::config(format!(
            "gamma {gamma} leaves no inducing point for an expert with {b} points"
        )));
    }
    Ok(l.min(b))
}

/// Recursive median split into `j` cells along the widest dimension.
///
/// Each split sorts by coordinate (then row index) and gives the lower half,
/// rounded up, to the left cell. Cells come out in left-first order with
/// ascending row indices.
pub fn kd_partition(x: &DMatrix<f64>, j: usize) -> Result<Vec<Vec<usize>>> {
    if j == 0 || !j.is_power_of_two() {
        return Err(CpoeError::config(format!("number of experts must be a power of two, got {j}")));
    }
    let n = x.nrows();
    if n < j {
        return Err(CpoeError::config(format!("{n} points cannot fill {j} experts")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CpoeError::config("inputs must be finite"));
    }
    let mut cells = vec![(0..n).collect::<Vec<usize>>()];
    while cells.len() < j {
        let mut next = Vec::with_capacity(cells.len() * 2);
        for cell in cells {
            let (l, r) = split_cell(x, cell);
            next.push(l);
            next.push(r);
        }
        cells = next;
    }
    for c in &mut cells {
        c.sort_unstable();
    }
    Ok(cells)
}

fn split_cell(x: &DMatrix<f64>, mut cell: Vec<usize>) -> (Vec<usize>, Vec<usize>) {
    let mut best = (0, f64::NEG_INFINITY);
    for d in 0..x.ncols() {
        let (lo, hi) = cell.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            (lo.min(x[(i, d)]), hi.max(x[(i, d)]))
        });
        if hi - lo > best.1 {
            best = (d, hi - lo);
        }
    }
    let d = best.0;
    cell.sort_by(|&a, &b| x[(a, d)].total_cmp(&x[(b, d)]).then(a.cmp(&b)));
    let right = cell.split_off(cell.len().div_ceil(2));
    (cell, right)
}

/// Local indices of `floor(gamma * b)` inducing rows drawn without replacement.
pub fn select_inducing(b: usize, gamma: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let l = inducing_count(gamma, b)?;
    Ok(select_inducing_count(b, l, rng))
}

/// `l` distinct indices out of `0..b`, ascending. Taking all of them returns
/// `0..b` without consuming randomness.
pub fn select_inducing_count(b: usize, l: usize, rng: &mut impl Rng) -> Vec<usize> {
    if l >= b {
        return (0..b).collect();
    }
    let mut idx = sample(rng, b, l).into_vec();
    idx.sort_unstable();
    idx
}

/// Greedy nearest-neighbour chain through the cell centers from a random
/// start. Returns `ordering[position] = cell`.
pub fn order_partitions(centers: &[Vec<f64>], rng: &mut impl Rng) -> Vec<usize> {
    if centers.is_empty() {
        return Vec::new();
    }
    let start = rng.gen_range(0..centers.len());
    order_partitions_from(centers, start)
}

pub fn order_partitions_from(centers: &[Vec<f64>], start: usize) -> Vec<usize> {
    let j = centers.len();
    let mut used = vec![false; j];
    let mut order = Vec::with_capacity(j);
    let mut last = start;
    used[start] = true;
    order.push(start);
    while order.len() < j {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..j {
            if used[c] {
                continue;
            }
            let d = dist2(&centers[last], &centers[c]);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((c, d));
            }
        }
        let (c, _) = best.unwrap();
        used[c] = true;
        order.push(c);
        last = c;
    }
    order
}

/// For each position `j`, the `min(j, C - 1)` earlier positions closest to
/// `centers[j]` (ties to the lower position), sorted ascending.
pub fn build_predecessors(centers: &[Vec<f64>], c: usize) -> Vec<Vec<usize>> {
    (0..centers.len())
        .map(|j| {
            let mut prev: Vec<(f64, usize)> =
                (0..j).map(|k| (dist2(&centers[j], &centers[k]), k)).collect();
            prev.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut p: Vec<usize> = prev
                .into_iter()
                .take(c.saturating_sub(1))
                .map(|(_, k)| k)
                .collect();
            p.sort_unstable();
            p
        })
        .collect()
}

/// `{0, .., C-1}` for the first `C` experts, predecessors plus self after.
pub fn correlation_sets(predecessors: &[Vec<usize>], c: usize) -> Vec<Vec<usize>> {
    let c = c.min(predecessors.len()).max(1);
    predecessors
        .iter()
        .enumerate()
        .map(|(j, p)| {
            if j < c {
                (0..c).collect()
            } else {
                let mut s = p.clone();
                s.push(j);
                s
            }
        })
        .collect()
}

fn mean_row(x: &DMatrix<f64>, rows: &[usize]) -> Vec<f64> {
    let sub = select_rows(x, rows);
    (0..x.ncols())
        .map(|d| sub.column(d).sum() / rows.len() as f64)
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn fig_centers() -> Vec<Vec<f64>> {
        vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.1, 1.0],
            vec![0.0, 2.0],
        ]
    }

    #[test]
    fn predecessors_on_five_expert_layout() {
        let c = fig_centers();
        let p2 = build_predecessors(&c, 2);
        let want2: Vec<Vec<usize>> = vec![vec![], vec![0], vec![0], vec![1], vec![2]];
        assert_eq!(p2, want2);
        let p3 = build_predecessors(&c, 3);
        assert_eq!(p3[2], vec![0, 1]);
        assert_eq!(p3[3], vec![1, 2]);
        assert_eq!(p3[4], vec![2, 3]);
        let psi = correlation_sets(&p3, 3);
        assert_eq!(psi[0], vec![0, 1, 2]);
        assert_eq!(psi[1], vec![0, 1, 2]);
        assert_eq!(psi[3], vec![1, 2, 3]);
    }

    #[test]
    fn kd_split_gives_left_the_extra_point() {
        let x = DMatrix::from_row_slice(5, 1, &[4.0, 0.0, 2.0, 1.0, 3.0]);
        let cells = kd_partition(&x, 2).unwrap();
        assert_eq!(cells, vec![vec![1, 2, 3], vec![0, 4]]);
    }

    #[test]
    fn kd_splits_widest_dimension_first() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.1, 5.0, 0.2, 1.0, 0.3, 4.0]);
        let cells = kd_partition(&x, 2).unwrap();
        assert_eq!(cells, vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        assert!(kd_partition(&x, 3).is_err());
        assert!(kd_partition(&x, 8).is_err());
        assert!(inducing_count(0.1, 4).is_err());
        assert!(inducing_count(0.0, 4).is_err());
        assert_eq!(inducing_count(0.5, 5).unwrap(), 2);
        assert!(ExpertGraph::build(&x, &GraphConfig::new(2, 1.0, 0, 0)).is_err());
    }

    #[test]
    fn full_gamma_keeps_all_points_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_inducing(4, 1.0, &mut rng).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn correlation_is_clamped() {
        let x = DMatrix::from_fn(16, 2, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let g = ExpertGraph::build(&x, &GraphConfig::new(4, 1.0, 9, 3)).unwrap();
        assert_eq!(g.correlation, 4);
        assert!(g.correlation_sets.iter().all(|s| s == &vec![0, 1, 2, 3]));
    }

    proptest! {
        #[test]
        fn graph_invariants(
            n in 16usize..80,
            log_j in 0u32..4,
            c in 1usize..6,
            gamma in 0.3f64..1.0,
            seed in 0u64..1000,
        ) {
            let j = 1usize << log_j;
            prop_assume!(gamma * (n / j) as f64 >= 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let x = DMatrix::from_fn(n, 2, |_, _| rng.gen::<f64>());
            let g = ExpertGraph::build(&x, &GraphConfig::new(j, gamma, c, seed)).unwrap();

            // Partition covers every row exactly once, sizes differ by at most one.
            let mut all: Vec<usize> = g.members.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = g.members.iter().map(|m| m.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);

            // Inducing sets are distinct subsets of equal size.
            for s in &g.inducing {
                prop_assert_eq!(s.len(), g.n_inducing);
                prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
            }

            let mut ord = g.cell_of.clone();
            ord.sort_unstable();
            prop_assert_eq!(ord, (0..j).collect::<Vec<_>>());

            let cc = g.correlation;
            for (pos, p) in g.predecessors.iter().enumerate() {
                prop_assert_eq!(p.len(), pos.min(cc - 1));
                prop_assert!(p.iter().all(|&k| k < pos));
                prop_assert_eq!(g.correlation_sets[pos].len(), cc);
            }

            // Predecessor sets are nested in C.
            if cc < j {
                let bigger = build_predecessors(&g.centers, cc + 1);
                for (small, big) in g.predecessors.iter().zip(&bigger) {
                    prop_assert!(small.iter().all(|k| big.contains(k)));
                }
            }

            // Same seed, same graph.
            let h = ExpertGraph::build(&x, &GraphConfig::new(j, gamma, c, seed)).unwrap();
            prop_assert_eq!(&g.members, &h.members);
            prop_assert_eq!(&g.inducing, &h.inducing);
        }
    }
}
