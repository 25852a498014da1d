use super::BlockPattern;

/// Minimum-degree elimination order of an undirected graph.
///
/// Eliminating a node connects all of its remaining neighbours. Ties go to
/// the lower original degree, then the lower index, so a hub of an arrow
/// shaped graph is eliminated last. Returns `perm[new] = old`.
pub fn minimum_degree(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut nbr: Vec<Vec<bool>> = vec![vec![false; n]; n];
    for (i, list) in adj.iter().enumerate() {
        for &j in list {
            if i != j {
                nbr[i][j] = true;
                nbr[j][i] = true;
            }
        }
    }
    let orig_deg: Vec<usize> = nbr.iter().map(|r| r.iter().filter(|&&b| b).count()).collect();
    let mut deg = orig_deg.clone();
    let mut alive = vec![true; n];
    let mut perm = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&i| alive[i])
            .min_by_key(|&i| (deg[i], orig_deg[i], i))
            .unwrap();
        alive[v] = false;
        perm.push(v);
        let live: Vec<usize> = (0..n).filter(|&u| alive[u] && nbr[v][u]).collect();
        for &a in &live {
            nbr[a][v] = false;
            deg[a] -= 1;
        }
        for (p, &a) in live.iter().enumerate() {
            for &b in &live[p + 1..] {
                if !nbr[a][b] {
                    nbr[a][b] = true;
                    nbr[b][a] = true;
                    deg[a] += 1;
                    deg[b] += 1;
                }
            }
        }
    }
    perm
}

/// Minimum-degree permutation of the block graph of `pattern`.
pub fn fill_reducing_permutation(pattern: &BlockPattern) -> Vec<usize> {
    minimum_degree(&pattern.adjacency())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrow_hub_goes_last() {
        // Node 0 touches everything else: eliminating it first fills the
        // whole matrix.
        let n = 6;
        let pairs: Vec<(usize, usize)> = (1..n).map(|i| (i, 0)).collect();
        let p = BlockPattern::symmetric(n, &pairs).unwrap();
        let perm = fill_reducing_permutation(&p);
        assert_eq!(*perm.last().unwrap(), 0);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn path_graph_eliminates_ends_first() {
        let adj = vec![vec![1], vec![0, 2], vec![1, 3], vec![2]];
        let perm = minimum_degree(&adj);
        assert_eq!(perm[0], 0);
        assert_eq!(perm.len(), 4);
    }
}
