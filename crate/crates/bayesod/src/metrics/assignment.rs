//! Maximum-weight bipartite assignment (Hungarian algorithm with
//! potentials) for the detection/ground-truth pairing in the PDQ metric.

/// Assigns rows to columns maximizing the total weight. Returns, per row,
/// the assigned column (every row on the smaller side gets one).
pub(crate) fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = weights[0].len();
    if cols == 0 {
        return vec![None; rows];
    }
    if rows <= cols {
        let cost: Vec<Vec<f64>> = weights
            .iter()
            .map(|r| r.iter().map(|w| -w).collect())
            .collect();
        hungarian_min(&cost).into_iter().map(Some).collect()
    } else {
        // transpose so the row side is the smaller one
        let cost: Vec<Vec<f64>> = (0..cols)
            .map(|c| (0..rows).map(|r| -weights[r][c]).collect())
            .collect();
        let col_to_row = hungarian_min(&cost);
        let mut out = vec![None; rows];
        for (c, r) in col_to_row.into_iter().enumerate() {
            out[r] = Some(c);
        }
        out
    }
}

/// Minimum-cost assignment for `n <= m`; returns the column chosen for each
/// row. Classic O(n^2 m) potentials formulation with 1-based bookkeeping.
fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    debug_assert!(n <= m);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut matched = vec![0usize; m + 1]; // row matched to column j, 0 = free
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if matched[j] > 0 {
            out[matched[j] - 1] = j - 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_best(weights: &[Vec<f64>]) -> f64 {
        let cols = weights[0].len();
        let mut best = f64::NEG_INFINITY;
        let mut cols_perm: Vec<usize> = (0..cols).collect();
        // enumerate all injective row -> column maps via permutations of columns
        fn recurse(
            weights: &[Vec<f64>],
            row: usize,
            remaining: &mut Vec<usize>,
            acc: f64,
            best: &mut f64,
        ) {
            if row == weights.len() || remaining.is_empty() {
                *best = best.max(acc);
                return;
            }
            // leave this row unassigned
            recurse(weights, row + 1, remaining, acc, best);
            for idx in 0..remaining.len() {
                let col = remaining.remove(idx);
                recurse(weights, row + 1, remaining, acc + weights[row][col], best);
                remaining.insert(idx, col);
            }
        }
        recurse(weights, 0, &mut cols_perm, 0.0, &mut best);
        best
    }

    fn total(weights: &[Vec<f64>], assignment: &[Option<usize>]) -> f64 {
        assignment
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| weights[r][c]))
            .sum()
    }

    #[test]
    fn simple_cases() {
        let w = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let a = max_weight_assignment(&w);
        assert_eq!(a, vec![Some(1), Some(0)]);

        // more rows than columns: one row stays unassigned
        let w = vec![vec![5.0], vec![9.0], vec![1.0]];
        let a = max_weight_assignment(&w);
        assert_eq!(a, vec![None, Some(0), None]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            rows in 1usize..5,
            cols in 1usize..5,
            seed in 0u64..500,
        ) {
            let mut rng = crate::stream::derive_rng(seed, &[40]);
            use rand::Rng;
            let weights: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let a = max_weight_assignment(&weights);
            let got = total(&weights, &a);
            let best = brute_force_best(&weights);
            prop_assert!((got - best).abs() < 1e-9, "got {got}, best {best}");
            // injectivity
            let mut seen = std::collections::HashSet::new();
            for c in a.iter().flatten() {
                prop_assert!(seen.insert(*c));
            }
        }
    }
}
