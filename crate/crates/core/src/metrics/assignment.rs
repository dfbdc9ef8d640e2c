//! Optimal assignment on dense score matrices.
//!
//! `maximize` is the O(n²m) Hungarian method with potentials over `f64`
//! costs; it accepts rectangular inputs (rows ≤ cols after an internal
//! transpose) and returns one column per row, or one row per column when
//! there are more rows than columns.

/// Matches each row to a distinct column maximizing the summed score.
///
/// Returns `(row, col)` pairs sorted by row; the number of pairs is
/// `min(rows, cols)`.
pub fn maximize(scores: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = scores.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = scores[0].len();
    debug_assert!(scores.iter().all(|r| r.len() == cols));
    if cols == 0 {
        return Vec::new();
    }
    if rows <= cols {
        let cost: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        solve_min(&cost)
            .into_iter()
            .enumerate()
            .collect()
    } else {
        let cost: Vec<Vec<f64>> = (0..cols)
            .map(|c| (0..rows).map(|r| -scores[r][c]).collect())
            .collect();
        let mut pairs: Vec<(usize, usize)> = solve_min(&cost)
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        pairs
    }
}

/// Square-or-wide minimization; `cost.len() <= cost[0].len()`.
/// Returns the assigned column of every row.
fn solve_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
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
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=m {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_instance() {
        let s = vec![vec![1.0, 5.0, 2.0], vec![4.0, 1.0, 1.0], vec![2.0, 2.0, 3.0]];
        assert_eq!(maximize(&s), vec![(0, 1), (1, 0), (2, 2)]);
    }

    #[test]
    fn rectangular_instances() {
        let wide = vec![vec![0.0, 1.0, 9.0], vec![0.0, 8.0, 9.5]];
        assert_eq!(maximize(&wide), vec![(0, 2), (1, 1)]);
        let tall = vec![vec![1.0], vec![3.0], vec![2.0]];
        assert_eq!(maximize(&tall), vec![(1, 0)]);
    }
}
