//! Rectangular Hungarian assignment (shortest augmenting path, O(n^3)).

use crate::error::{Error, Result};

/// Minimum-cost one-to-one assignment of every row to a distinct column.
///
/// `cost` is row-major `[rows, cols]` with `rows <= cols`. Returns the
/// assigned column for each row and the total cost. Deterministic: ties are
/// resolved by the fixed scan order.
pub fn assign_min_cost(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let m = cost.len();
    if m == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let n = cost[0].len();
    if cost.iter().any(|row| row.len() != n) {
        return Err(Error::shape("cost matrix rows differ in length"));
    }
    if m > n {
        return Err(Error::invalid(format!(
            "assignment needs rows <= cols, got {m} x {n}"
        )));
    }
    // Potentials u (rows), v (cols); p[j] = row matched to column j, 0 = free.
    // 1-based with column 0 as the virtual start.
    let mut u = vec![0.0f64; m + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        let mut way = vec![0usize; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
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
            for j in 0..=n {
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
        // augment along the found path
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; m];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .sum();
    Ok((row_to_col, total))
}

/// Exhaustive-permutation minimum, usable as an oracle for small n.
pub fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
    let m = cost.len();
    if m == 0 {
        return 0.0;
    }
    let n = cost[0].len();
    let mut best = f64::INFINITY;
    let mut cols: Vec<usize> = (0..n).collect();
    permute_k(&mut cols, 0, m, &mut |chosen| {
        let total: f64 = chosen
            .iter()
            .take(m)
            .enumerate()
            .map(|(i, &j)| cost[i][j])
            .sum();
        if total < best {
            best = total;
        }
    });
    best
}

fn permute_k(cols: &mut Vec<usize>, depth: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    if depth == k {
        f(cols);
        return;
    }
    for i in depth..cols.len() {
        cols.swap(depth, i);
        permute_k(cols, depth + 1, k, f);
        cols.swap(depth, i);
    }
}
