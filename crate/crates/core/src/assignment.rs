//! Optimal one-to-one assignment (Hungarian method with potentials).

/// Minimum-cost perfect assignment on a square cost matrix. Returns, for
/// each row, the assigned column.
pub fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is a virtual start node.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
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
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Maximum-total-weight partial matching of a `rows x cols` weight matrix,
/// restricted to pairs accepted by `allowed`. Allowed weights must be
/// positive. Returns `(row, col)` pairs sorted by row.
pub fn max_weight_matching<F>(weights: &[Vec<f64>], cols: usize, allowed: F) -> Vec<(usize, usize)>
where
    F: Fn(usize, usize) -> bool,
{
    let rows = weights.len();
    let n = rows.max(cols);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let mut cost = vec![vec![0.0; n]; n];
    for i in 0..rows {
        for j in 0..cols {
            if allowed(i, j) {
                cost[i][j] = -weights[i][j];
            }
        }
    }
    hungarian_min(&cost)
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < rows && j < cols && allowed(i, j))
        .collect()
}
