//! Linear assignment: exact Hungarian solver plus a brute-force oracle.
//!
//! Row `i` of a [`CostMatrix`] is a data point (agent), column `j` a noise
//! sample (task). An [`Assignment`] maps every row to a distinct column.

use crate::error::{Error, Result};

/// Largest side length accepted by [`brute_force_solve`].
pub const BRUTE_FORCE_MAX_N: usize = 10;

/// Square matrix of finite, non-negative pairing costs (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    /// Builds a matrix from row-major storage of side `n`.
    pub fn new(n: usize, costs: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation("cost", "matrix must have at least one row"));
        }
        if costs.len() != n * n {
            return Err(Error::validation(
                "cost",
                format!("expected {} entries for a {n}x{n} matrix, got {}", n * n, costs.len()),
            ));
        }
        if let Some(pos) = costs.iter().position(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::validation(
                "cost",
                format!(
                    "entry ({}, {}) = {} is not a finite non-negative value",
                    pos / n,
                    pos % n,
                    costs[pos]
                ),
            ));
        }
        Ok(CostMatrix { n, costs })
    }

    /// Builds a matrix from nested rows, rejecting ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::validation(
                "cost",
                format!("matrix is not square: row {i} has {} entries, expected {n}", r.len()),
            ));
        }
        CostMatrix::new(n, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.costs[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.costs[row * self.n..(row + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.costs
    }

    /// Returns a copy with `f` applied to every entry.
    pub fn map(&self, f: impl Fn(usize, usize, f64) -> f64) -> Result<Self> {
        let n = self.n;
        let costs = self
            .costs
            .iter()
            .enumerate()
            .map(|(k, &c)| f(k / n, k % n, c))
            .collect();
        CostMatrix::new(n, costs)
    }
}

/// A bijection row → column with its total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `permutation[i]` is the column assigned to row `i`.
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

/// Σ_i cost[i][perm[i]] for a caller-supplied permutation.
pub fn assignment_cost(cost: &CostMatrix, perm: &[usize]) -> Result<f64> {
    validate_permutation(perm, cost.n())?;
    Ok(sum_along(cost, perm))
}

pub(crate) fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::validation(
            "permutation",
            format!("length {} does not match matrix size {n}", perm.len()),
        ));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::validation("permutation", "not a bijection on 0..n"));
        }
        seen[p] = true;
    }
    Ok(())
}

fn sum_along(cost: &CostMatrix, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
}

/// Exact minimum-cost assignment in O(n³).
///
/// Shortest-augmenting-path Hungarian method with row/column potentials: rows are
/// inserted one at a time and each insertion runs a Dijkstra-like scan over the
/// reduced costs `c[i][j] − u[i] − v[j]`, which stay non-negative throughout.
/// Column scan order is fixed, so ties resolve deterministically.
pub fn hungarian_solve(cost: &CostMatrix) -> Assignment {
    let n = cost.n();
    // 1-based internally; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut min_to = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        min_to.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let row = cost.row(i0 - 1);
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = row[j - 1] - ui0 - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        // Flip the alternating path back to the source.
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut permutation = vec![0usize; n];
    for j in 1..=n {
        permutation[row_of_col[j] - 1] = j - 1;
    }
    let total_cost = sum_along(cost, &permutation);
    Assignment {
        permutation,
        total_cost,
    }
}

/// Exhaustive minimum over all n! permutations, visited in lexicographic order.
/// The first permutation reaching the minimum wins. Refuses `n > 10`.
pub fn brute_force_solve(cost: &CostMatrix) -> Result<Assignment> {
    let n = cost.n();
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::validation(
            "cost",
            format!("brute force limited to n <= {BRUTE_FORCE_MAX_N}, got {n}"),
        ));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = sum_along(cost, &perm);
    while next_permutation(&mut perm) {
        let c = sum_along(cost, &perm);
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&perm);
        }
    }
    Ok(Assignment {
        permutation: best,
        total_cost: best_cost,
    })
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
