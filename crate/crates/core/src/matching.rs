//! Minimum-cost perfect matching on square cost matrices.
//!
//! The optimum comes from the O(n³) shortest-augmenting-path form of the
//! Hungarian algorithm. Among optimal assignments the lexicographically
//! smallest one is returned: with the final dual potentials, every optimal
//! assignment uses only tight edges, so a greedy pass over rows picks the
//! smallest tight column that still admits a perfect matching of the rest.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Row-major `n x n` cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::contract(format!(
                "cost matrix must be square: {} entries for n = {n}",
                data.len()
            )));
        }
        Ok(CostMatrix { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::contract("cost matrix must be square"));
        }
        Self::new(n, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// An injective, total map from rows (padded ground truth) to columns
/// (surviving predictions).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    assignment: Vec<usize>,
}

impl Matching {
    /// Validates that `assignment` is a permutation of `0..columns` prefix
    /// targets: in range and injective.
    pub fn new(assignment: Vec<usize>, columns: usize) -> Result<Self> {
        let mut seen = vec![false; columns];
        for (i, &j) in assignment.iter().enumerate() {
            if j >= columns {
                return Err(Error::contract(format!(
                    "row {i} matched to column {j} of {columns}"
                )));
            }
            if core::mem::replace(&mut seen[j], true) {
                return Err(Error::contract(format!("column {j} matched twice")));
            }
        }
        Ok(Matching { assignment })
    }

    pub fn column(&self, row: usize) -> usize {
        self.assignment[row]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.assignment
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// `Σ_i cost(i, σ(i))`, summed in row order.
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| cost.get(i, j))
            .sum()
    }
}

/// Minimum total cost assignment, lexicographically smallest among ties.
pub fn hungarian_match(cost: &CostMatrix) -> Result<Matching> {
    if let Some(pos) = cost.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::contract(format!(
            "cost entry ({}, {}) is not finite",
            pos / cost.n.max(1),
            pos % cost.n.max(1)
        )));
    }
    let n = cost.n;
    if n == 0 {
        return Ok(Matching {
            assignment: Vec::new(),
        });
    }
    let (mut row_of_col, u, v) = solve(cost);
    let scale = cost.data.iter().fold(1.0f64, |m, &x| m.max(x.abs()));
    let tol = 1e-9 * scale;
    let tight = |i: usize, j: usize| cost.get(i, j) - u[i + 1] - v[j + 1] <= tol;

    let mut col_of_row = vec![0usize; n];
    for (j, &r) in row_of_col.iter().enumerate() {
        col_of_row[r] = j;
    }
    let mut locked = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if locked[j] || !tight(i, j) {
                continue;
            }
            let current = col_of_row[i];
            if current == j {
                break;
            }
            // Move row i to column j; the displaced row must reach the
            // column i frees through tight edges among unlocked columns.
            let displaced = row_of_col[j];
            let mut blocked = locked.clone();
            blocked[j] = true;
            let mut visited = vec![false; n];
            let mut trial_cols = col_of_row.clone();
            let mut trial_rows = row_of_col.clone();
            trial_rows[current] = usize::MAX;
            if augment(
                displaced,
                &tight,
                &blocked,
                &mut visited,
                &mut trial_cols,
                &mut trial_rows,
            ) {
                trial_cols[i] = j;
                trial_rows[j] = i;
                col_of_row = trial_cols;
                row_of_col = trial_rows;
                break;
            }
        }
        locked[col_of_row[i]] = true;
    }
    Matching::new(col_of_row, n)
}

/// Kuhn's augmenting search from `row` over tight, unblocked columns.
fn augment(
    row: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    blocked: &[bool],
    visited: &mut [bool],
    col_of_row: &mut [usize],
    row_of_col: &mut [usize],
) -> bool {
    for j in 0..blocked.len() {
        if blocked[j] || visited[j] || !tight(row, j) {
            continue;
        }
        visited[j] = true;
        let owner = row_of_col[j];
        if owner == usize::MAX || augment(owner, tight, blocked, visited, col_of_row, row_of_col) {
            col_of_row[row] = j;
            row_of_col[j] = row;
            return true;
        }
    }
    false
}

/// Shortest augmenting path Hungarian algorithm. Returns the row matched to
/// each column and the 1-based dual potentials `(u, v)`.
fn solve(cost: &CostMatrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.n;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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
    let row_of_col = (1..=n).map(|j| p[j] - 1).collect();
    (row_of_col, u, v)
}
