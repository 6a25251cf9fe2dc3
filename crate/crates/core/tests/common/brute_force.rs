//! Exhaustive reference for square assignment problems.

use napl_core::{hungarian_match, CostMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MATRICES: usize = 100;
pub const SIZES: std::ops::RangeInclusive<usize> = 2..=7;

/// Row-order sum of the chosen entries.
pub fn total(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// The lexicographically first permutation of minimum total cost.
pub fn brute_force(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    fn visit(cost: &[Vec<f64>], perm: &mut Vec<usize>, used: &mut [bool], best: &mut Option<(Vec<usize>, f64)>) {
        let n = cost.len();
        if perm.len() == n {
            let t = total(cost, perm);
            if best.as_ref().is_none_or(|(_, b)| t < *b) {
                *best = Some((perm.clone(), t));
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                visit(cost, perm, used, best);
                perm.pop();
                used[j] = false;
            }
        }
    }
    let mut best = None;
    visit(cost, &mut Vec::new(), &mut vec![false; cost.len()], &mut best);
    best.expect("non-empty matrix")
}

/// Counts of matrices where the matcher's total cost, and its assignment,
/// equal the exhaustive optimum.
pub struct MatchingResult {
    pub kind: &'static str,
    pub n: usize,
    pub matrices: usize,
    pub equal_cost: usize,
    pub equal_assignment: usize,
}

impl MatchingResult {
    pub fn passed(&self) -> bool {
        self.equal_cost == self.matrices && self.equal_assignment == self.matrices
    }
}

/// Integer costs in `0..5` (many ties) and real costs in `[-10, 10)`.
pub fn matching_checks() -> Vec<MatchingResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut out = Vec::new();
    for kind in ["integer", "real"] {
        for n in SIZES {
            let mut r = MatchingResult { kind, n, matrices: MATRICES, equal_cost: 0, equal_assignment: 0 };
            for _ in 0..MATRICES {
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        (0..n)
                            .map(|_| match kind {
                                "integer" => rng.random_range(0..5) as f64,
                                _ => rng.random_range(-10.0..10.0),
                            })
                            .collect()
                    })
                    .collect();
                let m = hungarian_match(&CostMatrix::from_rows(&rows).unwrap()).unwrap();
                let (perm, best) = brute_force(&rows);
                r.equal_cost += (total(&rows, m.as_slice()) == best) as usize;
                r.equal_assignment += (m.as_slice() == perm.as_slice()) as usize;
            }
            out.push(r);
        }
    }
    out
}
