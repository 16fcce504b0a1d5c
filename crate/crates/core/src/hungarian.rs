//! Maximum-weight bipartite assignment (Kuhn–Munkres with potentials).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the assigned weights, accumulated in row order.
    pub total: f64,
}

/// One-to-one assignment between rows and columns maximising the total
/// weight. Every row is assigned when `rows <= cols`, every column
/// otherwise. An empty matrix yields an empty assignment.
pub fn hungarian_match(weights: &[Vec<f64>]) -> Result<Assignment> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    for (r, row) in weights.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                found: row.len(),
            });
        }
        if let Some(c) = row.iter().position(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter(format!("weight ({r}, {c}) is not finite")));
        }
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total: 0.0,
        });
    }

    let mut pairs = if rows <= cols {
        min_cost_assignment(rows, cols, |r, c| -weights[r][c])
    } else {
        min_cost_assignment(cols, rows, |r, c| -weights[c][r])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| weights[r][c]).sum();
    Ok(Assignment { pairs, total })
}

/// Classic `O(n²m)` shortest-augmenting-path solver for `n <= m`.
fn min_cost_assignment(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    debug_assert!(n <= m);
    // 1-based; column 0 and row 0 are sentinels.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=m {
                if used[col] {
                    continue;
                }
                let reduced = cost(r0 - 1, col - 1) - u[r0] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=m {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&c| owner[c] != 0)
        .map(|c| (owner[c] - 1, c - 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let a = hungarian_match(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert!((a.total - 1.7).abs() < 1e-15);
    }

    #[test]
    fn single_cell() {
        let a = hungarian_match(&[vec![0.5]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
    }

    #[test]
    fn rectangular_both_ways() {
        let wide = hungarian_match(&[vec![0.1, 0.9, 0.3]]).unwrap();
        assert_eq!(wide.pairs, vec![(0, 1)]);
        let tall = hungarian_match(&[vec![0.1], vec![0.9], vec![0.3]]).unwrap();
        assert_eq!(tall.pairs, vec![(1, 0)]);
    }

    #[test]
    fn prefers_total_over_greedy() {
        // Greedy takes (0,0)=10 then (1,1)=1; optimum is 9 + 9.
        let a = hungarian_match(&[vec![10.0, 9.0], vec![9.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total, 18.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian_match(&[vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(hungarian_match(&[vec![f64::NAN]]).is_err());
        assert!(hungarian_match(&[]).unwrap().pairs.is_empty());
    }
}
