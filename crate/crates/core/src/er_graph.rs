//! Erdős–Rényi `G(n, p)` connectivity simulation.
//!
//! A graph on `n` vertices with independent edges of probability
//! `p > (1 + ε) ln n / n` is almost surely connected. This is why a verifier
//! with modest recall still joins a large cluster into one component.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::create;
use crate::rng::RngSpec;
use crate::union_find::UnionFind;

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityCurve {
    pub n: usize,
    pub p_grid: Vec<f64>,
    pub prob_connected: Vec<f64>,
    pub trials: usize,
}

impl ConnectivityCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        let wrap = |e| Error::io(path, e);
        writeln!(w, "p,prob_connected,trials").map_err(wrap)?;
        for (p, q) in self.p_grid.iter().zip(&self.prob_connected) {
            writeln!(w, "{p},{q},{}", self.trials).map_err(wrap)?;
        }
        w.flush().map_err(wrap)
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("edge probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Draws one graph (one uniform per potential edge, `(i, j)` with `i < j` in
/// row-major order) and reports whether it is connected.
pub fn sample_connected<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> bool {
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                uf.union(i, j);
            }
        }
    }
    uf.components() <= 1
}

pub fn sample_and_check(n: usize, p: f64, rng: &RngSpec) -> Result<bool> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".into()));
    }
    check_p(p)?;
    Ok(sample_connected(n, p, &mut rng.rng()))
}

/// Monte-Carlo connectivity probability per grid point. Trial `k` draws from
/// `rng.derive(k)` at every grid point, so the estimates share random
/// numbers across `p` and the curve is monotone in `p`.
pub fn connectivity_curve(n: usize, p_grid: &[f64], trials: usize, rng: &RngSpec) -> Result<ConnectivityCurve> {
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be >= 1".into()));
    }
    for &p in p_grid {
        check_p(p)?;
    }
    if p_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("p grid must be strictly increasing".into()));
    }
    let prob_connected = p_grid
        .iter()
        .map(|&p| {
            let hits: usize = (0..trials)
                .into_par_iter()
                .map(|k| usize::from(sample_connected(n, p, &mut rng.derive(k as u64).rng())))
                .sum();
            hits as f64 / trials as f64
        })
        .collect();
    Ok(ConnectivityCurve {
        n,
        p_grid: p_grid.to_vec(),
        prob_connected,
        trials,
    })
}

/// `(1 + ε) ln n / n`.
pub fn er_threshold(n: usize, epsilon: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("n must be >= 2, got {n}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be > 0, got {epsilon}")));
    }
    let n = n as f64;
    Ok((1.0 + epsilon) * n.ln() / n)
}
