//! Link-based clustering: threshold links plus transitive closure, realised
//! as single-linkage agglomeration that honours do-not-link constraints.
//!
//! Constrained pairs start at `+∞`. After merging cluster `j` into `i`, the
//! update is `d(i,k) = min(d(i,k), d(j,k))` unless either side is `+∞`, in
//! which case `d(i,k) = +∞`; a constraint therefore spreads to the whole
//! merged cluster and no later merge can violate it.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Clustering, ConstraintSet, Tracklet};
use crate::similarity::PairScoreTable;
use crate::union_find::UnionFind;

/// Symmetric dissimilarities over `n_items`, condensed upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    n_items: usize,
    values: Vec<f64>,
    constraints: ConstraintSet,
}

impl DissimilarityMatrix {
    /// All pairs at `+∞` (nothing links).
    pub fn new(n_items: usize) -> Self {
        Self {
            n_items,
            values: vec![f64::INFINITY; n_items * n_items.saturating_sub(1) / 2],
            constraints: ConstraintSet::new(),
        }
    }

    pub fn from_fn(n_items: usize, mut d: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut m = Self::new(n_items);
        for i in 0..n_items {
            for j in i + 1..n_items {
                let v = d(i, j);
                if v.is_nan() || v < 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "dissimilarity ({i}, {j}) = {v} must be >= 0"
                    )));
                }
                let k = m.offset(i, j);
                m.values[k] = v;
            }
        }
        Ok(m)
    }

    /// Overwrites every constrained pair with `+∞`.
    pub fn with_constraints(mut self, constraints: &ConstraintSet) -> Result<Self> {
        for (a, b) in constraints.iter() {
            if b >= self.n_items {
                return Err(Error::InvalidParameter(format!(
                    "constraint ({a}, {b}) out of range for {} items",
                    self.n_items
                )));
            }
            let k = self.offset(a, b);
            self.values[k] = f64::INFINITY;
            self.constraints.insert(a, b);
        }
        Ok(self)
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        i * self.n_items - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        self.values[self.offset(i.min(j), i.max(j))]
    }

    /// Dense `n × n` copy, `+∞` on the diagonal for the merge loops.
    fn dense(&self) -> Vec<f64> {
        let n = self.n_items;
        let mut d = vec![f64::INFINITY; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = self.values[self.offset(i, j)];
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        d
    }
}

/// `d = F − score`, then `+∞` on constrained pairs.
pub fn scores_to_dissimilarity(table: &PairScoreTable, f: f64, constraints: &ConstraintSet) -> Result<DissimilarityMatrix> {
    for (i, j, s) in table.iter() {
        if !(0.0..=f).contains(&s) {
            return Err(Error::ScoreOutOfRange { i, j, score: s, max: f });
        }
    }
    DissimilarityMatrix::from_fn(table.n_items(), |i, j| f - table.get(i, j))?.with_constraints(constraints)
}

/// Do-not-link pairs (by position in `tracklets`) for every two tracklets
/// that share a frame.
pub fn constraints_from_tracklets(tracklets: &[Tracklet]) -> ConstraintSet {
    let mut order: Vec<usize> = (0..tracklets.len()).collect();
    order.sort_by_key(|&k| (tracklets[k].first_frame(), k));
    let mut set = ConstraintSet::new();
    for (pos, &a) in order.iter().enumerate() {
        let end = tracklets[a].last_frame();
        for &b in &order[pos + 1..] {
            if tracklets[b].first_frame() > end {
                break;
            }
            if tracklets[a].overlaps_in_time(&tracklets[b]) {
                set.insert(a, b);
            }
        }
    }
    set
}

/// Do-not-link pairs for raw images: items sharing a frame id.
pub fn constraints_from_frames(frames: &[u64]) -> ConstraintSet {
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by_key(|&k| (frames[k], k));
    let mut set = ConstraintSet::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && frames[order[end]] == frames[order[start]] {
            end += 1;
        }
        for x in start..end {
            for y in x + 1..end {
                set.insert(order[x], order[y]);
            }
        }
        start = end;
    }
    set
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    /// Surviving cluster (the smaller index).
    pub into: usize,
    pub absorbed: usize,
    pub dissimilarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MergeTrace {
    pub merges: Vec<Merge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinkageAlgorithm {
    /// Per-row nearest-neighbour cache, `O(n²)` when constraints are sparse.
    #[default]
    Fast,
    /// Full rescan every iteration, `O(n³)`; kept as the reference.
    Naive,
}

impl FromStr for LinkageAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Self::Fast),
            "naive" => Ok(Self::Naive),
            other => Err(Error::InvalidParameter(format!("unknown linkage algorithm {other:?}"))),
        }
    }
}

#[inline]
fn combine(a: f64, b: f64) -> f64 {
    if a == f64::INFINITY || b == f64::INFINITY {
        f64::INFINITY
    } else {
        a.min(b)
    }
}

/// Merges the globally closest pair with `d < join_threshold` until none
/// remains. Ties go to the smallest `(i, j)`; the merged cluster keeps `i`.
pub fn constrained_single_linkage(
    d: &DissimilarityMatrix,
    join_threshold: f64,
    algorithm: LinkageAlgorithm,
) -> Result<(Clustering, MergeTrace)> {
    if !join_threshold.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "join threshold must be finite, got {join_threshold}"
        )));
    }
    let n = d.n_items();
    let mut dense = d.dense();
    let trace = match algorithm {
        LinkageAlgorithm::Naive => naive_merge_loop(n, &mut dense, join_threshold),
        LinkageAlgorithm::Fast => cached_merge_loop(n, &mut dense, join_threshold),
    };
    let mut uf = UnionFind::new(n);
    for m in &trace.merges {
        uf.union(m.into, m.absorbed);
    }
    let clustering = Clustering::from_labels(&uf.labels(), d.constraints().clone())?;
    Ok((clustering, trace))
}

fn apply_merge(n: usize, dense: &mut [f64], active: &[bool], i: usize, j: usize) {
    for k in 0..n {
        if k == i || k == j || !active[k] {
            continue;
        }
        let v = combine(dense[i * n + k], dense[j * n + k]);
        dense[i * n + k] = v;
        dense[k * n + i] = v;
    }
}

fn naive_merge_loop(n: usize, dense: &mut [f64], threshold: f64) -> MergeTrace {
    let mut active = vec![true; n];
    let mut trace = MergeTrace::default();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if !active[j] {
                    continue;
                }
                let v = dense[i * n + j];
                if v < threshold && best.is_none_or(|b| v < b.0) {
                    best = Some((v, i, j));
                }
            }
        }
        let Some((v, i, j)) = best else { break };
        apply_merge(n, dense, &active, i, j);
        active[j] = false;
        trace.merges.push(Merge {
            into: i,
            absorbed: j,
            dissimilarity: v,
        });
    }
    trace
}

/// `nn[i]` is the smallest `k > i` minimising `d(i, k)` over active `k`.
/// Selecting the row with the smallest `(d(i, nn[i]), i)` then reproduces the
/// lexicographic `(d, i, j)` rule of the naive loop.
fn cached_merge_loop(n: usize, dense: &mut [f64], threshold: f64) -> MergeTrace {
    let mut active = vec![true; n];
    let mut nn = vec![usize::MAX; n];
    let mut nn_d = vec![f64::INFINITY; n];
    let rescan = |i: usize, dense: &[f64], active: &[bool], nn: &mut [usize], nn_d: &mut [f64]| {
        let (mut best, mut arg) = (f64::INFINITY, usize::MAX);
        for k in i + 1..n {
            if active[k] && (arg == usize::MAX || dense[i * n + k] < best) {
                best = dense[i * n + k];
                arg = k;
            }
        }
        nn[i] = arg;
        nn_d[i] = best;
    };
    for i in 0..n {
        rescan(i, dense, &active, &mut nn, &mut nn_d);
    }

    let mut trace = MergeTrace::default();
    loop {
        let mut pick: Option<usize> = None;
        for i in 0..n {
            if active[i] && nn[i] != usize::MAX && nn_d[i] < threshold && pick.is_none_or(|p| nn_d[i] < nn_d[p]) {
                pick = Some(i);
            }
        }
        let Some(i) = pick else { break };
        let j = nn[i];
        let v = nn_d[i];
        apply_merge(n, dense, &active, i, j);
        active[j] = false;
        trace.merges.push(Merge {
            into: i,
            absorbed: j,
            dissimilarity: v,
        });

        rescan(i, dense, &active, &mut nn, &mut nn_d);
        for r in 0..n {
            if !active[r] || r == i {
                continue;
            }
            if r > i {
                // Row r only looks at k > r: it may have pointed at j.
                if nn[r] == j {
                    rescan(r, dense, &active, &mut nn, &mut nn_d);
                }
                continue;
            }
            let new_ri = dense[r * n + i];
            if nn[r] == i || nn[r] == j {
                let old = nn_d[r];
                if new_ri == old && new_ri.is_finite() {
                    // The old minimum survives at i, and every other index at
                    // that distance is larger than j > i.
                    nn[r] = i;
                } else {
                    rescan(r, dense, &active, &mut nn, &mut nn_d);
                }
            } else if new_ri < nn_d[r] || (new_ri == nn_d[r] && i < nn[r]) {
                nn[r] = i;
                nn_d[r] = new_ri;
            }
        }
    }
    trace
}

/// Union-find over every pair with `score > link_threshold`; constraints are
/// ignored.
pub fn transitive_closure(table: &PairScoreTable, link_threshold: f64) -> Clustering {
    let mut uf = UnionFind::new(table.n_items());
    for (i, j, s) in table.iter() {
        if s > link_threshold {
            uf.union(i, j);
        }
    }
    Clustering::unconstrained(&uf.labels())
}

/// Scores to clusters: `score > link_threshold` links, constraints hold.
pub fn cluster_scores(
    table: &PairScoreTable,
    f: f64,
    constraints: &ConstraintSet,
    link_threshold: f64,
    algorithm: LinkageAlgorithm,
) -> Result<(Clustering, MergeTrace)> {
    let d = scores_to_dissimilarity(table, f, constraints)?;
    constrained_single_linkage(&d, f - link_threshold, algorithm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoxObservation, Rect};

    fn tracklet(id: usize, frames: std::ops::RangeInclusive<u64>) -> Tracklet {
        let rect = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap();
        Tracklet {
            id,
            observations: frames.map(|f| BoxObservation::detection(f, rect)).collect(),
            provisional_tail: 0,
        }
    }

    #[test]
    fn dissimilarity_conversion() {
        let table = PairScoreTable::from_fn(3, |i, j| match (i, j) {
            (0, 1) => 10.0,
            (0, 2) => 0.0,
            _ => 10.0,
        });
        let constraints: ConstraintSet = [(1, 2)].into_iter().collect();
        let d = scores_to_dissimilarity(&table, 10.0, &constraints).unwrap();
        assert_eq!(d.get(0, 1), 0.0);
        assert_eq!(d.get(0, 2), 10.0);
        assert_eq!(d.get(1, 2), f64::INFINITY);
        let bad = PairScoreTable::from_fn(2, |_, _| 11.0);
        assert!(matches!(
            scores_to_dissimilarity(&bad, 10.0, &ConstraintSet::new()),
            Err(Error::ScoreOutOfRange { .. })
        ));
    }

    #[test]
    fn tracklet_overlap_constraints() {
        let ts = [tracklet(0, 1..=10), tracklet(1, 10..=20), tracklet(2, 21..=30)];
        let c = constraints_from_tracklets(&ts);
        assert!(c.contains(0, 1));
        assert!(!c.contains(1, 2));
        assert_eq!(c.len(), 1);
        let adjacent = [tracklet(0, 1..=10), tracklet(1, 11..=20)];
        assert!(constraints_from_tracklets(&adjacent).is_empty());
    }

    #[test]
    fn three_mutually_overlapping_tracklets() {
        let ts = [tracklet(0, 1..=10), tracklet(1, 5..=15), tracklet(2, 8..=9)];
        let c = constraints_from_tracklets(&ts);
        let brute: ConstraintSet = (0..3)
            .flat_map(|a| (a + 1..3).map(move |b| (a, b)))
            .filter(|&(a, b)| {
                let fa: Vec<u64> = ts[a].observations.iter().map(|o| o.frame).collect();
                ts[b].observations.iter().any(|o| fa.contains(&o.frame))
            })
            .collect();
        assert_eq!(c, brute);
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn frame_constraints() {
        let c = constraints_from_frames(&[3, 1, 3, 3, 2]);
        let expected: ConstraintSet = [(0, 2), (0, 3), (2, 3)].into_iter().collect();
        assert_eq!(c, expected);
    }

    #[test]
    fn all_close_gives_one_cluster() {
        let d = DissimilarityMatrix::from_fn(5, |_, _| 1.0).unwrap();
        for alg in [LinkageAlgorithm::Fast, LinkageAlgorithm::Naive] {
            let (c, trace) = constrained_single_linkage(&d, 2.0, alg).unwrap();
            assert_eq!(c.n_clusters(), 1);
            assert_eq!(trace.merges.len(), 4);
        }
    }

    #[test]
    fn nothing_below_threshold_gives_singletons() {
        let d = DissimilarityMatrix::from_fn(4, |_, _| 3.0).unwrap();
        let (c, trace) = constrained_single_linkage(&d, 3.0, LinkageAlgorithm::Fast).unwrap();
        assert_eq!(c.n_clusters(), 4);
        assert!(trace.merges.is_empty());
    }

    #[test]
    fn chain_with_end_constraint() {
        // Items 1..4 of the hand trace, zero-based here.
        let d = DissimilarityMatrix::from_fn(4, |i, j| if j == i + 1 { 1.0 } else { 10.0 })
            .unwrap()
            .with_constraints(&[(0, 3)].into_iter().collect())
            .unwrap();
        for alg in [LinkageAlgorithm::Fast, LinkageAlgorithm::Naive] {
            let (c, trace) = constrained_single_linkage(&d, 5.0, alg).unwrap();
            assert_eq!(c.clusters(), vec![vec![0, 1, 2], vec![3]]);
            let pairs: Vec<(usize, usize)> = trace.merges.iter().map(|m| (m.into, m.absorbed)).collect();
            assert_eq!(pairs, vec![(0, 1), (0, 2)]);
        }
    }

    #[test]
    fn infinite_threshold_is_rejected() {
        let d = DissimilarityMatrix::new(2);
        assert!(constrained_single_linkage(&d, f64::INFINITY, LinkageAlgorithm::Fast).is_err());
    }

    #[test]
    fn closure_chains() {
        let table = PairScoreTable::from_fn(4, |i, j| if (i, j) == (0, 1) || (i, j) == (1, 2) { 5.0 } else { 0.0 });
        assert_eq!(transitive_closure(&table, 1.0).assignment(), &[0, 0, 0, 1]);
        assert_eq!(transitive_closure(&table, 5.0).assignment(), &[0, 1, 2, 3]);
    }
}
