//! Domain types shared by every stage of the pipeline.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::RngSpec;

/// Row-major `n_items × n_dims` matrix of finite feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_items: usize,
    n_dims: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n_items: usize, n_dims: usize, values: Vec<f64>) -> Result<Self> {
        if n_items == 0 || n_dims == 0 {
            return Err(Error::EmptyMatrix);
        }
        if values.len() != n_items * n_dims {
            return Err(Error::DimensionMismatch {
                expected: n_items * n_dims,
                found: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / n_dims + 1,
                col: pos % n_dims + 1,
            });
        }
        Ok(Self {
            n_items,
            n_dims,
            values,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_dims = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * n_dims);
        for row in rows {
            let row = row.as_ref();
            if row.len() != n_dims {
                return Err(Error::DimensionMismatch {
                    expected: n_dims,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(rows.len(), n_dims, values)
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_dims..(i + 1) * self.n_dims]
    }

    #[inline]
    pub fn get(&self, i: usize, dim: usize) -> f64 {
        self.values[i * self.n_dims + dim]
    }

    /// Copy of dimension `dim` across all items.
    pub fn column(&self, dim: usize) -> Vec<f64> {
        (0..self.n_items).map(|i| self.get(i, dim)).collect()
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * self.n_dims);
        for &r in rows {
            if r >= self.n_items {
                return Err(Error::InvalidParameter(format!(
                    "row {r} out of range for {} items",
                    self.n_items
                )));
            }
            values.extend_from_slice(self.row(r));
        }
        Self::new(rows.len(), self.n_dims, values)
    }

    pub fn expect_dims(&self, expected: usize) -> Result<()> {
        if self.n_dims != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: self.n_dims,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureDistribution {
    Uniform01,
    Gaussian,
}

impl FromStr for FeatureDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform01" | "uniform" => Ok(Self::Uniform01),
            "gaussian" | "normal" => Ok(Self::Gaussian),
            other => Err(Error::InvalidParameter(format!(
                "unknown distribution {other:?}"
            ))),
        }
    }
}

/// I.i.d. synthetic features, reproducible under `rng`.
pub fn synth_features(
    n: usize,
    f: usize,
    rng: &RngSpec,
    distribution: FeatureDistribution,
) -> Result<FeatureMatrix> {
    if n == 0 || f == 0 {
        return Err(Error::InvalidParameter(format!(
            "synth_features needs n >= 1 and f >= 1 (got n={n}, f={f})"
        )));
    }
    let mut gen = rng.rng();
    let values: Vec<f64> = match distribution {
        FeatureDistribution::Uniform01 => (0..n * f).map(|_| gen.random::<f64>()).collect(),
        FeatureDistribution::Gaussian => (0..n * f)
            .map(|_| StandardNormal.sample(&mut gen))
            .collect(),
    };
    FeatureMatrix::new(n, f, values)
}

/// Reference images for rank-1 counting.
///
/// `super_gallery` and `g_sim` are only consulted in averaged-gallery mode,
/// where the count is replaced by the probability that a random gallery of
/// `g_sim` images drawn from the super-gallery leaves the dimension rank-1.
#[derive(Debug, Clone)]
pub struct GallerySet {
    pub gallery: FeatureMatrix,
    pub super_gallery: Option<FeatureMatrix>,
    pub g_sim: usize,
}

impl GallerySet {
    pub fn fixed(gallery: FeatureMatrix) -> Self {
        let g_sim = gallery.n_items();
        Self {
            gallery,
            super_gallery: None,
            g_sim,
        }
    }

    pub fn with_super_gallery(
        gallery: FeatureMatrix,
        super_gallery: FeatureMatrix,
        g_sim: usize,
    ) -> Result<Self> {
        if super_gallery.n_dims() != gallery.n_dims() {
            return Err(Error::DimensionMismatch {
                expected: gallery.n_dims(),
                found: super_gallery.n_dims(),
            });
        }
        if g_sim == 0 || g_sim > super_gallery.n_items() {
            return Err(Error::InvalidParameter(format!(
                "g_sim must be in [1, {}], got {g_sim}",
                super_gallery.n_items()
            )));
        }
        Ok(Self {
            gallery,
            super_gallery: Some(super_gallery),
            g_sim,
        })
    }

    pub fn n_dims(&self) -> usize {
        self.gallery.n_dims()
    }

    pub fn size(&self) -> usize {
        self.gallery.n_items()
    }

    pub fn validate_against(&self, feats: &FeatureMatrix) -> Result<()> {
        feats.expect_dims(self.gallery.n_dims())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() || !w.is_finite() || !h.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "box ({x}, {y}, {w}, {h}) must be finite with positive size"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoxSource {
    Detector,
    Tracker,
}

impl fmt::Display for BoxSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoxSource::Detector => "detector",
            BoxSource::Tracker => "tracker",
        })
    }
}

impl FromStr for BoxSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "detector" | "det" => Ok(Self::Detector),
            "tracker" | "trk" => Ok(Self::Tracker),
            other => Err(Error::InvalidParameter(format!("unknown box source {other:?}"))),
        }
    }
}

/// One box in one frame: a detection, a tracker proposal, or an annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxObservation {
    pub frame: u64,
    pub rect: Rect,
    pub source: BoxSource,
    pub feature_index: Option<usize>,
    pub identity: Option<String>,
}

impl BoxObservation {
    pub fn detection(frame: u64, rect: Rect) -> Self {
        Self {
            frame,
            rect,
            source: BoxSource::Detector,
            feature_index: None,
            identity: None,
        }
    }

    pub fn with_feature(mut self, index: usize) -> Self {
        self.feature_index = Some(index);
        self
    }

    pub fn with_identity(mut self, identity: impl Into<String>) -> Self {
        self.identity = Some(identity.into());
        self
    }

    pub fn is_confirmed(&self) -> bool {
        self.source == BoxSource::Detector
    }
}

/// Time-contiguous run of boxes for one face.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: usize,
    pub observations: Vec<BoxObservation>,
    /// Trailing tracker-only boxes not yet confirmed by a detection.
    pub provisional_tail: usize,
}

impl Tracklet {
    pub fn new(id: usize, first: BoxObservation) -> Self {
        Self {
            id,
            observations: vec![first],
            provisional_tail: 0,
        }
    }

    pub fn first_frame(&self) -> u64 {
        self.observations.first().map(|o| o.frame).unwrap_or(0)
    }

    pub fn last_frame(&self) -> u64 {
        self.observations.last().map(|o| o.frame).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn last_confirmed(&self) -> Option<&BoxObservation> {
        self.observations.iter().rev().find(|o| o.is_confirmed())
    }

    /// The confirmed box before [`Self::last_confirmed`], if any.
    pub fn previous_confirmed(&self) -> Option<&BoxObservation> {
        self.observations.iter().rev().filter(|o| o.is_confirmed()).nth(1)
    }

    pub fn feature_indices(&self) -> Vec<usize> {
        self.observations.iter().filter_map(|o| o.feature_index).collect()
    }

    pub fn overlaps_in_time(&self, other: &Tracklet) -> bool {
        !self.is_empty()
            && !other.is_empty()
            && self.first_frame() <= other.last_frame()
            && other.first_frame() <= self.last_frame()
    }

    /// Checks contiguity and the patience bound.
    pub fn validate(&self, patience_alpha: usize) -> Result<()> {
        if self.observations.is_empty() {
            return Err(Error::InvalidParameter(format!("tracklet {} is empty", self.id)));
        }
        for w in self.observations.windows(2) {
            if w[1].frame != w[0].frame + 1 {
                return Err(Error::InvalidParameter(format!(
                    "tracklet {} is not contiguous between frames {} and {}",
                    self.id, w[0].frame, w[1].frame
                )));
            }
        }
        if self.provisional_tail > patience_alpha {
            return Err(Error::InvalidParameter(format!(
                "tracklet {} provisional tail {} exceeds patience {}",
                self.id, self.provisional_tail, patience_alpha
            )));
        }
        Ok(())
    }
}

/// Unordered do-not-link pairs, stored as `(min, max)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConstraintSet {
    pairs: BTreeSet<(usize, usize)>,
}

impl ConstraintSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: usize, b: usize) -> bool {
        if a == b {
            return false;
        }
        self.pairs.insert((a.min(b), a.max(b)))
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.pairs.contains(&(a.min(b), a.max(b)))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.pairs.iter().map(|&(_, b)| b).max()
    }
}

impl FromIterator<(usize, usize)> for ConstraintSet {
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        let mut set = ConstraintSet::new();
        for (a, b) in iter {
            set.insert(a, b);
        }
        set
    }
}

/// A partition of items `0..n` plus the constraints it was built under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    assignment: Vec<usize>,
    constraints: ConstraintSet,
}

impl Clustering {
    /// Builds from arbitrary labels; ids are renumbered densely in
    /// first-appearance order. Fails if a constrained pair shares a cluster.
    pub fn from_labels(labels: &[usize], constraints: ConstraintSet) -> Result<Self> {
        let assignment = renumber(labels);
        let clustering = Self {
            assignment,
            constraints,
        };
        if let Some((a, b)) = clustering.violations().first() {
            return Err(Error::InvalidParameter(format!(
                "do-not-link pair ({a}, {b}) shares a cluster"
            )));
        }
        Ok(clustering)
    }

    pub fn unconstrained(labels: &[usize]) -> Self {
        Self {
            assignment: renumber(labels),
            constraints: ConstraintSet::new(),
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn n_items(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.assignment.iter().max().map_or(0, |m| m + 1)
    }

    pub fn cluster_of(&self, item: usize) -> usize {
        self.assignment[item]
    }

    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters()];
        for (item, &c) in self.assignment.iter().enumerate() {
            out[c].push(item);
        }
        out
    }

    /// Constrained pairs that ended up in the same cluster.
    pub fn violations(&self) -> Vec<(usize, usize)> {
        self.constraints
            .iter()
            .filter(|&(a, b)| {
                a < self.assignment.len()
                    && b < self.assignment.len()
                    && self.assignment[a] == self.assignment[b]
            })
            .collect()
    }
}

fn renumber(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_with_position() {
        let err = FeatureMatrix::new(2, 2, vec![1.0, 2.0, f64::NAN, 4.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 2, col: 1 }));
    }

    #[test]
    fn rejects_empty() {
        assert!(matches!(FeatureMatrix::new(0, 3, vec![]), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn synth_is_deterministic() {
        let rng = RngSpec::new(7);
        let a = synth_features(1, 4, &rng, FeatureDistribution::Uniform01).unwrap();
        let b = synth_features(1, 4, &rng, FeatureDistribution::Uniform01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synth_uniform_range() {
        let m = synth_features(1000, 64, &RngSpec::new(1), FeatureDistribution::Uniform01).unwrap();
        assert!(m.values().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn synth_uniform_mean() {
        let rng = RngSpec::new(3);
        let m = synth_features(10_000, 1, &rng, FeatureDistribution::Uniform01).unwrap();
        // Oracle: the mean of the raw generator stream, drawn independently.
        let mut gen = rng.rng();
        let oracle: f64 = (0..10_000).map(|_| gen.random::<f64>()).sum::<f64>() / 10_000.0;
        let mean = m.values().iter().sum::<f64>() / 10_000.0;
        assert_eq!(mean, oracle);
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn clustering_rejects_violations() {
        let constraints: ConstraintSet = [(0, 1)].into_iter().collect();
        assert!(Clustering::from_labels(&[5, 5, 2], constraints.clone()).is_err());
        let c = Clustering::from_labels(&[5, 3, 5], constraints).unwrap();
        assert_eq!(c.assignment(), &[0, 1, 0]);
    }

    #[test]
    fn iou_half_overlap() {
        let a = Rect::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = Rect::new(5.0, 0.0, 10.0, 10.0).unwrap();
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-15);
    }
}
