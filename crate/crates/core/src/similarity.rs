//! Rank-1 counts similarity.
//!
//! For items `A`, `B` and a reference gallery `R¹..Rᴳ`, dimension `i` is
//! *rank-1* when `|Aᵢ − Bᵢ| < minⱼ |Aᵢ − Rʲᵢ|`. The exact score counts rank-1
//! dimensions. The averaged score replaces each indicator by the probability
//! that a gallery of `g` images drawn with replacement from a super-gallery of
//! `G` images contains none of the `K` super-gallery images closer to `A`
//! than `B` is: `(1 − K/G)^g`.
//!
//! Both are directed (anchored at `A`); the symmetric score is the max over
//! the two orderings. The naive functions here are the reference path;
//! [`rank1_all_pairs_fast`] computes the same table from per-dimension sorted
//! values and must agree with the naive path bit for bit.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{create, numeric_rows, parse_cell, read_to_string};
use crate::model::{FeatureMatrix, GallerySet, Tracklet};
use crate::rng::RngSpec;

/// Dimensions processed per pass in the fast path; bounds the sorted-column
/// working set to `DIM_BLOCK × (N + G)` values.
const DIM_BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreMode {
    ExactFixedGallery,
    AveragedGallery,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::ExactFixedGallery => "exact",
            ScoreMode::AveragedGallery => "averaged",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" | "exact_fixed_gallery" | "fixed" => Ok(Self::ExactFixedGallery),
            "averaged" | "averaged_gallery" | "average" => Ok(Self::AveragedGallery),
            other => Err(Error::InvalidParameter(format!("unknown score mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScore {
    pub value: f64,
    pub mode: ScoreMode,
}

/// Symmetric pair scores over `n_items`, condensed upper triangle, no
/// self-pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScoreTable {
    n_items: usize,
    scores: Vec<f64>,
}

impl PairScoreTable {
    pub fn new(n_items: usize) -> Self {
        Self {
            n_items,
            scores: vec![0.0; n_items * n_items.saturating_sub(1) / 2],
        }
    }

    pub fn from_fn(n_items: usize, mut score: impl FnMut(usize, usize) -> f64) -> Self {
        let mut table = Self::new(n_items);
        for i in 0..n_items {
            for j in i + 1..n_items {
                let k = table.offset(i, j);
                table.scores[k] = score(i, j);
            }
        }
        table
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_pairs(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n_items);
        i * self.n_items - i * (i + 1) / 2 + (j - i - 1)
    }

    /// Score for an unordered pair; panics on `i == j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert_ne!(i, j, "no self-pairs in a PairScoreTable");
        self.scores[self.offset(i.min(j), i.max(j))]
    }

    pub fn set(&mut self, i: usize, j: usize, score: f64) {
        assert_ne!(i, j, "no self-pairs in a PairScoreTable");
        let k = self.offset(i.min(j), i.max(j));
        self.scores[k] = score;
    }

    /// `(i, j, score)` with `i < j`, lexicographic.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.n_items;
        (0..n)
            .flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
            .zip(self.scores.iter().copied())
            .map(|((i, j), s)| (i, j, s))
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        let wrap = |e| Error::io(path, e);
        writeln!(w, "i,j,score").map_err(wrap)?;
        for (i, j, s) in self.iter() {
            writeln!(w, "{i},{j},{s}").map_err(wrap)?;
        }
        w.flush().map_err(wrap)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    /// Every unordered pair over `0..n` must appear exactly once, where `n`
    /// is one more than the largest index seen.
    pub fn parse_csv(text: &str, context: &str) -> Result<Self> {
        let rows = numeric_rows(text, context)?;
        let mut entries = Vec::with_capacity(rows.len());
        for (line, cells) in &rows {
            let i: usize = parse_cell(cells, 0, context, *line)?;
            let j: usize = parse_cell(cells, 1, context, *line)?;
            let s: f64 = parse_cell(cells, 2, context, *line)?;
            if i == j {
                return Err(Error::parse(context, *line, "self-pair"));
            }
            if !s.is_finite() {
                return Err(Error::parse(context, *line, "non-finite score"));
            }
            entries.push((*line, i, j, s));
        }
        let n = entries.iter().map(|e| e.1.max(e.2) + 1).max().unwrap_or(0);
        let mut table = Self::new(n);
        let mut seen = vec![false; table.n_pairs()];
        for (line, i, j, s) in entries {
            let k = table.offset(i.min(j), i.max(j));
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::parse(context, line, format!("duplicate pair ({i}, {j})")));
            }
            table.scores[k] = s;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let (i, j) = table.iter().nth(missing).map(|(i, j, _)| (i, j)).unwrap();
            return Err(Error::parse(context, 0, format!("missing pair ({i}, {j})")));
        }
        Ok(table)
    }
}

/// `f / (g + 1)`: expected directed exact count for unrelated items drawn
/// from the same distribution as the gallery.
pub fn expected_count(f: usize, g: usize) -> Result<f64> {
    if f == 0 || g == 0 {
        return Err(Error::InvalidParameter(format!(
            "expected_count needs f >= 1 and g >= 1 (got f={f}, g={g})"
        )));
    }
    Ok(f as f64 / (g as f64 + 1.0))
}

/// `(1 − K/G)^g`.
#[inline]
pub fn averaged_term(closer: usize, super_size: usize, g_sim: usize) -> f64 {
    (1.0 - closer as f64 / super_size as f64).powi(g_sim as i32)
}

/// Directed exact count anchored at `a`, by brute force over the gallery.
pub fn directed_exact(a: &[f64], b: &[f64], gallery: &FeatureMatrix) -> u32 {
    let mut count = 0;
    for dim in 0..a.len() {
        let d_ab = (a[dim] - b[dim]).abs();
        let mut nearest = f64::INFINITY;
        for j in 0..gallery.n_items() {
            nearest = nearest.min((a[dim] - gallery.get(j, dim)).abs());
        }
        if d_ab < nearest {
            count += 1;
        }
    }
    count
}

/// Directed averaged score anchored at `a`, by brute force over the
/// super-gallery.
pub fn directed_averaged(a: &[f64], b: &[f64], super_gallery: &FeatureMatrix, g_sim: usize) -> f64 {
    let size = super_gallery.n_items();
    let mut total = 0.0;
    for dim in 0..a.len() {
        let d_ab = (a[dim] - b[dim]).abs();
        let closer = (0..size)
            .filter(|&j| (a[dim] - super_gallery.get(j, dim)).abs() < d_ab)
            .count();
        total += averaged_term(closer, size, g_sim);
    }
    total
}

fn directed(a: &[f64], b: &[f64], gal: &GallerySet, mode: ScoreMode) -> Result<f64> {
    match mode {
        ScoreMode::ExactFixedGallery => Ok(directed_exact(a, b, &gal.gallery) as f64),
        ScoreMode::AveragedGallery => {
            let sg = gal.super_gallery.as_ref().ok_or(Error::MissingSuperGallery)?;
            Ok(directed_averaged(a, b, sg, gal.g_sim))
        }
    }
}

fn check_pair(a_idx: usize, b_idx: usize, feats: &FeatureMatrix, gal: &GallerySet) -> Result<()> {
    gal.validate_against(feats)?;
    if a_idx == b_idx {
        return Err(Error::InvalidParameter(format!("self-pair ({a_idx}, {b_idx})")));
    }
    for idx in [a_idx, b_idx] {
        if idx >= feats.n_items() {
            return Err(Error::InvalidParameter(format!(
                "item {idx} out of range for {} items",
                feats.n_items()
            )));
        }
    }
    Ok(())
}

/// Directed exact rank-1 count anchored at `a_idx`.
pub fn rank1_count_naive(
    a_idx: usize,
    b_idx: usize,
    feats: &FeatureMatrix,
    gal: &GallerySet,
) -> Result<SimilarityScore> {
    check_pair(a_idx, b_idx, feats, gal)?;
    Ok(SimilarityScore {
        value: directed_exact(feats.row(a_idx), feats.row(b_idx), &gal.gallery) as f64,
        mode: ScoreMode::ExactFixedGallery,
    })
}

pub fn rank1_count_symmetric(
    a_idx: usize,
    b_idx: usize,
    feats: &FeatureMatrix,
    gal: &GallerySet,
) -> Result<SimilarityScore> {
    let ab = rank1_count_naive(a_idx, b_idx, feats, gal)?;
    let ba = rank1_count_naive(b_idx, a_idx, feats, gal)?;
    Ok(SimilarityScore {
        value: ab.value.max(ba.value),
        mode: ScoreMode::ExactFixedGallery,
    })
}

/// Directed averaged-gallery score anchored at `a_idx`.
pub fn rank1_prob_averaged(
    a_idx: usize,
    b_idx: usize,
    feats: &FeatureMatrix,
    gal: &GallerySet,
) -> Result<SimilarityScore> {
    check_pair(a_idx, b_idx, feats, gal)?;
    Ok(SimilarityScore {
        value: directed(feats.row(a_idx), feats.row(b_idx), gal, ScoreMode::AveragedGallery)?,
        mode: ScoreMode::AveragedGallery,
    })
}

pub fn rank1_prob_averaged_symmetric(
    a_idx: usize,
    b_idx: usize,
    feats: &FeatureMatrix,
    gal: &GallerySet,
) -> Result<SimilarityScore> {
    let ab = rank1_prob_averaged(a_idx, b_idx, feats, gal)?;
    let ba = rank1_prob_averaged(b_idx, a_idx, feats, gal)?;
    Ok(SimilarityScore {
        value: ab.value.max(ba.value),
        mode: ScoreMode::AveragedGallery,
    })
}

/// Symmetric score for one pair in either mode, via the naive path.
pub fn pair_score_naive(
    a_idx: usize,
    b_idx: usize,
    feats: &FeatureMatrix,
    gal: &GallerySet,
    mode: ScoreMode,
) -> Result<SimilarityScore> {
    match mode {
        ScoreMode::ExactFixedGallery => rank1_count_symmetric(a_idx, b_idx, feats, gal),
        ScoreMode::AveragedGallery => rank1_prob_averaged_symmetric(a_idx, b_idx, feats, gal),
    }
}

/// Naive double loop over all unordered pairs.
pub fn rank1_all_pairs_naive(feats: &FeatureMatrix, gal: &GallerySet, mode: ScoreMode) -> Result<PairScoreTable> {
    gal.validate_against(feats)?;
    if mode == ScoreMode::AveragedGallery && gal.super_gallery.is_none() {
        return Err(Error::MissingSuperGallery);
    }
    let n = feats.n_items();
    let mut table = PairScoreTable::new(n);
    for i in 0..n {
        for j in i + 1..n {
            table.set(i, j, pair_score_naive(i, j, feats, gal, mode)?.value);
        }
    }
    Ok(table)
}

/// Full directed score matrix (`n × n`, row = anchor) computed from sorted
/// per-dimension values. Diagonal entries are left at zero.
pub fn directed_matrix_fast(feats: &FeatureMatrix, gal: &GallerySet, mode: ScoreMode) -> Result<Vec<f64>> {
    gal.validate_against(feats)?;
    let (reference, g_sim) = match mode {
        ScoreMode::ExactFixedGallery => (&gal.gallery, 0),
        ScoreMode::AveragedGallery => (
            gal.super_gallery.as_ref().ok_or(Error::MissingSuperGallery)?,
            gal.g_sim,
        ),
    };
    let n = feats.n_items();
    let n_dims = feats.n_dims();
    let ref_size = reference.n_items();
    // (1 - K/G)^g for every K; the naive path evaluates the same expression.
    let terms: Vec<f64> = (0..=ref_size).map(|k| averaged_term(k, ref_size, g_sim)).collect();

    let mut directed = vec![0.0f64; n * n];
    let dims: Vec<usize> = (0..n_dims).collect();
    for block in dims.chunks(DIM_BLOCK) {
        let sorted: Vec<SortedDim> = block
            .par_iter()
            .map(|&dim| SortedDim::new(feats, reference, dim))
            .collect();
        directed.par_chunks_mut(n).enumerate().for_each(|(anchor, row)| {
            for col in &sorted {
                let a = col.item_values[anchor];
                match mode {
                    ScoreMode::ExactFixedGallery => col.credit_exact(anchor, a, row),
                    ScoreMode::AveragedGallery => col.credit_averaged(anchor, a, &terms, row),
                }
            }
        });
    }
    Ok(directed)
}

/// One feature dimension: items in original order, items sorted by value,
/// and the sorted reference values.
struct SortedDim {
    item_values: Vec<f64>,
    sorted_items: Vec<(f64, usize)>,
    sorted_ref: Vec<f64>,
}

impl SortedDim {
    fn new(feats: &FeatureMatrix, reference: &FeatureMatrix, dim: usize) -> Self {
        let item_values = feats.column(dim);
        let mut sorted_items: Vec<(f64, usize)> = item_values.iter().copied().zip(0..).collect();
        sorted_items.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut sorted_ref = reference.column(dim);
        sorted_ref.sort_by(f64::total_cmp);
        Self {
            item_values,
            sorted_items,
            sorted_ref,
        }
    }

    /// Smallest `|a − r|` over the reference values. Rounded subtraction is
    /// monotone, so the minimum sits at one of the two sorted neighbours.
    fn nearest_ref_distance(&self, a: f64) -> f64 {
        let pos = self.sorted_ref.partition_point(|&r| r < a);
        let mut best = f64::INFINITY;
        if pos > 0 {
            best = best.min((a - self.sorted_ref[pos - 1]).abs());
        }
        if pos < self.sorted_ref.len() {
            best = best.min((a - self.sorted_ref[pos]).abs());
        }
        best
    }

    /// Credits every item `b` with `|a − b| < radius`. The set is a
    /// contiguous run of the sorted items because `|a − b|` is monotone in
    /// `b` on either side of `a`, including after rounding.
    fn credit_exact(&self, anchor: usize, a: f64, row: &mut [f64]) {
        let radius = self.nearest_ref_distance(a);
        let lo = self
            .sorted_items
            .partition_point(|&(v, _)| v < a && (a - v).abs() >= radius);
        let hi = self
            .sorted_items
            .partition_point(|&(v, _)| v < a || (v - a).abs() < radius);
        for &(_, b) in &self.sorted_items[lo..hi.max(lo)] {
            if b != anchor {
                row[b] += 1.0;
            }
        }
    }

    /// For every `b`, counts reference values strictly closer to `a` than
    /// `b` is, and adds the corresponding averaged term.
    fn credit_averaged(&self, anchor: usize, a: f64, terms: &[f64], row: &mut [f64]) {
        for (b, &v) in self.item_values.iter().enumerate() {
            if b == anchor {
                continue;
            }
            let d = (a - v).abs();
            let lo = self.sorted_ref.partition_point(|&r| r < a && (a - r).abs() >= d);
            let hi = self.sorted_ref.partition_point(|&r| r < a || (r - a).abs() < d);
            row[b] += terms[hi.saturating_sub(lo)];
        }
    }
}

/// All-pairs symmetric scores via per-dimension sorting.
pub fn rank1_all_pairs_fast(feats: &FeatureMatrix, gal: &GallerySet, mode: ScoreMode) -> Result<PairScoreTable> {
    let n = feats.n_items();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 items, got {n}")));
    }
    let directed = directed_matrix_fast(feats, gal, mode)?;
    Ok(PairScoreTable::from_fn(n, |i, j| {
        directed[i * n + j].max(directed[j * n + i])
    }))
}

fn sample_members(t: &Tracklet, sample_size: usize, rng: &mut impl rand::Rng) -> Result<Vec<usize>> {
    let members = t.feature_indices();
    if members.is_empty() {
        return Err(Error::NoFeatureMembers(t.id));
    }
    let take = sample_size.min(members.len());
    let mut picked: Vec<usize> = sample(rng, members.len(), take).into_iter().collect();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|k| members[k]).collect())
}

fn check_members(members: &[usize], feats: &FeatureMatrix) -> Result<()> {
    match members.iter().find(|&&m| m >= feats.n_items()) {
        Some(m) => Err(Error::InvalidParameter(format!(
            "feature index {m} out of range for {} items",
            feats.n_items()
        ))),
        None => Ok(()),
    }
}

/// Tracklet-to-tracklet score: up to `sample_size` members drawn without
/// replacement from each tracklet, directed scores for every ordered cross
/// pair, maximum taken.
pub fn tracklet_similarity(
    t1: &Tracklet,
    t2: &Tracklet,
    feats: &FeatureMatrix,
    gal: &GallerySet,
    sample_size: usize,
    mode: ScoreMode,
    rng: &RngSpec,
) -> Result<SimilarityScore> {
    gal.validate_against(feats)?;
    let mut gen = rng.rng();
    let s1 = sample_members(t1, sample_size, &mut gen)?;
    let s2 = sample_members(t2, sample_size, &mut gen)?;
    check_members(&s1, feats)?;
    check_members(&s2, feats)?;
    let mut best = 0.0f64;
    for &a in &s1 {
        for &b in &s2 {
            best = best.max(directed(feats.row(a), feats.row(b), gal, mode)?);
            best = best.max(directed(feats.row(b), feats.row(a), gal, mode)?);
        }
    }
    Ok(SimilarityScore { value: best, mode })
}

/// Scores for every pair of tracklets. Each tracklet is sampled once, from
/// the stream `rng.derive(position)`; member scores come from the fast path.
pub fn tracklet_score_table(
    tracklets: &[Tracklet],
    feats: &FeatureMatrix,
    gal: &GallerySet,
    sample_size: usize,
    mode: ScoreMode,
    rng: &RngSpec,
) -> Result<PairScoreTable> {
    let samples: Vec<Vec<usize>> = tracklets
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let picked = sample_members(t, sample_size, &mut rng.derive(k as u64).rng())?;
            check_members(&picked, feats)?;
            Ok(picked)
        })
        .collect::<Result<_>>()?;

    let mut universe: Vec<usize> = samples.iter().flatten().copied().collect();
    universe.sort_unstable();
    universe.dedup();
    let local = |item: usize| universe.binary_search(&item).unwrap();
    let subset = feats.select(&universe)?;
    let m = universe.len();
    let directed = directed_matrix_fast(&subset, gal, mode)?;
    // Self-pairs (shared members) are not produced by the fast path.
    let self_score = |i: usize| directed_self(subset.row(i), gal, mode);

    let local_samples: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| s.iter().map(|&x| local(x)).collect())
        .collect();
    let mut table = PairScoreTable::new(tracklets.len());
    for t1 in 0..tracklets.len() {
        for t2 in t1 + 1..tracklets.len() {
            let mut best = 0.0f64;
            for &a in &local_samples[t1] {
                for &b in &local_samples[t2] {
                    let s = if a == b {
                        self_score(a)?
                    } else {
                        directed[a * m + b].max(directed[b * m + a])
                    };
                    best = best.max(s);
                }
            }
            table.set(t1, t2, best);
        }
    }
    Ok(table)
}

fn directed_self(a: &[f64], gal: &GallerySet, mode: ScoreMode) -> Result<f64> {
    directed(a, a, gal, mode)
}
