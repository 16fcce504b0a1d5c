//! Automatic link threshold.
//!
//! The all-pairs score histogram of a clustering problem is dominated by
//! mismatched pairs, and its left half (bins below the mode) almost entirely
//! so. A mismatched-pairs histogram from a labeled reference set is mapped
//! through `x → s·x + t` and fitted to that left half; the right tail of the
//! fitted histogram then gives the threshold for a target false-positive rate.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{create, numeric_rows, parse_cell, read_to_string};
use crate::similarity::PairScoreTable;

pub const DEFAULT_TARGET_FPR: f64 = 1e-6;
pub const SCALE_MIN: f64 = 0.5;
pub const SCALE_MAX: f64 = 2.0;
pub const SCALE_STEP: f64 = 0.01;
pub const FIT_OBJECTIVE: &str = "least_squares_left_of_mode";

/// Histogram over `[0, max_score]` with bins `[k·w, (k+1)·w)`. The last bin
/// holds `max_score` itself. Bins are real-valued so fitted (fractional)
/// histograms share the type.
#[derive(Debug, Clone, PartialEq)]
pub struct CountHistogram {
    bin_width: f64,
    bins: Vec<f64>,
}

impl CountHistogram {
    pub fn empty(bin_width: f64, max_score: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width.is_finite()) {
            return Err(Error::InvalidParameter(format!("bin width must be positive, got {bin_width}")));
        }
        if !(max_score >= 0.0 && max_score.is_finite()) {
            return Err(Error::InvalidParameter(format!("max score must be >= 0, got {max_score}")));
        }
        let n_bins = (max_score / bin_width).floor() as usize + 1;
        Ok(Self {
            bin_width,
            bins: vec![0.0; n_bins],
        })
    }

    pub fn from_bins(bin_width: f64, bins: Vec<f64>) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width.is_finite()) {
            return Err(Error::InvalidParameter(format!("bin width must be positive, got {bin_width}")));
        }
        if bins.is_empty() {
            return Err(Error::EmptyHistogram);
        }
        if bins.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::InvalidParameter("histogram bins must be finite and non-negative".into()));
        }
        Ok(Self { bin_width, bins })
    }

    pub fn from_samples(samples: impl IntoIterator<Item = f64>, bin_width: f64, max_score: f64) -> Result<Self> {
        let mut h = Self::empty(bin_width, max_score)?;
        for s in samples {
            h.add(s, max_score)?;
        }
        Ok(h)
    }

    fn add(&mut self, score: f64, max_score: f64) -> Result<()> {
        if !(0.0..=max_score).contains(&score) {
            return Err(Error::ScoreOutOfRange {
                i: 0,
                j: 0,
                score,
                max: max_score,
            });
        }
        let k = self.bin_of(score);
        self.bins[k] += 1.0;
        Ok(())
    }

    pub fn bin_of(&self, score: f64) -> usize {
        ((score / self.bin_width).floor().max(0.0) as usize).min(self.bins.len() - 1)
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn left_edge(&self, k: usize) -> f64 {
        k as f64 * self.bin_width
    }

    /// Right edge of the last bin.
    pub fn upper_edge(&self) -> f64 {
        self.bins.len() as f64 * self.bin_width
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0.0 {
            return vec![0.0; self.bins.len()];
        }
        self.bins.iter().map(|b| b / total).collect()
    }

    /// Argmax bin, leftmost on ties.
    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (k, &b) in self.bins.iter().enumerate() {
            if b > self.bins[best] {
                best = k;
            }
        }
        best
    }

    pub fn nonzero_bins(&self) -> usize {
        self.bins.iter().filter(|&&b| b > 0.0).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        let wrap = |e| Error::io(path, e);
        writeln!(w, "bin_left_edge,count").map_err(wrap)?;
        for (k, b) in self.bins.iter().enumerate() {
            writeln!(w, "{},{}", self.left_edge(k), b).map_err(wrap)?;
        }
        w.flush().map_err(wrap)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    /// Edges must start at 0 and be evenly spaced; the spacing is the bin
    /// width (1 for a single-row file).
    pub fn parse_csv(text: &str, context: &str) -> Result<Self> {
        let mut edges = Vec::new();
        let mut bins = Vec::new();
        for (line, cells) in numeric_rows(text, context)? {
            edges.push((line, parse_cell::<f64>(&cells, 0, context, line)?));
            bins.push(parse_cell::<f64>(&cells, 1, context, line)?);
        }
        if bins.is_empty() {
            return Err(Error::EmptyHistogram);
        }
        let width = if edges.len() > 1 { edges[1].1 - edges[0].1 } else { 1.0 };
        for (k, &(line, e)) in edges.iter().enumerate() {
            let want = k as f64 * width;
            if (e - want).abs() > 1e-9 * width.max(1.0) {
                return Err(Error::parse(context, line, format!("bin edge {e}, expected {want}")));
            }
        }
        Self::from_bins(width, bins)
    }
}

/// Histogram of every unordered pair score in `table`.
pub fn all_pairs_histogram(table: &PairScoreTable, bin_width: f64, max_score: f64) -> Result<CountHistogram> {
    if table.is_empty() {
        return Err(Error::EmptyHistogram);
    }
    let mut h = CountHistogram::empty(bin_width, max_score)?;
    for (i, j, s) in table.iter() {
        h.add(s, max_score).map_err(|_| Error::ScoreOutOfRange {
            i,
            j,
            score: s,
            max: max_score,
        })?;
    }
    Ok(h)
}

/// Histogram of pairs whose items carry different labels; the reference
/// input for [`fit_left_half`].
pub fn mismatched_histogram<L: PartialEq>(
    table: &PairScoreTable,
    labels: &[L],
    bin_width: f64,
    max_score: f64,
) -> Result<CountHistogram> {
    if labels.len() != table.n_items() {
        return Err(Error::DimensionMismatch {
            expected: table.n_items(),
            found: labels.len(),
        });
    }
    let mut h = CountHistogram::empty(bin_width, max_score)?;
    for (i, j, s) in table.iter() {
        if labels[i] != labels[j] {
            h.add(s, max_score).map_err(|_| Error::ScoreOutOfRange {
                i,
                j,
                score: s,
                max: max_score,
            })?;
        }
    }
    if h.total() == 0.0 {
        return Err(Error::EmptyHistogram);
    }
    Ok(h)
}

/// Result of fitting a transformed reference histogram to a test histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct LeftHalfFit {
    pub scale: f64,
    pub location: f64,
    pub residual: f64,
    /// Bins strictly below this one were fitted.
    pub mode_bin: usize,
    /// Transformed reference on the test grid, scaled so its left-half mass
    /// equals the test left-half mass.
    pub fitted: CountHistogram,
}

impl LeftHalfFit {
    pub fn estimated_mismatched_mass(&self) -> f64 {
        self.fitted.total()
    }
}

/// Maps `reference` through `x → s·x + t` onto the bin grid of `target`.
/// Each reference bin is treated as uniform mass over its interval and split
/// across the target bins it overlaps. Mass falling outside the grid is
/// clamped into the first or last bin, so total mass is preserved.
pub fn transform_histogram(reference: &CountHistogram, scale: f64, location: f64, target_width: f64, target_bins: usize) -> Vec<f64> {
    let mut out = vec![0.0; target_bins];
    let top = target_bins as f64 * target_width;
    for (k, &mass) in reference.bins().iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let lo = scale * reference.left_edge(k) + location;
        let hi = scale * reference.left_edge(k + 1) + location;
        let span = hi - lo;
        if lo < 0.0 {
            out[0] += mass * ((0.0f64.min(hi) - lo) / span);
        }
        if hi > top {
            out[target_bins - 1] += mass * ((hi - top.max(lo)) / span);
        }
        let (clo, chi) = (lo.max(0.0), hi.min(top));
        if chi <= clo {
            continue;
        }
        let first = ((clo / target_width).floor() as usize).min(target_bins - 1);
        let last = ((chi / target_width).ceil() as usize).min(target_bins);
        for (m, slot) in out.iter_mut().enumerate().take(last).skip(first) {
            let b_lo = m as f64 * target_width;
            let overlap = chi.min(b_lo + target_width) - clo.max(b_lo);
            if overlap > 0.0 {
                *slot += mass * overlap / span;
            }
        }
    }
    out
}

fn left_half_residual(test_left: &[f64], transformed: &[f64]) -> f64 {
    let mass: f64 = transformed[..test_left.len()].iter().sum();
    if mass <= 0.0 {
        return f64::INFINITY;
    }
    test_left
        .iter()
        .zip(transformed)
        .map(|(t, r)| {
            let d = t - r / mass;
            d * d
        })
        .sum()
}

/// Location grid: multiples of the test bin width in `[−F/8, F/8]`, where
/// `F` is the test histogram's upper edge.
pub fn location_grid(test: &CountHistogram) -> Vec<f64> {
    let reach = test.upper_edge() / 8.0;
    let w = test.bin_width();
    let lo = (-reach / w).ceil() as i64;
    let hi = (reach / w).floor() as i64;
    (lo..=hi).map(|k| k as f64 * w).collect()
}

pub fn scale_grid() -> Vec<f64> {
    let steps = ((SCALE_MAX - SCALE_MIN) / SCALE_STEP).round() as usize;
    (0..=steps).map(|i| SCALE_MIN + i as f64 * SCALE_STEP).collect()
}

/// Grid search over scale and location minimising the squared difference of
/// unit-normalized left halves. Ties go to the smallest scale, then the
/// smallest location.
pub fn fit_left_half(test: &CountHistogram, reference: &CountHistogram) -> Result<LeftHalfFit> {
    if test.total() <= 0.0 || reference.total() <= 0.0 {
        return Err(Error::EmptyHistogram);
    }
    if test.nonzero_bins() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let mode = test.mode();
    if mode == 0 {
        return Err(Error::DegenerateHistogram);
    }
    let test_left_mass: f64 = test.bins()[..mode].iter().sum();
    if test_left_mass <= 0.0 {
        return Err(Error::DegenerateHistogram);
    }
    let test_left: Vec<f64> = test.bins()[..mode].iter().map(|b| b / test_left_mass).collect();

    let scales = scale_grid();
    let locations = location_grid(test);
    let (w, n) = (test.bin_width(), test.n_bins());
    let best = scales
        .par_iter()
        .enumerate()
        .map(|(si, &s)| {
            let mut best = (f64::INFINITY, si, usize::MAX);
            for (ti, &t) in locations.iter().enumerate() {
                let r = left_half_residual(&test_left, &transform_histogram(reference, s, t, w, n));
                if r < best.0 {
                    best = (r, si, ti);
                }
            }
            best
        })
        .reduce(
            || (f64::INFINITY, usize::MAX, usize::MAX),
            |a, b| {
                if b.0 < a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2)) {
                    b
                } else {
                    a
                }
            },
        );
    if !best.0.is_finite() {
        return Err(Error::InvalidParameter(
            "no scale/location puts reference mass left of the test mode".into(),
        ));
    }
    let (scale, location) = (scales[best.1], locations[best.2]);
    let transformed = transform_histogram(reference, scale, location, w, n);
    let left: f64 = transformed[..mode].iter().sum();
    let factor = test_left_mass / left;
    let fitted = CountHistogram::from_bins(w, transformed.iter().map(|m| m * factor).collect())?;
    Ok(LeftHalfFit {
        scale,
        location,
        residual: best.0,
        mode_bin: mode,
        fitted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdDecision {
    /// Link a pair when its score is strictly greater than this.
    pub threshold: f64,
    /// False when no threshold in `[0, F]` reaches the target.
    pub attainable: bool,
    /// Fitted mismatched mass at or above `threshold`, as a fraction.
    pub tail_fraction: f64,
    /// `tail_fraction × n_pairs`.
    pub expected_false_links: f64,
}

/// Smallest bin edge `τ` whose fitted tail fraction is within `target_fpr`.
/// Falls back to `τ = max_score` (link nothing) when the target is out of
/// reach.
pub fn threshold_for_fpr(fit: &LeftHalfFit, n_pairs: usize, target_fpr: f64, max_score: f64) -> Result<ThresholdDecision> {
    if !(target_fpr > 0.0 && target_fpr <= 1.0) {
        return Err(Error::InvalidParameter(format!("target FPR must be in (0, 1], got {target_fpr}")));
    }
    let hist = &fit.fitted;
    let total = hist.total();
    if total <= 0.0 {
        return Err(Error::EmptyHistogram);
    }
    // tails[m] = mass in bins m.. ; scores in bins < m are below edge m.
    let mut tails = vec![0.0; hist.n_bins() + 1];
    for m in (0..hist.n_bins()).rev() {
        tails[m] = tails[m + 1] + hist.bins()[m];
    }
    // tails[n_bins] is zero, so some edge always qualifies; it only counts
    // when it lies inside the score range.
    let m = (0..=hist.n_bins()).find(|&m| tails[m] / total <= target_fpr).unwrap_or(hist.n_bins());
    let (threshold, tail, attainable) = if hist.left_edge(m) <= max_score {
        (hist.left_edge(m), tails[m] / total, true)
    } else {
        (max_score, tails[hist.bin_of(max_score)] / total, false)
    };
    Ok(ThresholdDecision {
        threshold,
        attainable,
        tail_fraction: tail,
        expected_false_links: tail * n_pairs as f64,
    })
}

/// `key=value` fit report.
pub fn fit_report(fit: &LeftHalfFit, decision: &ThresholdDecision, target_fpr: f64) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    };
    kv("scale", fit.scale.to_string());
    kv("location", fit.location.to_string());
    kv("residual", fit.residual.to_string());
    kv("threshold", decision.threshold.to_string());
    kv("target_fpr", target_fpr.to_string());
    kv("attainable", decision.attainable.to_string());
    kv("tail_fraction", decision.tail_fraction.to_string());
    kv("expected_false_links", decision.expected_false_links.to_string());
    kv("mode_bin_left_edge", fit.fitted.left_edge(fit.mode_bin).to_string());
    kv("estimated_mismatched_mass", fit.estimated_mismatched_mass().to_string());
    kv("objective", FIT_OBJECTIVE.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    use crate::rng::RngSpec;

    fn gaussian_samples(n: usize, mean: f64, sd: f64, seed: u64, max: f64) -> Vec<f64> {
        let mut rng = RngSpec::new(seed).rng();
        let dist = Normal::new(mean, sd).unwrap();
        (0..n).map(|_| dist.sample(&mut rng).clamp(0.0, max)).collect()
    }

    #[test]
    fn histogram_counts_pairs() {
        let table = PairScoreTable::from_fn(3, |i, j| match (i, j) {
            (0, 1) | (0, 2) => 10.0,
            _ => 80.0,
        });
        let h = all_pairs_histogram(&table, 1.0, 100.0).unwrap();
        assert_eq!(h.bins()[10], 2.0);
        assert_eq!(h.bins()[80], 1.0);
        assert_eq!(h.total(), 3.0);
    }

    #[test]
    fn histogram_rejects_empty_and_out_of_range() {
        assert!(matches!(
            all_pairs_histogram(&PairScoreTable::new(1), 1.0, 10.0),
            Err(Error::EmptyHistogram)
        ));
        let table = PairScoreTable::from_fn(2, |_, _| 11.0);
        assert!(matches!(
            all_pairs_histogram(&table, 1.0, 10.0),
            Err(Error::ScoreOutOfRange { i: 0, j: 1, .. })
        ));
    }

    #[test]
    fn binning_rule() {
        let h = CountHistogram::from_samples([12.0, 15.0, 100.0], 5.0, 100.0).unwrap();
        assert_eq!(h.bin_of(12.0), 2);
        assert_eq!(h.left_edge(2), 10.0);
        assert_eq!(h.bins()[2], 1.0);
        assert_eq!(h.bins()[3], 1.0);
        assert_eq!(h.bins()[20], 1.0);
        assert_eq!(h.n_bins(), 21);
    }

    #[test]
    fn transform_conserves_mass() {
        let h = CountHistogram::from_samples(gaussian_samples(5000, 40.0, 10.0, 1, 128.0), 1.0, 128.0).unwrap();
        for (s, t) in [(1.0, 0.0), (0.5, -16.0), (2.0, 16.0), (1.37, 3.0)] {
            let out = transform_histogram(&h, s, t, 1.0, h.n_bins());
            let total: f64 = out.iter().sum();
            assert!((total - h.total()).abs() < 1e-6, "s={s} t={t}: {total}");
        }
    }

    #[test]
    fn identity_transform_is_identity() {
        let h = CountHistogram::from_samples(gaussian_samples(2000, 40.0, 10.0, 2, 128.0), 1.0, 128.0).unwrap();
        assert_eq!(transform_histogram(&h, 1.0, 0.0, 1.0, h.n_bins()), h.bins());
    }

    #[test]
    fn self_fit_is_identity() {
        let h = CountHistogram::from_samples(gaussian_samples(20_000, 80.0, 20.0, 3, 512.0), 1.0, 512.0).unwrap();
        let fit = fit_left_half(&h, &h).unwrap();
        assert_eq!(fit.scale, 1.0);
        assert_eq!(fit.location, 0.0);
        assert_eq!(fit.residual, 0.0);
    }

    #[test]
    fn recovers_planted_shift() {
        let reference = CountHistogram::from_samples(gaussian_samples(400_000, 80.0, 20.0, 4, 512.0), 2.0, 512.0).unwrap();
        let test = CountHistogram::from_samples(
            gaussian_samples(400_000, 80.0, 20.0, 5, 512.0).into_iter().map(|x| x + 10.0),
            2.0,
            512.0,
        )
        .unwrap();
        let fit = fit_left_half(&test, &reference).unwrap();
        assert!((fit.location - 10.0).abs() <= 2.0, "{fit:?}");
        assert!((fit.scale - 1.0).abs() <= 0.011, "{}", fit.scale);
    }

    #[test]
    fn recovers_planted_scale() {
        let reference = CountHistogram::from_samples(gaussian_samples(400_000, 80.0, 20.0, 6, 512.0), 2.0, 512.0).unwrap();
        let test = CountHistogram::from_samples(
            gaussian_samples(400_000, 80.0, 20.0, 7, 512.0).into_iter().map(|x| x * 1.5),
            2.0,
            512.0,
        )
        .unwrap();
        let fit = fit_left_half(&test, &reference).unwrap();
        assert!((fit.scale - 1.5).abs() <= 0.011, "{}", fit.scale);
        assert!(fit.location.abs() <= 2.0, "{}", fit.location);
    }

    #[test]
    fn degenerate_test_histogram() {
        let single = CountHistogram::from_samples([5.0, 5.0, 5.0], 1.0, 10.0).unwrap();
        assert!(matches!(fit_left_half(&single, &single), Err(Error::DegenerateHistogram)));
    }

    fn fit_with_mass_below(limit: usize) -> LeftHalfFit {
        let mut bins = vec![0.0; 201];
        for (k, b) in bins.iter_mut().enumerate().take(limit) {
            *b = 1.0 + k as f64;
        }
        LeftHalfFit {
            scale: 1.0,
            location: 0.0,
            residual: 0.0,
            mode_bin: limit - 1,
            fitted: CountHistogram::from_bins(1.0, bins).unwrap(),
        }
    }

    #[test]
    fn threshold_respects_support() {
        let fit = fit_with_mass_below(100);
        let d = threshold_for_fpr(&fit, 1000, 1e-6, 200.0).unwrap();
        assert!(d.threshold <= 100.0);
        assert!(d.attainable);
        assert_eq!(d.tail_fraction, 0.0);
    }

    #[test]
    fn threshold_vacuous_target_links_everything() {
        let fit = fit_with_mass_below(100);
        let d = threshold_for_fpr(&fit, 1000, 1.0, 200.0).unwrap();
        assert_eq!(d.threshold, 0.0);
    }

    #[test]
    fn threshold_unattainable_links_nothing() {
        let mut bins = vec![0.0; 11];
        bins[10] = 1.0;
        bins[3] = 1.0;
        let fit = LeftHalfFit {
            scale: 1.0,
            location: 0.0,
            residual: 0.0,
            mode_bin: 3,
            fitted: CountHistogram::from_bins(1.0, bins).unwrap(),
        };
        let d = threshold_for_fpr(&fit, 10, 0.1, 10.0).unwrap();
        assert_eq!(d.threshold, 10.0);
        assert!(!d.attainable);
    }

    #[test]
    fn threshold_monotone_in_target() {
        let h = CountHistogram::from_samples(gaussian_samples(50_000, 80.0, 20.0, 8, 512.0), 1.0, 512.0).unwrap();
        let fit = fit_left_half(&h, &h).unwrap();
        let mut last = f64::NEG_INFINITY;
        for target in [0.5, 0.1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-8] {
            let t = threshold_for_fpr(&fit, 1, target, 512.0).unwrap().threshold;
            assert!(t >= last, "target {target}: {t} < {last}");
            last = t;
        }
    }

    #[test]
    fn histogram_csv_round_trip() {
        let h = CountHistogram::from_bins(0.5, vec![1.0, 0.0, 3.0]).unwrap();
        let text = "bin_left_edge,count\n0,1\n0.5,0\n1,3\n";
        assert_eq!(CountHistogram::parse_csv(text, "t").unwrap(), h);
        assert!(CountHistogram::parse_csv("bin_left_edge,count\n1,1\n2,2\n", "t").is_err());
    }

    #[test]
    fn mismatched_histogram_counts_only_cross_label_pairs() {
        let table = PairScoreTable::from_fn(4, |i, j| (i + j) as f64);
        let h = mismatched_histogram(&table, &["a", "a", "b", "b"], 1.0, 10.0).unwrap();
        assert_eq!(h.total(), 4.0);
    }
}
