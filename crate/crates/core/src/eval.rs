//! Unified pairwise precision and recall.
//!
//! The evaluation universe is the union of false positives `{d, ∅}`, valid
//! detections `{d, a}` and false negatives `{∅, a}`. Every unordered pair of
//! distinct tuples falls in one colour class, and each false positive and
//! false negative also contributes one self-pair, so a missed or spurious
//! face is penalised even when it is a singleton.
//!
//! | class   | meaning                                                   |
//! |---------|-----------------------------------------------------------|
//! | white   | valid, same identity, same cluster                        |
//! | magenta | valid, same identity, different cluster                   |
//! | cyan    | valid, different identity, same cluster                   |
//! | blue    | valid, different identity, different cluster; also any    |
//! |         | mixed pair that is neither green nor red                  |
//! | green   | has a false positive and shares a cluster; FP self-pair   |
//! | red     | has a false negative and shares identity; FN self-pair    |
//!
//! `UPP = white / (white + cyan + green)`,
//! `UPR = white / (white + magenta + red)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::gated_matches;
use crate::io::create;
use crate::model::{BoxObservation, Rect};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TupleKind {
    FalsePositive,
    Valid,
    FalseNegative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTuple {
    pub kind: TupleKind,
    /// Index into the detection list.
    pub detection: Option<usize>,
    /// Index into the annotation list.
    pub annotation: Option<usize>,
    pub identity: Option<String>,
    pub cluster: Option<usize>,
}

impl EvalTuple {
    pub fn false_positive(cluster: usize) -> Self {
        Self {
            kind: TupleKind::FalsePositive,
            detection: None,
            annotation: None,
            identity: None,
            cluster: Some(cluster),
        }
    }

    pub fn valid(identity: impl Into<String>, cluster: usize) -> Self {
        Self {
            kind: TupleKind::Valid,
            detection: None,
            annotation: None,
            identity: Some(identity.into()),
            cluster: Some(cluster),
        }
    }

    pub fn false_negative(identity: impl Into<String>) -> Self {
        Self {
            kind: TupleKind::FalseNegative,
            detection: None,
            annotation: None,
            identity: Some(identity.into()),
            cluster: None,
        }
    }

    fn validate(&self, pos: usize) -> Result<()> {
        let needs_cluster = self.kind != TupleKind::FalseNegative;
        let needs_identity = self.kind != TupleKind::FalsePositive;
        if needs_cluster && self.cluster.is_none() {
            return Err(Error::MissingField(format!("cluster id for tuple {pos}")));
        }
        if needs_identity && self.identity.is_none() {
            return Err(Error::MissingField(format!("identity for tuple {pos}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairCategory {
    White,
    Magenta,
    Cyan,
    Blue,
    Green,
    Red,
}

impl PairCategory {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            PairCategory::White => [255, 255, 255],
            PairCategory::Magenta => [255, 0, 255],
            PairCategory::Cyan => [0, 255, 255],
            PairCategory::Blue => [0, 0, 255],
            PairCategory::Green => [0, 255, 0],
            PairCategory::Red => [255, 0, 0],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairCategoryCounts {
    pub white: u64,
    pub magenta: u64,
    pub cyan: u64,
    pub blue: u64,
    pub green: u64,
    pub red: u64,
}

impl PairCategoryCounts {
    fn bump(&mut self, c: PairCategory) {
        match c {
            PairCategory::White => self.white += 1,
            PairCategory::Magenta => self.magenta += 1,
            PairCategory::Cyan => self.cyan += 1,
            PairCategory::Blue => self.blue += 1,
            PairCategory::Green => self.green += 1,
            PairCategory::Red => self.red += 1,
        }
    }

    fn merge(mut self, o: Self) -> Self {
        self.white += o.white;
        self.magenta += o.magenta;
        self.cyan += o.cyan;
        self.blue += o.blue;
        self.green += o.green;
        self.red += o.red;
        self
    }

    pub fn total(&self) -> u64 {
        self.white + self.magenta + self.cyan + self.blue + self.green + self.red
    }
}

/// Compact form for the pair loop: identity and cluster interned to ints.
#[derive(Clone, Copy)]
struct Key {
    kind: TupleKind,
    identity: Option<usize>,
    cluster: Option<usize>,
}

fn keys(tuples: &[EvalTuple]) -> Result<Vec<Key>> {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    tuples
        .iter()
        .enumerate()
        .map(|(pos, t)| {
            t.validate(pos)?;
            let identity = t.identity.as_deref().map(|s| {
                let next = ids.len();
                *ids.entry(s).or_insert(next)
            });
            Ok(Key {
                kind: t.kind,
                identity,
                cluster: t.cluster,
            })
        })
        .collect()
}

fn categorize(a: Key, b: Key) -> PairCategory {
    use TupleKind::*;
    let same_cluster = a.cluster.is_some() && a.cluster == b.cluster;
    let same_identity = a.identity.is_some() && a.identity == b.identity;
    match (a.kind, b.kind) {
        (Valid, Valid) => match (same_identity, same_cluster) {
            (true, true) => PairCategory::White,
            (true, false) => PairCategory::Magenta,
            (false, true) => PairCategory::Cyan,
            (false, false) => PairCategory::Blue,
        },
        (FalsePositive, _) | (_, FalsePositive) if same_cluster => PairCategory::Green,
        (FalseNegative, _) | (_, FalseNegative) if same_identity => PairCategory::Red,
        _ => PairCategory::Blue,
    }
}

fn self_category(k: Key) -> Option<PairCategory> {
    match k.kind {
        TupleKind::FalsePositive => Some(PairCategory::Green),
        TupleKind::FalseNegative => Some(PairCategory::Red),
        TupleKind::Valid => None,
    }
}

/// Category of the pair `(a, b)`; `a == b` gives the self-pair category
/// (`None` for valid tuples, which have no self-pair).
pub fn pair_category(tuples: &[EvalTuple], a: usize, b: usize) -> Result<Option<PairCategory>> {
    let k = keys(tuples)?;
    Ok(if a == b {
        self_category(k[a])
    } else {
        Some(categorize(k[a], k[b]))
    })
}

pub fn categorize_pairs(tuples: &[EvalTuple]) -> Result<PairCategoryCounts> {
    let k = keys(tuples)?;
    let counts = (0..k.len())
        .into_par_iter()
        .map(|i| {
            let mut c = PairCategoryCounts::default();
            if let Some(s) = self_category(k[i]) {
                c.bump(s);
            }
            for j in i + 1..k.len() {
                c.bump(categorize(k[i], k[j]));
            }
            c
        })
        .reduce(PairCategoryCounts::default, PairCategoryCounts::merge);
    Ok(counts)
}

/// `(UPP, UPR)`; undefined when either denominator is zero.
pub fn upp_upr(c: &PairCategoryCounts) -> Result<(f64, f64)> {
    let p_den = c.white + c.cyan + c.green;
    let r_den = c.white + c.magenta + c.red;
    if p_den == 0 {
        return Err(Error::UndefinedMetric("no clustered pairs (UPP denominator is zero)"));
    }
    if r_den == 0 {
        return Err(Error::UndefinedMetric("no same-identity pairs (UPR denominator is zero)"));
    }
    Ok((c.white as f64 / p_den as f64, c.white as f64 / r_den as f64))
}

/// Weighted harmonic mean `1 / (α/UPP + (1−α)/UPR)`. Zero when either input
/// is zero.
pub fn f_alpha(upp: f64, upr: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if upp <= 0.0 || upr <= 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 / (alpha / upp + (1.0 - alpha) / upr))
}

/// Per-frame gated Hungarian matching of detections to annotations.
/// `det_clusters[k]` is the cluster of `detections[k]`. Tuples come out as
/// all false positives, then valid, then false negatives, each in input
/// order.
pub fn match_detections(
    detections: &[BoxObservation],
    det_clusters: &[Option<usize>],
    annotations: &[BoxObservation],
    match_iou: f64,
) -> Result<Vec<EvalTuple>> {
    if det_clusters.len() != detections.len() {
        return Err(Error::DimensionMismatch {
            expected: detections.len(),
            found: det_clusters.len(),
        });
    }
    if !(match_iou > 0.0 && match_iou <= 1.0) {
        return Err(Error::InvalidParameter(format!("match IoU must be in (0, 1], got {match_iou}")));
    }
    for (k, a) in annotations.iter().enumerate() {
        if a.identity.is_none() {
            return Err(Error::MissingField(format!("identity for annotation {k}")));
        }
    }
    let mut frames: BTreeMap<u64, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (k, d) in detections.iter().enumerate() {
        frames.entry(d.frame).or_default().0.push(k);
    }
    for (k, a) in annotations.iter().enumerate() {
        frames.entry(a.frame).or_default().1.push(k);
    }
    let mut det_match = vec![None; detections.len()];
    let mut ann_taken = vec![false; annotations.len()];
    for (dets, anns) in frames.values() {
        let d_rects: Vec<Rect> = dets.iter().map(|&k| detections[k].rect).collect();
        let a_rects: Vec<Rect> = anns.iter().map(|&k| annotations[k].rect).collect();
        for (r, c) in gated_matches(&d_rects, &a_rects, match_iou)? {
            det_match[dets[r]] = Some(anns[c]);
            ann_taken[anns[c]] = true;
        }
    }

    let cluster_of = |k: usize| {
        det_clusters[k].ok_or_else(|| Error::MissingField(format!("cluster id for detection {k}")))
    };
    let mut fps = Vec::new();
    let mut valid = Vec::new();
    for (k, m) in det_match.iter().enumerate() {
        let cluster = Some(cluster_of(k)?);
        match m {
            None => fps.push(EvalTuple {
                kind: TupleKind::FalsePositive,
                detection: Some(k),
                annotation: None,
                identity: None,
                cluster,
            }),
            Some(a) => valid.push(EvalTuple {
                kind: TupleKind::Valid,
                detection: Some(k),
                annotation: Some(*a),
                identity: annotations[*a].identity.clone(),
                cluster,
            }),
        }
    }
    let fns = ann_taken
        .iter()
        .enumerate()
        .filter(|(_, taken)| !**taken)
        .map(|(k, _)| EvalTuple {
            kind: TupleKind::FalseNegative,
            detection: None,
            annotation: Some(k),
            identity: annotations[k].identity.clone(),
            cluster: None,
        });
    fps.extend(valid);
    fps.extend(fns);
    Ok(fps)
}

/// Display order: false positives by cluster, valid tuples grouped by
/// identity (then cluster), false negatives grouped by identity.
pub fn matrix_order(tuples: &[EvalTuple]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    order.sort_by(|&a, &b| {
        let (ta, tb) = (&tuples[a], &tuples[b]);
        ta.kind
            .cmp(&tb.kind)
            .then_with(|| ta.identity.cmp(&tb.identity))
            .then_with(|| ta.cluster.cmp(&tb.cluster))
            .then(a.cmp(&b))
    });
    order
}

/// One pixel per ordered tuple pair, as binary PPM (P6). Valid-tuple
/// diagonal pixels are drawn white.
pub fn render_matrix(tuples: &[EvalTuple]) -> Result<Vec<u8>> {
    let k = keys(tuples)?;
    let order = matrix_order(tuples);
    let n = order.len();
    let mut out = format!("P6\n{n} {n}\n255\n").into_bytes();
    out.reserve(n * n * 3);
    for &r in &order {
        for &c in &order {
            let cat = if r == c {
                self_category(k[r]).unwrap_or(PairCategory::White)
            } else {
                categorize(k[r], k[c])
            };
            out.extend_from_slice(&cat.rgb());
        }
    }
    Ok(out)
}

pub fn export_matrix(tuples: &[EvalTuple], path: &Path) -> Result<()> {
    let bytes = render_matrix(tuples)?;
    let mut w = create(path)?;
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// `key=value` metrics: counts, UPP, UPR and `f_<alpha>` per requested weight.
pub fn metrics_report(counts: &PairCategoryCounts, alphas: &[f64]) -> Result<String> {
    let (upp, upr) = upp_upr(counts)?;
    let mut out = String::new();
    for (k, v) in [
        ("white", counts.white),
        ("magenta", counts.magenta),
        ("cyan", counts.cyan),
        ("blue", counts.blue),
        ("green", counts.green),
        ("red", counts.red),
    ] {
        let _ = writeln!(out, "{k}={v}");
    }
    let _ = writeln!(out, "upp={upp}");
    let _ = writeln!(out, "upr={upr}");
    for &a in alphas {
        let _ = writeln!(out, "f_{a}={}", f_alpha(upp, upr, a)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(frame: u64, x: f64) -> BoxObservation {
        BoxObservation::detection(frame, Rect::new(x, 0.0, 10.0, 10.0).unwrap())
    }

    #[test]
    fn perfect_detections_are_all_valid() {
        let anns = vec![b(0, 0.0).with_identity("a"), b(0, 50.0).with_identity("b"), b(1, 0.0).with_identity("a")];
        let dets = vec![b(0, 50.0), b(0, 0.0), b(1, 0.0)];
        let t = match_detections(&dets, &[Some(1), Some(0), Some(0)], &anns, 0.5).unwrap();
        assert!(t.iter().all(|t| t.kind == TupleKind::Valid));
        assert_eq!(t[0].identity.as_deref(), Some("b"));
        let c = categorize_pairs(&t).unwrap();
        assert_eq!((c.white, c.blue, c.cyan, c.magenta, c.green, c.red), (1, 2, 0, 0, 0, 0));
        assert_eq!(upp_upr(&c).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn detection_on_empty_frame_is_false_positive() {
        let t = match_detections(&[b(4, 0.0)], &[Some(0)], &[], 0.5).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].kind, TupleKind::FalsePositive);
    }

    #[test]
    fn two_detections_one_annotation() {
        let anns = vec![b(0, 0.0).with_identity("a")];
        let dets = vec![b(0, 3.0), b(0, 1.0)];
        let t = match_detections(&dets, &[Some(0), Some(1)], &anns, 0.5).unwrap();
        let kinds: Vec<TupleKind> = t.iter().map(|t| t.kind).collect();
        assert_eq!(kinds, vec![TupleKind::FalsePositive, TupleKind::Valid]);
        // Higher IoU wins the annotation.
        assert_eq!(t[1].detection, Some(1));
    }

    #[test]
    fn annotation_without_identity_is_rejected() {
        assert!(matches!(
            match_detections(&[], &[], &[b(0, 0.0)], 0.5),
            Err(Error::MissingField(_))
        ));
    }

    #[test]
    fn same_identity_split_is_magenta() {
        let c = categorize_pairs(&[EvalTuple::valid("a", 0), EvalTuple::valid("a", 1)]).unwrap();
        assert_eq!((c.magenta, c.white), (1, 0));
        assert!(matches!(upp_upr(&c), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn mixed_example() {
        let tuples = vec![
            EvalTuple::valid("a", 0),
            EvalTuple::valid("a", 0),
            EvalTuple::false_positive(0),
            EvalTuple::false_negative("a"),
        ];
        let c = categorize_pairs(&tuples).unwrap();
        assert_eq!(
            c,
            PairCategoryCounts {
                white: 1,
                magenta: 0,
                cyan: 0,
                blue: 1,
                green: 3,
                red: 3,
            }
        );
        let (upp, upr) = upp_upr(&c).unwrap();
        assert_eq!((upp, upr), (0.25, 0.25));
    }

    #[test]
    fn missing_cluster_is_an_error() {
        let mut t = EvalTuple::valid("a", 0);
        t.cluster = None;
        assert!(matches!(categorize_pairs(&[t]), Err(Error::MissingField(_))));
    }

    #[test]
    fn upp_upr_values() {
        let c = PairCategoryCounts { white: 10, ..Default::default() };
        assert_eq!(upp_upr(&c).unwrap(), (1.0, 1.0));
        let c = PairCategoryCounts { white: 1, green: 3, magenta: 1, ..Default::default() };
        assert_eq!(upp_upr(&c).unwrap(), (0.25, 0.5));
        assert!(upp_upr(&PairCategoryCounts::default()).is_err());
    }

    #[test]
    fn f_alpha_values() {
        for x in [0.1, 0.5, 0.93] {
            for a in [0.0, 0.3, 0.5, 1.0] {
                assert!((f_alpha(x, x, a).unwrap() - x).abs() < 1e-15);
            }
        }
        assert!((f_alpha(0.5, 1.0, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f_alpha(0.37, 0.9, 1.0).unwrap(), 0.37);
        assert_eq!(f_alpha(0.0, 0.9, 0.5).unwrap(), 0.0);
        assert!(f_alpha(0.5, 0.5, 1.5).is_err());
    }

    #[test]
    fn matrix_image_shape_and_symmetry() {
        let tuples = vec![
            EvalTuple::valid("b", 1),
            EvalTuple::false_negative("a"),
            EvalTuple::false_positive(1),
        ];
        let bytes = render_matrix(&tuples).unwrap();
        let header = b"P6\n3 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px.len(), 27);
        let at = |r: usize, c: usize| &px[(r * 3 + c) * 3..(r * 3 + c) * 3 + 3];
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(at(r, c), at(c, r));
            }
        }
        // Order: FP, valid, FN.
        assert_eq!(at(0, 0), PairCategory::Green.rgb());
        assert_eq!(at(0, 1), PairCategory::Green.rgb());
        assert_eq!(at(2, 2), PairCategory::Red.rgb());
    }

    #[test]
    fn perfect_matrix_is_white_and_blue() {
        let tuples = vec![EvalTuple::valid("a", 0), EvalTuple::valid("b", 1), EvalTuple::valid("a", 0)];
        let bytes = render_matrix(&tuples).unwrap();
        let px = &bytes[b"P6\n3 3\n255\n".len()..];
        for rgb in px.chunks(3) {
            assert!(rgb == PairCategory::White.rgb() || rgb == PairCategory::Blue.rgb());
        }
    }
}
