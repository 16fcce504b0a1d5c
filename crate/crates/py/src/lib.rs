//! Python bindings.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use erclust_core::calibration::{self, CountHistogram};
use erclust_core::eval::{self, EvalTuple, PairCategoryCounts};
use erclust_core::fusion::{self, ConstantPosition, ConstantVelocity, FusionConfig, TrackerAdapter};
use erclust_core::linkage::{self, LinkageAlgorithm};
use erclust_core::model::synth_features;
use erclust_core::{
    er_graph, hungarian, similarity, BoxObservation, ConstraintSet, Error, ErrorClass, FeatureDistribution,
    FeatureMatrix, GallerySet, PairScoreTable, Rect, RngSpec, ScoreMode,
};

fn err(e: Error) -> PyErr {
    match e.class() {
        ErrorClass::Runtime => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<FeatureMatrix> {
    FeatureMatrix::from_rows(&rows).map_err(err)
}

fn mode(name: &str) -> PyResult<ScoreMode> {
    name.parse().map_err(err)
}

fn constraint_set(pairs: Vec<(usize, usize)>) -> ConstraintSet {
    pairs.into_iter().collect()
}

/// Condensed upper-triangle table of pair scores.
#[pyclass(name = "ScoreTable", module = "erclust", skip_from_py_object)]
struct PyScoreTable {
    inner: PairScoreTable,
}

#[pymethods]
impl PyScoreTable {
    #[new]
    fn new(n_items: usize, scores: Vec<f64>) -> PyResult<Self> {
        let mut inner = PairScoreTable::new(n_items);
        if scores.len() != inner.n_pairs() {
            return Err(err(Error::DimensionMismatch {
                expected: inner.n_pairs(),
                found: scores.len(),
            }));
        }
        let mut it = scores.into_iter();
        for i in 0..n_items {
            for j in i + 1..n_items {
                inner.set(i, j, it.next().expect("length checked"));
            }
        }
        Ok(Self { inner })
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    fn get(&self, i: usize, j: usize) -> PyResult<f64> {
        let n = self.inner.n_items();
        if i == j || i >= n || j >= n {
            return Err(PyValueError::new_err(format!("no pair ({i}, {j}) among {n} items")));
        }
        Ok(self.inner.get(i, j))
    }

    /// Scores in `(0,1), (0,2), …, (n-2,n-1)` order.
    fn scores(&self) -> Vec<f64> {
        self.inner.scores().to_vec()
    }

    fn pairs(&self) -> Vec<(usize, usize, f64)> {
        self.inner.iter().collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n_pairs()
    }
}

#[pyfunction]
fn expected_count(f: usize, g: usize) -> PyResult<f64> {
    similarity::expected_count(f, g).map_err(err)
}

#[pyfunction]
fn averaged_term(closer: usize, super_size: usize, g_sim: usize) -> f64 {
    similarity::averaged_term(closer, super_size, g_sim)
}

#[pyfunction]
#[pyo3(signature = (n, f, seed, distribution = "uniform"))]
fn synth(n: usize, f: usize, seed: u64, distribution: &str) -> PyResult<Vec<Vec<f64>>> {
    let dist: FeatureDistribution = distribution.parse().map_err(err)?;
    let m = synth_features(n, f, &RngSpec::new(seed), dist).map_err(err)?;
    Ok((0..m.n_items()).map(|i| m.row(i).to_vec()).collect())
}

/// All-pairs symmetric rank-1 scores.
#[pyfunction]
#[pyo3(signature = (features, gallery, mode_name = "exact", super_gallery = None, g_sim = None, naive = false))]
fn rank1_scores(
    features: Vec<Vec<f64>>,
    gallery: Vec<Vec<f64>>,
    mode_name: &str,
    super_gallery: Option<Vec<Vec<f64>>>,
    g_sim: Option<usize>,
    naive: bool,
) -> PyResult<PyScoreTable> {
    let feats = matrix(features)?;
    let gallery = matrix(gallery)?;
    let mode = mode(mode_name)?;
    let gal = match super_gallery {
        Some(sg) => {
            let g = g_sim.unwrap_or(gallery.n_items());
            GallerySet::with_super_gallery(gallery, matrix(sg)?, g).map_err(err)?
        }
        None => GallerySet::fixed(gallery),
    };
    let inner = if naive {
        similarity::rank1_all_pairs_naive(&feats, &gal, mode)
    } else {
        similarity::rank1_all_pairs_fast(&feats, &gal, mode)
    }
    .map_err(err)?;
    Ok(PyScoreTable { inner })
}

/// Clusters a score table; returns one dense cluster id per item.
#[pyfunction]
#[pyo3(signature = (table, f, link_threshold, constraints = Vec::new(), algorithm = "fast"))]
fn cluster(
    table: &PyScoreTable,
    f: f64,
    link_threshold: f64,
    constraints: Vec<(usize, usize)>,
    algorithm: &str,
) -> PyResult<Vec<usize>> {
    let alg: LinkageAlgorithm = algorithm.parse().map_err(err)?;
    let (c, _) = linkage::cluster_scores(&table.inner, f, &constraint_set(constraints), link_threshold, alg)
        .map_err(err)?;
    Ok(c.assignment().to_vec())
}

#[pyfunction]
fn transitive_closure(table: &PyScoreTable, link_threshold: f64) -> Vec<usize> {
    linkage::transitive_closure(&table.inner, link_threshold).assignment().to_vec()
}

/// Fits `reference` to the left half of the table's histogram and returns
/// `(scale, location, threshold, attainable)`.
#[pyfunction]
#[pyo3(signature = (table, f, reference_bins, reference_bin_width, bin_width = 2.0, target_fpr = calibration::DEFAULT_TARGET_FPR))]
fn auto_threshold(
    table: &PyScoreTable,
    f: f64,
    reference_bins: Vec<f64>,
    reference_bin_width: f64,
    bin_width: f64,
    target_fpr: f64,
) -> PyResult<(f64, f64, f64, bool)> {
    let reference = CountHistogram::from_bins(reference_bin_width, reference_bins).map_err(err)?;
    let test = calibration::all_pairs_histogram(&table.inner, bin_width, f).map_err(err)?;
    let fit = calibration::fit_left_half(&test, &reference).map_err(err)?;
    let d = calibration::threshold_for_fpr(&fit, table.inner.n_pairs(), target_fpr, f).map_err(err)?;
    Ok((fit.scale, fit.location, d.threshold, d.attainable))
}

/// Mismatched-pair histogram bins for labeled items.
#[pyfunction]
#[pyo3(signature = (table, labels, f, bin_width = 2.0))]
fn reference_histogram(table: &PyScoreTable, labels: Vec<String>, f: f64, bin_width: f64) -> PyResult<Vec<f64>> {
    Ok(calibration::mismatched_histogram(&table.inner, &labels, bin_width, f)
        .map_err(err)?
        .bins()
        .to_vec())
}

#[pyfunction]
fn hungarian_match(weights: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let a = hungarian::hungarian_match(&weights).map_err(err)?;
    Ok((a.pairs, a.total))
}

#[pyfunction]
fn er_threshold(n: usize, epsilon: f64) -> PyResult<f64> {
    er_graph::er_threshold(n, epsilon).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (n, p_grid, trials, seed = 0))]
fn connectivity_curve(n: usize, p_grid: Vec<f64>, trials: usize, seed: u64) -> PyResult<Vec<f64>> {
    Ok(er_graph::connectivity_curve(n, &p_grid, trials, &RngSpec::new(seed))
        .map_err(err)?
        .prob_connected)
}

/// Detections as `(frame, x, y, w, h)`; returns the frames of each tracklet
/// with a confirmed flag per frame.
#[pyfunction]
#[pyo3(signature = (detections, tracker = "constant-position", iou_threshold = 0.3, patience = 10))]
fn fuse_tracklets(
    detections: Vec<(u64, f64, f64, f64, f64)>,
    tracker: &str,
    iou_threshold: f64,
    patience: usize,
) -> PyResult<Vec<Vec<(u64, bool)>>> {
    let dets = detections
        .into_iter()
        .map(|(frame, x, y, w, h)| Rect::new(x, y, w, h).map(|r| BoxObservation::detection(frame, r)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let adapter: Box<dyn TrackerAdapter> = match tracker {
        "constant-position" => Box::new(ConstantPosition),
        "constant-velocity" => Box::new(ConstantVelocity),
        other => return Err(PyValueError::new_err(format!("unknown tracker {other:?}"))),
    };
    let cfg = FusionConfig {
        iou_threshold,
        patience_alpha: patience,
    };
    let tracks = fusion::fuse(&dets, adapter.as_ref(), &cfg).map_err(err)?;
    Ok(tracks
        .iter()
        .map(|t| t.observations.iter().map(|o| (o.frame, o.is_confirmed())).collect())
        .collect())
}

/// Tuples as `(kind, identity, cluster)` with kind one of `fp`, `valid`,
/// `fn`. Returns the six category counts plus `(upp, upr)`.
#[pyfunction]
fn unified_metrics(
    tuples: Vec<(String, Option<String>, Option<usize>)>,
) -> PyResult<(std::collections::BTreeMap<&'static str, u64>, f64, f64)> {
    let tuples = tuples
        .into_iter()
        .map(|(kind, identity, cluster)| {
            let kind = match kind.as_str() {
                "fp" => eval::TupleKind::FalsePositive,
                "valid" => eval::TupleKind::Valid,
                "fn" => eval::TupleKind::FalseNegative,
                other => return Err(PyValueError::new_err(format!("unknown tuple kind {other:?}"))),
            };
            Ok(EvalTuple {
                kind,
                detection: None,
                annotation: None,
                identity,
                cluster,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let c: PairCategoryCounts = eval::categorize_pairs(&tuples).map_err(err)?;
    let (upp, upr) = eval::upp_upr(&c).map_err(err)?;
    let counts = [
        ("white", c.white),
        ("magenta", c.magenta),
        ("cyan", c.cyan),
        ("blue", c.blue),
        ("green", c.green),
        ("red", c.red),
    ]
    .into_iter()
    .collect();
    Ok((counts, upp, upr))
}

#[pyfunction]
fn f_alpha(upp: f64, upr: f64, alpha: f64) -> PyResult<f64> {
    eval::f_alpha(upp, upr, alpha).map_err(err)
}

#[pymodule]
fn erclust(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScoreTable>()?;
    m.add_function(wrap_pyfunction!(expected_count, m)?)?;
    m.add_function(wrap_pyfunction!(averaged_term, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(rank1_scores, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(transitive_closure, m)?)?;
    m.add_function(wrap_pyfunction!(auto_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(reference_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian_match, m)?)?;
    m.add_function(wrap_pyfunction!(er_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(connectivity_curve, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_tracklets, m)?)?;
    m.add_function(wrap_pyfunction!(unified_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(f_alpha, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
