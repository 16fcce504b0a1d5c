//! Face clustering with rank-1 count verification and constrained
//! single linkage.
//!
//! The pipeline: score every pair of items with [`similarity`], calibrate a
//! link threshold from the score histogram with [`calibration`], then cluster
//! with [`linkage`]. [`fusion`] turns per-frame detections into tracklets whose
//! temporal overlaps become cannot-link constraints, and [`eval`] scores a
//! clustering against annotations.

pub mod calibration;
pub mod er_graph;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod hungarian;
pub mod io;
pub mod linkage;
pub mod model;
pub mod rng;
pub mod similarity;
pub mod union_find;

pub use error::{Error, ErrorClass, Result};
pub use model::{
    BoxObservation, BoxSource, Clustering, ConstraintSet, FeatureDistribution, FeatureMatrix, GallerySet, Rect,
    Tracklet,
};
pub use rng::RngSpec;
pub use similarity::{PairScoreTable, ScoreMode, SimilarityScore};
