//! Detector/tracker fusion into face tracklets.
//!
//! Each frame, every live tracklet asks its tracker for a proposal. Proposals
//! are matched one-to-one to the frame's detections by IoU (gated at
//! `iou_threshold`). A matched detection confirms the tracklet; an unmatched
//! detection starts a new one; an unmatched proposal is appended
//! provisionally. A tracklet whose provisional run grows past
//! `patience_alpha` frames is closed and the run is dropped; a run that is
//! followed by a confirmation is kept.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hungarian::hungarian_match;
use crate::model::{BoxObservation, BoxSource, Rect, Tracklet};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.3;
pub const DEFAULT_PATIENCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub iou_threshold: f64,
    pub patience_alpha: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            patience_alpha: DEFAULT_PATIENCE,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "iou threshold must be in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Forward tracker used to extend a tracklet by one frame.
pub trait TrackerAdapter {
    /// Proposed box for `track` in `next_frame`, or `None` when the tracker
    /// loses the target. Implementations anchor on the last confirmed box.
    fn propose(&self, track: &Tracklet, next_frame: u64) -> Option<Rect>;
}

/// Stays on the last confirmed box.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantPosition;

impl TrackerAdapter for ConstantPosition {
    fn propose(&self, track: &Tracklet, _next_frame: u64) -> Option<Rect> {
        track.last_confirmed().map(|o| o.rect)
    }
}

/// Extrapolates the displacement between the last two confirmed boxes.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantVelocity;

impl TrackerAdapter for ConstantVelocity {
    fn propose(&self, track: &Tracklet, next_frame: u64) -> Option<Rect> {
        let last = track.last_confirmed()?;
        let Some(prev) = track.previous_confirmed() else {
            return Some(last.rect);
        };
        let span = (last.frame - prev.frame) as f64;
        let ahead = next_frame.saturating_sub(last.frame) as f64;
        let vx = (last.rect.x - prev.rect.x) / span;
        let vy = (last.rect.y - prev.rect.y) / span;
        Some(Rect {
            x: last.rect.x + vx * ahead,
            y: last.rect.y + vy * ahead,
            ..last.rect
        })
    }
}

/// Replays known trajectories. The trajectory followed is the one whose box
/// in the last confirmed frame overlaps the last confirmed box most.
#[derive(Debug, Clone, Default)]
pub struct ScriptedTracker {
    tracks: Vec<BTreeMap<u64, Rect>>,
}

impl ScriptedTracker {
    pub fn new(tracks: Vec<BTreeMap<u64, Rect>>) -> Self {
        Self { tracks }
    }

    /// Groups boxes into trajectories by their `identity` label.
    pub fn from_boxes(boxes: &[BoxObservation]) -> Result<Self> {
        let mut by_id: BTreeMap<&str, BTreeMap<u64, Rect>> = BTreeMap::new();
        for b in boxes {
            let id = b
                .identity
                .as_deref()
                .ok_or_else(|| Error::MissingField(format!("identity for scripted box at frame {}", b.frame)))?;
            by_id.entry(id).or_default().insert(b.frame, b.rect);
        }
        Ok(Self::new(by_id.into_values().collect()))
    }
}

impl TrackerAdapter for ScriptedTracker {
    fn propose(&self, track: &Tracklet, next_frame: u64) -> Option<Rect> {
        let anchor = track.last_confirmed()?;
        let mut best: Option<(f64, &BTreeMap<u64, Rect>)> = None;
        for t in &self.tracks {
            if let Some(r) = t.get(&anchor.frame) {
                let iou = r.iou(&anchor.rect);
                if iou > 0.0 && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, t));
                }
            }
        }
        best.and_then(|(_, t)| t.get(&next_frame).copied())
    }
}

pub fn iou(a: &BoxObservation, b: &BoxObservation) -> f64 {
    a.rect.iou(&b.rect)
}

/// Drops the provisional tail and returns the finished tracklet.
fn close(mut t: Tracklet) -> Tracklet {
    let keep = t.observations.len() - t.provisional_tail;
    t.observations.truncate(keep);
    t.provisional_tail = 0;
    t
}

/// IoU-gated one-to-one matching of `proposals` (rows) to `boxes` (cols).
/// Sub-threshold weights are zeroed before assignment and any sub-threshold
/// pair is discarded after it.
pub fn gated_matches(proposals: &[Rect], boxes: &[Rect], threshold: f64) -> Result<Vec<(usize, usize)>> {
    let weights: Vec<Vec<f64>> = proposals
        .iter()
        .map(|p| {
            boxes
                .iter()
                .map(|b| {
                    let w = p.iou(b);
                    if w >= threshold {
                        w
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let assignment = hungarian_match(&weights)?;
    Ok(assignment
        .pairs
        .into_iter()
        .filter(|&(r, c)| weights[r][c] >= threshold && weights[r][c] > 0.0)
        .collect())
}

/// Runs fusion over a detection stream sorted by frame. Frames without
/// detections between the first and last detection frame are processed as
/// empty frames. Output tracklets are ordered by id (creation order).
pub fn fuse(detections: &[BoxObservation], tracker: &dyn TrackerAdapter, cfg: &FusionConfig) -> Result<Vec<Tracklet>> {
    cfg.validate()?;
    for w in detections.windows(2) {
        if w[1].frame < w[0].frame {
            return Err(Error::OutOfOrderFrames {
                previous: w[0].frame,
                found: w[1].frame,
            });
        }
    }
    let (Some(first), Some(last)) = (detections.first(), detections.last()) else {
        return Ok(Vec::new());
    };

    let mut active: Vec<Tracklet> = Vec::new();
    let mut finished: Vec<Tracklet> = Vec::new();
    let mut next_id = 0;
    let mut cursor = 0;
    for frame in first.frame..=last.frame {
        let start = cursor;
        while cursor < detections.len() && detections[cursor].frame == frame {
            cursor += 1;
        }
        let frame_dets = &detections[start..cursor];

        // Tracklets whose tracker loses the target end here.
        let mut live = Vec::with_capacity(active.len());
        let mut proposals = Vec::with_capacity(active.len());
        for t in active.drain(..) {
            match tracker.propose(&t, frame) {
                Some(p) => {
                    proposals.push(p);
                    live.push(t);
                }
                None => finished.push(close(t)),
            }
        }

        let det_rects: Vec<Rect> = frame_dets.iter().map(|d| d.rect).collect();
        let matches = gated_matches(&proposals, &det_rects, cfg.iou_threshold)?;
        let mut det_for_track = vec![None; live.len()];
        let mut det_taken = vec![false; frame_dets.len()];
        for (r, c) in matches {
            det_for_track[r] = Some(c);
            det_taken[c] = true;
        }

        for ((mut t, proposal), matched) in live.into_iter().zip(proposals).zip(det_for_track) {
            match matched {
                Some(c) => {
                    let mut obs = frame_dets[c].clone();
                    obs.source = BoxSource::Detector;
                    t.observations.push(obs);
                    t.provisional_tail = 0;
                    active.push(t);
                }
                None => {
                    t.observations.push(BoxObservation {
                        frame,
                        rect: proposal,
                        source: BoxSource::Tracker,
                        feature_index: None,
                        identity: None,
                    });
                    t.provisional_tail += 1;
                    if t.provisional_tail > cfg.patience_alpha {
                        finished.push(close(t));
                    } else {
                        active.push(t);
                    }
                }
            }
        }

        for (c, det) in frame_dets.iter().enumerate() {
            if !det_taken[c] {
                let mut obs = det.clone();
                obs.source = BoxSource::Detector;
                active.push(Tracklet::new(next_id, obs));
                next_id += 1;
            }
        }
        active.sort_by_key(|t| t.id);
    }
    finished.extend(active.into_iter().map(close));
    finished.sort_by_key(|t| t.id);
    Ok(finished)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(frame: u64, x: f64) -> BoxObservation {
        BoxObservation::detection(frame, Rect::new(x, 0.0, 10.0, 10.0).unwrap())
    }

    #[test]
    fn iou_values() {
        assert_eq!(iou(&det(0, 0.0), &det(0, 0.0)), 1.0);
        assert_eq!(iou(&det(0, 0.0), &det(0, 20.0)), 0.0);
        assert!((iou(&det(0, 0.0), &det(0, 5.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn always_matched_face_gives_one_tracklet() {
        let dets: Vec<_> = (0..30).map(|f| det(f, f as f64)).collect();
        let out = fuse(&dets, &ConstantVelocity, &FusionConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 30);
        assert!(out[0].observations.iter().all(BoxObservation::is_confirmed));
    }

    #[test]
    fn short_gap_is_bridged() {
        let dets: Vec<_> = (0..10).chain(15..25).map(|f| det(f, 0.0)).collect();
        let out = fuse(&dets, &ConstantPosition, &FusionConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 25);
        let tracker_frames: Vec<u64> = out[0]
            .observations
            .iter()
            .filter(|o| !o.is_confirmed())
            .map(|o| o.frame)
            .collect();
        assert_eq!(tracker_frames, vec![10, 11, 12, 13, 14]);
    }

    #[test]
    fn gap_of_alpha_is_bridged_and_alpha_plus_one_splits() {
        let cfg = FusionConfig::default();
        let bridged: Vec<_> = (0..5).chain(15..20).map(|f| det(f, 0.0)).collect();
        assert_eq!(fuse(&bridged, &ConstantPosition, &cfg).unwrap().len(), 1);

        let split: Vec<_> = (0..5).chain(16..20).map(|f| det(f, 0.0)).collect();
        let out = fuse(&split, &ConstantPosition, &cfg).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].first_frame(), out[0].last_frame()), (0, 4));
        assert_eq!((out[1].first_frame(), out[1].last_frame()), (16, 19));
        assert!(out.iter().all(|t| t.observations.iter().all(BoxObservation::is_confirmed)));
    }

    #[test]
    fn stream_end_drops_provisional_tail() {
        let dets: Vec<_> = (0..5).map(|f| det(f, 0.0)).chain([det(8, 100.0)]).collect();
        let out = fuse(&dets, &ConstantPosition, &FusionConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].last_frame(), 4);
        assert!(out.iter().all(|t| t.last_confirmed().map(|o| o.frame) == Some(t.last_frame())));
    }

    #[test]
    fn out_of_order_frames() {
        let err = fuse(&[det(3, 0.0), det(2, 0.0)], &ConstantPosition, &FusionConfig::default());
        assert!(matches!(err, Err(Error::OutOfOrderFrames { previous: 3, found: 2 })));
    }

    #[test]
    fn two_faces_stay_apart() {
        let dets: Vec<_> = (0..10).flat_map(|f| [det(f, 0.0), det(f, 50.0)]).collect();
        let out = fuse(&dets, &ConstantPosition, &FusionConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|t| t.len() == 10));
    }

    #[test]
    fn scripted_tracker_follows_script() {
        let mut path = BTreeMap::new();
        for f in 0..5u64 {
            path.insert(f, Rect::new(f as f64 * 8.0, 0.0, 10.0, 10.0).unwrap());
        }
        let tracker = ScriptedTracker::new(vec![path]);
        let t = Tracklet::new(0, det(1, 8.0));
        assert_eq!(tracker.propose(&t, 3).unwrap().x, 24.0);
        assert!(tracker.propose(&t, 9).is_none());
    }
}
