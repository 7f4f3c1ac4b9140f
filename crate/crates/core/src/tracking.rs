//! SORT-style tracking by detection.
//!
//! Each frame: every live track predicts its box with a constant-velocity
//! Kalman filter, detections are assigned to predictions by minimum total
//! cost `(1 - IoU) + lambda_app * (1 - cosine)`, assignments below the IoU
//! gate are discarded, and the lifecycle counters advance. Unmatched
//! detections large enough to pass the size gate start new tentative tracks.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::assignment::{min_cost_assignment, CostMatrix};
use crate::framing::{build_patch, PatchSpec, DEFAULT_PATCH_MARGIN, DEFAULT_PATCH_SIZE};
use crate::geometry::{BBox, Instance};
use crate::kalman::{BoxFilter, NoiseConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackingError {
    #[error("frame {got} arrived after frame {previous}; frames must be strictly increasing")]
    OutOfOrderFrame { previous: u32, got: u32 },
    #[error("embedding for detection {id} has norm {norm}, expected 1")]
    EmbeddingNotUnit { id: u64, norm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrackerConfig {
    pub iou_gate: f64,
    pub lambda_app: f64,
    pub confirm_hits: u32,
    pub max_age: u32,
    /// Minimum `max(w, h)` in px for spawning and for export.
    pub min_size: f64,
    pub gallery_size: usize,
    pub noise: NoiseConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            iou_gate: 0.3,
            lambda_app: 0.0,
            confirm_hits: 3,
            max_age: 5,
            min_size: 50.0,
            gallery_size: 100,
            noise: NoiseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Deleted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HistoryEntry {
    pub frame_index: u32,
    /// Detection box when matched, predicted box otherwise.
    pub bbox: BBox,
    pub detection: Option<u64>,
}

/// Supplies unit-norm appearance features for detections.
pub trait EmbeddingProvider {
    fn embed(&self, det: &Instance) -> Vec<f64>;
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    filter: BoxFilter,
    pub status: TrackStatus,
    pub hits: u32,
    pub misses_in_a_row: u32,
    pub history: Vec<HistoryEntry>,
    confirmed_once: bool,
    gallery: Vec<Vec<f64>>,
}

impl Track {
    fn spawn(id: u64, frame_index: u32, det: &Instance, cfg: &TrackerConfig) -> Self {
        let mut t = Track {
            id,
            filter: BoxFilter::new(&det.bbox, cfg.noise),
            status: TrackStatus::Tentative,
            hits: 1,
            misses_in_a_row: 0,
            history: alloc::vec![HistoryEntry { frame_index, bbox: det.bbox, detection: Some(det.id) }],
            confirmed_once: false,
            gallery: Vec::new(),
        };
        t.maybe_confirm(cfg);
        t
    }

    pub fn filter(&self) -> &BoxFilter {
        &self.filter
    }

    /// Advances the motion model one frame and returns the predicted box.
    pub fn predict(&mut self) -> BBox {
        self.filter.predict()
    }

    /// Box expected on the next frame, without advancing.
    pub fn predicted_bbox(&self) -> BBox {
        self.filter.peek()
    }

    pub fn is_live(&self) -> bool {
        self.status != TrackStatus::Deleted
    }

    /// True once the track has reached `Confirmed`, even if later deleted.
    pub fn was_confirmed(&self) -> bool {
        self.confirmed_once
    }

    fn maybe_confirm(&mut self, cfg: &TrackerConfig) {
        if self.status == TrackStatus::Tentative && self.hits >= cfg.confirm_hits {
            self.status = TrackStatus::Confirmed;
            self.confirmed_once = true;
        }
    }

    fn record_miss(&mut self, frame_index: u32, predicted: BBox, cfg: &TrackerConfig) {
        self.misses_in_a_row += 1;
        self.history.push(HistoryEntry { frame_index, bbox: predicted, detection: None });
        if self.misses_in_a_row > cfg.max_age {
            self.status = TrackStatus::Deleted;
        }
    }

    fn record_hit(&mut self, frame_index: u32, det: &Instance, feature: Option<Vec<f64>>, cfg: &TrackerConfig) {
        self.filter.update(&det.bbox);
        self.hits += 1;
        self.misses_in_a_row = 0;
        self.history.push(HistoryEntry { frame_index, bbox: det.bbox, detection: Some(det.id) });
        if let Some(f) = feature {
            self.gallery.push(f);
            if self.gallery.len() > cfg.gallery_size {
                self.gallery.remove(0);
            }
        }
        self.maybe_confirm(cfg);
    }

    /// Normalized mean of the feature gallery.
    pub fn appearance(&self) -> Option<Vec<f64>> {
        let first = self.gallery.first()?;
        let mut mean = alloc::vec![0.0; first.len()];
        for f in &self.gallery {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        let norm = libm::sqrt(mean.iter().map(|v| v * v).sum::<f64>());
        (norm > 0.0).then(|| mean.into_iter().map(|v| v / norm).collect())
    }
}

/// Appearance inputs for [`associate`].
#[derive(Debug, Clone, Copy)]
pub struct Appearance<'a> {
    /// Per track; `None` when the track has no gallery yet.
    pub tracks: &'a [Option<Vec<f64>>],
    pub detections: &'a [Vec<f64>],
    pub weight: f64,
}

/// Indices into the track and detection slices passed to [`associate`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Association {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn association_costs(predicted: &[BBox], dets: &[Instance], appearance: Option<Appearance<'_>>) -> CostMatrix {
    CostMatrix::from_fn(predicted.len(), dets.len(), |t, d| {
        let motion = 1.0 - predicted[t].iou(&dets[d].bbox);
        let look = match appearance {
            Some(a) if a.weight > 0.0 => match &a.tracks[t] {
                Some(tf) => a.weight * (1.0 - cosine(tf, &a.detections[d])),
                None => 0.0,
            },
            _ => 0.0,
        };
        motion + look
    })
}

/// Globally optimal assignment of detections to predicted boxes, with pairs
/// below `iou_gate` stripped afterwards.
pub fn associate(
    predicted: &[BBox],
    dets: &[Instance],
    iou_gate: f64,
    appearance: Option<Appearance<'_>>,
) -> Association {
    let costs = association_costs(predicted, dets, appearance);
    let assignment = min_cost_assignment(&costs);
    let mut det_used = alloc::vec![false; dets.len()];
    let mut out = Association::default();
    for (t, a) in assignment.into_iter().enumerate() {
        match a {
            Some(d) if predicted[t].iou(&dets[d].bbox) >= iou_gate => {
                det_used[d] = true;
                out.pairs.push((t, d));
            }
            _ => out.unmatched_tracks.push(t),
        }
    }
    out.unmatched_detections = (0..dets.len()).filter(|&d| !det_used[d]).collect();
    out
}

pub struct Tracker {
    config: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<u32>,
    embedder: Option<Box<dyn EmbeddingProvider + Send + Sync>>,
}

impl core::fmt::Debug for Tracker {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tracker")
            .field("config", &self.config)
            .field("tracks", &self.tracks)
            .field("next_id", &self.next_id)
            .field("last_frame", &self.last_frame)
            .finish_non_exhaustive()
    }
}

/// Detection id to track id, for detections that ended up on a track this
/// frame.
pub type FrameAssignments = Vec<(u64, u64)>;

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Tracker { config, tracks: Vec::new(), next_id: 1, last_frame: None, embedder: None }
    }

    pub fn with_embedder(mut self, embedder: Box<dyn EmbeddingProvider + Send + Sync>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    fn live_indices(&self) -> Vec<usize> {
        (0..self.tracks.len()).filter(|&i| self.tracks[i].is_live()).collect()
    }

    fn embed_all(&self, dets: &[Instance]) -> Result<Option<Vec<Vec<f64>>>, TrackingError> {
        let Some(e) = &self.embedder else {
            return Ok(None);
        };
        dets.iter()
            .map(|d| {
                let f = e.embed(d);
                let norm = libm::sqrt(f.iter().map(|v| v * v).sum::<f64>());
                if (norm - 1.0).abs() > 1e-6 {
                    Err(TrackingError::EmbeddingNotUnit { id: d.id, norm })
                } else {
                    Ok(f)
                }
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Processes one frame. Skipped frame indices count as frames without
    /// detections.
    pub fn step(&mut self, frame_index: u32, dets: &[Instance]) -> Result<FrameAssignments, TrackingError> {
        if let Some(prev) = self.last_frame {
            if frame_index <= prev {
                return Err(TrackingError::OutOfOrderFrame { previous: prev, got: frame_index });
            }
            for skipped in prev + 1..frame_index {
                for i in self.live_indices() {
                    let predicted = self.tracks[i].predict();
                    self.tracks[i].record_miss(skipped, predicted, &self.config);
                }
            }
        }
        self.last_frame = Some(frame_index);
        let features = self.embed_all(dets)?;

        let live = self.live_indices();
        let predicted: Vec<BBox> = live.iter().map(|&i| self.tracks[i].predict()).collect();
        let appearance_tracks: Vec<Option<Vec<f64>>>;
        let appearance = match &features {
            Some(f) if self.config.lambda_app > 0.0 => {
                appearance_tracks = live.iter().map(|&i| self.tracks[i].appearance()).collect();
                Some(Appearance { tracks: &appearance_tracks, detections: f, weight: self.config.lambda_app })
            }
            _ => None,
        };
        let assoc = associate(&predicted, dets, self.config.iou_gate, appearance);

        let mut out = FrameAssignments::new();
        for &(t, d) in &assoc.pairs {
            let track = &mut self.tracks[live[t]];
            let feature = features.as_ref().map(|f| f[d].clone());
            track.record_hit(frame_index, &dets[d], feature, &self.config);
            out.push((dets[d].id, track.id));
        }
        for &t in &assoc.unmatched_tracks {
            self.tracks[live[t]].record_miss(frame_index, predicted[t], &self.config);
        }
        for &d in &assoc.unmatched_detections {
            let det = &dets[d];
            if det.bbox.max_side() < self.config.min_size {
                continue;
            }
            let mut track = Track::spawn(self.next_id, frame_index, det, &self.config);
            if let Some(f) = &features {
                track.gallery.push(f[d].clone());
            }
            self.next_id += 1;
            out.push((det.id, track.id));
            self.tracks.push(track);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SegmentFrame {
    pub frame_index: u32,
    pub detection: u64,
    pub bbox: BBox,
    pub patch: PatchSpec,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Segment {
    pub video_id: String,
    pub track_id: u64,
    pub first_frame: u32,
    pub last_frame: u32,
    pub frames: Vec<SegmentFrame>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SegmentManifest {
    pub video_id: String,
    pub min_size: f64,
    /// Where the size gate applies.
    pub size_gate: String,
    pub segments: Vec<Segment>,
}

/// Segments for every track that reached `Confirmed` and whose matched
/// detections all have `max(w, h) >= min_size`. Only frames with a matched
/// detection are listed.
pub fn export_manifest(tracker: &Tracker, video_id: &str) -> SegmentManifest {
    export_manifest_with(tracker, video_id, DEFAULT_PATCH_MARGIN, DEFAULT_PATCH_SIZE)
}

pub fn export_manifest_with(tracker: &Tracker, video_id: &str, margin: f64, out_size: f64) -> SegmentManifest {
    let min_size = tracker.config.min_size;
    let segments = tracker
        .tracks
        .iter()
        .filter(|t| t.was_confirmed())
        .filter_map(|t| {
            let matched: Vec<&HistoryEntry> = t.history.iter().filter(|h| h.detection.is_some()).collect();
            if matched.iter().any(|h| h.bbox.max_side() < min_size) {
                return None;
            }
            let frames: Vec<SegmentFrame> = matched
                .iter()
                .map(|h| SegmentFrame {
                    frame_index: h.frame_index,
                    detection: h.detection.unwrap_or_default(),
                    bbox: h.bbox,
                    patch: build_patch(&h.bbox, margin, out_size).unwrap_or_else(|_| {
                        build_patch(&h.bbox, DEFAULT_PATCH_MARGIN, DEFAULT_PATCH_SIZE).expect("defaults are valid")
                    }),
                })
                .collect();
            Some(Segment {
                video_id: video_id.into(),
                track_id: t.id,
                first_frame: frames.first()?.frame_index,
                last_frame: frames.last()?.frame_index,
                frames,
            })
        })
        .collect();
    SegmentManifest { video_id: video_id.into(), min_size, size_gate: "spawn+export".into(), segments }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn det(id: u64, x: f64, y: f64, w: f64, h: f64) -> Instance {
        Instance::prediction(id, BBox::new(x, y, w, h).unwrap(), None, 0.9).unwrap()
    }

    #[test]
    fn track_predict_follows_velocity() {
        let cfg = TrackerConfig::default();
        let mut tr = Tracker::new(cfg);
        tr.step(0, &[det(1, 0.0, 0.0, 60.0, 60.0)]).unwrap();
        let t = &tr.tracks()[0];
        let still = t.predicted_bbox();
        assert!((still.x() - 0.0).abs() < 1e-9);
        for f in 1..20 {
            tr.step(f, &[det(f as u64 + 1, 5.0 * f64::from(f), 0.0, 60.0, 60.0)]).unwrap();
        }
        let p = tr.tracks()[0].predicted_bbox();
        assert!((p.x() - 100.0).abs() < 0.5, "{p:?}");
    }

    #[test]
    fn associate_basic() {
        let pred = [BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()];
        let a = associate(&pred, &[det(1, 0.5, 0.0, 10.0, 10.0)], 0.3, None);
        assert_eq!(a.pairs, vec![(0, 0)]);
        let a = associate(&pred, &[det(1, 8.0, 8.0, 10.0, 10.0)], 0.3, None);
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_tracks, vec![0]);
        assert_eq!(a.unmatched_detections, vec![0]);
    }

    #[test]
    fn associate_prefers_global_optimum() {
        // track 0 overlaps both detections; greedy would give it det 0
        let preds = [BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), BBox::new(3.0, 0.0, 10.0, 10.0).unwrap()];
        let dets = [det(1, 2.0, 0.0, 10.0, 10.0), det(2, -0.5, 0.0, 10.0, 10.0)];
        let a = associate(&preds, &dets, 0.0, None);
        let cost =
            |pairs: &[(usize, usize)]| pairs.iter().map(|&(t, d)| 1.0 - preds[t].iou(&dets[d].bbox)).sum::<f64>();
        let alt = [(0usize, 1usize), (1, 0)];
        let ident = [(0usize, 0usize), (1, 1)];
        assert_eq!(a.pairs.len(), 2);
        assert!((cost(&a.pairs) - cost(&alt).min(cost(&ident))).abs() < 1e-12);
    }

    #[test]
    fn out_of_order_rejected() {
        let mut tr = Tracker::new(TrackerConfig::default());
        tr.step(5, &[]).unwrap();
        assert_eq!(tr.step(5, &[]), Err(TrackingError::OutOfOrderFrame { previous: 5, got: 5 }));
    }

    #[test]
    fn lifecycle_and_small_spawn_gate() {
        let mut tr = Tracker::new(TrackerConfig::default());
        tr.step(0, &[det(1, 0.0, 0.0, 40.0, 45.0), det(2, 200.0, 0.0, 60.0, 30.0)]).unwrap();
        assert_eq!(tr.tracks().len(), 1);
        assert_eq!(tr.tracks()[0].status, TrackStatus::Tentative);
        tr.step(1, &[det(3, 200.0, 0.0, 60.0, 30.0)]).unwrap();
        tr.step(2, &[det(4, 200.0, 0.0, 60.0, 30.0)]).unwrap();
        assert_eq!(tr.tracks()[0].status, TrackStatus::Confirmed);
        let m = export_manifest(&tr, "v");
        assert_eq!(m.segments.len(), 1);
        assert_eq!((m.segments[0].first_frame, m.segments[0].last_frame), (0, 2));
        assert_eq!(m.segments[0].frames.len(), 3);
        // six empty frames exceed max_age 5
        tr.step(8, &[]).unwrap();
        assert_eq!(tr.tracks()[0].status, TrackStatus::Deleted);
        assert_eq!(export_manifest(&tr, "v").segments.len(), 1);
    }

    #[test]
    fn export_gates_small_tracks() {
        let cfg = TrackerConfig { min_size: 40.0, ..TrackerConfig::default() };
        let mut tr = Tracker::new(cfg);
        for f in 0..4 {
            tr.step(f, &[det(u64::from(f), 0.0, 0.0, 40.0, 45.0)]).unwrap();
        }
        assert!(tr.tracks()[0].was_confirmed());
        assert_eq!(export_manifest(&tr, "v").segments.len(), 1);
        let mut strict = Tracker::new(cfg);
        strict.config.min_size = 40.0;
        for f in 0..4 {
            let w = if f == 2 { 30.0 } else { 45.0 };
            strict.step(f, &[det(u64::from(f), 0.0, 0.0, w, 30.0)]).unwrap();
        }
        assert!(strict.tracks()[0].was_confirmed());
        assert!(export_manifest(&strict, "v").segments.is_empty());
        assert!(export_manifest(&Tracker::new(cfg), "v").segments.is_empty());
    }

    struct Fixed(Vec<(u64, Vec<f64>)>);
    impl EmbeddingProvider for Fixed {
        fn embed(&self, det: &Instance) -> Vec<f64> {
            self.0.iter().find(|(id, _)| *id == det.id).map(|(_, f)| f.clone()).unwrap()
        }
    }

    #[test]
    fn appearance_breaks_ambiguity() {
        let cfg = TrackerConfig { lambda_app: 1.0, min_size: 10.0, confirm_hits: 1, ..TrackerConfig::default() };
        let emb = Fixed(vec![(1, vec![1.0, 0.0]), (2, vec![0.0, 1.0]), (3, vec![0.0, 1.0]), (4, vec![1.0, 0.0])]);
        let mut tr = Tracker::new(cfg).with_embedder(Box::new(emb));
        tr.step(0, &[det(1, 0.0, 0.0, 20.0, 20.0), det(2, 12.0, 0.0, 20.0, 20.0)]).unwrap();
        // boxes swap to overlapping mid positions; appearance decides
        let out = tr.step(1, &[det(3, 2.0, 0.0, 20.0, 20.0), det(4, 10.0, 0.0, 20.0, 20.0)]).unwrap();
        let track_of = |d: u64| out.iter().find(|(x, _)| *x == d).unwrap().1;
        assert_eq!(track_of(3), 2);
        assert_eq!(track_of(4), 1);

        let bad = Fixed(vec![(1, vec![2.0, 0.0])]);
        let mut tr = Tracker::new(cfg).with_embedder(Box::new(bad));
        assert!(matches!(
            tr.step(0, &[det(1, 0.0, 0.0, 20.0, 20.0)]),
            Err(TrackingError::EmbeddingNotUnit { id: 1, .. })
        ));
    }
}
