//! Validated datasets, prediction sets and the video-exclusive split.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::eval::FrameDetections;
use crate::geometry::{FrameKey, FrameRecord, GeometryError, Instance, InstanceKind, Skeleton};

/// Default fraction of non-test frames assigned to validation.
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("duplicate frame {0}")]
    DuplicateFrame(FrameKey),
    #[error("duplicate instance id {id} in frame {frame}")]
    DuplicateInstance { frame: FrameKey, id: u64 },
    #[error("instance {id} in frame {frame} is a prediction inside ground truth")]
    PredictionInGroundTruth { frame: FrameKey, id: u64 },
    #[error("instance {id} in frame {frame} is not a prediction")]
    NotAPrediction { frame: FrameKey, id: u64 },
    #[error("frame {frame}: {source}")]
    Frame {
        frame: FrameKey,
        #[source]
        source: GeometryError,
    },
    #[error("predictions reference unknown frames: {0:?}")]
    UnknownFrames(Vec<FrameKey>),
    #[error("unknown video id {0:?}")]
    UnknownVideo(String),
    #[error("val_fraction {0} must lie in [0, 1)")]
    ValFractionOutOfRange(f64),
}

/// Ground-truth frames grouped by video.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dataset {
    frames: Vec<FrameRecord>,
    skeleton: Skeleton,
    provenance: Option<String>,
}

impl Dataset {
    /// Validates every frame eagerly.
    pub fn new(frames: Vec<FrameRecord>, skeleton: Skeleton, provenance: Option<String>) -> Result<Self, DatasetError> {
        let mut seen = BTreeSet::new();
        for fr in &frames {
            let key = fr.key();
            fr.validate().map_err(|source| DatasetError::Frame { frame: key.clone(), source })?;
            let mut ids = BTreeSet::new();
            for inst in &fr.instances {
                if inst.kind != InstanceKind::GroundTruth {
                    return Err(DatasetError::PredictionInGroundTruth { frame: key, id: inst.id });
                }
                if !ids.insert(inst.id) {
                    return Err(DatasetError::DuplicateInstance { frame: key, id: inst.id });
                }
            }
            if !seen.insert(key.clone()) {
                return Err(DatasetError::DuplicateFrame(key));
            }
        }
        Ok(Dataset { frames, skeleton, provenance })
    }

    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn provenance(&self) -> Option<&str> {
        self.provenance.as_deref()
    }

    pub fn with_skeleton(mut self, skeleton: Skeleton) -> Self {
        self.skeleton = skeleton;
        self
    }

    pub fn frame(&self, key: &FrameKey) -> Option<&FrameRecord> {
        self.frames.iter().find(|f| f.video_id == key.video_id && f.frame_index == key.frame_index)
    }

    pub fn contains(&self, key: &FrameKey) -> bool {
        self.frame(key).is_some()
    }

    pub fn videos(&self) -> BTreeSet<&str> {
        self.frames.iter().map(|f| f.video_id.as_str()).collect()
    }

    pub fn instance_count(&self) -> usize {
        self.frames.iter().map(|f| f.instances.len()).sum()
    }

    /// Pairs each frame's ground truth with its predictions, in dataset frame
    /// order. Frames without predictions get an empty prediction list.
    pub fn pair_with(&self, preds: &PredictionSet) -> Vec<FrameDetections> {
        let mut by_frame: BTreeMap<&FrameKey, Vec<Instance>> = BTreeMap::new();
        for (key, inst) in preds.entries() {
            by_frame.entry(key).or_default().push(inst.clone());
        }
        self.frames
            .iter()
            .map(|fr| FrameDetections {
                ground_truth: fr.instances.clone(),
                predictions: by_frame.remove(&fr.key()).unwrap_or_default(),
            })
            .collect()
    }
}

/// Predictions keyed by the frame they belong to.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PredictionSet {
    entries: Vec<(FrameKey, Instance)>,
}

impl PredictionSet {
    /// Validates entries against the companion dataset. All unknown frame
    /// keys are collected into one error.
    pub fn new(entries: Vec<(FrameKey, Instance)>, ds: &Dataset) -> Result<Self, DatasetError> {
        let known: BTreeSet<FrameKey> = ds.frames.iter().map(FrameRecord::key).collect();
        let mut unknown = BTreeSet::new();
        for (key, inst) in &entries {
            match inst.kind {
                InstanceKind::Prediction { score } => {
                    crate::geometry::check_score(score)
                        .map_err(|source| DatasetError::Frame { frame: key.clone(), source })?;
                }
                InstanceKind::GroundTruth => {
                    return Err(DatasetError::NotAPrediction { frame: key.clone(), id: inst.id })
                }
            }
            if !known.contains(key) {
                unknown.insert(key.clone());
            }
        }
        if !unknown.is_empty() {
            return Err(DatasetError::UnknownFrames(unknown.into_iter().collect()));
        }
        Ok(PredictionSet { entries })
    }

    pub fn entries(&self) -> &[(FrameKey, Instance)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Frame-level train/val split plus whole-video test hold-out.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitAssignment {
    pub train: BTreeSet<FrameKey>,
    pub val: BTreeSet<FrameKey>,
    pub test_videos: BTreeSet<String>,
    pub test: BTreeSet<FrameKey>,
}

/// Holds out every frame of `test_videos`, then shuffles the remaining frames
/// with a seeded xoshiro256++ generator and cuts `round(n * val_fraction)`
/// of them into validation.
pub fn make_split(
    ds: &Dataset,
    test_videos: &[&str],
    val_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment, DatasetError> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(DatasetError::ValFractionOutOfRange(val_fraction));
    }
    let videos = ds.videos();
    let mut held_out = BTreeSet::new();
    for &v in test_videos {
        if !videos.contains(v) {
            return Err(DatasetError::UnknownVideo(v.into()));
        }
        held_out.insert(String::from(v));
    }

    let (test, mut rest): (Vec<FrameKey>, Vec<FrameKey>) =
        ds.frames.iter().map(FrameRecord::key).partition(|k| held_out.contains(&k.video_id));
    // canonical order first so the permutation only depends on the key set
    rest.sort();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    rest.shuffle(&mut rng);

    let n_val = libm::round(rest.len() as f64 * val_fraction) as usize;
    let train = rest.split_off(n_val);
    Ok(SplitAssignment {
        train: train.into_iter().collect(),
        val: rest.into_iter().collect(),
        test_videos: held_out,
        test: test.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use alloc::format;
    use alloc::vec;

    fn frame(video: &str, idx: u32, n: usize) -> FrameRecord {
        FrameRecord {
            video_id: video.into(),
            frame_index: idx,
            width: 200,
            height: 100,
            instances: (0..n)
                .map(|i| Instance::ground_truth(i as u64, BBox::new(10.0 * i as f64, 5.0, 8.0, 8.0).unwrap(), None))
                .collect(),
        }
    }

    fn herd(videos: usize, frames_per_video: u32) -> Dataset {
        let frames =
            (0..videos).flat_map(|v| (0..frames_per_video).map(move |f| frame(&format!("v{v:02}"), f, 2))).collect();
        Dataset::new(frames, Skeleton::default(), None).unwrap()
    }

    #[test]
    fn rejects_duplicates() {
        let err = Dataset::new(vec![frame("a", 0, 1), frame("a", 0, 1)], Skeleton::default(), None);
        assert_eq!(err, Err(DatasetError::DuplicateFrame(FrameKey::new("a", 0))));
        let mut fr = frame("a", 0, 2);
        fr.instances[1].id = 0;
        assert!(matches!(
            Dataset::new(vec![fr], Skeleton::default(), None),
            Err(DatasetError::DuplicateInstance { id: 0, .. })
        ));
    }

    #[test]
    fn predictions_must_reference_known_frames() {
        let ds = herd(1, 2);
        let p = |v: &str, f| {
            (FrameKey::new(v, f), Instance::prediction(1, BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), None, 0.5).unwrap())
        };
        assert!(PredictionSet::new(Vec::new(), &ds).unwrap().is_empty());
        assert_eq!(
            PredictionSet::new(vec![p("v00", 1), p("zz", 3), p("v00", 9)], &ds),
            Err(DatasetError::UnknownFrames(vec![FrameKey::new("v00", 9), FrameKey::new("zz", 3)]))
        );
        let gt = (FrameKey::new("v00", 0), Instance::ground_truth(1, BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), None));
        assert!(matches!(PredictionSet::new(vec![gt], &ds), Err(DatasetError::NotAPrediction { .. })));
    }

    #[test]
    fn split_holds_out_whole_videos() {
        let ds = herd(23, 6);
        let test = ["v03", "v07", "v11", "v19"];
        let s = make_split(&ds, &test, DEFAULT_VAL_FRACTION, 1).unwrap();
        assert_eq!(s.test.len(), 24);
        assert!(s.train.iter().chain(&s.val).all(|k| !test.contains(&k.video_id.as_str())));
        assert!(s.train.is_disjoint(&s.val));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), ds.frames().len());
        // 114 remaining frames -> round(11.4) = 11
        assert_eq!(s.val.len(), 11);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let ds = herd(5, 20);
        let a = make_split(&ds, &["v00"], 0.25, 1).unwrap();
        let b = make_split(&ds, &["v00"], 0.25, 1).unwrap();
        let c = make_split(&ds, &["v00"], 0.25, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.val, c.val);
        assert_eq!(a.val.len(), c.val.len());
        assert_eq!(a.train.len(), c.train.len());
    }

    #[test]
    fn split_errors() {
        let ds = herd(2, 3);
        assert!(make_split(&ds, &[], 0.0, 0).unwrap().val.is_empty());
        assert_eq!(make_split(&ds, &["nope"], 0.1, 0), Err(DatasetError::UnknownVideo("nope".into())));
        assert!(matches!(make_split(&ds, &[], 1.0, 0), Err(DatasetError::ValFractionOutOfRange(_))));
        assert!(make_split(&ds, &[], -0.1, 0).is_err());
    }
}
