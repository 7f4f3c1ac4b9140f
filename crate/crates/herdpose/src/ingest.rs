//! COCO-keypoints-style annotation and prediction files.
//!
//! Annotation files carry `images`, `annotations` and a single category whose
//! `keypoints` list must match the fixed slot order. Images are identified by
//! `video_id` + `frame_index`; the numeric image ids of a loaded file are kept
//! in an [`ImageIndex`] so predictions written later refer to the same ids.
//! Skeleton edges are 1-based in files, as in COCO.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use herdpose_core::dataset::{Dataset, PredictionSet};
use herdpose_core::{BBox, FrameKey, FrameRecord, Instance, Keypoint, Pose, Skeleton, Visibility, KEYPOINT_COUNT};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canon;
use crate::error::{Error, Result};
use crate::fsio::{self, InputFile};

pub const CATEGORY_ID: u64 = 1;
pub const CATEGORY_NAME: &str = "elephant";

/// Two-way map between frame keys and numeric image ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ImageIndex {
    by_key: BTreeMap<FrameKey, u64>,
    by_id: BTreeMap<u64, FrameKey>,
}

impl ImageIndex {
    /// Ids `1..=n` in dataset frame order.
    pub fn sequential(ds: &Dataset) -> Self {
        let mut idx = ImageIndex::default();
        for (i, fr) in ds.frames().iter().enumerate() {
            idx.insert(fr.key(), i as u64 + 1);
        }
        idx
    }

    fn insert(&mut self, key: FrameKey, id: u64) {
        self.by_key.insert(key.clone(), id);
        self.by_id.insert(id, key);
    }

    pub fn id(&self, key: &FrameKey) -> Option<u64> {
        self.by_key.get(key).copied()
    }

    pub fn key(&self, id: u64) -> Option<&FrameKey> {
        self.by_id.get(&id)
    }
}

/// A loaded annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub dataset: Dataset,
    pub images: ImageIndex,
    pub file_names: BTreeMap<FrameKey, String>,
    pub input: InputFile,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawImage {
    id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
    width: u32,
    height: u32,
    video_id: String,
    frame_index: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    #[serde(default = "default_category")]
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoints: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_keypoints: Option<usize>,
}

fn default_category() -> u64 {
    CATEGORY_ID
}

#[derive(Debug, Serialize, Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
    keypoints: Vec<String>,
    #[serde(default)]
    skeleton: Vec<[usize; 2]>,
    /// Per-keypoint OKS falloff constants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    falloff: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawAnnotationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    info: Option<Value>,
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<RawCategory>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawPrediction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    video_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_index: Option<u32>,
    #[serde(default = "default_category")]
    category_id: u64,
    bbox: [f64; 4],
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoints: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    track_id: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WrappedPredictions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    info: Option<Value>,
    predictions: Vec<RawPrediction>,
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::parse(path, &e))
}

pub fn parse_flat_pose(path: &Path, what: &str, flat: &[f64]) -> Result<Pose> {
    if flat.len() != 3 * KEYPOINT_COUNT {
        return Err(Error::schema(
            path,
            format!("{what}: pose length {} does not match skeleton length {KEYPOINT_COUNT}", flat.len() as f64 / 3.0),
        ));
    }
    let mut kps = [Keypoint::NOT_LABELED; KEYPOINT_COUNT];
    for (slot, c) in flat.chunks_exact(3).enumerate() {
        let code = c[2];
        let vis = (code.fract() == 0.0 && (0.0..=2.0).contains(&code))
            .then(|| Visibility::from_code(code as u8))
            .flatten()
            .ok_or_else(|| Error::schema(path, format!("{what}: keypoint {slot} has visibility code {code}")))?;
        if vis != Visibility::NotLabeled {
            if !(c[0].is_finite() && c[1].is_finite()) {
                return Err(Error::schema(path, format!("{what}: keypoint {slot} is not finite")));
            }
            kps[slot] = Keypoint::new(c[0], c[1], vis);
        }
    }
    Ok(Pose::new(kps))
}

pub fn flatten_pose(pose: &Pose) -> Vec<f64> {
    pose.keypoints
        .iter()
        .flat_map(|k| if k.is_labeled() { [k.x, k.y, f64::from(k.vis.code())] } else { [0.0, 0.0, 0.0] })
        .collect()
}

fn parse_bbox(path: &Path, what: &str, b: [f64; 4]) -> Result<BBox> {
    BBox::new(b[0], b[1], b[2], b[3]).map_err(|e| Error::schema(path, format!("{what}: {e}")))
}

pub fn load_annotations(path: &Path) -> Result<Annotations> {
    let (bytes, input) = fsio::read_input(path, "annotations")?;
    parse_annotations(path, &bytes, input)
}

pub fn parse_annotations(path: &Path, bytes: &[u8], input: InputFile) -> Result<Annotations> {
    let raw: RawAnnotationFile = parse_json(path, bytes)?;
    let [category] = raw.categories.as_slice() else {
        return Err(Error::schema(path, format!("expected exactly one category, found {}", raw.categories.len())));
    };
    let mut edges = Vec::with_capacity(category.skeleton.len());
    for &[a, b] in &category.skeleton {
        if a == 0 || b == 0 {
            return Err(Error::schema(path, format!("skeleton edge [{a}, {b}] is not 1-based")));
        }
        edges.push((a - 1, b - 1));
    }
    let mut skeleton = Skeleton::from_names(&category.keypoints, edges).map_err(|e| Error::schema(path, e))?;
    if let Some(f) = &category.falloff {
        let arr: [f64; KEYPOINT_COUNT] = f
            .as_slice()
            .try_into()
            .map_err(|_| Error::schema(path, format!("falloff has {} entries, expected {KEYPOINT_COUNT}", f.len())))?;
        skeleton = skeleton.with_falloff(arr).map_err(|e| Error::schema(path, e))?;
    }

    let mut images = ImageIndex::default();
    let mut file_names = BTreeMap::new();
    let mut frames: Vec<FrameRecord> = Vec::with_capacity(raw.images.len());
    let mut slot_of: BTreeMap<u64, usize> = BTreeMap::new();
    for img in raw.images {
        let key = FrameKey::new(img.video_id.clone(), img.frame_index);
        if slot_of.insert(img.id, frames.len()).is_some() {
            return Err(Error::schema(path, format!("duplicate image id {}", img.id)));
        }
        if images.id(&key).is_some() {
            return Err(Error::schema(path, format!("duplicate frame {key}")));
        }
        images.insert(key.clone(), img.id);
        if let Some(name) = img.file_name {
            file_names.insert(key, name);
        }
        frames.push(FrameRecord {
            video_id: img.video_id,
            frame_index: img.frame_index,
            width: img.width,
            height: img.height,
            instances: Vec::new(),
        });
    }
    for ann in raw.annotations {
        let what = format!("annotation {}", ann.id);
        if ann.category_id != category.id {
            return Err(Error::schema(path, format!("{what}: unknown category {}", ann.category_id)));
        }
        let &slot = slot_of
            .get(&ann.image_id)
            .ok_or_else(|| Error::schema(path, format!("{what}: unknown image id {}", ann.image_id)))?;
        let bbox = parse_bbox(path, &what, ann.bbox)?;
        let pose = ann.keypoints.as_deref().map(|k| parse_flat_pose(path, &what, k)).transpose()?;
        if let (Some(n), Some(p)) = (ann.num_keypoints, &pose) {
            if n != p.labeled_count() {
                return Err(Error::schema(
                    path,
                    format!("{what}: num_keypoints {n} but {} keypoints are labeled", p.labeled_count()),
                ));
            }
        }
        frames[slot].instances.push(Instance::ground_truth(ann.id, bbox, pose));
    }
    let provenance = Some(format!("sha256:{}", input.sha256));
    let dataset = Dataset::new(frames, skeleton, provenance).map_err(|e| Error::dataset(path, e))?;
    Ok(Annotations { dataset, images, file_names, input })
}

/// Serializes a dataset. Frames missing from `images` get fresh ids above the
/// largest known one; missing file names become `video/frame.jpg`.
pub fn annotations_bytes(
    ds: &Dataset,
    images: Option<&ImageIndex>,
    file_names: Option<&BTreeMap<FrameKey, String>>,
    info: Option<Value>,
) -> Result<Vec<u8>> {
    let images = resolve_index(ds, images);
    let raw_images = ds
        .frames()
        .iter()
        .map(|fr| {
            let key = fr.key();
            RawImage {
                id: images.id(&key).expect("index covers every frame"),
                file_name: Some(
                    file_names
                        .and_then(|m| m.get(&key).cloned())
                        .unwrap_or_else(|| format!("{}/{:06}.jpg", fr.video_id, fr.frame_index)),
                ),
                width: fr.width,
                height: fr.height,
                video_id: fr.video_id.clone(),
                frame_index: fr.frame_index,
            }
        })
        .collect();
    let annotations = ds
        .frames()
        .iter()
        .flat_map(|fr| {
            let image_id = images.id(&fr.key()).expect("index covers every frame");
            fr.instances.iter().map(move |inst| RawAnnotation {
                id: inst.id,
                image_id,
                category_id: CATEGORY_ID,
                bbox: inst.bbox.as_array(),
                // from the rounded sides, so a reloaded file writes the same area
                area: Some(canon::round6(inst.bbox.w()) * canon::round6(inst.bbox.h())),
                keypoints: inst.pose.as_ref().map(flatten_pose),
                num_keypoints: inst.pose.as_ref().map(Pose::labeled_count),
            })
        })
        .collect();
    let sk = ds.skeleton();
    let category = RawCategory {
        id: CATEGORY_ID,
        name: CATEGORY_NAME.into(),
        keypoints: sk.names().iter().map(|s| s.to_string()).collect(),
        skeleton: sk.edges().iter().map(|&(a, b)| [a + 1, b + 1]).collect(),
        falloff: Some(sk.falloff().to_vec()),
    };
    canon::to_bytes(&RawAnnotationFile { info, images: raw_images, annotations, categories: vec![category] }, false)
}

fn resolve_index(ds: &Dataset, images: Option<&ImageIndex>) -> ImageIndex {
    let Some(known) = images else {
        return ImageIndex::sequential(ds);
    };
    let mut out = ImageIndex::default();
    let mut next = known.by_id.keys().next_back().copied().unwrap_or(0) + 1;
    for fr in ds.frames() {
        let key = fr.key();
        let id = match known.id(&key) {
            Some(id) => id,
            None => {
                next += 1;
                next - 1
            }
        };
        out.insert(key, id);
    }
    out
}

pub fn save_annotations(
    path: &Path,
    ds: &Dataset,
    images: Option<&ImageIndex>,
    file_names: Option<&BTreeMap<FrameKey, String>>,
    info: Option<Value>,
) -> Result<()> {
    fsio::write_atomic(path, &annotations_bytes(ds, images, file_names, info)?)
}

/// A loaded prediction file. `track_ids` maps `(frame, prediction id)` to the
/// track id when the file carries one.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub set: PredictionSet,
    pub track_ids: BTreeMap<(FrameKey, u64), u64>,
    pub input: InputFile,
}

impl Predictions {
    /// Predictions grouped per frame, in file order within each frame.
    pub fn by_frame(&self) -> BTreeMap<FrameKey, Vec<Instance>> {
        let mut out: BTreeMap<FrameKey, Vec<Instance>> = BTreeMap::new();
        for (k, inst) in self.set.entries() {
            out.entry(k.clone()).or_default().push(inst.clone());
        }
        out
    }
}

pub fn load_predictions(path: &Path, ann: &Annotations) -> Result<Predictions> {
    let (bytes, input) = fsio::read_input(path, "predictions")?;
    parse_predictions(path, &bytes, ann, input)
}

pub fn parse_predictions(path: &Path, bytes: &[u8], ann: &Annotations, input: InputFile) -> Result<Predictions> {
    let first = bytes.iter().copied().find(|b| !b.is_ascii_whitespace());
    let raw: Vec<RawPrediction> = if first == Some(b'{') {
        parse_json::<WrappedPredictions>(path, bytes)?.predictions
    } else {
        parse_json(path, bytes)?
    };
    let mut entries = Vec::with_capacity(raw.len());
    let mut track_ids = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut unknown = BTreeSet::new();
    for (i, p) in raw.into_iter().enumerate() {
        let id = p.id.unwrap_or(i as u64 + 1);
        let what = format!("prediction {id}");
        let key = match (p.image_id, &p.video_id, p.frame_index) {
            (Some(image_id), _, _) => match ann.images.key(image_id) {
                Some(k) => k.clone(),
                None => {
                    unknown.insert(format!("image_id {image_id}"));
                    continue;
                }
            },
            (None, Some(v), Some(f)) => FrameKey::new(v.clone(), f),
            _ => return Err(Error::schema(path, format!("{what}: needs image_id or video_id + frame_index"))),
        };
        if !ann.dataset.contains(&key) {
            unknown.insert(key.to_string());
            continue;
        }
        if !seen.insert((key.clone(), id)) {
            return Err(Error::schema(path, format!("{what}: duplicate id in frame {key}")));
        }
        let bbox = parse_bbox(path, &what, p.bbox)?;
        let pose = p.keypoints.as_deref().map(|k| parse_flat_pose(path, &what, k)).transpose()?;
        let inst =
            Instance::prediction(id, bbox, pose, p.score).map_err(|e| Error::schema(path, format!("{what}: {e}")))?;
        if let Some(t) = p.track_id {
            track_ids.insert((key.clone(), id), t);
        }
        entries.push((key, inst));
    }
    if !unknown.is_empty() {
        let list: Vec<String> = unknown.into_iter().collect();
        return Err(Error::schema(path, format!("predictions reference unknown frames: {}", list.join(", "))));
    }
    let set = PredictionSet::new(entries, &ann.dataset).map_err(|e| Error::dataset(path, e))?;
    Ok(Predictions { set, track_ids, input })
}

pub fn predictions_bytes(
    preds: &PredictionSet,
    images: &ImageIndex,
    track_ids: Option<&BTreeMap<(FrameKey, u64), u64>>,
    info: Option<Value>,
) -> Result<Vec<u8>> {
    let predictions = preds
        .entries()
        .iter()
        .map(|(key, inst)| RawPrediction {
            id: Some(inst.id),
            image_id: images.id(key),
            video_id: Some(key.video_id.clone()),
            frame_index: Some(key.frame_index),
            category_id: CATEGORY_ID,
            bbox: inst.bbox.as_array(),
            score: inst.score().unwrap_or(0.0),
            keypoints: inst.pose.as_ref().map(flatten_pose),
            track_id: track_ids.and_then(|m| m.get(&(key.clone(), inst.id)).copied()),
        })
        .collect();
    canon::to_bytes(&WrappedPredictions { info, predictions }, false)
}

pub fn save_predictions(
    path: &Path,
    preds: &PredictionSet,
    images: &ImageIndex,
    track_ids: Option<&BTreeMap<(FrameKey, u64), u64>>,
    info: Option<Value>,
) -> Result<()> {
    fsio::write_atomic(path, &predictions_bytes(preds, images, track_ids, info)?)
}

/// Split request: whole test videos plus the validation fraction and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_videos: Vec<String>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_val_fraction() -> f64 {
    herdpose_core::dataset::DEFAULT_VAL_FRACTION
}

pub fn load_split(path: &Path) -> Result<(SplitSpec, InputFile)> {
    let (bytes, input) = fsio::read_input(path, "split")?;
    Ok((parse_json(path, &bytes)?, input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn input() -> InputFile {
        InputFile { role: "test".into(), path: "mem".into(), sha256: "0".into() }
    }

    fn names(n: usize) -> String {
        let all: Vec<String> = herdpose_core::KEYPOINT_NAMES[..n].iter().map(|s| format!("\"{s}\"")).collect();
        all.join(",")
    }

    fn minimal(keypoint_names: usize, kps: &str) -> String {
        format!(
            r#"{{"images":[{{"id":7,"width":100,"height":80,"video_id":"v","frame_index":3}}],
"annotations":[{{"id":1,"image_id":7,"category_id":1,"bbox":[10,10,20,20],"keypoints":[{kps}],"num_keypoints":1}}],
"categories":[{{"id":1,"name":"elephant","keypoints":[{}],"skeleton":[[1,4]]}}]}}"#,
            names(keypoint_names)
        )
    }

    const ONE_KP: &str = "15,15,2, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0, 0,0,0";

    #[test]
    fn minimal_file() {
        let a = parse_annotations(Path::new("a.json"), minimal(8, ONE_KP).as_bytes(), input()).unwrap();
        assert_eq!(a.dataset.frames().len(), 1);
        assert_eq!(a.dataset.instance_count(), 1);
        assert_eq!(a.images.id(&FrameKey::new("v", 3)), Some(7));
        let pose = a.dataset.frames()[0].instances[0].pose.unwrap();
        assert_eq!(pose.keypoints[0].vis, Visibility::Visible);
        assert_eq!(a.dataset.skeleton().edges(), &[(0, 3)]);
    }

    #[test]
    fn seven_keypoint_names_rejected() {
        let err = parse_annotations(Path::new("a.json"), minimal(7, ONE_KP).as_bytes(), input()).unwrap_err();
        assert!(err.to_string().contains("skeleton size mismatch"), "{err}");
        assert_eq!(err.exit_code(), crate::error::EXIT_SCHEMA);
    }

    #[test]
    fn short_pose_rejected() {
        let err = parse_annotations(Path::new("a.json"), minimal(8, "1,1,2").as_bytes(), input()).unwrap_err();
        assert!(err.to_string().contains("pose length"), "{err}");
    }

    #[test]
    fn parse_error_has_position() {
        let err = parse_annotations(Path::new("a.json"), b"{\n  \"images\": [,]}", input()).unwrap_err();
        match err {
            Error::Parse { line, column, .. } => assert_eq!((line, column), (2, 14)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_visibility_code() {
        let kps = ONE_KP.replacen("15,15,2", "15,15,3", 1);
        assert!(parse_annotations(Path::new("a.json"), minimal(8, &kps).as_bytes(), input()).is_err());
    }

    fn loaded() -> Annotations {
        parse_annotations(Path::new("a.json"), minimal(8, ONE_KP).as_bytes(), input()).unwrap()
    }

    #[test]
    fn empty_prediction_list() {
        let p = parse_predictions(Path::new("p.json"), b"[]", &loaded(), input()).unwrap();
        assert!(p.set.is_empty());
    }

    #[test]
    fn prediction_score_out_of_range() {
        let body = br#"[{"image_id":7,"bbox":[1,1,5,5],"score":1.5}]"#;
        let err = parse_predictions(Path::new("p.json"), body, &loaded(), input()).unwrap_err();
        assert!(err.to_string().contains("score"), "{err}");
    }

    #[test]
    fn prediction_unknown_frames_listed() {
        let body = br#"[{"image_id":9,"bbox":[1,1,5,5],"score":0.5},
                        {"video_id":"w","frame_index":1,"bbox":[1,1,5,5],"score":0.5}]"#;
        let err = parse_predictions(Path::new("p.json"), body, &loaded(), input()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("image_id 9") && msg.contains("w:1"), "{msg}");
    }

    #[test]
    fn wrapped_and_bare_prediction_files() {
        let bare = br#"[{"image_id":7,"bbox":[1,1,5,5],"score":0.5,"track_id":4}]"#;
        let wrapped = br#"{"info":{"x":1},"predictions":[{"image_id":7,"bbox":[1,1,5,5],"score":0.5,"track_id":4}]}"#;
        let a = parse_predictions(Path::new("p.json"), bare, &loaded(), input()).unwrap();
        let b = parse_predictions(Path::new("p.json"), wrapped, &loaded(), input()).unwrap();
        assert_eq!(a.set, b.set);
        assert_eq!(a.track_ids.get(&(FrameKey::new("v", 3), 1)), Some(&4));
    }

    #[test]
    fn annotation_round_trip_preserves_ids_and_names() {
        let a = loaded();
        let bytes = annotations_bytes(&a.dataset, Some(&a.images), Some(&a.file_names), None).unwrap();
        let b = parse_annotations(&PathBuf::from("b.json"), &bytes, input()).unwrap();
        assert_eq!(a.dataset.frames(), b.dataset.frames());
        assert_eq!(a.dataset.skeleton(), b.dataset.skeleton());
        assert_eq!(a.images, b.images);
        let again = annotations_bytes(&b.dataset, Some(&b.images), Some(&b.file_names), None).unwrap();
        assert_eq!(bytes, again);
    }
}
