use herdpose::ingest::{self, ImageIndex};
use herdpose_core::dataset::{Dataset, PredictionSet};
use herdpose_core::{BBox, FrameRecord, Instance, Keypoint, Pose, Skeleton, Visibility, KEYPOINT_COUNT};
use proptest::prelude::*;

fn keypoint() -> impl Strategy<Value = Keypoint> {
    (-50.0..2000.0f64, -50.0..1200.0f64, 0u8..3).prop_map(|(x, y, v)| match Visibility::from_code(v).unwrap() {
        Visibility::NotLabeled => Keypoint::NOT_LABELED,
        vis => Keypoint::new(x, y, vis),
    })
}

fn instance() -> impl Strategy<Value = (BBox, Option<Pose>, f64)> {
    (
        0.0..1900.0f64,
        0.0..1000.0f64,
        0.5..200.0f64,
        0.5..200.0f64,
        proptest::option::of(proptest::array::uniform8(keypoint())),
        0.0..=1.0f64,
    )
        .prop_map(|(x, y, w, h, kps, s)| (BBox::new(x, y, w, h).unwrap(), kps.map(Pose::new), s))
}

fn scene() -> impl Strategy<Value = (Dataset, PredictionSet)> {
    proptest::collection::vec(
        (proptest::collection::vec(instance(), 0..5), proptest::collection::vec(instance(), 0..5)),
        1..6,
    )
    .prop_map(|frames| {
        let mut records = Vec::new();
        let mut entries = Vec::new();
        let mut next = 1;
        for (i, (gts, preds)) in frames.into_iter().enumerate() {
            let video = if i % 2 == 0 { "north" } else { "south" };
            let fr = FrameRecord {
                video_id: video.into(),
                frame_index: i as u32,
                width: 1920,
                height: 1080,
                instances: gts
                    .into_iter()
                    .map(|(b, p, _)| {
                        next += 1;
                        Instance::ground_truth(next, b, p)
                    })
                    .collect(),
            };
            for (j, (b, p, s)) in preds.into_iter().enumerate() {
                entries.push((fr.key(), Instance::prediction(j as u64 + 1, b, p, s).unwrap()));
            }
            records.push(fr);
        }
        let ds = Dataset::new(records, Skeleton::default(), None).unwrap();
        let set = PredictionSet::new(entries, &ds).unwrap();
        (ds, set)
    })
}

fn close_instance(a: &Instance, b: &Instance) -> bool {
    let near = |x: f64, y: f64| (x - y).abs() <= 5e-7;
    let boxes = a.bbox.as_array().iter().zip(b.bbox.as_array()).all(|(x, y)| near(*x, y));
    let poses =
        match (&a.pose, &b.pose) {
            (None, None) => true,
            (Some(p), Some(q)) => p.keypoints.iter().zip(&q.keypoints).all(|(k, l)| {
                k.vis == l.vis && (k.vis == Visibility::NotLabeled || (near(k.x, l.x) && near(k.y, l.y)))
            }),
            _ => false,
        };
    a.id == b.id && boxes && poses && a.score().zip(b.score()).is_none_or(|(s, t)| near(s, t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn save_load_save_is_stable((ds, preds) in scene()) {
        let dir = tempfile::tempdir().unwrap();
        let (ann_path, pred_path) = (dir.path().join("a.json"), dir.path().join("p.json"));
        let images = ImageIndex::sequential(&ds);
        let ann_bytes = ingest::annotations_bytes(&ds, Some(&images), None, None).unwrap();
        let pred_bytes = ingest::predictions_bytes(&preds, &images, None, None).unwrap();
        std::fs::write(&ann_path, &ann_bytes).unwrap();
        std::fs::write(&pred_path, &pred_bytes).unwrap();

        let ann = ingest::load_annotations(&ann_path).unwrap();
        let loaded = ingest::load_predictions(&pred_path, &ann).unwrap();
        prop_assert_eq!(
            ingest::annotations_bytes(&ann.dataset, Some(&ann.images), Some(&ann.file_names), None).unwrap(),
            ann_bytes
        );
        prop_assert_eq!(ingest::predictions_bytes(&loaded.set, &ann.images, None, None).unwrap(), pred_bytes);

        prop_assert_eq!(ann.dataset.frames().len(), ds.frames().len());
        for (a, b) in ann.dataset.frames().iter().zip(ds.frames()) {
            prop_assert_eq!(a.key(), b.key());
            prop_assert_eq!(a.instances.len(), b.instances.len());
            for (x, y) in a.instances.iter().zip(&b.instances) {
                prop_assert!(close_instance(x, y), "{:?} vs {:?}", x, y);
            }
        }
        prop_assert_eq!(loaded.set.len(), preds.len());
        for ((ka, a), (kb, b)) in loaded.set.entries().iter().zip(preds.entries()) {
            prop_assert_eq!(ka, kb);
            prop_assert!(close_instance(a, b), "{:?} vs {:?}", a, b);
        }
    }

    #[test]
    fn flat_pose_round_trip(kps in proptest::array::uniform8(keypoint())) {
        let pose = Pose::new(kps);
        let flat = ingest::flatten_pose(&pose);
        prop_assert_eq!(flat.len(), 3 * KEYPOINT_COUNT);
        let back = ingest::parse_flat_pose(std::path::Path::new("x"), "pose", &flat).unwrap();
        prop_assert_eq!(back, pose);
    }
}
