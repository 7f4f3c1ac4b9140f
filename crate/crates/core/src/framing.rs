//! Frame tiling and per-animal patch geometry.
//!
//! Both are pure coordinate transforms: a tile is a translation of the frame,
//! a patch is a translation plus uniform rescale around a detection. Nothing
//! here touches pixels.

use alloc::vec::Vec;

use thiserror::Error;

use crate::eval::nms;
use crate::geometry::{AffineMap, BBox, FrameRecord, Instance, Keypoint, Point, Pose};

pub const DEFAULT_TILE_SIDE: u32 = 800;
pub const DEFAULT_TILE_OVERLAP: f64 = 0.33;
pub const DEFAULT_MIN_VISIBLE_FRACTION: f64 = 0.5;
pub const DEFAULT_PATCH_MARGIN: f64 = 0.2;
pub const DEFAULT_PATCH_SIZE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FramingError {
    #[error("frame and tile dimensions must be positive (frame {width}x{height}, side {side})")]
    NonPositiveDimension { width: u32, height: u32, side: u32 },
    #[error("overlap {0} must lie in [0, 1)")]
    OverlapOutOfRange(f64),
    #[error("stride rounds to zero for side {side} and overlap {overlap}")]
    ZeroStride { side: u32, overlap: f64 },
    #[error("patch needs 1 + margin > 0 and out_size > 0 (margin {margin}, out_size {out_size})")]
    InvalidPatch { margin: f64, out_size: f64 },
}

/// Rounding applied to `side * (1 - overlap)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StrideRounding {
    #[default]
    Nearest,
    Down,
    Up,
}

impl StrideRounding {
    fn apply(self, v: f64) -> f64 {
        match self {
            StrideRounding::Nearest => libm::round(v),
            StrideRounding::Down => libm::floor(v),
            StrideRounding::Up => libm::ceil(v),
        }
    }
}

/// One tile window. `width`/`height` equal the configured side unless the
/// frame itself is smaller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TileSpec {
    pub row: u32,
    pub col: u32,
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

impl TileSpec {
    /// Frame to tile coordinates (scale 1).
    pub fn map(&self) -> AffineMap {
        AffineMap::translation(-f64::from(self.x0), -f64::from(self.y0))
    }

    pub fn rect(&self) -> BBox {
        BBox::new(f64::from(self.x0), f64::from(self.y0), f64::from(self.width), f64::from(self.height))
            .expect("tile extents are positive")
    }

    pub fn contains(&self, p: Point) -> bool {
        let (x0, y0) = (f64::from(self.x0), f64::from(self.y0));
        p.x >= x0 && p.x <= x0 + f64::from(self.width) && p.y >= y0 && p.y <= y0 + f64::from(self.height)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TileGrid {
    pub frame_width: u32,
    pub frame_height: u32,
    pub side: u32,
    pub overlap: f64,
    pub stride: u32,
    pub columns: u32,
    pub rows: u32,
    /// Row-major.
    pub tiles: Vec<TileSpec>,
}

/// Window origins along one axis: multiples of `stride`, with the final
/// window clamped to end exactly at the frame edge.
fn axis_origins(len: u32, side: u32, stride: u32) -> Vec<u32> {
    if side >= len {
        return alloc::vec![0];
    }
    let mut out = Vec::new();
    let mut pos = 0u32;
    loop {
        if pos + side >= len {
            out.push(len - side);
            break;
        }
        out.push(pos);
        pos += stride;
    }
    out
}

pub fn build_grid(frame_w: u32, frame_h: u32, side: u32, overlap: f64) -> Result<TileGrid, FramingError> {
    build_grid_with(frame_w, frame_h, side, overlap, StrideRounding::Nearest)
}

pub fn build_grid_with(
    frame_w: u32,
    frame_h: u32,
    side: u32,
    overlap: f64,
    rounding: StrideRounding,
) -> Result<TileGrid, FramingError> {
    if frame_w == 0 || frame_h == 0 || side == 0 {
        return Err(FramingError::NonPositiveDimension { width: frame_w, height: frame_h, side });
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(FramingError::OverlapOutOfRange(overlap));
    }
    let stride = rounding.apply(f64::from(side) * (1.0 - overlap));
    if stride < 1.0 {
        return Err(FramingError::ZeroStride { side, overlap });
    }
    let stride = stride as u32;
    let xs = axis_origins(frame_w, side, stride);
    let ys = axis_origins(frame_h, side, stride);
    let (tw, th) = (side.min(frame_w), side.min(frame_h));
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for (row, &y0) in ys.iter().enumerate() {
        for (col, &x0) in xs.iter().enumerate() {
            tiles.push(TileSpec { row: row as u32, col: col as u32, x0, y0, width: tw, height: th });
        }
    }
    Ok(TileGrid {
        frame_width: frame_w,
        frame_height: frame_h,
        side,
        overlap,
        stride,
        columns: xs.len() as u32,
        rows: ys.len() as u32,
        tiles,
    })
}

/// Re-expresses a frame's annotations in tile coordinates.
///
/// An instance is kept when at least `min_visible_fraction` of its box area
/// lies inside the tile; its box is clipped to the tile. Keypoints outside
/// the tile become `NotLabeled`.
pub fn project_to_tile(tile: &TileSpec, fr: &FrameRecord, min_visible_fraction: f64) -> FrameRecord {
    let rect = tile.rect();
    let map = tile.map();
    let instances = fr
        .instances
        .iter()
        .filter_map(|inst| {
            let clipped = inst.bbox.clip_to(&rect)?;
            if clipped.area() / inst.bbox.area() < min_visible_fraction {
                return None;
            }
            let pose = inst.pose.map(|p| {
                let mut out = p;
                for kp in out.keypoints.iter_mut().filter(|k| k.is_labeled()) {
                    *kp = if tile.contains(kp.point()) { map.apply_keypoint(kp) } else { Keypoint::NOT_LABELED };
                }
                out
            });
            Some(Instance { bbox: map.apply_bbox(&clipped), pose, ..inst.clone() })
        })
        .collect();
    FrameRecord {
        video_id: fr.video_id.clone(),
        frame_index: fr.frame_index,
        width: tile.width,
        height: tile.height,
        instances,
    }
}

/// Maps per-tile predictions back to frame space and removes duplicates
/// created by tile overlap.
pub fn merge_tiles(per_tile: &[(TileSpec, Vec<Instance>)], nms_iou: f64) -> Vec<Instance> {
    let frame_space: Vec<Instance> = per_tile
        .iter()
        .flat_map(|(tile, preds)| {
            let back = tile.map().invert();
            preds.iter().map(move |p| p.mapped(&back))
        })
        .collect();
    nms(&frame_space, nms_iou)
}

/// Square crop around a detection, rescaled to `out_size`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatchSpec {
    pub source: BBox,
    pub center: Point,
    pub side: f64,
    pub out_size: f64,
    /// Frame to patch coordinates.
    pub map: AffineMap,
}

impl PatchSpec {
    /// Top-left corner of the square in frame space; may be negative.
    pub fn origin(&self) -> Point {
        Point::new(self.center.x - self.side / 2.0, self.center.y - self.side / 2.0)
    }

    pub fn pose_to_patch(&self, pose: &Pose) -> Pose {
        self.map.apply_pose(pose)
    }

    pub fn pose_to_frame(&self, pose_in_patch: &Pose) -> Pose {
        self.map.invert().apply_pose(pose_in_patch)
    }
}

pub fn build_patch(b: &BBox, margin: f64, out_size: f64) -> Result<PatchSpec, FramingError> {
    if !(1.0 + margin > 0.0 && out_size > 0.0 && margin.is_finite() && out_size.is_finite()) {
        return Err(FramingError::InvalidPatch { margin, out_size });
    }
    let side = (1.0 + margin) * b.max_side();
    let center = b.center();
    let scale = out_size / side;
    let half = out_size / 2.0;
    let map = AffineMap::new(scale, half - center.x * scale, half - center.y * scale)
        .map_err(|_| FramingError::InvalidPatch { margin, out_size })?;
    Ok(PatchSpec { source: *b, center, side, out_size, map })
}

pub fn pose_to_frame(ps: &PatchSpec, pose_in_patch: &Pose) -> Pose {
    ps.pose_to_frame(pose_in_patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Visibility;
    use alloc::vec;
    use proptest::prelude::*;

    /// Independent enumeration: every multiple of the stride that still fits,
    /// plus one window flush with the far edge if coverage is incomplete.
    fn oracle_origins(len: u32, side: u32, stride: u32) -> Vec<u32> {
        let mut v: Vec<u32> = (0..len).step_by(stride as usize).filter(|&o| o + side <= len).collect();
        if v.is_empty() {
            v.push(0);
        }
        if v.last().unwrap() + side < len {
            v.push(len - side);
        }
        v
    }

    #[test]
    fn uhd_grid() {
        let g = build_grid(3840, 2160, 800, 0.33).unwrap();
        assert_eq!(g.stride, 536);
        assert_eq!((g.columns, g.rows), (7, 4));
        assert_eq!(g.tiles.len(), 28);
        let last = g.tiles.last().unwrap();
        assert_eq!((last.x0, last.y0), (3040, 1360));
        let xs: Vec<u32> = g.tiles.iter().filter(|t| t.row == 0).map(|t| t.x0).collect();
        assert_eq!(xs, oracle_origins(3840, 800, 536));
        // row-major
        assert!(g.tiles.windows(2).all(|w| (w[0].row, w[0].col) < (w[1].row, w[1].col)));
    }

    #[test]
    fn degenerate_grids() {
        let g = build_grid(800, 800, 800, 0.33).unwrap();
        assert_eq!(g.tiles.len(), 1);
        assert_eq!((g.tiles[0].x0, g.tiles[0].y0), (0, 0));
        let g = build_grid(1600, 800, 800, 0.0).unwrap();
        assert_eq!(g.tiles.len(), 2);
        assert_eq!(g.tiles[1].x0, 800);
        let small = build_grid(300, 200, 800, 0.33).unwrap();
        assert_eq!(small.tiles.len(), 1);
        assert_eq!((small.tiles[0].width, small.tiles[0].height), (300, 200));
        assert!(build_grid(0, 10, 800, 0.3).is_err());
        assert!(build_grid(10, 10, 800, 1.0).is_err());
        assert_eq!(build_grid_with(3840, 2160, 800, 0.3, StrideRounding::Nearest).unwrap().stride, 560);
        assert_eq!(build_grid_with(3840, 2160, 800, 0.4444, StrideRounding::Down).unwrap().stride, 444);
        assert_eq!(build_grid_with(3840, 2160, 800, 0.4444, StrideRounding::Up).unwrap().stride, 445);
    }

    fn frame_with(b: BBox, pose: Option<Pose>) -> FrameRecord {
        FrameRecord {
            video_id: "v".into(),
            frame_index: 3,
            width: 3840,
            height: 2160,
            instances: vec![Instance::ground_truth(1, b, pose)],
        }
    }

    fn tile_at(x0: u32, y0: u32) -> TileSpec {
        TileSpec { row: 0, col: 0, x0, y0, width: 800, height: 800 }
    }

    #[test]
    fn projection_translates_and_clips() {
        let t = tile_at(536, 0);
        let inside = BBox::new(600.0, 100.0, 40.0, 30.0).unwrap();
        let mut pose = Pose::unlabeled();
        pose.keypoints[0] = Keypoint::visible(610.0, 110.0);
        pose.keypoints[1] = Keypoint::new(620.0, 120.0, Visibility::Occluded);
        let out = project_to_tile(&t, &frame_with(inside, Some(pose)), 0.5);
        assert_eq!((out.width, out.height), (800, 800));
        let inst = &out.instances[0];
        assert_eq!(inst.bbox.as_array(), [64.0, 100.0, 40.0, 30.0]);
        let p = inst.pose.unwrap();
        assert_eq!(p.keypoints[0], Keypoint::visible(74.0, 110.0));
        assert_eq!(p.keypoints[1].vis, Visibility::Occluded);

        let outside = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        assert!(project_to_tile(&t, &frame_with(outside, None), 0.5).instances.is_empty());
    }

    #[test]
    fn projection_threshold() {
        // 60% of the box lies inside a tile whose right edge is x=800
        let t = tile_at(0, 0);
        let b = BBox::new(776.0, 100.0, 40.0, 20.0).unwrap();
        let mut pose = Pose::unlabeled();
        pose.keypoints[4] = Keypoint::visible(780.0, 105.0);
        pose.keypoints[5] = Keypoint::visible(810.0, 105.0);
        let kept = project_to_tile(&t, &frame_with(b, Some(pose)), 0.5);
        assert_eq!(kept.instances.len(), 1);
        assert_eq!(kept.instances[0].bbox.as_array(), [776.0, 100.0, 24.0, 20.0]);
        let kp = kept.instances[0].pose.unwrap().keypoints;
        assert_eq!(kp[4], Keypoint::visible(780.0, 105.0));
        assert_eq!(kp[5], Keypoint::NOT_LABELED);
        assert!(project_to_tile(&t, &frame_with(b, None), 0.7).instances.is_empty());
    }

    fn p(id: u64, b: BBox, s: f64) -> Instance {
        Instance::prediction(id, b, None, s).unwrap()
    }

    #[test]
    fn merge_examples() {
        let g = build_grid(1600, 800, 800, 0.5).unwrap();
        let (t0, t1) = (g.tiles[0], g.tiles[1]);
        assert_eq!(t1.x0, 400);
        // same animal at frame (500, 100, 40, 40) seen from both tiles
        let a = p(1, BBox::new(500.0, 100.0, 40.0, 40.0).unwrap(), 0.6);
        let b = p(2, BBox::new(101.0, 100.0, 40.0, 40.0).unwrap(), 0.9);
        let merged = merge_tiles(&[(t0, vec![a]), (t1, vec![b])], 0.5);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].id, 2);
        assert_eq!(merged[0].bbox.as_array(), [501.0, 100.0, 40.0, 40.0]);

        let single = p(3, BBox::new(10.0, 10.0, 5.0, 5.0).unwrap(), 0.5);
        let merged = merge_tiles(&[(t1, vec![single.clone()])], 0.5);
        assert_eq!(merged, vec![single.translated(400.0, 0.0)]);

        let far = p(4, BBox::new(700.0, 700.0, 5.0, 5.0).unwrap(), 0.5);
        assert_eq!(merge_tiles(&[(t0, vec![single]), (t1, vec![far])], 0.5).len(), 2);
    }

    #[test]
    fn patch_examples() {
        let ps = build_patch(&BBox::new(10.0, 20.0, 40.0, 60.0).unwrap(), 0.2, 100.0).unwrap();
        assert!((ps.side - 72.0).abs() < 1e-12);
        assert_eq!(ps.center, Point::new(30.0, 50.0));
        let o = ps.origin();
        assert!((o.x + 6.0).abs() < 1e-12 && (o.y - 14.0).abs() < 1e-12);
        assert!((ps.map.scale() - 100.0 / 72.0).abs() < 1e-15);
        let c = ps.map.apply(Point::new(30.0, 50.0));
        assert!((c.x - 50.0).abs() < 1e-12 && (c.y - 50.0).abs() < 1e-12);
        let back = ps.map.invert().apply(Point::new(50.0, 50.0));
        assert!((back.x - 30.0).abs() < 1e-12 && (back.y - 50.0).abs() < 1e-12);

        let sq = build_patch(&BBox::new(0.0, 0.0, 100.0, 100.0).unwrap(), 0.2, 100.0).unwrap();
        assert!((sq.side - 120.0).abs() < 1e-12);
        assert!((sq.map.scale() - 100.0 / 120.0).abs() < 1e-15);
        let id = build_patch(&BBox::new(0.0, 0.0, 100.0, 100.0).unwrap(), 0.0, 100.0).unwrap();
        assert_eq!(id.map, AffineMap::IDENTITY);

        assert!(build_patch(&sq.source, -1.0, 100.0).is_err());
        assert!(build_patch(&sq.source, 0.2, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn grid_matches_oracle_and_covers(w in 1u32..5000, h in 1u32..3000, side in 50u32..1200, ov in 0.0..0.9f64) {
            let g = build_grid(w, h, side, ov).unwrap();
            let xs: Vec<u32> = g.tiles.iter().filter(|t| t.row == 0).map(|t| t.x0).collect();
            let ys: Vec<u32> = g.tiles.iter().filter(|t| t.col == 0).map(|t| t.y0).collect();
            prop_assert_eq!(&xs, &oracle_origins(w, side.min(w), g.stride));
            prop_assert_eq!(&ys, &oracle_origins(h, side.min(h), g.stride));
            for t in &g.tiles {
                prop_assert!(t.x0 + t.width <= w && t.y0 + t.height <= h);
            }
            // consecutive windows leave no gap
            for v in [&xs, &ys] {
                prop_assert_eq!(v[0], 0);
                for pair in v.windows(2) {
                    prop_assert!(pair[1] <= pair[0] + side);
                }
            }
            prop_assert_eq!(*xs.last().unwrap() + side.min(w), w);
            prop_assert_eq!(*ys.last().unwrap() + side.min(h), h);
        }

        #[test]
        fn patch_round_trip(x in -100.0..4000.0f64, y in -100.0..2000.0f64, w in 1.0..200.0f64, h in 1.0..200.0f64,
                            pts in proptest::collection::vec((-500.0..4500.0f64, -500.0..2500.0f64), 8)) {
            let ps = build_patch(&BBox::new(x, y, w, h).unwrap(), DEFAULT_PATCH_MARGIN, DEFAULT_PATCH_SIZE).unwrap();
            let mut kps = [Keypoint::NOT_LABELED; 8];
            for (k, (px, py)) in kps.iter_mut().zip(pts) {
                *k = Keypoint::visible(px, py);
            }
            let pose = Pose::new(kps);
            let back = ps.pose_to_frame(&ps.pose_to_patch(&pose));
            for (a, b) in pose.keypoints.iter().zip(&back.keypoints) {
                prop_assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6);
                prop_assert_eq!(a.vis, b.vis);
            }
        }
    }
}
