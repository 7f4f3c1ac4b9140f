//! Run configuration: built-in defaults, overlaid by an optional JSON config
//! file, overlaid by command-line flags.
//!
//! Merging happens on JSON values so a config file may set any subset of
//! keys. Keys that do not exist in the defaults are rejected rather than
//! silently ignored.

use std::path::Path;

use herdpose_core::eval::EvalConfig;
use herdpose_core::framing::{
    StrideRounding, DEFAULT_MIN_VISIBLE_FRACTION, DEFAULT_PATCH_MARGIN, DEFAULT_PATCH_SIZE, DEFAULT_TILE_OVERLAP,
    DEFAULT_TILE_SIDE,
};
use herdpose_core::synth::SynthScenario;
use herdpose_core::tracking::TrackerConfig;
use herdpose_core::{Skeleton, KEYPOINT_COUNT};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::fsio::{self, InputFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSettings {
    pub side: u32,
    pub overlap: f64,
    pub rounding: StrideRounding,
    pub min_visible_fraction: f64,
    /// IoU above which back-projected tile detections are merged.
    pub merge_nms_iou: f64,
}

impl Default for TileSettings {
    fn default() -> Self {
        TileSettings {
            side: DEFAULT_TILE_SIDE,
            overlap: DEFAULT_TILE_OVERLAP,
            rounding: StrideRounding::Nearest,
            min_visible_fraction: DEFAULT_MIN_VISIBLE_FRACTION,
            merge_nms_iou: herdpose_core::eval::DEFAULT_NMS_IOU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSettings {
    pub margin: f64,
    pub out_size: f64,
}

impl Default for PatchSettings {
    fn default() -> Self {
        PatchSettings { margin: DEFAULT_PATCH_MARGIN, out_size: DEFAULT_PATCH_SIZE }
    }
}

/// Every tunable of every subcommand. The fully resolved value is echoed into
/// each output artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub tile: TileSettings,
    pub patch: PatchSettings,
    pub eval: EvalConfig,
    /// Per-keypoint OKS falloff; overrides the annotation file when set.
    pub falloff: Option<[f64; KEYPOINT_COUNT]>,
    pub tracker: TrackerConfig,
    pub synth: SynthScenario,
}

/// A flag value destined for a JSON pointer inside the config.
pub type Override = (&'static str, Value);

fn merge(base: &mut Value, patch: Value, at: &str) -> Result<()> {
    match (base, patch) {
        // a tagged enum switching variant is replaced wholesale
        (Value::Object(b), Value::Object(p)) if p.get("kind").is_some_and(|k| Some(k) != b.get("kind")) => {
            *b = p;
            Ok(())
        }
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = format!("{at}/{k}");
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(Error::Config(format!("unknown key {here}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, overrides: Vec<Override>) -> Result<(RunConfig, Option<InputFile>)> {
        let mut value = serde_json::to_value(RunConfig::default()).map_err(|e| Error::Internal(e.to_string()))?;
        let mut input = None;
        if let Some(path) = file {
            let (bytes, inp) = fsio::read_input(path, "config")?;
            let patch: Value = serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, &e))?;
            if !patch.is_object() {
                return Err(Error::schema(path, "config must be a JSON object"));
            }
            merge(&mut value, patch, "").map_err(|e| match e {
                Error::Config(m) => Error::schema(path, m),
                other => other,
            })?;
            input = Some(inp);
        }
        for (pointer, v) in overrides {
            let slot =
                value.pointer_mut(pointer).ok_or_else(|| Error::Internal(format!("no config slot {pointer}")))?;
            *slot = v;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok((cfg, input))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        self.eval.validate()?;
        if !(0.0..1.0).contains(&self.tile.overlap) {
            return bad(format!("tile overlap {} must lie in [0, 1)", self.tile.overlap));
        }
        if self.tile.side == 0 {
            return bad("tile side must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tile.min_visible_fraction) {
            return bad("min_visible_fraction must lie in [0, 1]".into());
        }
        if !(self.tile.merge_nms_iou > 0.0 && self.tile.merge_nms_iou <= 1.0) {
            return bad("merge_nms_iou must lie in (0, 1]".into());
        }
        if !(self.patch.margin > -1.0 && self.patch.out_size > 0.0) {
            return bad("patch margin must exceed -1 and out_size must be positive".into());
        }
        let t = &self.tracker;
        if !((0.0..=1.0).contains(&t.iou_gate) && t.lambda_app >= 0.0 && t.min_size >= 0.0 && t.confirm_hits >= 1) {
            return bad("tracker: iou_gate in [0, 1], lambda_app >= 0, min_size >= 0, confirm_hits >= 1".into());
        }
        self.skeleton_override(Skeleton::default())?;
        Ok(())
    }

    /// Applies the configured falloff, if any, to a skeleton.
    pub fn skeleton_override(&self, sk: Skeleton) -> Result<Skeleton> {
        match self.falloff {
            Some(f) => sk.with_falloff(f).map_err(|e| Error::Usage(e.to_string())),
            None => Ok(sk),
        }
    }
}

/// Provenance block embedded in every artifact.
pub fn provenance(command: &str, cfg: &RunConfig, inputs: &[InputFile]) -> Result<Value> {
    let mut m = Map::new();
    m.insert("tool".into(), Value::from("herdpose"));
    m.insert("version".into(), Value::from(env!("CARGO_PKG_VERSION")));
    m.insert("command".into(), Value::from(command));
    m.insert("config".into(), crate::canon::to_value(cfg)?);
    m.insert("inputs".into(), crate::canon::to_value(inputs)?);
    Ok(Value::Object(m))
}
