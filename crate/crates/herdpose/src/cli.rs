//! The `herdpose` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use herdpose_core::dataset::{make_split, Dataset, PredictionSet};
use herdpose_core::eval::{evaluate_frame, summarize, FrameEvaluation};
use herdpose_core::framing::{build_grid_with, build_patch, merge_tiles, project_to_tile, TileSpec};
use herdpose_core::synth::{self, Correspondence, GroundTruthIdentity};
use herdpose_core::tracking::{export_manifest_with, Tracker};
use herdpose_core::{BBox, FrameKey, FrameRecord, Instance, Skeleton, KEYPOINT_COUNT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::canon;
use crate::config::{provenance, Override, RunConfig};
use crate::error::{Error, Result, EXIT_CODES_HELP};
use crate::fsio::{self, InputFile};
use crate::ingest::{self, Annotations};
use crate::overlay;
use crate::pool;
use crate::report::{self, ReportDocument};

#[derive(Debug, Parser)]
#[command(
    name = "herdpose",
    version,
    about = "Tiling, patching, evaluation, tracking and synthetic data for aerial multi-animal pose pipelines",
    after_help = EXIT_CODES_HELP
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Slice annotated frames into overlapping tiles, or merge tile detections back
    Tile(TileArgs),
    /// Compute square patches around detections, or map patch poses back to frames
    Patch(PatchArgs),
    /// Score predictions against annotations (mAP, RMSE, PCK, OKS)
    Eval(EvalArgs),
    /// Re-render a JSON metric report as tables and CSV
    Report(ReportArgs),
    /// Track detections per video and export per-individual segments
    Track(TrackArgs),
    /// Generate a synthetic scenario with known ground truth
    Synth(SynthArgs),
    /// Draw annotations and predictions as one SVG per frame
    Overlay(OverlayArgs),
    /// Assign frames to train/val and whole videos to test
    Split(SplitArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON config file; flags override it, it overrides built-in defaults
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Rounding {
    Nearest,
    Down,
    Up,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    #[command(flatten)]
    pub common: ConfigArg,
    /// Frame-level annotation file
    #[arg(long)]
    pub ann: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub side: Option<u32>,
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub rounding: Option<Rounding>,
    /// Minimum fraction of a box inside a tile for it to be kept there
    #[arg(long)]
    pub min_visible: Option<f64>,
    /// Tile-space predictions to merge back into frame space
    #[arg(long, requires_all = ["tiled", "index"])]
    pub merge: Option<PathBuf>,
    /// Tiled annotation file the merged predictions refer to
    #[arg(long)]
    pub tiled: Option<PathBuf>,
    /// Tile index sidecar written by `tile`
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub merge_nms_iou: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PatchArgs {
    #[command(flatten)]
    pub common: ConfigArg,
    #[arg(long)]
    pub ann: PathBuf,
    /// Patch around these predictions instead of the annotations
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub out_size: Option<f64>,
    /// Patch-space poses to map back to frame space
    #[arg(long, requires = "index")]
    pub restore: Option<PathBuf>,
    /// Patch index written by `patch`
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: ConfigArg,
    #[arg(long)]
    pub ann: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub match_iou: Option<f64>,
    /// IoU of the single-threshold mAP row
    #[arg(long)]
    pub ap_iou: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<f64>>,
    #[arg(long)]
    pub pck_alpha: Option<f64>,
    /// Eight comma-separated OKS falloff constants
    #[arg(long, value_delimiter = ',')]
    pub falloff: Option<Vec<f64>>,
    /// Score occluded ground-truth keypoints too
    #[arg(long)]
    pub include_occluded: bool,
    /// Unweighted mean over keypoints in the Average row
    #[arg(long)]
    pub unweighted: bool,
    /// Do not print the tables
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json written by `eval`
    #[arg(long)]
    pub json: PathBuf,
    /// Write report.txt and report.csv here instead of printing
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub common: ConfigArg,
    #[arg(long)]
    pub ann: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub iou_gate: Option<f64>,
    #[arg(long)]
    pub max_age: Option<u32>,
    #[arg(long)]
    pub confirm_hits: Option<u32>,
    /// Minimum max(w, h) in px for spawning and exporting tracks
    #[arg(long)]
    pub min_size: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub out_size: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: ConfigArg,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub video_id: Option<String>,
    /// Number of videos; video i uses seed + i
    #[arg(long)]
    pub videos: Option<u32>,
    #[arg(long)]
    pub n_animals: Option<u32>,
    #[arg(long)]
    pub n_frames: Option<u32>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    #[arg(long)]
    pub keypoint_jitter: Option<f64>,
    #[arg(long)]
    pub bbox_jitter: Option<f64>,
    #[arg(long)]
    pub false_positives: Option<f64>,
    #[arg(long)]
    pub miss_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[command(flatten)]
    pub common: ConfigArg,
    #[arg(long)]
    pub ann: PathBuf,
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Only these frames, as video:frame_index (repeatable)
    #[arg(long)]
    pub frame: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub ann: PathBuf,
    /// Split request: {test_videos, val_fraction, seed}
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (including the program name), runs one subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = pool::worker_count().and_then(|n| pool::run_in_pool(n, || dispatch(cli))).and_then(|r| r);
    match outcome {
        Ok(()) => crate::error::EXIT_OK,
        Err(e) => {
            eprintln!("herdpose: error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Tile(a) => tile(a),
        Command::Patch(a) => patch(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report_cmd(a),
        Command::Track(a) => track(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Overlay(a) => overlay_cmd(a),
        Command::Split(a) => split(a),
    }
}

fn set<T: Serialize>(o: &mut Vec<Override>, pointer: &'static str, v: Option<T>) {
    if let Some(v) = v {
        o.push((pointer, json!(v)));
    }
}

fn info_with(command: &str, cfg: &RunConfig, cfg_input: Option<InputFile>, inputs: &[&InputFile]) -> Result<Value> {
    let mut all: Vec<InputFile> = cfg_input.into_iter().collect();
    all.extend(inputs.iter().map(|i| (*i).clone()));
    provenance(command, cfg, &all)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fsio::write_atomic(path, &canon::to_bytes(v, true)?)
}

fn parse_json_file<T: serde::de::DeserializeOwned>(path: &Path, role: &str) -> Result<(T, InputFile)> {
    let (bytes, input) = fsio::read_input(path, role)?;
    let v = serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, &e))?;
    Ok((v, input))
}

/// Tiled frames get their own video id so frame keys stay unique.
pub fn tile_video_id(video_id: &str, tile: &TileSpec) -> String {
    format!("{video_id}@r{}c{}", tile.row, tile.col)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub row: u32,
    pub col: u32,
    pub x0: u32,
    pub y0: u32,
    pub side: u32,
    pub width: u32,
    pub height: u32,
}

impl TileEntry {
    fn spec(&self) -> TileSpec {
        TileSpec { row: self.row, col: self.col, x0: self.x0, y0: self.y0, width: self.width, height: self.height }
    }
}

/// Tile index sidecar: frame key (`video:frame`) to its tiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileIndex {
    pub info: Value,
    pub frames: BTreeMap<String, Vec<TileEntry>>,
}

fn tile(a: TileArgs) -> Result<()> {
    let mut o = Vec::new();
    set(&mut o, "/tile/side", a.side);
    set(&mut o, "/tile/overlap", a.overlap);
    set(&mut o, "/tile/min_visible_fraction", a.min_visible);
    set(&mut o, "/tile/merge_nms_iou", a.merge_nms_iou);
    set(
        &mut o,
        "/tile/rounding",
        a.rounding.map(|r| match r {
            Rounding::Nearest => "nearest",
            Rounding::Down => "down",
            Rounding::Up => "up",
        }),
    );
    let (cfg, cfg_in) = RunConfig::resolve(a.common.config.as_deref(), o)?;
    let ann = ingest::load_annotations(&a.ann)?;
    if let (Some(merge), Some(tiled), Some(index)) = (&a.merge, &a.tiled, &a.index) {
        return tile_merge(&cfg, cfg_in, &ann, merge, tiled, index, &a.out_dir);
    }
    let t = &cfg.tile;
    let per_frame = ann
        .dataset
        .frames()
        .par_iter()
        .map(|fr| {
            let grid = build_grid_with(fr.width, fr.height, t.side, t.overlap, t.rounding)?;
            let tiled: Vec<FrameRecord> = grid
                .tiles
                .iter()
                .map(|tile| FrameRecord {
                    video_id: tile_video_id(&fr.video_id, tile),
                    ..project_to_tile(tile, fr, t.min_visible_fraction)
                })
                .collect();
            let entries: Vec<TileEntry> = grid
                .tiles
                .iter()
                .map(|tile| TileEntry {
                    row: tile.row,
                    col: tile.col,
                    x0: tile.x0,
                    y0: tile.y0,
                    side: grid.side,
                    width: tile.width,
                    height: tile.height,
                })
                .collect();
            Ok((fr.key().to_string(), entries, tiled))
        })
        .collect::<Result<Vec<_>>>()?;

    let info = info_with("tile", &cfg, cfg_in, &[&ann.input])?;
    let mut frames = Vec::new();
    let mut index = BTreeMap::new();
    for (key, entries, tiled) in per_frame {
        index.insert(key, entries);
        frames.extend(tiled);
    }
    let tiled = Dataset::new(frames, ann.dataset.skeleton().clone(), None)
        .map_err(|e| Error::Internal(format!("tiling produced an invalid dataset: {e}")))?;
    fsio::create_dir(&a.out_dir)?;
    ingest::save_annotations(&a.out_dir.join("tiles.json"), &tiled, None, None, Some(info.clone()))?;
    write_json(&a.out_dir.join("tile_index.json"), &TileIndex { info, frames: index })
}

fn tile_merge(
    cfg: &RunConfig,
    cfg_in: Option<InputFile>,
    ann: &Annotations,
    merge: &Path,
    tiled_path: &Path,
    index_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    let tiled = ingest::load_annotations(tiled_path)?;
    let preds = ingest::load_predictions(merge, &tiled)?;
    let (index, index_in): (TileIndex, _) = parse_json_file(index_path, "tile_index")?;
    let by_frame = preds.by_frame();
    let merged = ann
        .dataset
        .frames()
        .par_iter()
        .map(|fr| {
            let key = fr.key();
            let entries = index
                .frames
                .get(&key.to_string())
                .ok_or_else(|| Error::schema(index_path, format!("no tiles listed for frame {key}")))?;
            let per_tile: Vec<(TileSpec, Vec<Instance>)> = entries
                .iter()
                .map(|e| {
                    let spec = e.spec();
                    let tk = FrameKey::new(tile_video_id(&fr.video_id, &spec), fr.frame_index);
                    (spec, by_frame.get(&tk).cloned().unwrap_or_default())
                })
                .collect();
            // ids from different tiles may collide; renumber per frame
            let kept = merge_tiles(&per_tile, cfg.tile.merge_nms_iou);
            Ok(kept
                .into_iter()
                .enumerate()
                .map(|(i, inst)| (key.clone(), Instance { id: i as u64 + 1, ..inst }))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let set = PredictionSet::new(merged.into_iter().flatten().collect(), &ann.dataset)
        .map_err(|e| Error::Internal(e.to_string()))?;
    let info = info_with("tile --merge", cfg, cfg_in, &[&ann.input, &tiled.input, &preds.input, &index_in])?;
    fsio::create_dir(out_dir)?;
    ingest::save_predictions(&out_dir.join("merged_predictions.json"), &set, &ann.images, None, Some(info))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub patch_id: u64,
    pub video_id: String,
    pub frame_index: u32,
    pub source_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub bbox: [f64; 4],
    pub center: [f64; 2],
    pub side: f64,
    pub origin: [f64; 2],
    /// Frame px to patch px.
    pub scale: f64,
    /// Source pose in patch coordinates, flat `[x, y, v] x 8`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchIndex {
    pub info: Value,
    pub margin: f64,
    pub out_size: f64,
    pub patches: Vec<PatchEntry>,
}

#[derive(Debug, Deserialize)]
struct PatchPose {
    patch_id: u64,
    #[serde(default)]
    keypoints: Option<Vec<f64>>,
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PatchPoseFile {
    List(Vec<PatchPose>),
    Index { patches: Vec<PatchPose> },
}

fn patch(a: PatchArgs) -> Result<()> {
    let mut o = Vec::new();
    set(&mut o, "/patch/margin", a.margin);
    set(&mut o, "/patch/out_size", a.out_size);
    let (cfg, cfg_in) = RunConfig::resolve(a.common.config.as_deref(), o)?;
    let ann = ingest::load_annotations(&a.ann)?;
    if let (Some(restore), Some(index)) = (&a.restore, &a.index) {
        return patch_restore(&cfg, cfg_in, &ann, restore, index, &a.out_dir);
    }
    let preds = a.pred.as_deref().map(|p| ingest::load_predictions(p, &ann)).transpose()?;
    let sources: Vec<(FrameKey, &Instance)> = match &preds {
        Some(p) => p.set.entries().iter().map(|(k, i)| (k.clone(), i)).collect(),
        None => ann.dataset.frames().iter().flat_map(|fr| fr.instances.iter().map(move |i| (fr.key(), i))).collect(),
    };
    let p = &cfg.patch;
    let patches = sources
        .par_iter()
        .enumerate()
        .map(|(i, (key, inst))| {
            let spec = build_patch(&inst.bbox, p.margin, p.out_size)?;
            let origin = spec.origin();
            Ok(PatchEntry {
                patch_id: i as u64 + 1,
                video_id: key.video_id.clone(),
                frame_index: key.frame_index,
                source_id: inst.id,
                score: inst.score(),
                bbox: inst.bbox.as_array(),
                center: [spec.center.x, spec.center.y],
                side: spec.side,
                origin: [origin.x, origin.y],
                scale: spec.map.scale(),
                keypoints: inst.pose.as_ref().map(|pose| ingest::flatten_pose(&spec.pose_to_patch(pose))),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut inputs = vec![&ann.input];
    if let Some(p) = &preds {
        inputs.push(&p.input);
    }
    let info = info_with("patch", &cfg, cfg_in, &inputs)?;
    fsio::create_dir(&a.out_dir)?;
    write_json(&a.out_dir.join("patches.json"), &PatchIndex { info, margin: p.margin, out_size: p.out_size, patches })
}

fn patch_restore(
    cfg: &RunConfig,
    cfg_in: Option<InputFile>,
    ann: &Annotations,
    restore: &Path,
    index_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    let (index, index_in): (PatchIndex, _) = parse_json_file(index_path, "patch_index")?;
    let (poses, poses_in): (PatchPoseFile, _) = parse_json_file(restore, "patch_poses")?;
    let poses = match poses {
        PatchPoseFile::List(v) | PatchPoseFile::Index { patches: v } => v,
    };
    let by_id: BTreeMap<u64, &PatchEntry> = index.patches.iter().map(|p| (p.patch_id, p)).collect();
    let mut entries = Vec::with_capacity(poses.len());
    for pp in &poses {
        let what = format!("patch {}", pp.patch_id);
        let entry = by_id
            .get(&pp.patch_id)
            .ok_or_else(|| Error::schema(restore, format!("{what} is not in the patch index")))?;
        let b = entry.bbox;
        let bbox = BBox::new(b[0], b[1], b[2], b[3]).map_err(|e| Error::schema(index_path, format!("{what}: {e}")))?;
        // rebuilt from the exact source box rather than the rounded map
        let spec = build_patch(&bbox, index.margin, index.out_size)?;
        let pose = pp
            .keypoints
            .as_deref()
            .map(|k| ingest::parse_flat_pose(restore, &what, k))
            .transpose()?
            .map(|pose| spec.pose_to_frame(&pose));
        let score = pp.score.or(entry.score).unwrap_or(1.0);
        let inst = Instance::prediction(pp.patch_id, bbox, pose, score)
            .map_err(|e| Error::schema(restore, format!("{what}: {e}")))?;
        entries.push((FrameKey::new(entry.video_id.clone(), entry.frame_index), inst));
    }
    let set = PredictionSet::new(entries, &ann.dataset).map_err(|e| Error::dataset(index_path, e))?;
    let info = info_with("patch --restore", cfg, cfg_in, &[&ann.input, &index_in, &poses_in])?;
    fsio::create_dir(out_dir)?;
    ingest::save_predictions(&out_dir.join("restored_predictions.json"), &set, &ann.images, None, Some(info))
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut o = Vec::new();
    set(&mut o, "/eval/nms_iou", a.nms_iou);
    set(&mut o, "/eval/match_iou", a.match_iou);
    set(&mut o, "/eval/ap_iou", a.ap_iou);
    set(&mut o, "/eval/sweep", a.sweep);
    set(&mut o, "/eval/keypoints/pck_alpha", a.pck_alpha);
    if let Some(f) = &a.falloff {
        if f.len() != KEYPOINT_COUNT {
            return Err(Error::Usage(format!("--falloff needs {KEYPOINT_COUNT} values, got {}", f.len())));
        }
    }
    set(&mut o, "/falloff", a.falloff);
    if a.include_occluded {
        o.push(("/eval/keypoints/visibility", json!("include_occluded")));
    }
    if a.unweighted {
        o.push(("/eval/keypoints/weighting", json!("unweighted")));
    }
    let (cfg, cfg_in) = RunConfig::resolve(a.common.config.as_deref(), o)?;
    let ann = ingest::load_annotations(&a.ann)?;
    let preds = ingest::load_predictions(&a.pred, &ann)?;
    let skeleton = cfg.skeleton_override(ann.dataset.skeleton().clone())?;
    let frames = ann.dataset.pair_with(&preds.set);
    let evals: Vec<FrameEvaluation> = frames.par_iter().map(|f| evaluate_frame(f, &cfg.eval, &skeleton)).collect();
    let metrics = summarize(&evals, &cfg.eval)?;

    let info = info_with("eval", &cfg, cfg_in, &[&ann.input, &preds.input])?;
    let text = report::render_text(&metrics);
    fsio::create_dir(&a.out_dir)?;
    let mut txt = report::comment_header(&info)?;
    txt.push_str(&text);
    fsio::write_atomic(&a.out_dir.join("report.txt"), txt.as_bytes())?;
    fsio::write_atomic(&a.out_dir.join("report.csv"), &report::render_csv(&metrics, &info)?)?;
    write_json(&a.out_dir.join("report.json"), &ReportDocument { info, report: metrics })?;
    if !a.quiet {
        print!("{text}");
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let (doc, input): (ReportDocument, _) = parse_json_file(&a.json, "report")?;
    let text = report::render_text(&doc.report);
    let Some(dir) = a.out_dir else {
        print!("{text}");
        return Ok(());
    };
    let info = json!({"tool": "herdpose", "command": "report", "source": doc.info, "inputs": [input]});
    fsio::create_dir(&dir)?;
    let mut txt = report::comment_header(&info)?;
    txt.push_str(&text);
    fsio::write_atomic(&dir.join("report.txt"), txt.as_bytes())?;
    fsio::write_atomic(&dir.join("report.csv"), &report::render_csv(&doc.report, &info)?)
}

/// Header line of the JSON-lines manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub info: Value,
    pub min_size: f64,
    pub size_gate: String,
    pub videos: Vec<String>,
    pub segments: usize,
}

fn track(a: TrackArgs) -> Result<()> {
    let mut o = Vec::new();
    set(&mut o, "/tracker/iou_gate", a.iou_gate);
    set(&mut o, "/tracker/max_age", a.max_age);
    set(&mut o, "/tracker/confirm_hits", a.confirm_hits);
    set(&mut o, "/tracker/min_size", a.min_size);
    set(&mut o, "/patch/margin", a.margin);
    set(&mut o, "/patch/out_size", a.out_size);
    let (cfg, cfg_in) = RunConfig::resolve(a.common.config.as_deref(), o)?;
    let ann = ingest::load_annotations(&a.ann)?;
    let preds = ingest::load_predictions(&a.pred, &ann)?;
    let by_frame = preds.by_frame();

    let mut videos: BTreeMap<&str, Vec<&FrameRecord>> = BTreeMap::new();
    for fr in ann.dataset.frames() {
        videos.entry(fr.video_id.as_str()).or_default().push(fr);
    }
    let per_video: Vec<(&str, Vec<&FrameRecord>)> = videos.into_iter().collect();
    let results = per_video
        .par_iter()
        .map(|(video, frames)| {
            let mut frames = frames.clone();
            frames.sort_by_key(|f| f.frame_index);
            let mut tracker = Tracker::new(cfg.tracker);
            let mut ids = Vec::new();
            for fr in frames {
                let key = fr.key();
                let dets = by_frame.get(&key).map(Vec::as_slice).unwrap_or(&[]);
                for (det, track) in tracker.step(fr.frame_index, dets)? {
                    ids.push(((key.clone(), det), track));
                }
            }
            let manifest = export_manifest_with(&tracker, video, cfg.patch.margin, cfg.patch.out_size);
            Ok((manifest, ids))
        })
        .collect::<Result<Vec<_>>>()?;

    let info = info_with("track", &cfg, cfg_in, &[&ann.input, &preds.input])?;
    let mut track_ids = BTreeMap::new();
    let mut lines = Vec::new();
    let mut segments = 0;
    for (manifest, ids) in &results {
        track_ids.extend(ids.iter().cloned());
        for seg in &manifest.segments {
            lines.push(canon::to_bytes(seg, false)?);
            segments += 1;
        }
    }
    let header = ManifestHeader {
        info: info.clone(),
        min_size: cfg.tracker.min_size,
        size_gate: results.first().map_or_else(|| "spawn+export".into(), |(m, _)| m.size_gate.clone()),
        videos: per_video.iter().map(|(v, _)| v.to_string()).collect(),
        segments,
    };
    let mut out = canon::to_bytes(&header, false)?;
    for l in lines {
        out.extend(l);
    }
    fsio::create_dir(&a.out_dir)?;
    fsio::write_atomic(&a.out_dir.join("manifest.jsonl"), &out)?;
    ingest::save_predictions(
        &a.out_dir.join("tracked_predictions.json"),
        &preds.set,
        &ann.images,
        Some(&track_ids),
        Some(info),
    )
}

#[derive(Debug, Serialize)]
struct CorrespondenceFile<'a> {
    info: &'a Value,
    correspondence: &'a [Correspondence],
    identities: &'a [GroundTruthIdentity],
}

#[derive(Debug, Serialize)]
struct ScenarioEcho<'a> {
    info: &'a Value,
    videos: u32,
    scenarios: &'a [synth::SynthScenario],
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let mut o = Vec::new();
    set(&mut o, "/synth/seed", a.seed);
    set(&mut o, "/synth/video_id", a.video_id);
    set(&mut o, "/synth/n_animals", a.n_animals);
    set(&mut o, "/synth/n_frames", a.n_frames);
    set(&mut o, "/synth/frame_width", a.width);
    set(&mut o, "/synth/frame_height", a.height);
    set(&mut o, "/synth/corruption/keypoint_jitter", a.keypoint_jitter);
    set(&mut o, "/synth/corruption/bbox_jitter", a.bbox_jitter);
    set(&mut o, "/synth/corruption/false_positives_per_frame", a.false_positives);
    set(&mut o, "/synth/corruption/miss_rate", a.miss_rate);
    let videos = a.videos.unwrap_or(1);
    if videos == 0 {
        return Err(Error::Usage("--videos must be at least 1".into()));
    }
    let (cfg, cfg_in) = RunConfig::resolve(a.common.config.as_deref(), o)?;
    let scenarios: Vec<synth::SynthScenario> = (0..videos)
        .map(|i| {
            let mut s = cfg.synth.clone();
            if videos > 1 {
                s.seed = s.seed.wrapping_add(u64::from(i));
                s.video_id = format!("{}_{i:02}", s.video_id);
            }
            s
        })
        .collect();
    let outputs = scenarios.par_iter().map(synth::generate).collect::<std::result::Result<Vec<_>, _>>()?;

    let mut frames = Vec::new();
    let mut entries = Vec::new();
    let mut correspondence = Vec::new();
    let mut identities = Vec::new();
    for out in outputs {
        frames.extend_from_slice(out.dataset.frames());
        entries.extend_from_slice(out.predictions.entries());
        correspondence.extend(out.correspondence);
        identities.extend(out.identities);
    }
    let internal = |e: herdpose_core::dataset::DatasetError| Error::Internal(e.to_string());
    let dataset = Dataset::new(frames, Skeleton::default(), None).map_err(internal)?;
    let preds = PredictionSet::new(entries, &dataset).map_err(internal)?;
    let images = ingest::ImageIndex::sequential(&dataset);
    let info = info_with("synth", &cfg, cfg_in, &[])?;

    let dir = &a.out_dir;
    fsio::create_dir(dir)?;
    ingest::save_annotations(&dir.join("annotations.json"), &dataset, Some(&images), None, Some(info.clone()))?;
    ingest::save_predictions(&dir.join("predictions.json"), &preds, &images, None, Some(info.clone()))?;
    fsio::write_atomic(
        &dir.join("correspondence.json"),
        &canon::to_bytes(
            &CorrespondenceFile { info: &info, correspondence: &correspondence, identities: &identities },
            false,
        )?,
    )?;
    write_json(&dir.join("scenario.json"), &ScenarioEcho { info: &info, videos, scenarios: &scenarios })
}

fn parse_frame_key(s: &str) -> Result<FrameKey> {
    let (v, f) =
        s.rsplit_once(':').ok_or_else(|| Error::Usage(format!("frame {s:?} must look like video:frame_index")))?;
    let idx = f.parse().map_err(|_| Error::Usage(format!("frame {s:?} has a non-numeric frame index")))?;
    Ok(FrameKey::new(v, idx))
}

fn overlay_cmd(a: OverlayArgs) -> Result<()> {
    let (cfg, cfg_in) = RunConfig::resolve(a.common.config.as_deref(), Vec::new())?;
    let ann = ingest::load_annotations(&a.ann)?;
    let preds = a.pred.as_deref().map(|p| ingest::load_predictions(p, &ann)).transpose()?;
    let wanted = a.frame.iter().map(|s| parse_frame_key(s)).collect::<Result<Vec<_>>>()?;
    for k in &wanted {
        if !ann.dataset.contains(k) {
            return Err(Error::Usage(format!("frame {k} is not in {}", a.ann.display())));
        }
    }
    let mut inputs = vec![&ann.input];
    if let Some(p) = &preds {
        inputs.push(&p.input);
    }
    let info = info_with("overlay", &cfg, cfg_in, &inputs)?;
    let metadata = serde_json::to_string(&info).map_err(|e| Error::Internal(e.to_string()))?;
    let by_frame = preds.as_ref().map(|p| p.by_frame()).unwrap_or_default();
    let skeleton = ann.dataset.skeleton();
    fsio::create_dir(&a.out_dir)?;
    let frames: Vec<&FrameRecord> =
        ann.dataset.frames().iter().filter(|fr| wanted.is_empty() || wanted.contains(&fr.key())).collect();
    frames.par_iter().try_for_each(|fr| {
        let key = fr.key();
        let mut rec = (*fr).clone();
        let mut track_ids = BTreeMap::new();
        if let Some(ps) = by_frame.get(&key) {
            rec.instances.extend(ps.iter().cloned());
            if let Some(p) = &preds {
                for inst in ps {
                    if let Some(&t) = p.track_ids.get(&(key.clone(), inst.id)) {
                        track_ids.insert(inst.id, t);
                    }
                }
            }
        }
        overlay::emit_overlay(&rec, &track_ids, skeleton, &metadata, &a.out_dir.join(overlay::overlay_file_name(fr)))
    })
}

fn split(a: SplitArgs) -> Result<()> {
    let ann = ingest::load_annotations(&a.ann)?;
    let (spec, spec_in) = ingest::load_split(&a.split)?;
    let tests: Vec<&str> = spec.test_videos.iter().map(String::as_str).collect();
    let assignment =
        make_split(&ann.dataset, &tests, spec.val_fraction, spec.seed).map_err(|e| Error::dataset(&a.split, e))?;
    let info = json!({
        "tool": "herdpose",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "split",
        "split": spec,
        "inputs": [ann.input, spec_in],
    });
    let doc = json!({
        "info": info,
        "counts": {
            "train": assignment.train.len(),
            "val": assignment.val.len(),
            "test": assignment.test.len(),
        },
        "assignment": assignment,
    });
    write_json(&a.out, &doc)
}
