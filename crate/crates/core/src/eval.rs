//! Detection and pose evaluation.
//!
//! The protocol runs per frame: predictions are de-duplicated with greedy
//! NMS, then matched to ground truth in descending confidence order, each
//! prediction claiming the unclaimed ground truth with the highest IoU at or
//! above the threshold. Matched pairs feed the per-keypoint RMSE / PCK / OKS
//! accumulators; the same matching, repeated per IoU threshold, labels the
//! confidence-ranked predictions for average precision.
//!
//! Confidence ties are always broken by instance id (ascending), so results
//! do not depend on input order.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use thiserror::Error;

use crate::geometry::{Instance, Skeleton, Visibility, KEYPOINT_COUNT, KEYPOINT_NAMES};

pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const DEFAULT_MATCH_IOU: f64 = 0.5;
pub const DEFAULT_PCK_ALPHA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("average precision is undefined without ground truth")]
    EmptyGroundTruth,
    #[error("IoU threshold {0} must lie in (0, 1]")]
    InvalidThreshold(f64),
    #[error("threshold sweep is empty")]
    EmptySweep,
    #[error("pck_alpha {0} must be non-negative")]
    InvalidPckAlpha(f64),
}

/// The 14 thresholds 0.30, 0.35, ..., 0.95.
pub fn default_sweep() -> Vec<f64> {
    (0..14).map(|i| f64::from(30 + 5 * i) / 100.0).collect()
}

fn check_threshold(t: f64) -> Result<(), EvalError> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::InvalidThreshold(t))
    }
}

/// Ground truth and predictions for one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameDetections {
    pub ground_truth: Vec<Instance>,
    pub predictions: Vec<Instance>,
}

fn score_of(inst: &Instance) -> f64 {
    inst.score().unwrap_or(0.0)
}

fn by_confidence(a: &Instance, b: &Instance) -> Ordering {
    score_of(b).total_cmp(&score_of(a)).then_with(|| a.id.cmp(&b.id))
}

/// Indices of `preds` in descending confidence order (ties by id).
pub fn rank_order(preds: &[Instance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| by_confidence(&preds[a], &preds[b]));
    order
}

/// Greedy non-maximum suppression. Output is sorted by descending score and
/// contains no pair with IoU at or above `iou_threshold`.
pub fn nms(preds: &[Instance], iou_threshold: f64) -> Vec<Instance> {
    let mut kept: Vec<Instance> = Vec::new();
    for i in rank_order(preds) {
        let cand = &preds[i];
        if kept.iter().all(|k| k.bbox.iou(&cand.bbox) < iou_threshold) {
            kept.push(cand.clone());
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MatchPair {
    pub prediction: u64,
    pub ground_truth: u64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MatchResult {
    /// In the order predictions were processed (descending confidence).
    pub pairs: Vec<MatchPair>,
    pub unmatched_predictions: Vec<u64>,
    pub unmatched_ground_truths: Vec<u64>,
}

/// Per-prediction outcome, aligned with [`rank_order`].
fn greedy_match(preds: &[Instance], gts: &[Instance], thr: f64) -> (Vec<usize>, Vec<Option<(usize, f64)>>) {
    let order = rank_order(preds);
    let mut claimed = vec![false; gts.len()];
    let outcome = order
        .iter()
        .map(|&pi| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if claimed[gi] {
                    continue;
                }
                let v = preds[pi].bbox.iou(&gt.bbox);
                if v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                claimed[gi] = true;
            }
            best
        })
        .collect();
    (order, outcome)
}

/// Confidence-greedy one-to-one matching.
pub fn match_instances(preds: &[Instance], gts: &[Instance], iou_threshold: f64) -> MatchResult {
    let (order, outcome) = greedy_match(preds, gts, iou_threshold);
    let mut result = MatchResult::default();
    let mut gt_used = vec![false; gts.len()];
    for (&pi, m) in order.iter().zip(outcome) {
        match m {
            Some((gi, iou)) => {
                gt_used[gi] = true;
                result.pairs.push(MatchPair { prediction: preds[pi].id, ground_truth: gts[gi].id, iou });
            }
            None => result.unmatched_predictions.push(preds[pi].id),
        }
    }
    result.unmatched_ground_truths = gts.iter().zip(&gt_used).filter(|(_, &u)| !u).map(|(g, _)| g.id).collect();
    result
}

/// Resolves the ids in `result` back to `(ground truth, prediction)` pairs.
pub fn matched_pairs<'a>(
    result: &MatchResult,
    preds: &'a [Instance],
    gts: &'a [Instance],
) -> Vec<(&'a Instance, &'a Instance)> {
    result
        .pairs
        .iter()
        .filter_map(|p| {
            let g = gts.iter().find(|g| g.id == p.ground_truth)?;
            let d = preds.iter().find(|d| d.id == p.prediction)?;
            Some((g, d))
        })
        .collect()
}

/// Confidence-ranked true/false-positive labels of one frame at one
/// threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedLabels {
    pub scores: Vec<f64>,
    pub true_positive: Vec<bool>,
    pub ground_truth_count: usize,
}

pub fn label_frame(preds: &[Instance], gts: &[Instance], iou_threshold: f64) -> RankedLabels {
    let (order, outcome) = greedy_match(preds, gts, iou_threshold);
    RankedLabels {
        scores: order.iter().map(|&i| score_of(&preds[i])).collect(),
        true_positive: outcome.iter().map(Option::is_some).collect(),
        ground_truth_count: gts.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

/// Precision-recall curve over all rank cuts, with its all-point
/// interpolated area.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
    pub ground_truth_count: usize,
    pub true_positives: usize,
    pub false_positives: usize,
}

/// Pools per-frame labels into one ranked list and integrates the
/// monotone precision envelope over recall.
pub fn curve_from_labels(frames: &[RankedLabels]) -> Result<PrCurve, EvalError> {
    let n_gt: usize = frames.iter().map(|f| f.ground_truth_count).sum();
    if n_gt == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    // (score, frame, rank-in-frame) keeps the within-frame id tie-break
    let mut pooled: Vec<(f64, usize, usize, bool)> = frames
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| f.scores.iter().zip(&f.true_positive).enumerate().map(move |(r, (&s, &tp))| (s, fi, r, tp)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let (mut tp, mut fp) = (0usize, 0usize);
    let points: Vec<PrPoint> = pooled
        .iter()
        .map(|&(score, _, _, is_tp)| {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint { recall: tp as f64 / n_gt as f64, precision: tp as f64 / (tp + fp) as f64, score }
        })
        .collect();

    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, &env) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    Ok(PrCurve { points, ap, ground_truth_count: n_gt, true_positives: tp, false_positives: fp })
}

/// Average precision over all frames at one IoU threshold. Predictions are
/// used as given; run [`nms`] first if the protocol calls for it.
pub fn average_precision(frames: &[FrameDetections], iou_threshold: f64) -> Result<PrCurve, EvalError> {
    check_threshold(iou_threshold)?;
    let labels: Vec<RankedLabels> =
        frames.iter().map(|f| label_frame(&f.predictions, &f.ground_truth, iou_threshold)).collect();
    curve_from_labels(&labels)
}

/// Mean of [`average_precision`] over `thresholds`.
pub fn map_sweep(frames: &[FrameDetections], thresholds: &[f64]) -> Result<f64, EvalError> {
    if thresholds.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    let mut sum = 0.0;
    for &t in thresholds {
        sum += average_precision(frames, t)?.ap;
    }
    Ok(sum / thresholds.len() as f64)
}

/// Which ground-truth keypoints are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum VisibilityPolicy {
    #[default]
    VisibleOnly,
    IncludeOccluded,
}

impl VisibilityPolicy {
    fn scores(self, vis: Visibility) -> bool {
        match self {
            VisibilityPolicy::VisibleOnly => vis == Visibility::Visible,
            VisibilityPolicy::IncludeOccluded => vis != Visibility::NotLabeled,
        }
    }
}

/// How the Average row combines per-keypoint rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AverageWeighting {
    #[default]
    Support,
    Unweighted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KeypointConfig {
    pub pck_alpha: f64,
    pub visibility: VisibilityPolicy,
    pub weighting: AverageWeighting,
}

impl Default for KeypointConfig {
    fn default() -> Self {
        KeypointConfig {
            pck_alpha: DEFAULT_PCK_ALPHA,
            visibility: VisibilityPolicy::VisibleOnly,
            weighting: AverageWeighting::Support,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct SlotSums {
    support: u64,
    sq_sum: f64,
    pck_hits: u64,
    oks_sum: f64,
}

/// Running sums for per-keypoint metrics. Merging accumulators in a fixed
/// order gives identical results however the pairs were partitioned.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointAccumulator {
    slots: [SlotSums; KEYPOINT_COUNT],
    instance_oks_sum: f64,
    instance_oks_count: u64,
    pairs: u64,
}

impl KeypointAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_pair(&mut self, gt: &Instance, pred: &Instance, skeleton: &Skeleton, cfg: &KeypointConfig) {
        self.pairs += 1;
        let (Some(gp), Some(pp)) = (&gt.pose, &pred.pose) else {
            return;
        };
        let area = gt.bbox.area();
        let pck_threshold = cfg.pck_alpha * gt.bbox.max_side();
        let mut inst_sum = 0.0;
        let mut inst_n = 0u64;
        for (slot, ((g, p), &k)) in gp.keypoints.iter().zip(&pp.keypoints).zip(skeleton.falloff()).enumerate() {
            if !cfg.visibility.scores(g.vis) || !p.is_labeled() {
                continue;
            }
            let d2 = g.point().distance_sq(p.point());
            let oks = libm::exp(-d2 / (2.0 * area * k * k));
            let s = &mut self.slots[slot];
            s.support += 1;
            s.sq_sum += d2;
            s.pck_hits += u64::from(libm::sqrt(d2) <= pck_threshold);
            s.oks_sum += oks;
            inst_sum += oks;
            inst_n += 1;
        }
        if inst_n > 0 {
            self.instance_oks_sum += inst_sum / inst_n as f64;
            self.instance_oks_count += 1;
        }
    }

    pub fn merge(&mut self, other: &KeypointAccumulator) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.support += b.support;
            a.sq_sum += b.sq_sum;
            a.pck_hits += b.pck_hits;
            a.oks_sum += b.oks_sum;
        }
        self.instance_oks_sum += other.instance_oks_sum;
        self.instance_oks_count += other.instance_oks_count;
        self.pairs += other.pairs;
    }

    pub fn finish(&self, cfg: &KeypointConfig) -> KeypointReport {
        let rows: Vec<KeypointMetricRow> = self
            .slots
            .iter()
            .zip(KEYPOINT_NAMES)
            .map(|(s, name)| {
                let n = s.support as f64;
                let present = s.support > 0;
                KeypointMetricRow {
                    name: name.into(),
                    rmse: present.then(|| libm::sqrt(s.sq_sum / n)),
                    pck: present.then(|| 100.0 * s.pck_hits as f64 / n),
                    oks: present.then(|| s.oks_sum / n),
                    support: s.support,
                }
            })
            .collect();
        let average = average_row(&rows, cfg.weighting);
        KeypointReport {
            rows,
            average,
            instance_oks: (self.instance_oks_count > 0).then(|| self.instance_oks_sum / self.instance_oks_count as f64),
            matched_pairs: self.pairs,
        }
    }
}

fn average_row(rows: &[KeypointMetricRow], weighting: AverageWeighting) -> KeypointMetricRow {
    let supported: Vec<&KeypointMetricRow> = rows.iter().filter(|r| r.support > 0).collect();
    let total: u64 = supported.iter().map(|r| r.support).sum();
    let weight = |r: &KeypointMetricRow| match weighting {
        AverageWeighting::Support => r.support as f64,
        AverageWeighting::Unweighted => 1.0,
    };
    let wsum: f64 = supported.iter().map(|r| weight(r)).sum();
    let mean = |get: fn(&KeypointMetricRow) -> Option<f64>| {
        (!supported.is_empty()).then(|| supported.iter().map(|r| weight(r) * get(r).unwrap_or(0.0)).sum::<f64>() / wsum)
    };
    KeypointMetricRow {
        name: "Average".into(),
        rmse: mean(|r| r.rmse),
        pck: mean(|r| r.pck),
        oks: mean(|r| r.oks),
        support: total,
    }
}

/// One row of the per-keypoint table. Metrics are `None` when no keypoint
/// was scored in that slot.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KeypointMetricRow {
    pub name: String,
    pub rmse: Option<f64>,
    pub pck: Option<f64>,
    pub oks: Option<f64>,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KeypointReport {
    pub rows: Vec<KeypointMetricRow>,
    pub average: KeypointMetricRow,
    /// Mean over pairs of the visible-slot mean OKS term (COCO-style
    /// instance similarity, distinct from the per-keypoint columns).
    pub instance_oks: Option<f64>,
    pub matched_pairs: u64,
}

/// Per-keypoint RMSE (frame pixels), PCK (percent) and OKS over matched
/// `(ground truth, prediction)` pairs.
pub fn keypoint_metrics(pairs: &[(&Instance, &Instance)], skeleton: &Skeleton, cfg: &KeypointConfig) -> KeypointReport {
    let mut acc = KeypointAccumulator::new();
    for (g, p) in pairs {
        acc.add_pair(g, p, skeleton, cfg);
    }
    acc.finish(cfg)
}

/// Full evaluation settings.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalConfig {
    pub nms_iou: f64,
    pub match_iou: f64,
    /// Threshold of the single-threshold mAP row.
    pub ap_iou: f64,
    pub sweep: Vec<f64>,
    pub keypoints: KeypointConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            nms_iou: DEFAULT_NMS_IOU,
            match_iou: DEFAULT_MATCH_IOU,
            ap_iou: 0.5,
            sweep: default_sweep(),
            keypoints: KeypointConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        check_threshold(self.nms_iou)?;
        check_threshold(self.match_iou)?;
        check_threshold(self.ap_iou)?;
        if self.sweep.is_empty() {
            return Err(EvalError::EmptySweep);
        }
        for &t in &self.sweep {
            check_threshold(t)?;
        }
        if self.keypoints.pck_alpha.is_nan() || self.keypoints.pck_alpha < 0.0 {
            return Err(EvalError::InvalidPckAlpha(self.keypoints.pck_alpha));
        }
        Ok(())
    }

    fn detection_thresholds(&self) -> impl Iterator<Item = f64> + '_ {
        core::iter::once(self.ap_iou).chain(self.sweep.iter().copied())
    }
}

/// Everything the report needs from one frame; computed independently per
/// frame so frames can be processed in parallel.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEvaluation {
    pub kept_predictions: Vec<Instance>,
    pub matches: MatchResult,
    /// One entry for `ap_iou`, then one per sweep threshold.
    pub labels: Vec<RankedLabels>,
    pub keypoints: KeypointAccumulator,
}

pub fn evaluate_frame(frame: &FrameDetections, cfg: &EvalConfig, skeleton: &Skeleton) -> FrameEvaluation {
    let kept = nms(&frame.predictions, cfg.nms_iou);
    let matches = match_instances(&kept, &frame.ground_truth, cfg.match_iou);
    let mut keypoints = KeypointAccumulator::new();
    for (g, p) in matched_pairs(&matches, &kept, &frame.ground_truth) {
        keypoints.add_pair(g, p, skeleton, &cfg.keypoints);
    }
    let labels = cfg.detection_thresholds().map(|t| label_frame(&kept, &frame.ground_truth, t)).collect();
    FrameEvaluation { kept_predictions: kept, matches, labels, keypoints }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DetectionReport {
    pub ap_iou: f64,
    pub map_single: f64,
    pub sweep: Vec<f64>,
    pub sweep_ap: Vec<f64>,
    pub map_sweep: f64,
    pub interpolation: String,
    pub ground_truth_count: usize,
    pub prediction_count: usize,
    pub true_positives: usize,
    pub false_positives: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub config: EvalConfig,
    pub detection: DetectionReport,
    pub keypoints: KeypointReport,
}

/// Folds per-frame evaluations, in the given order, into a report.
pub fn summarize(frames: &[FrameEvaluation], cfg: &EvalConfig) -> Result<MetricReport, EvalError> {
    cfg.validate()?;
    let mut acc = KeypointAccumulator::new();
    for f in frames {
        acc.merge(&f.keypoints);
    }
    let n_thresholds = 1 + cfg.sweep.len();
    let mut curves = Vec::with_capacity(n_thresholds);
    for t in 0..n_thresholds {
        let labels: Vec<RankedLabels> = frames.iter().map(|f| f.labels[t].clone()).collect();
        curves.push(curve_from_labels(&labels)?);
    }
    let single = &curves[0];
    let sweep_ap: Vec<f64> = curves[1..].iter().map(|c| c.ap).collect();
    let detection = DetectionReport {
        ap_iou: cfg.ap_iou,
        map_single: single.ap,
        sweep: cfg.sweep.clone(),
        map_sweep: sweep_ap.iter().sum::<f64>() / sweep_ap.len() as f64,
        sweep_ap,
        interpolation: "all-point".into(),
        ground_truth_count: single.ground_truth_count,
        prediction_count: frames.iter().map(|f| f.kept_predictions.len()).sum(),
        true_positives: single.true_positives,
        false_positives: single.false_positives,
    };
    Ok(MetricReport { config: cfg.clone(), detection, keypoints: acc.finish(&cfg.keypoints) })
}

/// Runs the whole protocol serially.
pub fn evaluate(frames: &[FrameDetections], cfg: &EvalConfig, skeleton: &Skeleton) -> Result<MetricReport, EvalError> {
    cfg.validate()?;
    let evals: Vec<FrameEvaluation> = frames.iter().map(|f| evaluate_frame(f, cfg, skeleton)).collect();
    summarize(&evals, cfg)
}
