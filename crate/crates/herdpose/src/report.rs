//! Metric report rendering: aligned text tables, JSON and long-form CSV.

use std::fmt::Write as _;

use herdpose_core::eval::{AverageWeighting, MetricReport, VisibilityPolicy};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canon;
use crate::error::{Error, Result};

/// The JSON document written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub info: Value,
    pub report: MetricReport,
}

fn opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.decimals$}"))
}

/// Detection table followed by the per-keypoint table.
pub fn render_text(r: &MetricReport) -> String {
    let d = &r.detection;
    let k = &r.keypoints;
    let kc = &r.config.keypoints;
    let mut s = String::new();
    let sweep = match (d.sweep.first(), d.sweep.last()) {
        (Some(a), Some(b)) => format!("{a:.2}:{b:.2} ({} thresholds)", d.sweep.len()),
        _ => "-".into(),
    };
    let _ = writeln!(s, "Detection ({} interpolated AP)", d.interpolation);
    let _ = writeln!(s, "  {:<26}{:>10}", "metric", "value");
    let _ = writeln!(s, "  {:<26}{:>10.4}", format!("mAP@{:.2}", d.ap_iou), d.map_single);
    let _ = writeln!(s, "  {:<26}{:>10.4}", "mAP sweep", d.map_sweep);
    let _ = writeln!(s, "  {:<26}{:>10}", "ground truth", d.ground_truth_count);
    let _ = writeln!(s, "  {:<26}{:>10}", "predictions (after NMS)", d.prediction_count);
    let _ = writeln!(s, "  {:<26}{:>10}", "true positives", d.true_positives);
    let _ = writeln!(s, "  {:<26}{:>10}", "false positives", d.false_positives);
    let _ = writeln!(s, "  sweep {sweep}");
    for (t, ap) in d.sweep.iter().zip(&d.sweep_ap) {
        let _ = writeln!(s, "    AP@{t:.2} {ap:.4}");
    }
    s.push('\n');

    let visibility = match kc.visibility {
        VisibilityPolicy::VisibleOnly => "visible keypoints only",
        VisibilityPolicy::IncludeOccluded => "visible and occluded keypoints",
    };
    let weighting = match kc.weighting {
        AverageWeighting::Support => "support-weighted",
        AverageWeighting::Unweighted => "unweighted",
    };
    let _ = writeln!(s, "Keypoints ({} matched pairs, {visibility}, {weighting} average)", k.matched_pairs);
    let pck_header = format!("PCK@{}(%)", kc.pck_alpha);
    let _ = writeln!(s, "  {:<14}{:>10}{:>12}{:>8}{:>9}", "keypoint", "RMSE(px)", pck_header, "OKS", "support");
    for row in k.rows.iter().chain(std::iter::once(&k.average)) {
        let _ = writeln!(
            s,
            "  {:<14}{:>10}{:>12}{:>8}{:>9}",
            row.name,
            opt(row.rmse, 2),
            opt(row.pck, 1),
            opt(row.oks, 3),
            row.support
        );
    }
    let _ = writeln!(s, "  instance-level OKS: {}", opt(k.instance_oks, 4));
    s
}

/// Provenance as `#` comment lines, one JSON line.
pub fn comment_header(info: &Value) -> Result<String> {
    let json = serde_json::to_string(&canon::canonicalize(info.clone())).map_err(|e| Error::Internal(e.to_string()))?;
    Ok(format!("# {json}\n"))
}

/// Long-form CSV: `table,row,metric,value`.
pub fn render_csv(r: &MetricReport, info: &Value) -> Result<Vec<u8>> {
    let mut out = comment_header(info)?.into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut rec =
            |table: &str, row: &str, metric: &str, value: String| w.write_record([table, row, metric, &value]);
        let io = |e: csv::Error| Error::Internal(e.to_string());
        rec("table", "row", "metric", "value".into()).map_err(io)?;
        let d = &r.detection;
        let num = |v: f64| canon::fmt_num(v);
        rec("detection", "all", &format!("map@{}", num(d.ap_iou)), num(d.map_single)).map_err(io)?;
        rec("detection", "all", "map_sweep", num(d.map_sweep)).map_err(io)?;
        for (t, ap) in d.sweep.iter().zip(&d.sweep_ap) {
            rec("detection", "sweep", &format!("ap@{}", num(*t)), num(*ap)).map_err(io)?;
        }
        rec("detection", "all", "ground_truth", d.ground_truth_count.to_string()).map_err(io)?;
        rec("detection", "all", "predictions", d.prediction_count.to_string()).map_err(io)?;
        rec("detection", "all", "true_positives", d.true_positives.to_string()).map_err(io)?;
        rec("detection", "all", "false_positives", d.false_positives.to_string()).map_err(io)?;
        let o = |v: Option<f64>| v.map(num).unwrap_or_default();
        let k = &r.keypoints;
        for row in k.rows.iter().chain(std::iter::once(&k.average)) {
            rec("keypoints", &row.name, "rmse", o(row.rmse)).map_err(io)?;
            rec("keypoints", &row.name, "pck", o(row.pck)).map_err(io)?;
            rec("keypoints", &row.name, "oks", o(row.oks)).map_err(io)?;
            rec("keypoints", &row.name, "support", row.support.to_string()).map_err(io)?;
        }
        rec("keypoints", "instance", "oks", o(k.instance_oks)).map_err(io)?;
        w.flush().map_err(|e| Error::Internal(e.to_string()))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use herdpose_core::eval::{evaluate, EvalConfig, FrameDetections};
    use herdpose_core::{BBox, Instance, Keypoint, Pose, Skeleton};

    fn report() -> MetricReport {
        let b = BBox::new(0.0, 0.0, 50.0, 50.0).unwrap();
        let pose = Pose::new([Keypoint::visible(10.0, 10.0); 8]);
        let frame = FrameDetections {
            ground_truth: vec![Instance::ground_truth(1, b, Some(pose))],
            predictions: vec![Instance::prediction(1, b, Some(pose.translate(3.0, 4.0)), 0.9).unwrap()],
        };
        evaluate(&[frame], &EvalConfig::default(), &Skeleton::default()).unwrap()
    }

    #[test]
    fn text_has_both_tables() {
        let t = render_text(&report());
        assert!(t.contains("mAP@0.50"));
        assert!(t.contains("PCK@0.2(%)"));
        let avg = t.lines().find(|l| l.trim_start().starts_with("Average")).unwrap();
        let cols: Vec<&str> = avg.split_whitespace().collect();
        assert_eq!(cols, ["Average", "5.00", "100.0", "0.607", "8"]);
    }

    #[test]
    fn csv_is_long_form() {
        let bytes = render_csv(&report(), &serde_json::json!({"tool": "t"})).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("# {\"tool\":\"t\"}\n"));
        assert!(text.contains("keypoints,Average,rmse,5\n"));
        assert!(text.contains("detection,all,map@0.5,1\n"));
    }
}
