//! SVG overlays in frame pixel coordinates.
//!
//! Ground truth is drawn in green, predictions in orange. Visible keypoints
//! are filled circles, occluded ones hollow; unlabeled slots are skipped, as
//! are edges touching them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use herdpose_core::{FrameRecord, Instance, Skeleton, Visibility};

use crate::canon::fmt_num;
use crate::error::Result;
use crate::fsio;

const GT_COLOR: &str = "#1b9e77";
const PRED_COLOR: &str = "#d95f02";
const MARKER_RADIUS: f64 = 3.0;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}

fn instance_group(s: &mut String, inst: &Instance, track: Option<u64>, skeleton: &Skeleton) {
    let (class, color) = if inst.is_prediction() { ("prediction", PRED_COLOR) } else { ("ground-truth", GT_COLOR) };
    let b = inst.bbox;
    let track_attr = track.map(|t| format!(" data-track=\"{t}\"")).unwrap_or_default();
    let _ = writeln!(s, "<g class=\"{class}\" data-id=\"{}\"{track_attr}>", inst.id);
    let _ = writeln!(
        s,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
        fmt_num(b.x()),
        fmt_num(b.y()),
        fmt_num(b.w()),
        fmt_num(b.h())
    );
    let mut label = format!("#{}", inst.id);
    if let Some(score) = inst.score() {
        let _ = write!(label, " {score:.2}");
    }
    if let Some(t) = track {
        let _ = write!(label, " T{t}");
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"10\">{}</text>",
        fmt_num(b.x()),
        fmt_num(b.y() - 2.0),
        escape(&label)
    );
    if let Some(pose) = &inst.pose {
        let kp = &pose.keypoints;
        for &(a, c) in skeleton.edges() {
            if kp[a].is_labeled() && kp[c].is_labeled() {
                let _ = writeln!(
                    s,
                    "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"1\"/>",
                    fmt_num(kp[a].x),
                    fmt_num(kp[a].y),
                    fmt_num(kp[c].x),
                    fmt_num(kp[c].y)
                );
            }
        }
        for (slot, k) in kp.iter().enumerate() {
            let fill = match k.vis {
                Visibility::NotLabeled => continue,
                Visibility::Visible => color,
                Visibility::Occluded => "none",
            };
            let _ = writeln!(
                s,
                "<circle class=\"{}\" data-slot=\"{slot}\" cx=\"{}\" cy=\"{}\" r=\"{MARKER_RADIUS}\" fill=\"{fill}\" stroke=\"{color}\"/>",
                if k.vis == Visibility::Visible { "visible" } else { "occluded" },
                fmt_num(k.x),
                fmt_num(k.y)
            );
        }
    }
    s.push_str("</g>\n");
}

/// One frame as an SVG document. `track_ids` maps prediction ids to track
/// ids; `metadata` is embedded verbatim (escaped).
pub fn render_svg(fr: &FrameRecord, track_ids: &BTreeMap<u64, u64>, skeleton: &Skeleton, metadata: &str) -> String {
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" data-frame=\"{}\">",
        escape(&fr.key().to_string()),
        w = fr.width,
        h = fr.height
    );
    let _ = writeln!(s, "<metadata>{}</metadata>", escape(metadata));
    for inst in &fr.instances {
        let track = inst.is_prediction().then(|| track_ids.get(&inst.id).copied()).flatten();
        instance_group(&mut s, inst, track, skeleton);
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_overlay(
    fr: &FrameRecord,
    track_ids: &BTreeMap<u64, u64>,
    skeleton: &Skeleton,
    metadata: &str,
    out: &Path,
) -> Result<()> {
    fsio::write_atomic(out, render_svg(fr, track_ids, skeleton, metadata).as_bytes())
}

/// File name for a frame's overlay.
pub fn overlay_file_name(fr: &FrameRecord) -> String {
    let safe: String =
        fr.video_id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.@".contains(c) { c } else { '_' }).collect();
    format!("{safe}_{:06}.svg", fr.frame_index)
}
