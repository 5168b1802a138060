//! Scores prediction records against dataset annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use step_core::data::Annotation;
use step_core::metrics::{evaluate, EvalRecord, EvalReport, MetricConfig};

use crate::error::{Error, Result};
use crate::tracking::TrackRecord;

pub type FrameKey = (String, usize, u64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metrics: EvalReport,
    /// Frames scored (initialization frames excluded).
    pub matched: usize,
    /// Predictions with no annotation for their (sequence, frame, target).
    pub unmatched_predictions: Vec<FrameKey>,
    /// Annotated (sequence, frame, target) triples of tracked targets with no prediction.
    pub unmatched_annotations: Vec<FrameKey>,
}

/// Joins predictions with annotations on (sequence, frame, target id) and scores every
/// matched frame after the first. Keypoint counts must agree.
pub fn evaluate_run(
    predictions: &[TrackRecord],
    ground_truth: &BTreeMap<FrameKey, Annotation>,
    cfg: &MetricConfig,
) -> Result<RunReport> {
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    let mut unmatched_predictions = Vec::new();
    for p in predictions {
        let key = (p.sequence.clone(), p.frame, p.target_id);
        if !seen.insert(key.clone()) {
            return Err(Error::Schema(format!(
                "duplicate prediction for sequence {} frame {} target {}",
                key.0, key.1, key.2
            )));
        }
        let Some(gt) = ground_truth.get(&key) else {
            unmatched_predictions.push(key);
            continue;
        };
        if p.keypoints.len() != gt.keypoints.len() {
            return Err(Error::Schema(format!(
                "sequence {} frame {} target {}: {} predicted keypoints, {} annotated",
                key.0,
                key.1,
                key.2,
                p.keypoints.len(),
                gt.keypoints.len()
            )));
        }
        if p.bbox.iter().chain(p.keypoints.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!(
                "sequence {} frame {} target {}: non-finite value",
                key.0, key.1, key.2
            )));
        }
        if p.frame == 0 {
            continue;
        }
        records.push(EvalRecord {
            sequence: p.sequence.clone(),
            target_id: p.target_id,
            frame: p.frame,
            pred_bbox: p.pred_bbox(),
            pred_keypoints: p.keypoints.iter().map(|k| (k[0], k[1])).collect(),
            gt_bbox: gt.bbox,
            gt_keypoints: gt.keypoints.clone(),
        });
    }
    let tracked: BTreeSet<(&str, u64)> = predictions.iter().map(|p| (p.sequence.as_str(), p.target_id)).collect();
    let unmatched_annotations =
        ground_truth.keys().filter(|k| tracked.contains(&(k.0.as_str(), k.2)) && !seen.contains(*k)).cloned().collect();
    let matched = records.len();
    if matched == 0 {
        return Err(Error::Schema("no prediction after the first frame matches an annotation".into()));
    }
    let metrics = evaluate(&records, cfg)?;
    Ok(RunReport { metrics, matched, unmatched_predictions, unmatched_annotations })
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.4}"))
}

/// Plain-text table: per-target rows, then the macro average.
pub fn summary_table(r: &RunReport) -> String {
    let mut s = String::new();
    let m = &r.metrics;
    let pdj_heads: Vec<String> = m.pdj.iter().map(|(t, _)| format!("PDJ@{t}")).collect();
    let _ = write!(s, "{:<24} {:>6} {:>10} {:>8}", "sequence/target", "frames", "MSE", "OKS");
    for h in &pdj_heads {
        let _ = write!(s, " {h:>9}");
    }
    let _ = writeln!(s, " {:>8}", "IoU");
    for t in &m.targets {
        let _ = write!(
            s,
            "{:<24} {:>6} {:>10} {:>8}",
            format!("{}/{}", t.sequence, t.target_id),
            t.frames,
            opt(t.mse),
            opt(t.oks)
        );
        for (_, v) in &t.pdj {
            let _ = write!(s, " {:>9}", opt(*v));
        }
        let _ = writeln!(s, " {:>8.4}", t.mean_iou);
    }
    let _ = write!(s, "{:<24} {:>6} {:>10} {:>8}", "mean", r.matched, opt(m.mse), opt(m.oks));
    for (_, v) in &m.pdj {
        let _ = write!(s, " {:>9}", opt(*v));
    }
    let _ = writeln!(s, " {:>8.4}", m.mean_iou);
    if !r.unmatched_predictions.is_empty() || !r.unmatched_annotations.is_empty() {
        let _ = writeln!(
            s,
            "unmatched: {} predictions, {} annotations",
            r.unmatched_predictions.len(),
            r.unmatched_annotations.len()
        );
    }
    s
}
