//! Evaluation: keypoint MSE, OKS, PDJ, box IoU and overlap precision, macro-averaged per
//! target.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, Keypoint};
use crate::math::{exp, sqrt};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("no visible keypoints")]
    NoVisibleKeypoints,
    #[error("no frames to evaluate")]
    Empty,
    #[error("expected {expected} keypoints, got {got}")]
    KeypointCount { expected: usize, got: usize },
    #[error("invalid metric config: {0}")]
    Config(&'static str),
}

type Result<T> = core::result::Result<T, MetricError>;

fn visible_pairs<'a>(pred: &'a [(f64, f64)], gt: &'a [Keypoint]) -> Result<Vec<(&'a (f64, f64), &'a Keypoint)>> {
    if pred.len() != gt.len() {
        return Err(MetricError::KeypointCount { expected: gt.len(), got: pred.len() });
    }
    let pairs: Vec<_> = pred.iter().zip(gt).filter(|(_, g)| g.is_visible()).collect();
    if pairs.is_empty() {
        return Err(MetricError::NoVisibleKeypoints);
    }
    Ok(pairs)
}

fn d2(p: &(f64, f64), g: &Keypoint) -> f64 {
    (p.0 - g.x) * (p.0 - g.x) + (p.1 - g.y) * (p.1 - g.y)
}

/// Mean squared pixel distance over visible ground-truth keypoints.
pub fn mse_keypoints(pred: &[(f64, f64)], gt: &[Keypoint]) -> Result<f64> {
    let pairs = visible_pairs(pred, gt)?;
    Ok(pairs.iter().map(|(p, g)| d2(p, g)).sum::<f64>() / pairs.len() as f64)
}

/// Mean of `exp(−d²/(2·A·κ²))` over visible keypoints, `A` the box area.
pub fn oks(pred: &[(f64, f64)], gt: &[Keypoint], bbox: &BBox, kappa: f64) -> Result<f64> {
    let pairs = visible_pairs(pred, gt)?;
    let denom = 2.0 * bbox.area() * kappa * kappa;
    Ok(pairs.iter().map(|(p, g)| exp(-d2(p, g) / denom)).sum::<f64>() / pairs.len() as f64)
}

/// Fraction of visible keypoints closer than `x` times the box diagonal.
pub fn pdj(pred: &[(f64, f64)], gt: &[Keypoint], bbox: &BBox, x: f64) -> Result<f64> {
    let pairs = visible_pairs(pred, gt)?;
    let limit = x * bbox.diagonal();
    let hits = pairs.iter().filter(|(p, g)| sqrt(d2(p, g)) < limit).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Intersection over union; 0 when either box is degenerate.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if !a.is_valid() || !b.is_valid() {
        return 0.0;
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// `T_i = i/steps` for `i = 1..=steps`.
pub fn uniform_thresholds(steps: usize) -> Vec<f64> {
    (1..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Fraction of IoUs at or above each threshold.
pub fn op_curve(ious: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if ious.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(thresholds.iter().map(|&t| (t, ious.iter().filter(|&&v| v >= t).count() as f64 / ious.len() as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub kappa: f64,
    pub pdj_thresholds: Vec<f64>,
    pub op_steps: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { kappa: 0.08, pdj_thresholds: alloc::vec![0.05, 0.08], op_steps: 20 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(MetricError::Config("kappa must be positive"));
        }
        if self.op_steps == 0 {
            return Err(MetricError::Config("op_steps must be positive"));
        }
        if self.pdj_thresholds.iter().any(|&x| !(x >= 0.0)) {
            return Err(MetricError::Config("PDJ thresholds must be non-negative"));
        }
        Ok(())
    }
}

/// One predicted frame joined with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub sequence: String,
    pub target_id: u64,
    pub frame: usize,
    pub pred_bbox: BBox,
    pub pred_keypoints: Vec<(f64, f64)>,
    pub gt_bbox: BBox,
    pub gt_keypoints: Vec<Keypoint>,
}

/// Per-target aggregates, later macro-averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub sequence: String,
    pub target_id: u64,
    pub frames: usize,
    /// Frames with at least one visible keypoint.
    pub keypoint_frames: usize,
    pub mse: Option<f64>,
    pub oks: Option<f64>,
    pub pdj: Vec<(f64, Option<f64>)>,
    pub mean_iou: f64,
    pub op_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pixels², averaged over targets with keypoint frames.
    pub mse: Option<f64>,
    pub oks: Option<f64>,
    pub pdj: Vec<(f64, Option<f64>)>,
    pub mean_iou: f64,
    pub op_curve: Vec<(f64, f64)>,
    pub targets: Vec<TargetReport>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn target_report(records: &[&EvalRecord], cfg: &MetricConfig) -> Result<TargetReport> {
    let thresholds = uniform_thresholds(cfg.op_steps);
    let (mut mse, mut o, mut ious) = (Vec::new(), Vec::new(), Vec::new());
    let mut pdjs: Vec<Vec<f64>> = cfg.pdj_thresholds.iter().map(|_| Vec::new()).collect();
    for r in records {
        ious.push(iou(&r.pred_bbox, &r.gt_bbox));
        match mse_keypoints(&r.pred_keypoints, &r.gt_keypoints) {
            Ok(m) => {
                mse.push(m);
                o.push(oks(&r.pred_keypoints, &r.gt_keypoints, &r.gt_bbox, cfg.kappa)?);
                for (acc, &x) in pdjs.iter_mut().zip(&cfg.pdj_thresholds) {
                    acc.push(pdj(&r.pred_keypoints, &r.gt_keypoints, &r.gt_bbox, x)?);
                }
            }
            Err(MetricError::NoVisibleKeypoints) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(TargetReport {
        sequence: records[0].sequence.clone(),
        target_id: records[0].target_id,
        frames: records.len(),
        keypoint_frames: mse.len(),
        mse: mean(&mse),
        oks: mean(&o),
        pdj: cfg.pdj_thresholds.iter().zip(&pdjs).map(|(&x, v)| (x, mean(v))).collect(),
        mean_iou: mean(&ious).unwrap_or(0.0),
        op_curve: op_curve(&ious, &thresholds)?,
    })
}

/// Aggregates per (sequence, target) and macro-averages over targets.
pub fn evaluate(records: &[EvalRecord], cfg: &MetricConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut groups: BTreeMap<(&str, u64), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.sequence.as_str(), r.target_id)).or_default().push(r);
    }
    let targets = groups.values().map(|g| target_report(g, cfg)).collect::<Result<Vec<_>>>()?;
    let over = |f: &dyn Fn(&TargetReport) -> Option<f64>| mean(&targets.iter().filter_map(f).collect::<Vec<_>>());
    let pdj = cfg.pdj_thresholds.iter().enumerate().map(|(i, &x)| (x, over(&|t| t.pdj[i].1))).collect();
    let op = uniform_thresholds(cfg.op_steps)
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, over(&|r| Some(r.op_curve[i].1)).unwrap_or(0.0)))
        .collect();
    Ok(EvalReport {
        mse: over(&|t| t.mse),
        oks: over(&|t| t.oks),
        pdj,
        mean_iou: over(&|t| Some(t.mean_iou)).unwrap_or(0.0),
        op_curve: op,
        targets,
    })
}
