//! Inference: box-only initialization, per-frame prediction and confidence-gated memory.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, Keypoint};
use crate::encoding::{
    decode_bbox, decode_keypoints, gaussian_map, keypoint_offset_map, keypoint_state_from_predictions, DecodedKeypoint,
    FrameState, KeypointState,
};
use crate::network::{EncodedFrame, StepModel};
use crate::param::ParamStore;
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrackError {
    #[error("no frames to track")]
    EmptySequence,
    #[error("initial box {0:?} is degenerate or outside the {1}×{2} frame")]
    InvalidBox(BBox, usize, usize),
    #[error("expected {expected} per-frame boxes, got {got}")]
    BoxCount { expected: usize, got: usize },
    #[error("expected {expected} initial keypoints, got {got}")]
    KeypointCount { expected: usize, got: usize },
    #[error("invalid update policy: {0}")]
    Policy(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which memory slot a new frame replaces, and whether replacement is confidence-gated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryPolicy {
    /// Keep the initial frame; a confident prediction replaces the oldest later entry.
    #[default]
    ConfRolling,
    /// Keep the initial frame; every frame replaces the oldest later entry.
    FixedInitialPlusRecent,
    /// Every frame replaces the oldest entry, the initial frame included.
    RollingRecent,
}

impl MemoryPolicy {
    pub fn is_gated(self) -> bool {
        self == MemoryPolicy::ConfRolling
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdatePolicy {
    pub tau_m: f64,
    /// Fraction of keypoints that must exceed `tau_m`, rounded up to a count.
    pub min_kp_fraction: f64,
    pub policy: MemoryPolicy,
    pub capacity: usize,
}

impl Default for UpdatePolicy {
    fn default() -> Self {
        UpdatePolicy { tau_m: 0.6, min_kp_fraction: 0.5, policy: MemoryPolicy::ConfRolling, capacity: 2 }
    }
}

impl UpdatePolicy {
    pub fn validate(&self) -> Result<(), TrackError> {
        if !(self.tau_m > 0.0 && self.tau_m < 1.0) {
            return Err(TrackError::Policy("tau_m must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.min_kp_fraction) {
            return Err(TrackError::Policy("min_kp_fraction must lie in [0, 1]"));
        }
        if !(2..=3).contains(&self.capacity) {
            return Err(TrackError::Policy("capacity must be 2 or 3"));
        }
        Ok(())
    }

    /// Number of confident keypoints required out of `k`.
    pub fn required_keypoints(&self, k: usize) -> usize {
        let need = self.min_kp_fraction * k as f64;
        // guard against 0.5·k landing a hair above an integer
        let r = libm::round(need);
        if (need - r).abs() < 1e-9 {
            r as usize
        } else {
            libm::ceil(need) as usize
        }
    }

    /// Whether a prediction with these confidences may enter memory.
    pub fn accepts(&self, bbox_conf: f64, kp_confs: &[f64]) -> bool {
        if !self.policy.is_gated() {
            return true;
        }
        let confident = kp_confs.iter().filter(|&&c| c > self.tau_m).count();
        bbox_conf > self.tau_m && confident >= self.required_keypoints(kp_confs.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Initial,
    Rolled { frame: usize },
}

/// Ordered memory of train frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerMemory<E> {
    entries: Vec<(E, Provenance)>,
    capacity: usize,
}

impl<E: Clone> TrackerMemory<E> {
    /// Memory holding `capacity` copies of the initial entry.
    pub fn new(initial: E, capacity: usize) -> Self {
        TrackerMemory { entries: vec![(initial, Provenance::Initial); capacity], capacity }
    }

    pub fn entries(&self) -> &[(E, Provenance)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Applies the policy to a candidate from `frame`; returns whether memory changed.
    pub fn update(
        &mut self,
        candidate: E,
        frame: usize,
        bbox_conf: f64,
        kp_confs: &[f64],
        policy: &UpdatePolicy,
    ) -> bool {
        if !policy.accepts(bbox_conf, kp_confs) {
            return false;
        }
        let evict = match policy.policy {
            MemoryPolicy::ConfRolling | MemoryPolicy::FixedInitialPlusRecent => 1,
            MemoryPolicy::RollingRecent => 0,
        };
        self.entries.remove(evict);
        self.entries.push((candidate, Provenance::Rolled { frame }));
        true
    }
}

/// A frame held in memory: backbone features and encoded target state.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub features: Tensor,
    pub state: FrameState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub frame: usize,
    pub bbox: BBox,
    pub bbox_conf: f64,
    pub keypoints: Vec<DecodedKeypoint>,
    pub memory_updated: bool,
}

/// Single-target tracker over a read-only model.
#[derive(Debug, Clone)]
pub struct Tracker<'m> {
    model: &'m StepModel,
    store: &'m ParamStore,
    policy: UpdatePolicy,
    memory: TrackerMemory<MemoryEntry>,
    next_frame: usize,
}

impl<'m> Tracker<'m> {
    /// Initializes on the first frame from a box. Models without the soft-map module take
    /// the initial keypoints from `keypoints` when given.
    pub fn init(
        model: &'m StepModel,
        store: &'m ParamStore,
        image: &Tensor,
        bbox: BBox,
        keypoints: Option<&[Keypoint]>,
        policy: UpdatePolicy,
    ) -> Result<(Self, TrackOutput), TrackError> {
        policy.validate()?;
        let cfg = &model.cfg.encoding;
        let (h, w) = (cfg.image_h(), cfg.image_w());
        if !bbox.is_valid() || !bbox.within(w as f64, h as f64) {
            return Err(TrackError::InvalidBox(bbox, w, h));
        }
        if let Some(kps) = keypoints {
            if kps.len() != cfg.num_keypoints {
                return Err(TrackError::KeypointCount { expected: cfg.num_keypoints, got: kps.len() });
            }
        }
        let mut g = Graph::new();
        let x = model.backbone_forward(&mut g, store, image)?;
        let features = g.value(x).clone();
        let kp_state = match (model.gmsp_frozen(&mut g, store, x)?, keypoints) {
            (Some(soft), _) => KeypointState::Soft(g.value(soft).clone()),
            (None, Some(kps)) => KeypointState::Maps {
                om: keypoint_offset_map(kps, cfg),
                gm: gaussian_map(&crate::encoding::keypoint_centers(kps), cfg),
            },
            (None, None) => KeypointState::Unknown,
        };
        let entry = MemoryEntry { features, state: FrameState::from_bbox(&bbox, kp_state, cfg) };
        let tracker =
            Tracker { model, store, policy, memory: TrackerMemory::new(entry, policy.capacity), next_frame: 1 };
        // frame 0 echoes the box; keypoints are echoed when given and predicted otherwise
        let keypoints = match keypoints {
            Some(kps) => kps
                .iter()
                .map(|k| DecodedKeypoint { x: k.x, y: k.y, confidence: if k.is_visible() { 1.0 } else { 0.0 } })
                .collect(),
            None => tracker.predict(image)?.1.keypoints,
        };
        let out = TrackOutput { frame: 0, bbox, bbox_conf: 1.0, keypoints, memory_updated: false };
        Ok((tracker, out))
    }

    pub fn memory(&self) -> &TrackerMemory<MemoryEntry> {
        &self.memory
    }

    pub fn policy(&self) -> &UpdatePolicy {
        &self.policy
    }

    /// Prediction on `image` from the current memory; returns the frame's features too.
    fn predict(&self, image: &Tensor) -> Result<(Tensor, TrackOutput, Option<Tensor>), TrackError> {
        let cfg = &self.model.cfg.encoding;
        let mut g = Graph::new();
        let x = self.model.backbone_forward(&mut g, self.store, image)?;
        let feats: Vec<_> = self.memory.entries().iter().map(|(e, _)| g.constant(e.features.clone())).collect();
        let encoded: Vec<EncodedFrame<'_>> = feats
            .iter()
            .zip(self.memory.entries())
            .map(|(&features, (e, _))| EncodedFrame { features, state: &e.state })
            .collect();
        let out = self.model.predict(&mut g, self.store, &encoded, x)?;
        let b = decode_bbox(g.value(out.bbox_gm), g.value(out.bbox_om), cfg);
        let keypoints = decode_keypoints(g.value(out.kp_gm), g.value(out.kp_om), cfg);
        let soft = out.gmsp_test.map(|s| g.value(s).clone());
        let output = TrackOutput {
            frame: self.next_frame,
            bbox: b.bbox,
            bbox_conf: b.confidence,
            keypoints,
            memory_updated: false,
        };
        Ok((g.value(x).clone(), output, soft))
    }

    /// Tracks the next frame. With `given_box` the box is taken as known: it is reported,
    /// encoded into memory, and only the keypoint confidences gate the update.
    pub fn step(&mut self, image: &Tensor, given_box: Option<BBox>) -> Result<TrackOutput, TrackError> {
        let cfg = &self.model.cfg.encoding;
        let (features, mut out, soft) = self.predict(image)?;
        if let Some(b) = given_box {
            out.bbox = b;
            out.bbox_conf = 1.0;
        }
        let kp_confs: Vec<f64> = out.keypoints.iter().map(|k| k.confidence).collect();
        let box_usable = out.bbox.is_valid();
        if box_usable && self.policy.accepts(out.bbox_conf, &kp_confs) {
            let kp_state = match soft {
                Some(s) => KeypointState::Soft(s),
                None => keypoint_state_from_predictions(&out.keypoints, self.policy.tau_m, cfg),
            };
            let entry = MemoryEntry { features, state: FrameState::from_bbox(&out.bbox, kp_state, cfg) };
            out.memory_updated = self.memory.update(entry, out.frame, out.bbox_conf, &kp_confs, &self.policy);
        }
        self.next_frame += 1;
        Ok(out)
    }
}

/// Tracks one target through `frames` from `init_box` on frame 0. `boxes`, when given,
/// supplies a known box for every frame (frame 0 included).
pub fn run_frames(
    model: &StepModel,
    store: &ParamStore,
    frames: &[Tensor],
    init_box: BBox,
    init_keypoints: Option<&[Keypoint]>,
    boxes: Option<&[BBox]>,
    policy: UpdatePolicy,
) -> Result<Vec<TrackOutput>, TrackError> {
    let first = frames.first().ok_or(TrackError::EmptySequence)?;
    if let Some(b) = boxes {
        if b.len() != frames.len() {
            return Err(TrackError::BoxCount { expected: frames.len(), got: b.len() });
        }
    }
    let (mut tracker, out0) = Tracker::init(model, store, first, init_box, init_keypoints, policy)?;
    let mut outputs = Vec::with_capacity(frames.len());
    outputs.push(out0);
    for (i, image) in frames.iter().enumerate().skip(1) {
        outputs.push(tracker.step(image, boxes.map(|b| b[i]))?);
    }
    Ok(outputs)
}
