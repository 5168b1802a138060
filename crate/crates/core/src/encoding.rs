//! Target-state maps on the feature grid, feature composition for train and test frames,
//! and decoding of predicted maps back to image coordinates.
//!
//! A feature cell `(jx, jy)` is centred on pixel `(⌊s/2⌋ + s·jx, ⌊s/2⌋ + s·jy)`. Offset maps
//! store `centre − coordinate`, so a coordinate is recovered as `centre − offset`.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, BBox, Keypoint};
use crate::math;
use crate::nn::Mlp2;
use crate::param::{Init, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, TensorError, Var};

type Result<T> = core::result::Result<T, TensorError>;

/// Cells whose Gaussian target reaches this value count as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodingConfig {
    /// Pixels per feature cell.
    pub stride: usize,
    pub num_keypoints: usize,
    /// Feature channels `n`.
    pub channels: usize,
    /// Gaussian width in cells.
    pub sigma: f64,
    pub feat_h: usize,
    pub feat_w: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig { stride: 16, num_keypoints: 17, channels: 64, sigma: 1.0, feat_h: 18, feat_w: 18 }
    }
}

impl EncodingConfig {
    pub fn image_h(&self) -> usize {
        self.stride * self.feat_h
    }

    pub fn image_w(&self) -> usize {
        self.stride * self.feat_w
    }

    pub fn cells(&self) -> usize {
        self.feat_h * self.feat_w
    }

    pub fn half(&self) -> f64 {
        (self.stride / 2) as f64
    }

    /// Pixel coordinates of a cell centre.
    pub fn cell_center(&self, jx: usize, jy: usize) -> (f64, f64) {
        (self.half() + (self.stride * jx) as f64, self.half() + (self.stride * jy) as f64)
    }

    /// Continuous grid position of a pixel coordinate.
    pub fn to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.stride as f64;
        ((x - self.half()) / s, (y - self.half()) / s)
    }

    pub fn validate(&self) -> core::result::Result<(), &'static str> {
        if self.stride == 0 {
            return Err("stride must be at least 1");
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err("sigma must be positive");
        }
        if self.num_keypoints == 0 || self.channels == 0 || self.feat_h == 0 || self.feat_w == 0 {
            return Err("keypoint count, channels and feature extents must be positive");
        }
        Ok(())
    }
}

/// Per-cell keypoint offsets, channels `(2i, 2i+1)` for keypoint `i`; absent keypoints give
/// zero channels.
pub fn keypoint_offset_map(keypoints: &[Keypoint], cfg: &EncodingConfig) -> Tensor {
    let (h, w) = (cfg.feat_h, cfg.feat_w);
    let mut out = Tensor::zeros(&[2 * keypoints.len(), h, w]);
    let data = out.data_mut();
    for (i, kp) in keypoints.iter().enumerate().filter(|(_, k)| k.is_visible()) {
        for jy in 0..h {
            for jx in 0..w {
                let (cx, cy) = cfg.cell_center(jx, jy);
                data[(2 * i) * h * w + jy * w + jx] = cx - kp.x;
                data[(2 * i + 1) * h * w + jy * w + jx] = cy - kp.y;
            }
        }
    }
    out
}

/// Per-cell offsets to the left, top, right and bottom box edges.
pub fn bbox_offset_map(bbox: &BBox, cfg: &EncodingConfig) -> Tensor {
    let (h, w) = (cfg.feat_h, cfg.feat_w);
    let mut out = Tensor::zeros(&[4, h, w]);
    let data = out.data_mut();
    for jy in 0..h {
        for jx in 0..w {
            let (cx, cy) = cfg.cell_center(jx, jy);
            let o = jy * w + jx;
            data[o] = cx - bbox.x1;
            data[h * w + o] = cy - bbox.y1;
            data[2 * h * w + o] = cx - bbox.x2;
            data[3 * h * w + o] = cy - bbox.y2;
        }
    }
    out
}

/// One Gaussian channel per centre `(x, y, active)`, in pixel coordinates.
pub fn gaussian_map(centers: &[(f64, f64, bool)], cfg: &EncodingConfig) -> Tensor {
    let (h, w) = (cfg.feat_h, cfg.feat_w);
    let mut out = Tensor::zeros(&[centers.len(), h, w]);
    let denom = 2.0 * cfg.sigma * cfg.sigma;
    let data = out.data_mut();
    for (c, &(x, y, active)) in centers.iter().enumerate() {
        if !active {
            continue;
        }
        let (gx, gy) = cfg.to_grid(x, y);
        for jy in 0..h {
            for jx in 0..w {
                let d2 = (jx as f64 - gx) * (jx as f64 - gx) + (jy as f64 - gy) * (jy as f64 - gy);
                data[c * h * w + jy * w + jx] = math::exp(-d2 / denom);
            }
        }
    }
    out
}

/// Gaussian centres of the visible keypoints; hidden ones stay in place, inactive.
pub fn keypoint_centers(keypoints: &[Keypoint]) -> Vec<(f64, f64, bool)> {
    keypoints.iter().map(|k| (k.x, k.y, k.is_visible())).collect()
}

/// The five encoded maps of one target in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStateMaps {
    pub bbox_om: Tensor,
    pub bbox_gm: Tensor,
    pub kp_om: Tensor,
    pub kp_gm: Tensor,
    /// Keypoints of every annotated object, combined by elementwise maximum.
    pub kp_gmsp: Tensor,
    pub visible: Vec<bool>,
}

impl TargetStateMaps {
    /// Encodes `target`; `all` lists every annotation in the frame (the target included) and
    /// feeds the all-object soft-map target.
    pub fn new(target: &Annotation, all: &[Annotation], cfg: &EncodingConfig) -> Self {
        let (cx, cy) = target.bbox.center();
        let kp_gm = gaussian_map(&keypoint_centers(&target.keypoints), cfg);
        let mut kp_gmsp = kp_gm.clone();
        for other in all {
            let m = gaussian_map(&keypoint_centers(&other.keypoints), cfg);
            for (a, b) in kp_gmsp.data_mut().iter_mut().zip(m.data()) {
                *a = a.max(*b);
            }
        }
        TargetStateMaps {
            bbox_om: bbox_offset_map(&target.bbox, cfg),
            bbox_gm: gaussian_map(&[(cx, cy, true)], cfg),
            kp_om: keypoint_offset_map(&target.keypoints, cfg),
            kp_gm,
            kp_gmsp,
            visible: target.keypoints.iter().map(|k| k.is_visible()).collect(),
        }
    }
}

/// How a train frame's keypoint state enters its features.
#[derive(Debug, Clone, PartialEq)]
pub enum KeypointState {
    /// Explicit offset and Gaussian maps (`2k×H×W`, `k×H×W`).
    Maps { om: Tensor, gm: Tensor },
    /// Soft all-object map `k×H×W` predicted from the frame's features.
    Soft(Tensor),
    /// No keypoint information.
    Unknown,
}

/// Target state of one memory or train frame, ready for composition.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameState {
    pub bbox_om: Tensor,
    pub bbox_gm: Tensor,
    pub keypoints: KeypointState,
}

impl FrameState {
    pub fn from_bbox(bbox: &BBox, keypoints: KeypointState, cfg: &EncodingConfig) -> Self {
        let (cx, cy) = bbox.center();
        FrameState { bbox_om: bbox_offset_map(bbox, cfg), bbox_gm: gaussian_map(&[(cx, cy, true)], cfg), keypoints }
    }

    pub fn from_maps(maps: &TargetStateMaps) -> Self {
        FrameState {
            bbox_om: maps.bbox_om.clone(),
            bbox_gm: maps.bbox_gm.clone(),
            keypoints: KeypointState::Maps { om: maps.kp_om.clone(), gm: maps.kp_gm.clone() },
        }
    }
}

/// Which embedding terms exist; absent terms have no parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingFlags {
    pub phi_loc: bool,
    pub phi_kp: bool,
    pub phi_test: bool,
    pub x_test: bool,
    /// Keypoint offsets enter through an MLP (explicit keypoint maps).
    pub psi_kp: bool,
}

/// Learned embeddings that lift target-state maps into feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub phi_loc: Option<ParamId>,
    pub phi_kp: Option<ParamId>,
    pub phi_test: Option<ParamId>,
    pub psi_b: Mlp2,
    pub psi_kp: Option<Mlp2>,
    pub use_x_test: bool,
    pub cfg: EncodingConfig,
}

impl EmbeddingSet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &EncodingConfig,
        flags: EmbeddingFlags,
    ) -> Self {
        let (n, k) = (cfg.channels, cfg.num_keypoints);
        let emb = Init::Normal { std: 0.1 };
        EmbeddingSet {
            phi_loc: flags.phi_loc.then(|| store.init(format!("{name}.phi_loc"), &[1, n], emb, rng)),
            phi_kp: flags.phi_kp.then(|| store.init(format!("{name}.phi_kp"), &[k, n], emb, rng)),
            phi_test: flags.phi_test.then(|| store.init(format!("{name}.phi_test"), &[n], emb, rng)),
            psi_b: Mlp2::new(store, rng, &format!("{name}.psi_b"), [4, n, n]),
            psi_kp: flags.psi_kp.then(|| Mlp2::new(store, rng, &format!("{name}.psi_kp"), [2 * k, n, n])),
            use_x_test: flags.x_test,
            cfg: *cfg,
        }
    }

    /// Applies a per-cell MLP to an offset map after dividing by the image height.
    fn lift_offsets(&self, g: &mut Graph, store: &ParamStore, mlp: &Mlp2, om: &Tensor) -> Result<Var> {
        let cells = self.cfg.cells();
        let scaled = Tensor::from_fn(&[om.shape()[0], cells], |i| om.data()[i] / self.cfg.image_h() as f64);
        let x = g.constant(scaled);
        mlp.cols(g, store, x)
    }

    /// `Σ_c rows[c] · map[c]` per cell: `[C×n]ᵀ · [C×HW] → [n×HW]`.
    fn weighted_rows(&self, g: &mut Graph, store: &ParamStore, rows: ParamId, map: &Tensor) -> Result<Var> {
        let r = g.param(store, rows);
        let m = g.constant(map.clone().reshape(&[map.shape()[0], self.cfg.cells()])?);
        g.matmul_t(r, m, true, false)
    }

    /// Training-frame features: `X` plus embedded box offsets and box centre map, plus either
    /// embedded keypoint maps or the soft keypoint map.
    pub fn compose_train(&self, g: &mut Graph, store: &ParamStore, x: Var, state: &FrameState) -> Result<Var> {
        let (n, h, w) = (self.cfg.channels, self.cfg.feat_h, self.cfg.feat_w);
        if g.shape(x) != [n, h, w] {
            return Err(TensorError::mismatch("compose_train", g.shape(x), &[n, h, w]));
        }
        let check = |t: &Tensor, c: usize| -> Result<()> {
            if t.shape() != [c, h, w] {
                return Err(TensorError::mismatch("compose_train", t.shape(), &[c, h, w]));
            }
            Ok(())
        };
        let k = self.cfg.num_keypoints;
        check(&state.bbox_om, 4)?;
        check(&state.bbox_gm, 1)?;
        let mut terms = Vec::with_capacity(5);
        terms.push(self.lift_offsets(g, store, &self.psi_b, &state.bbox_om)?);
        if let Some(phi) = self.phi_loc {
            terms.push(self.weighted_rows(g, store, phi, &state.bbox_gm)?);
        }
        match &state.keypoints {
            KeypointState::Maps { om, gm } => {
                check(om, 2 * k)?;
                check(gm, k)?;
                let psi = self.psi_kp.as_ref().ok_or_else(|| {
                    TensorError::dim("compose_train", "explicit keypoint maps need the keypoint offset embedding")
                })?;
                terms.push(self.lift_offsets(g, store, psi, om)?);
                if let Some(phi) = self.phi_kp {
                    terms.push(self.weighted_rows(g, store, phi, gm)?);
                }
            }
            KeypointState::Soft(map) => {
                check(map, k)?;
                if let Some(phi) = self.phi_kp {
                    terms.push(self.weighted_rows(g, store, phi, map)?);
                }
            }
            KeypointState::Unknown => {}
        }
        let sum = g.add_all(&terms)?;
        let sum = g.reshape(sum, &[n, h, w])?;
        g.add(x, sum)
    }

    /// Test-frame features: `X_test` with `φ_test` added at every cell.
    pub fn compose_test(&self, g: &mut Graph, store: &ParamStore, x_test: Var) -> Result<Var> {
        let x = if self.use_x_test { x_test } else { g.constant(Tensor::zeros(g.shape(x_test))) };
        match self.phi_test {
            Some(phi) => {
                let p = g.param(store, phi);
                g.bias_first(x, p)
            }
            None => Ok(x),
        }
    }

    pub fn describe(&self) -> alloc::string::String {
        format!(
            "phi_loc={} phi_kp={} phi_test={} psi_kp={} x_test={}",
            self.phi_loc.is_some(),
            self.phi_kp.is_some(),
            self.phi_test.is_some(),
            self.psi_kp.is_some(),
            self.use_x_test
        )
    }
}

/// Row-major index and value of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodedKeypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Peak of each score channel, located by the offset stored at the peak cell.
pub fn decode_keypoints(kp_gm: &Tensor, kp_om: &Tensor, cfg: &EncodingConfig) -> Vec<DecodedKeypoint> {
    let (h, w) = (cfg.feat_h, cfg.feat_w);
    let hw = h * w;
    (0..kp_gm.shape()[0])
        .map(|i| {
            let (j, conf) = argmax(&kp_gm.data()[i * hw..(i + 1) * hw]);
            let (cx, cy) = cfg.cell_center(j % w, j / w);
            DecodedKeypoint {
                x: cx - kp_om.data()[2 * i * hw + j],
                y: cy - kp_om.data()[(2 * i + 1) * hw + j],
                confidence: conf,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodedBox {
    pub bbox: BBox,
    pub confidence: f64,
    pub valid: bool,
}

/// Box read from the LTRB offsets at the score peak; inverted boxes get confidence 0.
pub fn decode_bbox(bbox_gm: &Tensor, bbox_om: &Tensor, cfg: &EncodingConfig) -> DecodedBox {
    let (h, w) = (cfg.feat_h, cfg.feat_w);
    let hw = h * w;
    let (j, conf) = argmax(&bbox_gm.data()[..hw]);
    let (cx, cy) = cfg.cell_center(j % w, j / w);
    let o = |c: usize| bbox_om.data()[c * hw + j];
    let bbox = BBox::new(cx - o(0), cy - o(1), cx - o(2), cy - o(3));
    let valid = bbox.x1 < bbox.x2 && bbox.y1 < bbox.y2;
    DecodedBox { bbox, confidence: if valid { conf } else { 0.0 }, valid }
}

/// Rebuilds explicit keypoint maps from decoded keypoints; those at or below `min_conf` are
/// treated as absent.
pub fn keypoint_state_from_predictions(kps: &[DecodedKeypoint], min_conf: f64, cfg: &EncodingConfig) -> KeypointState {
    let kp: Vec<Keypoint> =
        kps.iter().map(|k| Keypoint::new(k.x, k.y, if k.confidence > min_conf { 2 } else { 0 })).collect();
    KeypointState::Maps { om: keypoint_offset_map(&kp, cfg), gm: gaussian_map(&keypoint_centers(&kp), cfg) }
}
