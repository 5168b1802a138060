//! Annotated frames and sequences, synthetic sequence generation by smoothly interpolated
//! affine warps, and training-triplet sampling.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("annotation {id}: {reason}")]
    InvalidAnnotation { id: u64, reason: &'static str },
    #[error("expected {expected} keypoints, found {found}")]
    KeypointCount { expected: usize, found: usize },
    #[error("image must be 3×H×W, got {0:?}")]
    ImageShape(Vec<usize>),
    #[error("a sequence needs at least {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("no target is present in {0} or more frames")]
    NoTarget(usize),
    #[error("target {0} is not present in enough frames")]
    TargetAbsent(u64),
    #[error("could not sample a non-degenerate affine transform in {0} attempts")]
    DegenerateAffine(usize),
}

/// Visibility flag: 0 absent, 1 labelled but occluded, 2 visible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: u8) -> Self {
        Keypoint { x, y, v }
    }

    /// Occluded-but-labelled keypoints count as visible.
    pub fn is_visible(&self) -> bool {
        self.v > 0
    }
}

/// Axis-aligned box in `xyxy` pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        math::sqrt(self.width() * self.width() + self.height() * self.height())
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [(self.x1, self.y1), (self.x2, self.y1), (self.x2, self.y2), (self.x1, self.y2)]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Smallest box containing all points.
    pub fn hull(points: &[(f64, f64)]) -> BBox {
        let mut b = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            b.x1 = b.x1.min(x);
            b.y1 = b.y1.min(y);
            b.x2 = b.x2.max(x);
            b.y2 = b.y2.max(y);
        }
        b
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    /// Whether the box lies inside a `width × height` image.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

/// One target in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub target_id: u64,
    pub bbox: BBox,
    pub keypoints: Vec<Keypoint>,
}

impl Annotation {
    pub fn validate(&self, num_keypoints: usize) -> Result<(), DataError> {
        if !self.bbox.is_valid() {
            return Err(DataError::InvalidAnnotation {
                id: self.target_id,
                reason: "bounding box must satisfy x1 < x2 and y1 < y2",
            });
        }
        if self.keypoints.len() != num_keypoints {
            return Err(DataError::KeypointCount { expected: num_keypoints, found: self.keypoints.len() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

impl Frame {
    pub fn new(image: Tensor, annotations: Vec<Annotation>) -> Result<Self, DataError> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(DataError::ImageShape(image.shape().to_vec()));
        }
        Ok(Frame { image, annotations })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn annotation(&self, target_id: u64) -> Option<&Annotation> {
        self.annotations.iter().find(|a| a.target_id == target_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceSource {
    Natural,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub source: SequenceSource,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame indices in which `target_id` is annotated with a valid box.
    pub fn frames_with(&self, target_id: u64) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.annotation(target_id).is_some_and(|a| a.bbox.is_valid()))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn target_ids(&self) -> BTreeSet<u64> {
        self.frames.iter().flat_map(|f| f.annotations.iter().map(|a| a.target_id)).collect()
    }
}

/// Parameters of a similarity-plus-shear warp about the image centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// Radians, counter-clockwise in image coordinates.
    pub rotation: f64,
    pub scale: f64,
    /// Pixels.
    pub translate: (f64, f64),
    /// Radians, horizontal shear.
    pub shear: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { rotation: 0.0, scale: 1.0, translate: (0.0, 0.0), shear: 0.0 };

    pub fn lerp(&self, other: &AffineParams, t: f64) -> AffineParams {
        let l = |a: f64, b: f64| a + (b - a) * t;
        AffineParams {
            rotation: l(self.rotation, other.rotation),
            scale: l(self.scale, other.scale),
            translate: (l(self.translate.0, other.translate.0), l(self.translate.1, other.translate.1)),
            shear: l(self.shear, other.shear),
        }
    }

    /// Matrix form for an image of the given size: translate to the centre, scale, shear,
    /// rotate, translate back and shift by `translate`.
    pub fn matrix(&self, width: f64, height: f64) -> Affine2 {
        let (cx, cy) = (width / 2.0, height / 2.0);
        let (c, s) = (math::cos(self.rotation), math::sin(self.rotation));
        let sh = math::tan(self.shear);
        // R · Sh · S
        let a = self.scale * c;
        let b = self.scale * (c * sh - s);
        let d = self.scale * s;
        let e = self.scale * (s * sh + c);
        Affine2 {
            m: [[a, b, cx + self.translate.0 - a * cx - b * cy], [d, e, cy + self.translate.1 - d * cx - e * cy]],
        }
    }
}

/// 2×3 affine matrix acting on column vectors `(x, y, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.det();
        if det.abs() < 1e-12 {
            return None;
        }
        let m = &self.m;
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Some(Affine2 { m: [[a, b, -(a * m[0][2] + b * m[1][2])], [c, d, -(c * m[0][2] + d * m[1][2])]] })
    }
}

/// Closed ranges from which start and end warps are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineRanges {
    /// Radians.
    pub rotation: (f64, f64),
    pub scale: (f64, f64),
    /// Fraction of the image side.
    pub translate: (f64, f64),
    /// Radians.
    pub shear: (f64, f64),
}

impl Default for AffineRanges {
    fn default() -> Self {
        let deg = core::f64::consts::PI / 180.0;
        AffineRanges {
            rotation: (-15.0 * deg, 15.0 * deg),
            scale: (0.9, 1.1),
            translate: (-0.1, 0.1),
            shear: (-5.0 * deg, 5.0 * deg),
        }
    }
}

impl AffineRanges {
    pub fn identity() -> Self {
        AffineRanges { rotation: (0.0, 0.0), scale: (1.0, 1.0), translate: (0.0, 0.0), shear: (0.0, 0.0) }
    }

    fn draw(range: (f64, f64), rng: &mut impl Rng) -> f64 {
        if range.1 > range.0 {
            rng.gen_range(range.0..=range.1)
        } else {
            range.0
        }
    }

    pub fn sample(&self, width: f64, height: f64, rng: &mut impl Rng) -> AffineParams {
        AffineParams {
            rotation: Self::draw(self.rotation, rng),
            scale: Self::draw(self.scale, rng),
            translate: (Self::draw(self.translate, rng) * width, Self::draw(self.translate, rng) * height),
            shear: Self::draw(self.shear, rng),
        }
    }
}

pub const DEFAULT_SYNTH_FRAMES: usize = 15;
const MAX_AFFINE_ATTEMPTS: usize = 100;
const MIN_AFFINE_DET: f64 = 1e-6;

/// Bilinear sample of one channel plane at a continuous pixel position; zero outside.
fn bilinear(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x0 = math::floor(x);
    let y0 = math::floor(y);
    let (fx, fy) = (x - x0, y - y0);
    let px = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            plane[yi as usize * w + xi as usize]
        }
    };
    let top = px(x0, y0) * (1.0 - fx) + if fx > 0.0 { px(x0 + 1.0, y0) * fx } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bottom = px(x0, y0 + 1.0) * (1.0 - fx) + if fx > 0.0 { px(x0 + 1.0, y0 + 1.0) * fx } else { 0.0 };
    top * (1.0 - fy) + bottom * fy
}

/// Warps a `C×H×W` image: `out(p) = src(A⁻¹ p)` with bilinear sampling.
pub fn warp_image(image: &Tensor, affine: &Affine2) -> Option<Tensor> {
    let inv = affine.inverse()?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = Tensor::zeros(image.shape());
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = inv.apply(x as f64, y as f64);
                dst[y * w + x] = bilinear(plane, w, h, sx, sy);
            }
        }
    }
    Some(out)
}

/// Maps an annotation through `affine`: keypoints exactly, the box as the hull of its mapped
/// corners. Keypoints that leave the image become absent.
pub fn warp_annotation(ann: &Annotation, affine: &Affine2, width: f64, height: f64) -> Annotation {
    let keypoints = ann
        .keypoints
        .iter()
        .map(|k| {
            let (x, y) = affine.apply(k.x, k.y);
            let inside = x >= 0.0 && y >= 0.0 && x < width && y < height;
            Keypoint::new(x, y, if k.is_visible() && inside { k.v } else { 0 })
        })
        .collect();
    let corners: Vec<(f64, f64)> = ann.bbox.corners().iter().map(|&(x, y)| affine.apply(x, y)).collect();
    Annotation { target_id: ann.target_id, bbox: BBox::hull(&corners), keypoints }
}

fn sample_nondegenerate(
    ranges: &AffineRanges,
    width: f64,
    height: f64,
    rng: &mut impl Rng,
) -> Result<AffineParams, DataError> {
    for _ in 0..MAX_AFFINE_ATTEMPTS {
        let p = ranges.sample(width, height, rng);
        if p.matrix(width, height).det().abs() >= MIN_AFFINE_DET {
            return Ok(p);
        }
    }
    Err(DataError::DegenerateAffine(MAX_AFFINE_ATTEMPTS))
}

/// Builds an `n_frames` clip from a single annotated frame by interpolating between two
/// random warps.
pub fn synth_sequence(frame: &Frame, n_frames: usize, ranges: &AffineRanges, seed: u64) -> Result<Sequence, DataError> {
    if n_frames < 2 {
        return Err(DataError::TooShort { needed: 2, got: n_frames });
    }
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = sample_nondegenerate(ranges, w, h, &mut rng)?;
    let end = sample_nondegenerate(ranges, w, h, &mut rng)?;
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let t = i as f64 / (n_frames - 1) as f64;
        let affine = start.lerp(&end, t).matrix(w, h);
        if affine.det().abs() < MIN_AFFINE_DET {
            // interpolating between two valid warps can pass through a singular one
            return Err(DataError::DegenerateAffine(MAX_AFFINE_ATTEMPTS));
        }
        let image = warp_image(&frame.image, &affine).ok_or(DataError::DegenerateAffine(MAX_AFFINE_ATTEMPTS))?;
        let annotations = frame.annotations.iter().map(|a| warp_annotation(a, &affine, w, h)).collect();
        frames.push(Frame { image, annotations });
    }
    Ok(Sequence { frames, source: SequenceSource::Synthetic })
}

/// Indices of a training triplet within one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub target_id: u64,
    pub train: [usize; 2],
    pub test: usize,
}

/// Draws a target present in at least three frames, then three distinct frames showing it:
/// two for training and one for testing.
pub fn sample_triplet(seq: &Sequence, seed: u64) -> Result<Triplet, DataError> {
    if seq.len() < 3 {
        return Err(DataError::TooShort { needed: 3, got: seq.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<u64> = seq.target_ids().into_iter().filter(|&id| seq.frames_with(id).len() >= 3).collect();
    let &target_id = candidates.choose(&mut rng).ok_or(DataError::NoTarget(3))?;
    sample_triplet_for(seq, target_id, &mut rng)
}

pub fn sample_triplet_for(seq: &Sequence, target_id: u64, rng: &mut impl Rng) -> Result<Triplet, DataError> {
    let frames = seq.frames_with(target_id);
    if frames.len() < 3 {
        return Err(DataError::TargetAbsent(target_id));
    }
    let picked: Vec<usize> = frames.choose_multiple(rng, 3).copied().collect();
    Ok(Triplet { target_id, train: [picked[0], picked[1]], test: picked[2] })
}
