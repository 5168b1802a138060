//! Procedural annotated frames: a coloured ellipse with k marked keypoints over a smooth
//! textured background. Used to build small synthetic datasets for smoke training.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Annotation, BBox, Frame, Keypoint};
use crate::math::{cos, sin, sqrt};
use crate::tensor::Tensor;

const KEYPOINT_RADIUS: f64 = 5.0;

/// RGB of a fully saturated hue in `[0, 1)`.
fn hue(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// A `height × width` frame with one target (id 1) carrying `k` visible keypoints.
pub fn toy_frame(seed: u64, k: usize, height: usize, width: usize) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);
    let side = hf.min(wf);

    // background: three random plane waves per channel
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            let theta = rng.gen_range(0.0..core::f64::consts::TAU);
            let freq = rng.gen_range(2.0..8.0) / side * core::f64::consts::TAU;
            [
                freq * cos(theta),
                freq * sin(theta),
                rng.gen_range(0.0..core::f64::consts::TAU),
                rng.gen_range(0.05..0.15),
            ]
        })
        .collect();
    let base: [f64; 3] = [rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6)];

    let a = rng.gen_range(0.16..0.24) * side;
    let b = rng.gen_range(0.12..0.2) * side;
    let rot = rng.gen_range(0.0..core::f64::consts::PI);
    let cx = rng.gen_range(0.35..0.65) * wf;
    let cy = rng.gen_range(0.35..0.65) * hf;
    let body = hue(rng.gen_range(0.0..1.0)).map(|c| 0.15 + 0.5 * c);
    let (cr, sr) = (cos(rot), sin(rot));
    let to_image = |u: f64, v: f64| (cx + u * cr - v * sr, cy + u * sr + v * cr);

    let phase = rng.gen_range(0.0..core::f64::consts::TAU);
    let keypoints: Vec<Keypoint> = (0..k)
        .map(|i| {
            let t = phase + core::f64::consts::TAU * i as f64 / k as f64;
            let r = if i % 2 == 0 { 0.7 } else { 0.4 };
            let (x, y) = to_image(r * a * cos(t), r * b * sin(t));
            Keypoint::new(x, y, 2)
        })
        .collect();
    let colours: Vec<[f64; 3]> = (0..k).map(|i| hue(i as f64 / k as f64)).collect();

    let mut image = Tensor::zeros(&[3, height, width]);
    let hw = height * width;
    let data = image.data_mut();
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = base;
            for (c, v) in rgb.iter_mut().enumerate() {
                for w in &waves[3 * c..3 * c + 3] {
                    *v += w[3] * sin(w[0] * px + w[1] * py + w[2]);
                }
            }
            let (dx, dy) = (px - cx, py - cy);
            let (u, v) = (dx * cr + dy * sr, -dx * sr + dy * cr);
            if (u / a) * (u / a) + (v / b) * (v / b) <= 1.0 {
                rgb = body;
            }
            for (kp, col) in keypoints.iter().zip(&colours) {
                let (ex, ey) = (px - kp.x, py - kp.y);
                if ex * ex + ey * ey <= KEYPOINT_RADIUS * KEYPOINT_RADIUS {
                    rgb = *col;
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                data[c * hw + y * width + x] = v.clamp(0.0, 1.0);
            }
        }
    }

    // tight box of the rotated ellipse
    let hx = sqrt(a * a * cr * cr + b * b * sr * sr);
    let hy = sqrt(a * a * sr * sr + b * b * cr * cr);
    let ann = Annotation { target_id: 1, bbox: BBox::new(cx - hx, cy - hy, cx + hx, cy + hy), keypoints };
    Frame::new(image, vec![ann]).expect("toy frames are 3×H×W")
}
