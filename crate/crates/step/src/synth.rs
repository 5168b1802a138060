//! Synthetic clip generation from annotated still images or procedural toy frames.

use step_core::data::{synth_sequence, Frame, Sequence};
use step_core::toy::toy_frame;

use crate::config::SynthConfig;
use crate::dataset::LoadedSequence;
use crate::error::Result;
use crate::training::visit_seed;

/// `per_image` clips from every annotated frame, named `<sequence>_f<frame>_c<clip>`.
pub fn clips_from_dataset(sequences: &[LoadedSequence], cfg: &SynthConfig) -> Result<Vec<(String, Sequence)>> {
    let mut out = Vec::new();
    for (si, ls) in sequences.iter().enumerate() {
        for (fi, frame) in ls.sequence.frames.iter().enumerate() {
            if frame.annotations.is_empty() {
                continue;
            }
            for c in 0..cfg.per_image {
                let seed = visit_seed(cfg.seed, si, fi, c);
                out.push((format!("{}_f{fi}_c{c}", ls.name), synth_sequence(frame, cfg.n_frames, &cfg.ranges, seed)?));
            }
        }
    }
    Ok(out)
}

/// `count` toy frames with `k` keypoints, each expanded into `per_image` clips.
pub fn toy_clips(
    count: usize,
    k: usize,
    height: usize,
    width: usize,
    cfg: &SynthConfig,
) -> Result<Vec<(String, Sequence)>> {
    let mut out = Vec::new();
    for i in 0..count {
        let frame: Frame = toy_frame(visit_seed(cfg.seed, 0, i, usize::MAX), k, height, width);
        for c in 0..cfg.per_image {
            let seed = visit_seed(cfg.seed, 1, i, c);
            out.push((format!("toy{i:03}_c{c}"), synth_sequence(&frame, cfg.n_frames, &cfg.ranges, seed)?));
        }
    }
    Ok(out)
}
