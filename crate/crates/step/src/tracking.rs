//! Tracking runs over datasets or frame directories, producing JSONL prediction records in
//! the input files' pixel coordinates.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use step_core::data::{BBox, Keypoint};
use step_core::network::StepModel;
use step_core::tracker::{run_frames, TrackOutput, UpdatePolicy};
use step_core::{ParamStore, Tensor};

use crate::dataset::{Letterbox, LoadedSequence};
use crate::error::{Error, Result};

/// One tracked target in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub sequence: String,
    pub target_id: u64,
    pub frame: usize,
    /// `[x1, y1, x2, y2]`.
    pub bbox: [f64; 4],
    pub bbox_conf: f64,
    /// `[x, y, confidence]` per keypoint.
    pub keypoints: Vec<[f64; 3]>,
    pub memory_updated: bool,
}

impl TrackRecord {
    fn from_output(sequence: &str, target_id: u64, out: &TrackOutput, lb: &Letterbox) -> Self {
        TrackRecord {
            sequence: sequence.to_string(),
            target_id,
            frame: out.frame,
            bbox: lb.box_to_original(&out.bbox).as_array(),
            bbox_conf: out.bbox_conf,
            keypoints: out
                .keypoints
                .iter()
                .map(|k| {
                    let (x, y) = lb.to_original(k.x, k.y);
                    [x, y, k.confidence]
                })
                .collect(),
            memory_updated: out.memory_updated,
        }
    }

    pub fn pred_bbox(&self) -> BBox {
        let [x1, y1, x2, y2] = self.bbox;
        BBox::new(x1, y1, x2, y2)
    }
}

/// A target to follow: its first-frame state and, optionally, known boxes for every frame.
/// Coordinates are in the input files' pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub target_id: u64,
    pub init_box: BBox,
    pub init_keypoints: Option<Vec<Keypoint>>,
    pub boxes: Option<Vec<BBox>>,
}

/// Tracks every target through one clip; targets run on separate threads and the records
/// come back ordered by target, then frame.
pub fn track_clip(
    model: &StepModel,
    store: &ParamStore,
    name: &str,
    frames: &[Tensor],
    letterbox: &[Letterbox],
    targets: &[TargetSpec],
    policy: UpdatePolicy,
) -> Result<Vec<TrackRecord>> {
    assert_eq!(frames.len(), letterbox.len());
    let lb0 = letterbox.first().copied().unwrap_or(Letterbox::IDENTITY);
    let run = |t: &TargetSpec| -> Result<Vec<TrackRecord>> {
        let init_box = lb0.box_to_working(&t.init_box);
        let kps: Option<Vec<Keypoint>> = t.init_keypoints.as_ref().map(|k| {
            k.iter()
                .map(|p| {
                    let (x, y) = lb0.to_working(p.x, p.y);
                    Keypoint::new(x, y, p.v)
                })
                .collect()
        });
        let boxes: Option<Vec<BBox>> = t.boxes.as_ref().map(|b| {
            b.iter().zip(letterbox.iter().chain(std::iter::repeat(&lb0))).map(|(b, lb)| lb.box_to_working(b)).collect()
        });
        let outs = run_frames(model, store, frames, init_box, kps.as_deref(), boxes.as_deref(), policy)?;
        Ok(outs.iter().map(|o| TrackRecord::from_output(name, t.target_id, o, &letterbox[o.frame])).collect())
    };
    let results: Vec<Result<Vec<TrackRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = targets.iter().map(|t| s.spawn(move || run(t))).collect();
        handles.into_iter().map(|h| h.join().expect("tracking thread panicked")).collect()
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Tracks the targets annotated in the first frame of each sequence. With `given_boxes`
/// every frame's annotated box is supplied to the tracker; with `gt_keypoints` the
/// first-frame keypoints are too.
pub fn track_dataset(
    model: &StepModel,
    store: &ParamStore,
    sequences: &[LoadedSequence],
    given_boxes: bool,
    gt_keypoints: bool,
    policy: UpdatePolicy,
) -> Result<Vec<TrackRecord>> {
    let mut out = Vec::new();
    for ls in sequences {
        let frames: Vec<Tensor> = ls.sequence.frames.iter().map(|f| f.image.clone()).collect();
        let Some(first) = ls.sequence.frames.first() else { continue };
        let lb0 = ls.letterbox[0];
        let mut targets = Vec::new();
        for a in &first.annotations {
            let original = |b: &BBox, i: usize| ls.letterbox[i].box_to_original(b);
            let boxes = if given_boxes {
                let mut v = Vec::with_capacity(frames.len());
                for (i, f) in ls.sequence.frames.iter().enumerate() {
                    let ann = f.annotation(a.target_id).ok_or_else(|| {
                        Error::Usage(format!("sequence {}: target {} has no box in frame {i}", ls.name, a.target_id))
                    })?;
                    v.push(original(&ann.bbox, i));
                }
                Some(v)
            } else {
                None
            };
            targets.push(TargetSpec {
                target_id: a.target_id,
                init_box: original(&a.bbox, 0),
                init_keypoints: gt_keypoints.then(|| {
                    a.keypoints
                        .iter()
                        .map(|k| {
                            let (x, y) = lb0.to_original(k.x, k.y);
                            Keypoint::new(x, y, k.v)
                        })
                        .collect()
                }),
                boxes,
            });
        }
        out.extend(track_clip(model, store, &ls.name, &frames, &ls.letterbox, &targets, policy)?);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads prediction records; malformed lines are schema errors naming the line.
pub fn read_records(path: &Path) -> Result<Vec<TrackRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Parses `x,y,w,h`.
pub fn parse_xywh(s: &str) -> Result<BBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Usage(format!("box {s:?} is not x,y,w,h")))?;
    match v[..] {
        [x, y, w, h] if v.iter().all(|c| c.is_finite()) && w > 0.0 && h > 0.0 => Ok(BBox::from_xywh(x, y, w, h)),
        _ => Err(Error::Usage(format!("box {s:?} is not x,y,w,h with positive size"))),
    }
}

/// Reads a boxes file: one array per target, each holding one `[x, y, w, h]` per frame.
pub fn read_boxes(path: &Path) -> Result<Vec<Vec<BBox>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<Vec<[f64; 4]>> = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(raw.into_iter().map(|t| t.into_iter().map(|[x, y, w, h]| BBox::from_xywh(x, y, w, h)).collect()).collect())
}
