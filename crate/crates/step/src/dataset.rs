//! Dataset interchange: COCO-style keypoint JSON plus 8-bit PNG/PPM frames, letterboxed to
//! the working resolution.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use step_core::data::{Annotation, BBox, Frame, Keypoint, Sequence, SequenceSource};
use step_core::encoding::EncodingConfig;
use step_core::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub track_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    /// Flat `[x, y, v] × k`.
    pub keypoints: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub name: String,
    pub image_ids: Vec<u64>,
    #[serde(default = "natural")]
    pub source: SequenceSource,
}

fn natural() -> SequenceSource {
    SequenceSource::Natural
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    /// Absent: every image is its own one-frame sequence.
    #[serde(default)]
    pub sequences: Vec<SequenceRecord>,
}

impl AnnotationRecord {
    /// Converts to an annotation with `k` keypoints, naming this record on failure.
    pub fn to_annotation(&self, k: usize) -> std::result::Result<Annotation, String> {
        if self.keypoints.len() != 3 * k {
            return Err(format!(
                "annotation {}: expected {} keypoint values ({} keypoints), found {}",
                self.id,
                3 * k,
                k,
                self.keypoints.len()
            ));
        }
        let mut keypoints = Vec::with_capacity(k);
        for t in self.keypoints.chunks(3) {
            let v = t[2];
            if !(v == 0.0 || v == 1.0 || v == 2.0) {
                return Err(format!("annotation {}: visibility flag {v} is not 0, 1 or 2", self.id));
            }
            keypoints.push(Keypoint::new(t[0], t[1], v as u8));
        }
        let [x, y, w, h] = self.bbox;
        let ann = Annotation { target_id: self.track_id, bbox: BBox::from_xywh(x, y, w, h), keypoints };
        ann.validate(k).map_err(|e| format!("annotation {}: {e}", self.id))?;
        Ok(ann)
    }

    pub fn from_annotation(id: u64, image_id: u64, a: &Annotation) -> Self {
        AnnotationRecord {
            id,
            image_id,
            track_id: a.target_id,
            bbox: a.bbox.to_xywh(),
            keypoints: a.keypoints.iter().flat_map(|k| [k.x, k.y, k.v as f64]).collect(),
        }
    }
}

impl DatasetFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("dataset serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Sequences as (name, ordered image ids), synthesizing one per image when none are listed.
    pub fn sequence_list(&self) -> Vec<SequenceRecord> {
        if !self.sequences.is_empty() {
            return self.sequences.clone();
        }
        self.images
            .iter()
            .map(|im| SequenceRecord {
                name: format!("image_{}", im.id),
                image_ids: vec![im.id],
                source: SequenceSource::Natural,
            })
            .collect()
    }

    /// Ground-truth annotations keyed by (sequence name, frame index, track id), in the
    /// file's own pixel coordinates.
    pub fn ground_truth(&self, path: &Path, k: usize) -> Result<BTreeMap<(String, usize, u64), Annotation>> {
        let mut by_image: HashMap<u64, Vec<&AnnotationRecord>> = HashMap::new();
        for a in &self.annotations {
            by_image.entry(a.image_id).or_default().push(a);
        }
        let mut out = BTreeMap::new();
        for seq in self.sequence_list() {
            for (i, id) in seq.image_ids.iter().enumerate() {
                for rec in by_image.get(id).into_iter().flatten() {
                    let ann = rec.to_annotation(k).map_err(|m| Error::parse(path, m))?;
                    out.insert((seq.name.clone(), i, rec.track_id), ann);
                }
            }
        }
        Ok(out)
    }
}

/// Scale-then-pad mapping between an image's own pixels and the working frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub sx: f64,
    pub sy: f64,
}

impl Letterbox {
    pub const IDENTITY: Letterbox = Letterbox { sx: 1.0, sy: 1.0 };

    pub fn to_working(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.sx, y * self.sy)
    }

    pub fn to_original(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.sx, y / self.sy)
    }

    pub fn box_to_working(&self, b: &BBox) -> BBox {
        b.scaled(self.sx, self.sy)
    }

    pub fn box_to_original(&self, b: &BBox) -> BBox {
        b.scaled(1.0 / self.sx, 1.0 / self.sy)
    }

    pub fn annotation_to_working(&self, a: &Annotation) -> Annotation {
        Annotation {
            target_id: a.target_id,
            bbox: self.box_to_working(&a.bbox),
            keypoints: a
                .keypoints
                .iter()
                .map(|k| {
                    let (x, y) = self.to_working(k.x, k.y);
                    Keypoint::new(x, y, k.v)
                })
                .collect(),
        }
    }
}

/// Loads an 8-bit image, resizes it to fit `height × width` keeping its aspect ratio and
/// pads the bottom and right with zeros.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<(Tensor, Letterbox)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(letterbox(&img.to_rgb8(), height, width))
}

pub fn letterbox(img: &RgbImage, height: usize, width: usize) -> (Tensor, Letterbox) {
    let (w0, h0) = (img.width() as f64, img.height() as f64);
    let s = (width as f64 / w0).min(height as f64 / h0);
    let nw = ((w0 * s).round() as u32).clamp(1, width as u32);
    let nh = ((h0 * s).round() as u32).clamp(1, height as u32);
    let resized;
    let src = if (nw, nh) == img.dimensions() {
        img
    } else {
        resized = image::imageops::resize(img, nw, nh, FilterType::Triangle);
        &resized
    };
    let mut t = Tensor::zeros(&[3, height, width]);
    let hw = height * width;
    let data = t.data_mut();
    for (x, y, px) in src.enumerate_pixels() {
        for c in 0..3 {
            data[c * hw + y as usize * width + x as usize] = px[c] as f64 / 255.0;
        }
    }
    (t, Letterbox { sx: nw as f64 / w0, sy: nh as f64 / h0 })
}

/// Quantizes a `3×H×W` tensor in `[0, 1]` to an 8-bit image.
pub fn to_rgb8(t: &Tensor) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let hw = h * w;
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (d[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    to_rgb8(t).save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// A sequence in working resolution with the per-frame mapping back to file pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSequence {
    pub name: String,
    pub sequence: Sequence,
    pub letterbox: Vec<Letterbox>,
}

fn dataset_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads every sequence of a dataset file, with `k` keypoints per annotation.
pub fn load_dataset(path: &Path, cfg: &EncodingConfig) -> Result<Vec<LoadedSequence>> {
    let file = DatasetFile::read(path)?;
    let k = cfg.num_keypoints;
    let images: HashMap<u64, &ImageRecord> = file.images.iter().map(|i| (i.id, i)).collect();
    let mut anns: HashMap<u64, Vec<Annotation>> = HashMap::new();
    for rec in &file.annotations {
        if !images.contains_key(&rec.image_id) {
            return Err(Error::parse(path, format!("annotation {}: unknown image id {}", rec.id, rec.image_id)));
        }
        let a = rec.to_annotation(k).map_err(|m| Error::parse(path, m))?;
        anns.entry(rec.image_id).or_default().push(a);
    }
    let dir = dataset_dir(path);
    let mut out = Vec::new();
    for seq in file.sequence_list() {
        let mut frames = Vec::with_capacity(seq.image_ids.len());
        let mut boxes = Vec::with_capacity(seq.image_ids.len());
        for id in &seq.image_ids {
            let rec = images
                .get(id)
                .ok_or_else(|| Error::parse(path, format!("sequence {}: unknown image id {id}", seq.name)))?;
            let (image, lb) = load_image(&dir.join(&rec.file_name), cfg.image_h(), cfg.image_w())?;
            let annotations =
                anns.get(id).map(|v| v.iter().map(|a| lb.annotation_to_working(a)).collect()).unwrap_or_default();
            frames.push(Frame::new(image, annotations)?);
            boxes.push(lb);
        }
        out.push(LoadedSequence {
            name: seq.name.clone(),
            sequence: Sequence { frames, source: seq.source },
            letterbox: boxes,
        });
    }
    Ok(out)
}

/// Writes sequences as `<dir>/<name>/<frame>.png` plus `<dir>/dataset.json`; returns the
/// dataset file path.
pub fn save_dataset(dir: &Path, sequences: &[(String, &Sequence)]) -> Result<PathBuf> {
    let mut file = DatasetFile::default();
    let (mut image_id, mut ann_id) = (1u64, 1u64);
    for (name, seq) in sequences {
        let seq_dir = dir.join(name);
        std::fs::create_dir_all(&seq_dir).map_err(|e| Error::io(&seq_dir, e))?;
        let mut ids = Vec::with_capacity(seq.frames.len());
        for (i, frame) in seq.frames.iter().enumerate() {
            let rel = format!("{name}/{i:04}.png");
            save_image(&dir.join(&rel), &frame.image)?;
            file.images.push(ImageRecord {
                id: image_id,
                file_name: rel,
                width: frame.width() as u32,
                height: frame.height() as u32,
            });
            for a in &frame.annotations {
                file.annotations.push(AnnotationRecord::from_annotation(ann_id, image_id, a));
                ann_id += 1;
            }
            ids.push(image_id);
            image_id += 1;
        }
        file.sequences.push(SequenceRecord { name: name.clone(), image_ids: ids, source: seq.source });
    }
    let path = dir.join("dataset.json");
    file.write(&path)?;
    Ok(path)
}

/// Image files of a directory (PNG, PPM, PGM), sorted by name.
pub fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm" | "pnm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k3() -> EncodingConfig {
        EncodingConfig { num_keypoints: 3, ..EncodingConfig::default() }
    }

    /// Equal up to the rounding of the xywh round trip.
    fn assert_close(a: &Annotation, b: &Annotation) {
        assert_eq!(a.target_id, b.target_id);
        for (x, y) in a.bbox.as_array().iter().zip(b.bbox.as_array()) {
            assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
        }
        assert_eq!(a.keypoints, b.keypoints);
    }

    fn write_minimal(dir: &Path, w: u32, h: u32) -> PathBuf {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        img.save(dir.join("a.png")).unwrap();
        let json = format!(
            r#"{{"images": [{{"id": 1, "file_name": "a.png", "width": {w}, "height": {h}}}],
                "annotations": [{{"id": 9, "image_id": 1, "track_id": 4, "bbox": [10, 20, 30, 40],
                                  "keypoints": [12, 22, 2, 15, 30, 1, 0, 0, 0]}}]}}"#
        );
        let p = dir.join("d.json");
        std::fs::write(&p, json).unwrap();
        p
    }

    #[test]
    fn minimal_file_loads_one_frame() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_minimal(dir.path(), 288, 288);
        let seqs = load_dataset(&p, &k3()).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].sequence.frames.len(), 1);
        let a = &seqs[0].sequence.frames[0].annotations[0];
        assert_eq!(a.bbox, BBox::new(10.0, 20.0, 40.0, 60.0));
        assert_eq!(a.target_id, 4);
        assert_eq!(a.keypoints.iter().map(|k| k.v).collect::<Vec<_>>(), vec![2, 1, 0]);
        let px = &seqs[0].sequence.frames[0].image;
        assert_eq!(px.at(&[0, 0, 5]), 5.0 / 255.0);
        assert_eq!(px.at(&[2, 3, 3]), 7.0 / 255.0);
    }

    #[test]
    fn non_square_images_are_letterboxed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_minimal(dir.path(), 576, 288);
        let seqs = load_dataset(&p, &k3()).unwrap();
        let f = &seqs[0].sequence.frames[0];
        assert_eq!(f.image.shape(), &[3, 288, 288]);
        assert_eq!(seqs[0].letterbox[0], Letterbox { sx: 0.5, sy: 0.5 });
        assert_eq!(f.annotations[0].bbox, BBox::new(5.0, 10.0, 20.0, 30.0));
        // padded rows below the resized content are zero
        assert_eq!(f.image.at(&[2, 200, 10]), 0.0);
        let lb = seqs[0].letterbox[0];
        assert_eq!(lb.box_to_original(&f.annotations[0].bbox), BBox::new(10.0, 20.0, 40.0, 60.0));
    }

    #[test]
    fn malformed_annotations_name_their_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_minimal(dir.path(), 288, 288);
        let e = load_dataset(&p, &EncodingConfig { num_keypoints: 4, ..k3() }).unwrap_err();
        assert!(e.to_string().contains("annotation 9"), "{e}");
        assert_eq!(e.exit_code(), 3);
        std::fs::write(&p, "{not json").unwrap();
        assert_eq!(load_dataset(&p, &k3()).unwrap_err().exit_code(), 3);
        assert_eq!(load_dataset(&dir.path().join("missing.json"), &k3()).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn save_then_load_preserves_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let frames = (0..3).map(|i| step_core::toy::toy_frame(i, 3, 288, 288)).collect();
        let seq = Sequence { frames, source: SequenceSource::Synthetic };
        let p = save_dataset(dir.path(), &[("clip".to_string(), &seq)]).unwrap();
        let back = load_dataset(&p, &k3()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].name, "clip");
        assert_eq!(back[0].sequence.source, SequenceSource::Synthetic);
        for (a, b) in seq.frames.iter().zip(&back[0].sequence.frames) {
            assert_close(&a.annotations[0], &b.annotations[0]);
            // pixels survive up to 8-bit quantization
            let err = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err <= 0.5 / 255.0 + 1e-12);
        }
        let gt = DatasetFile::read(&p).unwrap().ground_truth(&p, 3).unwrap();
        assert_eq!(gt.len(), 3);
        assert_close(&gt[&("clip".to_string(), 2, 1)], &seq.frames[2].annotations[0]);
    }

    #[test]
    fn frame_files_are_sorted_images() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["b.png", "a.ppm", "c.txt"] {
            let p = dir.path().join(n);
            if n.ends_with("txt") {
                std::fs::write(&p, "x").unwrap();
            } else {
                RgbImage::new(4, 4).save(&p).unwrap();
            }
        }
        let f = frame_files(dir.path()).unwrap();
        let names: Vec<_> = f.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["a.ppm", "b.png"]);
        let (t, lb) = load_image(&f[0], 288, 288).unwrap();
        assert_eq!(t.shape(), &[3, 288, 288]);
        assert_eq!(lb, Letterbox { sx: 72.0, sy: 72.0 });
    }
}
