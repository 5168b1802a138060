//! Epoch loop around `train_step`: triplet sampling, learning-rate schedule, JSONL logging
//! and checkpoints.
//!
//! An epoch visits every usable sequence in order, `samples_per_sequence` times each. The
//! triplet of each visit is seeded from (seed, epoch, sequence, sample), so a run resumed
//! from any checkpoint replays exactly the steps an uninterrupted run would take.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use step_core::data::{sample_triplet, DataError, Sequence};
use step_core::network::StepModel;
use step_core::train::{train_step, AdamState, StepReport};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::{RunConfig, CONFIG_VERSION};
use crate::error::{Error, Result};

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub cls_box: f64,
    pub giou: f64,
    pub cls_kp: f64,
    pub hom: f64,
    pub gmsp: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl LogRecord {
    fn new(step: u64, epoch: usize, lr: f64, r: &StepReport) -> Self {
        LogRecord {
            step,
            epoch,
            lr,
            cls_box: r.loss.cls_box,
            giou: r.loss.giou,
            cls_kp: r.loss.cls_kp,
            hom: r.loss.hom,
            gmsp: r.loss.gmsp,
            total: r.loss.total,
            grad_norm: r.grad_norm,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Receives `log.jsonl`, `epoch_NNNN.ckpt`, `latest.ckpt` and the config echo.
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total; `latest.ckpt` is written at the stop.
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs_completed: usize,
    pub last: Option<LogRecord>,
    pub checkpoint: PathBuf,
}

/// Mixes the run seed with a visit's coordinates (SplitMix64 finalizer per component).
pub fn visit_seed(seed: u64, epoch: usize, sequence: usize, sample: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    [epoch as u64, sequence as u64, sample as u64].iter().fold(mix(seed), |h, &c| mix(h ^ c))
}

/// Indices of sequences that contain a target visible in at least three frames.
pub fn usable_sequences(sequences: &[Sequence]) -> Vec<usize> {
    sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| !matches!(sample_triplet(s, 0), Err(DataError::TooShort { .. } | DataError::NoTarget(_))))
        .map(|(i, _)| i)
        .collect()
}

pub fn train_loop(
    cfg: &RunConfig,
    sequences: &[Sequence],
    opts: &TrainOptions,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<TrainSummary> {
    let tc = &cfg.train;
    let usable = usable_sequences(sequences);
    if usable.is_empty() {
        return Err(Error::Usage("no training sequence has a target in three or more frames".into()));
    }
    let per_epoch = (usable.len() * tc.samples_per_sequence) as u64;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let latest = opts.out_dir.join("latest.ckpt");
    let log_path = opts.out_dir.join("log.jsonl");

    let (model, mut store, mut opt) = match &opts.resume {
        Some(p) => Checkpoint::load(p)?.restore(&cfg.model)?,
        None => {
            let (m, s) = StepModel::new(&cfg.model, tc.seed).map_err(|m| Error::Usage(m.to_string()))?;
            let o = AdamState::new(&s);
            (m, s, o)
        }
    };
    let mut step = opt.step;
    let mut log = open_log(&log_path, opts.resume.is_some().then_some(step))?;
    crate::config::write_echo(&latest, cfg)?;

    let total_steps = per_epoch * tc.epochs as u64;
    let stop = opts.max_steps.map_or(total_steps, |m| m.min(total_steps));
    let mut last = None;
    let save = |path: &Path, store: &step_core::ParamStore, opt: &AdamState, epoch: usize| {
        let header = CheckpointHeader {
            config_version: CONFIG_VERSION,
            model: cfg.model.clone(),
            epoch,
            step: opt.step,
            seed: tc.seed,
        };
        Checkpoint::capture(header, store, opt).save(path)
    };
    while step < stop {
        let epoch = (step / per_epoch) as usize + 1;
        let within = (step % per_epoch) as usize;
        let (si, sample) = (within / tc.samples_per_sequence, within % tc.samples_per_sequence);
        let seq = &sequences[usable[si]];
        let triplet = sample_triplet(seq, visit_seed(tc.seed, epoch, usable[si], sample))?;
        let lr = tc.lr_at_epoch(epoch);
        let report = train_step(&model, &mut store, &mut opt, seq, &triplet, &cfg.loss, tc, lr)?;
        step += 1;
        let rec = LogRecord::new(step, epoch, lr, &report);
        writeln!(log, "{}", serde_json::to_string(&rec).expect("log record serializes"))
            .map_err(|e| Error::io(&log_path, e))?;
        on_step(&rec);
        last = Some(rec);
        if step % per_epoch == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save(&opts.out_dir.join(format!("epoch_{epoch:04}.ckpt")), &store, &opt, epoch)?;
            save(&latest, &store, &opt, epoch)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let completed = (step / per_epoch) as usize;
    if step % per_epoch != 0 || step == 0 {
        save(&latest, &store, &opt, completed)?;
    }
    Ok(TrainSummary { steps: step, epochs_completed: completed, last, checkpoint: latest })
}

/// Opens the log for appending. On resume, records after `keep_through` are dropped so the
/// log matches the checkpoint.
fn open_log(path: &Path, keep_through: Option<u64>) -> Result<std::io::BufWriter<std::fs::File>> {
    let kept = match keep_through {
        Some(limit) if path.exists() => {
            let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let mut kept = String::new();
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                match serde_json::from_str::<LogRecord>(&line) {
                    Ok(r) if r.step <= limit => {
                        kept.push_str(&line);
                        kept.push('\n');
                    }
                    _ => break,
                }
            }
            kept
        }
        _ => String::new(),
    };
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    let f = std::fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().map(|l| serde_json::from_str(l).map_err(|e| Error::parse(path, e.to_string()))).collect()
}
