//! Command-line interface: `synth`, `train`, `track` and `eval`.

use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use step_core::tracker::MemoryPolicy;

use crate::checkpoint::Checkpoint;
use crate::config::{describe_keys, write_echo, RunConfig};
use crate::dataset::{frame_files, load_dataset, load_image, save_dataset, DatasetFile, LoadedSequence};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, summary_table};
use crate::synth::{clips_from_dataset, toy_clips};
use crate::tracking::{parse_xywh, read_boxes, read_records, track_clip, track_dataset, write_records, TargetSpec};
use crate::training::{train_loop, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "step", version, about = "Joint single-target tracking and keypoint estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults are used for absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for training and synthesis (overrides train.seed and synth.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expand annotated images (or procedural toy frames) into synthetic clips.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Source dataset JSON.
        #[arg(long, conflicts_with = "toy", required_unless_present = "toy")]
        data: Option<PathBuf>,
        /// Generate this many toy source frames instead of reading a dataset.
        #[arg(long)]
        toy: Option<usize>,
        /// Output directory; receives `dataset.json` and PNG frames.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from one or more datasets.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Output directory for the log and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps in total.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Track targets and write JSONL predictions.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSON; every target annotated in a sequence's first frame is tracked.
        #[arg(long, conflicts_with = "frames", required_unless_present = "frames")]
        data: Option<PathBuf>,
        /// Initialize keypoints from the first frame's annotation (dataset input only).
        #[arg(long, requires = "data")]
        gt_keypoints: bool,
        /// Directory of frames, tracked in file-name order.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// First-frame box `x,y,w,h` of a target; repeat for several targets.
        #[arg(long = "init-bbox", value_name = "X,Y,W,H", requires = "frames")]
        init_bbox: Vec<String>,
        /// Supply a known box for every frame (top-down mode). With dataset input the
        /// annotated boxes are used; with `--frames` give a JSON file holding one list of
        /// per-frame `[x, y, w, h]` boxes per target.
        #[arg(long, value_name = "FILE", num_args = 0..=1)]
        boxes: Option<Option<PathBuf>>,
        /// Memory update policy (overrides tracker.policy).
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a dataset's annotations.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Report JSON path; the summary table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum PolicyArg {
    ConfRolling,
    FixedInitialPlusRecent,
    RollingRecent,
}

impl From<PolicyArg> for MemoryPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::ConfRolling => MemoryPolicy::ConfRolling,
            PolicyArg::FixedInitialPlusRecent => MemoryPolicy::FixedInitialPlusRecent,
            PolicyArg::RollingRecent => MemoryPolicy::RollingRecent,
        }
    }
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
            overrides.push(format!("synth.seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

/// Parses the process arguments; `--help` lists every configuration key.
pub fn parse() -> Cli {
    let keys = describe_keys();
    let cmd = Cli::command().after_long_help(keys.clone()).mut_subcommands(|s| s.after_long_help(keys.clone()));
    let matches = cmd.get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_all(paths: &[PathBuf], cfg: &RunConfig) -> Result<Vec<LoadedSequence>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_dataset(p, &cfg.model.encoding)?);
    }
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, data, toy, out } => {
            let cfg = common.load()?;
            let e = &cfg.model.encoding;
            let clips = match (data, toy) {
                (Some(d), _) => clips_from_dataset(&load_dataset(&d, e)?, &cfg.synth)?,
                (None, Some(n)) => toy_clips(n, e.num_keypoints, e.image_h(), e.image_w(), &cfg.synth)?,
                (None, None) => return Err(Error::Usage("synth needs --data or --toy".into())),
            };
            create_dir(&out)?;
            let named: Vec<_> = clips.iter().map(|(n, s)| (n.clone(), s)).collect();
            let path = save_dataset(&out, &named)?;
            write_echo(&path, &cfg)?;
            println!("wrote {} clips to {}", clips.len(), path.display());
        }
        Command::Train { common, data, out, resume, max_steps } => {
            let cfg = common.load()?;
            let sequences: Vec<_> = load_all(&data, &cfg)?.into_iter().map(|s| s.sequence).collect();
            let opts = TrainOptions { out_dir: out, resume, max_steps };
            let summary = train_loop(&cfg, &sequences, &opts, |r| {
                if r.step % 50 == 0 {
                    eprintln!(
                        "step {} epoch {} lr {:e} total {:.4} grad_norm {:.2}",
                        r.step, r.epoch, r.lr, r.total, r.grad_norm
                    );
                }
            })?;
            println!(
                "trained {} steps ({} epochs complete); checkpoint {}",
                summary.steps,
                summary.epochs_completed,
                summary.checkpoint.display()
            );
        }
        Command::Track { common, checkpoint, data, gt_keypoints, frames, init_bbox, boxes, policy, out } => {
            let mut cfg = common.load()?;
            if let Some(p) = policy {
                cfg.tracker.policy = p.into();
            }
            let (model, store, _) = Checkpoint::load(&checkpoint)?.restore(&cfg.model)?;
            let records = match (data, frames) {
                (Some(d), _) => {
                    if matches!(boxes, Some(Some(_))) {
                        return Err(Error::Usage(
                            "with --data, pass --boxes without a file to use the annotated boxes".into(),
                        ));
                    }
                    let given_boxes = boxes.is_some();
                    let seqs = load_dataset(&d, &cfg.model.encoding)?;
                    track_dataset(&model, &store, &seqs, given_boxes, gt_keypoints, cfg.tracker)?
                }
                (None, Some(dir)) => {
                    if init_bbox.is_empty() {
                        return Err(Error::Usage("--frames needs at least one --init-bbox".into()));
                    }
                    let e = &cfg.model.encoding;
                    let files = frame_files(&dir)?;
                    if files.is_empty() {
                        return Err(Error::Usage(format!("{} holds no PNG/PPM/PGM frames", dir.display())));
                    }
                    let (images, lbs): (Vec<_>, Vec<_>) = files
                        .iter()
                        .map(|f| load_image(f, e.image_h(), e.image_w()))
                        .collect::<Result<Vec<_>>>()?
                        .into_iter()
                        .unzip();
                    let mut given = match &boxes {
                        Some(Some(p)) => read_boxes(p)?.into_iter().map(Some).collect(),
                        Some(None) => return Err(Error::Usage("with --frames, --boxes needs a file".into())),
                        None => vec![None; init_bbox.len()],
                    };
                    if given.len() != init_bbox.len() {
                        return Err(Error::Usage(format!(
                            "{} --init-bbox values but {} box lists",
                            init_bbox.len(),
                            given.len()
                        )));
                    }
                    let targets = init_bbox
                        .iter()
                        .zip(given.drain(..))
                        .enumerate()
                        .map(|(i, (b, boxes))| {
                            Ok(TargetSpec {
                                target_id: i as u64 + 1,
                                init_box: parse_xywh(b)?,
                                init_keypoints: None,
                                boxes,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    track_clip(&model, &store, &name, &images, &lbs, &targets, cfg.tracker)?
                }
                (None, None) => return Err(Error::Usage("track needs --data or --frames".into())),
            };
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            write_records(&out, &records)?;
            write_echo(&out, &cfg)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Eval { common, data, predictions, out } => {
            let cfg = common.load()?;
            let file = DatasetFile::read(&data)?;
            let gt = file.ground_truth(&data, cfg.model.encoding.num_keypoints)?;
            let preds = read_records(&predictions)?;
            let report = evaluate_run(&preds, &gt, &cfg.metrics)?;
            print!("{}", summary_table(&report));
            if let Some(p) = out {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
                write_echo(&p, &cfg)?;
            }
        }
    }
    Ok(())
}
