//! Command-line entry points. Every command returns a serializable report;
//! the binary prints it as JSON.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data_eval::{
    evaluate, generate_synthetic, load_dataset, save_dataset, Metrics, SyntheticConfig, DEFAULT_FRAME_SIZE,
};
use crate::error::{Error, Result};
use crate::geometry::{classify_spatial_relation, frame_diagonal, BoundingBox, RelationRules, SpatialRelation};
use crate::model::DimsProfile;
use crate::train::{
    full_model_gradcheck, ground_truths, predict, train, EpochLog, GradcheckReport, InstancePrediction, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "rha", version, about = "Relation-aware hierarchical attention for video QA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON config; writes a checkpoint and an epoch log.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of every parameter tensor of the model.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        /// Dimension profile: `reduced` or `paper`.
        #[arg(long, default_value = "reduced")]
        profile: DimsProfile,
        /// Use all-zero parameters instead of a random model.
        #[arg(long)]
        zero: bool,
    },
    /// Classify every ordered pair of boxes in a JSON file.
    Relate {
        #[arg(long)]
        boxes: PathBuf,
    },
    /// Write a synthetic dataset described by a JSON generator config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log: Option<PathBuf>,
    pub epochs: usize,
    pub last: Option<EpochLog>,
}

/// Loads the config, trains, and writes the checkpoint and the log (one JSON
/// object per epoch). `on_epoch` sees each entry as it is produced.
pub fn cmd_train(config: &Path, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainReport> {
    let mut tc: TrainConfig = read_json(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    tc.data = resolve(base, &tc.data);
    tc.checkpoint = resolve(base, &tc.checkpoint);
    tc.log = tc.log.as_deref().map(|p| resolve(base, p));
    tc.validate()?;
    let ds = load_dataset(&tc.data)?;

    let mut log_file = match &tc.log {
        Some(p) => Some((fs::File::create(p).map_err(|e| Error::io(p, e))?, p.clone())),
        None => None,
    };
    let mut write_err = None;
    let outcome = train(&tc, &ds, |entry| {
        if let Some((f, p)) = log_file.as_mut() {
            let line = serde_json::to_string(entry).expect("log entries serialize");
            if let Err(e) = writeln!(f, "{line}") {
                write_err.get_or_insert(Error::io(p.clone(), e));
            }
        }
        on_epoch(entry);
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    Checkpoint::new(&tc.model_config(), Some(&tc), &outcome.params).save(&tc.checkpoint)?;
    Ok(TrainReport {
        checkpoint: tc.checkpoint.clone(),
        log: tc.log.clone(),
        epochs: outcome.log.len(),
        last: outcome.log.last().copied(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub predictions: Vec<InstancePrediction>,
}

/// Deterministic evaluation of a checkpoint (dropout off).
pub fn cmd_eval(ckpt: &Path, data: &Path) -> Result<EvalReport> {
    let c = Checkpoint::load(ckpt)?;
    let params = c.params()?;
    let ds = load_dataset(data)?;
    let predictions = predict(&c.model, &params, &ds)?;
    let preds: Vec<_> = predictions.iter().map(|p| p.prediction).collect();
    let metrics = evaluate(&preds, &ground_truths(&ds)?)?;
    Ok(EvalReport { metrics, predictions })
}

pub fn cmd_gradcheck(profile: DimsProfile, seed: u64, zero: bool) -> Result<GradcheckReport> {
    full_model_gradcheck(profile, seed, zero)
}

/// Box file: either a bare list of `[x1, y1, x2, y2]` or an object with a
/// frame size and the list.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoxesFile {
    Framed {
        #[serde(default)]
        frame_size: Option<[f64; 2]>,
        boxes: Vec<BoundingBox>,
    },
    Bare(Vec<BoundingBox>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationEntry {
    pub i: usize,
    pub j: usize,
    /// Class id in `1..=11`, or `None` when the pair has no edge.
    pub class: Option<usize>,
    pub relation: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelateReport {
    pub frame_diagonal: f64,
    pub pairs: Vec<RelationEntry>,
}

pub fn relation_name(r: SpatialRelation) -> String {
    match r {
        SpatialRelation::Inside => "inside".into(),
        SpatialRelation::Cover => "cover".into(),
        SpatialRelation::Overlap => "overlap".into(),
        SpatialRelation::Direction(s) => format!("direction_{s}"),
    }
}

/// Relation of every ordered pair `(i, j)`, `i ≠ j`.
pub fn relate(boxes: &[BoundingBox], frame_size: [f64; 2]) -> Result<RelateReport> {
    let diag = frame_diagonal(frame_size[0], frame_size[1]);
    if !(diag.is_finite() && diag > 0.0) {
        return Err(Error::Config(format!("frame size {frame_size:?}")));
    }
    let rules = RelationRules::default();
    let mut pairs = Vec::new();
    for i in 0..boxes.len() {
        for j in 0..boxes.len() {
            if i == j {
                continue;
            }
            let rel = classify_spatial_relation(&boxes[i], &boxes[j], diag, &rules)?;
            pairs.push(RelationEntry {
                i,
                j,
                class: rel.map(SpatialRelation::class_id),
                relation: rel.map(relation_name),
            });
        }
    }
    Ok(RelateReport {
        frame_diagonal: diag,
        pairs,
    })
}

pub fn cmd_relate(path: &Path) -> Result<RelateReport> {
    let (frame_size, boxes) = match read_json::<BoxesFile>(path)? {
        BoxesFile::Framed { frame_size, boxes } => (frame_size.unwrap_or(DEFAULT_FRAME_SIZE), boxes),
        BoxesFile::Bare(boxes) => (DEFAULT_FRAME_SIZE, boxes),
    };
    relate(&boxes, frame_size)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthReport {
    pub manifest: PathBuf,
    pub instances: usize,
    pub probe_accuracy: f64,
}

pub fn cmd_synth(config: &Path, out: &Path) -> Result<SynthReport> {
    let cfg: SyntheticConfig = read_json(config)?;
    let syn = generate_synthetic(&cfg)?;
    let manifest = save_dataset(out, &syn.dataset)?;
    Ok(SynthReport {
        manifest,
        instances: syn.dataset.instances.len(),
        probe_accuracy: syn.probe_accuracy,
    })
}

/// Runs a parsed command, printing JSON lines to `out`. Returns whether the
/// command succeeded in its own terms (a failed gradient check is `false`).
pub fn run(cli: Cli, out: &mut impl Write) -> Result<bool> {
    fn emit(out: &mut impl Write, value: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
    }
    match cli.command {
        Command::Train { config } => {
            let mut failed = None;
            let report = cmd_train(&config, |entry| {
                if let Err(e) = emit(out, &serde_json::json!({ "epoch": entry })) {
                    failed.get_or_insert(e);
                }
            })?;
            if let Some(e) = failed {
                return Err(e);
            }
            emit(out, &serde_json::json!({ "train": report }))?;
            Ok(true)
        }
        Command::Eval { ckpt, data } => {
            emit(out, &cmd_eval(&ckpt, &data)?)?;
            Ok(true)
        }
        Command::Gradcheck { seed, profile, zero } => {
            let report = cmd_gradcheck(profile, seed, zero)?;
            emit(out, &report)?;
            Ok(report.passed)
        }
        Command::Relate { boxes } => {
            emit(out, &cmd_relate(&boxes)?)?;
            Ok(true)
        }
        Command::Synth { config, out: dir } => {
            emit(out, &cmd_synth(&config, &dir)?)?;
            Ok(true)
        }
    }
}
