//! The operations behind each command-line subcommand.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::ablation::{run_ablation_suite, AblationGrid, AblationReport};
use crate::checkpoint::{load_checkpoint, save_checkpoint, sidecar};
use crate::config::{Ablation, TrainConfig};
use crate::dataset::manifest::manifest_dir;
use crate::dataset::synthetic::{generate_corpus, write_corpus, GeneratorConfig};
use crate::dataset::{load_manifest, load_motion_bank, load_samples, split_with, MotionBank, SplitName};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RetrievalResult};
use crate::train::{train, EpochLog};

/// Generates a synthetic corpus under `out`; returns the manifest path.
pub fn gen_data(config: &Path, out: &Path) -> Result<PathBuf> {
    let cfg = GeneratorConfig::load(config)?;
    let videos = generate_corpus(&cfg)?;
    write_corpus(out, &videos, cfg.png)
}

fn motion_bank(cfg: &TrainConfig, manifest: &Path) -> Result<MotionBank> {
    match &cfg.motion_features {
        Some(f) => load_motion_bank(&manifest_dir(manifest).join(f)),
        None => Ok(MotionBank::new()),
    }
}

/// Trains on the manifest's training split and writes a checkpoint.
pub fn train_command(config: &Path, manifest: &Path, out: &Path, log: &mut dyn Write) -> Result<Vec<EpochLog>> {
    let cfg = TrainConfig::load(config)?;
    train_with_config(&cfg, manifest, out, log)
}

pub fn train_with_config(cfg: &TrainConfig, manifest: &Path, out: &Path, log: &mut dyn Write) -> Result<Vec<EpochLog>> {
    let entries = load_manifest(manifest)?;
    let split = split_with(&entries, &cfg.split)?;
    let chosen = split.select(&entries, SplitName::Train);
    if chosen.is_empty() {
        return Err(Error::config("the training split is empty"));
    }
    let samples = load_samples(&chosen, manifest_dir(manifest), cfg.num_frames)?;
    let motion = motion_bank(cfg, manifest)?;
    let outcome = train(cfg, &samples, &motion, |e| {
        let _ = writeln!(log, "epoch {:>4}  loss {:.6}  batches {}", e.epoch, e.mean_loss, e.batches);
    })?;
    save_checkpoint(out, cfg, &outcome.model)?;
    Ok(outcome.log)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub split: String,
    pub ablation: Ablation,
    pub num_frames: usize,
    pub queries: usize,
    pub query_protocol: &'static str,
    pub result: RetrievalResult,
}

const QUERY_PROTOCOL: &str = "each caption queries the gallery of unique videos";

impl EvalRecord {
    pub fn to_table(&self) -> String {
        let r = &self.result;
        let mut out = String::new();
        let _ = writeln!(out, "# {QUERY_PROTOCOL}");
        let _ = writeln!(
            out,
            "split {}  ablation {}  frames {}  gallery {}  queries {}",
            self.split, self.ablation, self.num_frames, r.gallery_size, self.queries
        );
        let _ = writeln!(out, "{:>8}{:>8}{:>8}{:>8}{:>8}", "R@1", "R@5", "R@10", "R@50", "MdR");
        let _ = writeln!(
            out,
            "{:>8.2}{:>8.2}{:>8.2}{:>8.2}{:>8.1}",
            r.r1, r.r5, r.r10, r.r50, r.median_rank
        );
        out
    }
}

fn split_name(split: SplitName) -> &'static str {
    match split {
        SplitName::Train => "train",
        SplitName::Val => "val",
        SplitName::Test => "test",
    }
}

/// Evaluates a checkpoint on one split of a manifest.
pub fn eval_command(ckpt: &Path, manifest: &Path, split: SplitName) -> Result<EvalRecord> {
    let (cfg, model) = load_checkpoint(ckpt)?;
    let entries = load_manifest(manifest)?;
    let assignment = split_with(&entries, &cfg.split)?;
    let chosen = assignment.select(&entries, split);
    if chosen.is_empty() {
        return Err(Error::config(format!("the {} split is empty", split_name(split))));
    }
    let samples = load_samples(&chosen, manifest_dir(manifest), cfg.num_frames)?;
    let motion = motion_bank(&cfg, manifest)?;
    let result = evaluate(&model, &samples, cfg.ablation, &motion)?;
    Ok(EvalRecord {
        split: split_name(split).into(),
        ablation: cfg.ablation,
        num_frames: cfg.num_frames,
        queries: result.ranks.len(),
        query_protocol: QUERY_PROTOCOL,
        result,
    })
}

/// Writes the text table to `path` and the JSON record next to it.
pub fn write_report(path: &Path, table: &str, json: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, table).map_err(|e| Error::io(path, e))?;
    let json_path = sidecar(path, "json");
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
}

pub fn write_eval_report(path: &Path, record: &EvalRecord) -> Result<()> {
    let json = serde_json::to_string_pretty(record).expect("records serialize");
    write_report(path, &record.to_table(), &json)
}

pub fn ablate_command(grid: &Path, log: &mut dyn Write) -> Result<AblationReport> {
    let grid = AblationGrid::load(grid)?;
    run_ablation_suite(&grid, |line| {
        let _ = writeln!(log, "{line}");
    })
}

pub fn write_ablation_report(path: &Path, report: &AblationReport) -> Result<()> {
    write_report(path, &report.to_table(), &report.to_json())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub clip_id: String,
    pub score: f64,
    pub caption: String,
}

/// Ranks every clip of the manifest against a free-text query; ties are
/// broken by clip id.
pub fn retrieve_command(ckpt: &Path, manifest: &Path, query: &str, topk: usize) -> Result<Vec<Hit>> {
    let (cfg, model) = load_checkpoint(ckpt)?;
    let entries = load_manifest(manifest)?;
    let refs: Vec<_> = entries.iter().collect();
    let samples = load_samples(&refs, manifest_dir(manifest), cfg.num_frames)?;
    let motion = motion_bank(&cfg, manifest)?;
    let clips: Vec<_> = samples.iter().map(|s| s.clip.clone()).collect();
    let vids = model.video_embeddings(&clips, cfg.ablation, &|id| motion.get(id).cloned())?;
    let caps = model.caption_embeddings(&[query.to_string()])?;
    let scores = model.score_embeddings(&caps, &vids)?.remove(0);
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| entries[a].clip_id.cmp(&entries[b].clip_id))
    });
    Ok(order
        .into_iter()
        .take(topk)
        .map(|i| Hit {
            clip_id: entries[i].clip_id.clone(),
            score: scores[i],
            caption: entries[i].captions[0].clone(),
        })
        .collect())
}
