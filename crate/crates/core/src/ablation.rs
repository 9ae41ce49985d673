//! Component ablation grid: every cell (ablation, frame count) is trained
//! and evaluated on every corpus with each seed, and the medians over seeds
//! are tabulated with one row per cell.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{parse_with_preset, read, seed_override, Ablation, TrainConfig};
use crate::dataset::manifest::manifest_dir;
use crate::dataset::synthetic::{generate_corpus, GeneratedVideo, GeneratorConfig};
use crate::dataset::{load_manifest, load_motion_bank, split_with, MotionBank, Sample, SplitName};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RetrievalResult};
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub ablation: Ablation,
    pub num_frames: usize,
}

/// Where a corpus comes from: a manifest on disk (split with the training
/// config's split settings), or the generator, optionally with a separately
/// generated held-out set used as the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub name: String,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub heldout: Option<GeneratorConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    seeds: Vec<u64>,
    cells: Vec<AblationCell>,
    corpora: Vec<CorpusSpec>,
    #[serde(default)]
    train: toml::Table,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
    pub corpora: Vec<CorpusSpec>,
    /// shared settings; each cell overrides ablation, frame count and seed
    pub train: TrainConfig,
}

impl AblationGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: GridFile = toml::from_str(text).map_err(|e| Error::format("ablation grid", e.to_string()))?;
        let train = parse_with_preset(&toml::to_string(&file.train).expect("a table serializes"), TrainConfig::preset)?;
        let grid = Self {
            seeds: file.seeds,
            cells: file.cells,
            corpora: file.corpora,
            train,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Loads a grid file; relative manifest paths resolve against its
    /// directory and the seed override replaces the seed list.
    pub fn load(path: &Path) -> Result<Self> {
        let mut grid = Self::from_toml_str(&read(path)?)?;
        let base = manifest_dir(path);
        for c in &mut grid.corpora {
            if let Some(m) = &mut c.manifest {
                *m = base.join(&*m);
            }
        }
        if let Some(seed) = seed_override()? {
            grid.seeds = vec![seed];
        }
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.cells.is_empty() || self.corpora.is_empty() {
            return Err(Error::config("an ablation grid needs at least one seed, cell and corpus"));
        }
        for c in &self.corpora {
            if c.manifest.is_some() == c.generator.is_some() {
                return Err(Error::config(format!(
                    "corpus `{}` must name exactly one of `manifest` and `generator`",
                    c.name
                )));
            }
            if c.heldout.is_some() && c.generator.is_none() {
                return Err(Error::config(format!("corpus `{}`: `heldout` needs `generator`", c.name)));
            }
        }
        for cell in &self.cells {
            self.cell_config(cell, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    pub fn cell_config(&self, cell: &AblationCell, seed: u64) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.ablation = cell.ablation;
        cfg.num_frames = cell.num_frames;
        cfg.seed = seed;
        cfg
    }
}

/// Train and test samples at full clip length.
pub struct PreparedCorpus {
    pub name: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub motion: MotionBank,
}

pub fn prepare_corpus(spec: &CorpusSpec, train_cfg: &TrainConfig) -> Result<PreparedCorpus> {
    let full = |clip: crate::clip::VideoClip, captions: &[String]| {
        let n = clip.num_frames();
        Sample::new(clip, captions, n)
    };
    let (train, test, motion) = match (&spec.manifest, &spec.generator) {
        (Some(path), _) => {
            let entries = load_manifest(path)?;
            let split = split_with(&entries, &train_cfg.split)?;
            let base = manifest_dir(path);
            let load = |name| {
                split
                    .select(&entries, name)
                    .into_iter()
                    .map(|e| full(e.load_clip(base)?, &e.captions))
                    .collect::<Result<Vec<_>>>()
            };
            let motion = match &train_cfg.motion_features {
                Some(f) => load_motion_bank(&base.join(f))?,
                None => MotionBank::new(),
            };
            (load(SplitName::Train)?, load(SplitName::Test)?, motion)
        }
        (None, Some(gen)) => {
            let videos = generate_corpus(gen)?;
            let samples = |v: &[GeneratedVideo]| v.iter().map(GeneratedVideo::sample).collect::<Result<Vec<_>>>();
            match &spec.heldout {
                Some(h) => (samples(&videos)?, samples(&generate_corpus(h)?)?, MotionBank::new()),
                None => {
                    let entries: Vec<_> = videos.iter().map(|v| v.entry.clone()).collect();
                    let split = split_with(&entries, &train_cfg.split)?;
                    let pick = |name| {
                        let ids = split.get(name);
                        let chosen: Vec<_> = videos.iter().filter(|v| ids.contains(&v.entry.clip_id)).cloned().collect();
                        samples(&chosen)
                    };
                    (pick(SplitName::Train)?, pick(SplitName::Test)?, MotionBank::new())
                }
            }
        }
        (None, None) => return Err(Error::config(format!("corpus `{}` has no source", spec.name))),
    };
    Ok(PreparedCorpus {
        name: spec.name.clone(),
        train,
        test,
        motion,
    })
}

/// Trains on the corpus' training split and evaluates on its test split.
pub fn run_cell(cfg: &TrainConfig, corpus: &PreparedCorpus) -> Result<RetrievalResult> {
    let n = cfg.num_frames;
    let resample = |s: &[Sample]| s.iter().map(|x| x.with_frames(n)).collect::<Result<Vec<_>>>();
    let train_set = resample(&corpus.train)?;
    let test_set = resample(&corpus.test)?;
    let outcome = train(cfg, &train_set, &corpus.motion, |_| {})?;
    evaluate(&outcome.model, &test_set, cfg.ablation, &corpus.motion)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellCorpusResult {
    pub corpus: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<RetrievalResult>,
    /// medians over seeds of R@1, R@5, R@10, R@50
    pub median_recalls: [f64; 4],
    pub median_mdr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: AblationCell,
    pub results: Vec<CellCorpusResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<CellReport>,
}

/// Median of reals; the mean of the middle two for an even count.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn summarize(corpus: &str, seeds: &[u64], runs: Vec<RetrievalResult>) -> CellCorpusResult {
    let median_recalls = std::array::from_fn(|k| median(&runs.iter().map(|r| r.recalls()[k]).collect::<Vec<_>>()));
    let mdrs: Vec<f64> = runs.iter().map(|r| r.median_rank).collect();
    CellCorpusResult {
        corpus: corpus.to_string(),
        seeds: seeds.to_vec(),
        median_mdr: median(&mdrs),
        median_recalls,
        runs,
    }
}

/// Runs every cell on every corpus with every seed. `progress` receives one
/// line per finished run.
pub fn run_ablation_suite(grid: &AblationGrid, mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    grid.validate()?;
    let corpora = grid
        .corpora
        .iter()
        .map(|c| prepare_corpus(c, &grid.train))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let mut results = Vec::with_capacity(corpora.len());
        for corpus in &corpora {
            let mut runs = Vec::with_capacity(grid.seeds.len());
            for &seed in &grid.seeds {
                let r = run_cell(&grid.cell_config(cell, seed), corpus)?;
                progress(&format!(
                    "{} frames={} corpus={} seed={seed}: R@1 {:.2}",
                    cell.ablation, cell.num_frames, corpus.name, r.r1
                ));
                runs.push(r);
            }
            results.push(summarize(&corpus.name, &grid.seeds, runs));
        }
        cells.push(CellReport { cell: *cell, results });
    }
    Ok(AblationReport { cells })
}

impl AblationReport {
    /// One row per cell: component flags, frame count, then median
    /// R@1/5/10/50 for each corpus.
    pub fn to_table(&self) -> String {
        const LEFT: usize = 30;
        const BLOCK: usize = 4 * 8;
        let corpora: Vec<&str> = self
            .cells
            .first()
            .map(|c| c.results.iter().map(|r| r.corpus.as_str()).collect())
            .unwrap_or_default();
        let mut out = String::from("# median over seeds; caption queries against a gallery of unique videos\n");
        let mut top = " ".repeat(LEFT);
        let mut header = format!("{:<4}{:>7}{:>7}{:>5}{:>7}", "Exp", "Visual", "Motion", "FFA", "Frames");
        for c in &corpora {
            top.push_str(&format!(" | {c:<BLOCK$}"));
            header.push_str(" |");
            for k in ["R@1", "R@5", "R@10", "R@50"] {
                header.push_str(&format!("{k:>8}"));
            }
        }
        let _ = writeln!(out, "{}", top.trim_end());
        let _ = writeln!(out, "{header}");
        let _ = writeln!(out, "{}", "-".repeat(header.len()));
        let mark = |b: bool| if b { "x" } else { "-" };
        for (i, c) in self.cells.iter().enumerate() {
            let (v, m, f) = c.cell.ablation.components();
            let mut row = format!("{:<4}{:>7}{:>7}{:>5}{:>7}", i + 1, mark(v), mark(m), mark(f), c.cell.num_frames);
            for r in &c.results {
                row.push_str(" |");
                for x in r.median_recalls {
                    row.push_str(&format!("{x:>8.2}"));
                }
            }
            let _ = writeln!(out, "{row}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}
