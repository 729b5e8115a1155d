//! Experiment orchestration: configs, hash-gated pipelines, the ablation
//! benchmark and run reports.

mod bench;
mod matching;
mod pipeline;
mod report;
mod stages;

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::synthdata::container::hex;
use crate::trainer::{TrainConfig, TRAIN_KEYS};

pub use bench::{bench_ablate, Cell, CellResult, GridConfig, GridReport, GRID_KEYS};
pub use matching::{encoder_match_accuracy, match_views, recover_scene, ViewMatch};
pub use pipeline::{eval_pairs, run_pipeline, train_experiment, sample_pairs, write_samples, PipelineReport};
pub use report::{cell_label, load_run, mean_std, report, summarize, table_csv, table_text, RunSummary, SummaryRow, TABLE_HEADER};
pub use stages::{file_hash, StageRunner};

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";
pub const PROVENANCE: &str = "provenance.txt";

pub const EXPERIMENT_KEYS: &[&str] = &[
    "dataset",
    "dataset_seed",
    "objects",
    "encoder",
    "encoder_seed",
    "pretrain_steps",
    "cache",
    "metric_encoder",
    "out_dir",
    "sample_steps",
    "eta",
    "samples",
];

/// A training run plus everything needed to produce its inputs.
///
/// Unset paths default to files inside `out_dir`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub dataset_seed: u64,
    pub objects: usize,
    pub encoder: Option<PathBuf>,
    pub encoder_seed: u64,
    pub pretrain_steps: usize,
    pub cache: Option<PathBuf>,
    /// Frozen encoder scoring `val_featdist`; defaults to the run's encoder
    /// when that one is dense.
    pub metric_encoder: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub sample_steps: usize,
    pub eta: f64,
    pub samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            dataset: None,
            dataset_seed: 0,
            objects: 4096,
            encoder: None,
            encoder_seed: 0,
            pretrain_steps: 1000,
            cache: None,
            metric_encoder: None,
            out_dir: PathBuf::from("runs/default"),
            sample_steps: 200,
            eta: 0.0,
            samples: 4,
        }
    }
}

fn read_path(kv: &KvConfig, key: &str, slot: &mut Option<PathBuf>) {
    if let Some(v) = kv.raw(key) {
        *slot = (!v.is_empty()).then(|| PathBuf::from(v));
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvConfig::parse(text)?;
        let known: Vec<&str> = TRAIN_KEYS.iter().chain(EXPERIMENT_KEYS).copied().collect();
        kv.reject_unknown(&known)?;
        let mut c = Self::default();
        c.apply_kv(&kv)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies known keys and ignores the rest; callers reject unknown keys.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        self.train.apply_kv(kv)?;
        read_path(kv, "dataset", &mut self.dataset);
        kv.read_into("dataset_seed", &mut self.dataset_seed)?;
        kv.read_into("objects", &mut self.objects)?;
        read_path(kv, "encoder", &mut self.encoder);
        kv.read_into("encoder_seed", &mut self.encoder_seed)?;
        kv.read_into("pretrain_steps", &mut self.pretrain_steps)?;
        read_path(kv, "cache", &mut self.cache);
        read_path(kv, "metric_encoder", &mut self.metric_encoder);
        if let Some(v) = kv.raw("out_dir") {
            self.out_dir = PathBuf::from(v);
        }
        kv.read_into("sample_steps", &mut self.sample_steps)?;
        kv.read_into("eta", &mut self.eta)?;
        kv.read_into("samples", &mut self.samples)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.objects < 2 {
            return Err(Error::invalid("objects must be at least 2 so a validation split exists"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join("data.nvds"))
    }

    pub fn encoder_path(&self) -> PathBuf {
        self.encoder
            .clone()
            .unwrap_or_else(|| self.out_dir.join(format!("encoder_{}.bin", self.train.encoder_mode)))
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache
            .clone()
            .unwrap_or_else(|| self.out_dir.join(format!("features_{}.fcch", self.train.encoder_mode)))
    }

    /// Every key with defaults and paths filled in.
    pub fn resolved(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        self.train.to_kv(&mut kv);
        kv.set("dataset", self.dataset_path().display());
        kv.set("dataset_seed", self.dataset_seed);
        kv.set("objects", self.objects);
        kv.set("encoder", self.encoder_path().display());
        kv.set("encoder_seed", self.encoder_seed);
        kv.set("pretrain_steps", self.pretrain_steps);
        kv.set("cache", self.cache_path().display());
        kv.set(
            "metric_encoder",
            self.metric_encoder.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv.set("out_dir", self.out_dir.display());
        kv.set("sample_steps", self.sample_steps);
        kv.set("eta", self.eta);
        kv.set("samples", self.samples);
        kv
    }
}

/// Writes the resolved config and a provenance record (seed plus content
/// hashes of every input) into `dir`.
pub fn write_provenance(dir: &Path, resolved: &KvConfig, seed: u64, inputs: &[(&str, String)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = resolved.render();
    let p = dir.join(RESOLVED_CONFIG);
    std::fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
    let mut prov = KvConfig::default();
    prov.set("seed", seed);
    prov.set("config_sha256", hex(&Sha256::digest(text.as_bytes())));
    for (name, hash) in inputs {
        prov.set(&format!("input.{name}"), hash);
    }
    let p = dir.join(PROVENANCE);
    std::fs::write(&p, prov.render()).map_err(|e| Error::io(&p, e))
}

pub(crate) fn sha_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex(&h.finalize())
}
