//! End-to-end run: data, encoder, feature cache, training, samples, report.

use std::path::{Path, PathBuf};

use super::stages::{file_hash, StageRunner};
use super::{report, sha_hex, write_provenance, ExperimentConfig};
use crate::analysis::image::{signed_chw_to_rgb, upscale_rgb, write_strip};
use crate::analysis::mse;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::inference::{sample, Conditioned, SampleOutput, SamplerConfig};
use crate::refnet::{cache_features, pose_embedding, pretrain, ConditionBundle, EncoderConfig, EncoderMode, FeatureCache, PretrainConfig, RefEncoder};
use crate::schedule::NoiseSchedule;
use crate::synthdata::scene::GENERATOR_VERSION;
use crate::synthdata::{build_dataset, Dataset, ViewPair, ViewRig};
use crate::trainer::{fit, Checkpoint, FeatureSource, FitData};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineReport {
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
    pub out_dir: PathBuf,
}

/// Samples target views for `pairs` in one batched reverse process.
pub fn sample_pairs(
    model: &crate::denoiser::UNetDenoiser<f32>,
    encoder: &RefEncoder,
    dataset: &Dataset,
    pairs: &[ViewPair],
    sampler: &SamplerConfig,
) -> Result<SampleOutput> {
    let views: Vec<_> = pairs.iter().map(|p| dataset.view(p.object, p.reference)).collect();
    let features = encoder.features_batch(&views)?;
    let bundles: Vec<ConditionBundle> = features
        .into_iter()
        .zip(pairs)
        .map(|(features, p)| ConditionBundle { features, pose: pose_embedding(p.pose) })
        .collect();
    let predictor = Conditioned { model, bundles: bundles.iter().collect() };
    let len = pairs.len() * 3 * dataset.height * dataset.width;
    sample(&predictor, len, &NoiseSchedule::default(), sampler)
}

/// Writes `[reference | target | sample]` strips and a trajectory strip of
/// the first pair; returns the per-pair MSE.
pub fn write_samples(dir: &Path, dataset: &Dataset, pairs: &[ViewPair], out: &SampleOutput, frames: usize) -> Result<Vec<f64>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (dataset.height, dataset.width);
    let n = 3 * h * w;
    let scale = 4;
    let tile = |chw: &[f64]| upscale_rgb(&signed_chw_to_rgb(chw, h, w), w, h, scale);
    let mut errors = Vec::with_capacity(pairs.len());
    for (k, p) in pairs.iter().enumerate() {
        let reference = dataset.view(p.object, p.reference).to_signed_chw();
        let target = dataset.view(p.object, p.target).to_signed_chw();
        let img = &out.image[k * n..(k + 1) * n];
        errors.push(mse(img, &target)?);
        let name = format!("sample_{k:02}_obj{}_v{}_to_v{}.png", p.object, p.reference, p.target);
        write_strip(&dir.join(name), &[tile(&reference), tile(&target), tile(img)], w * scale, h * scale)?;
    }
    if frames > 0 && !out.trajectory.is_empty() {
        let stride = out.trajectory.len().div_ceil(frames).max(1);
        let tiles: Vec<Vec<u8>> = out.trajectory.iter().step_by(stride).map(|x0| tile(&x0[..n])).collect();
        write_strip(&dir.join("trajectory_00.png"), &tiles, w * scale, h * scale)?;
    }
    Ok(errors)
}

/// Deterministic evaluation pairs: the reference cycles through views and the
/// target sits a quarter turn away.
pub fn eval_pairs(dataset: &Dataset, objects: &[usize], count: usize) -> Vec<ViewPair> {
    let v = dataset.views_per_object;
    (0..count)
        .map(|k| {
            let obj = objects[k % objects.len()];
            let r = k % v;
            ViewPair::new(dataset, obj, (r + v / 4).max(r + 1) % v, r)
        })
        .collect()
}

pub(crate) fn load_encoder_frozen(path: &Path) -> Result<RefEncoder> {
    let e = RefEncoder::load(path)?;
    Ok(if e.frozen { e } else { e.freeze() })
}

/// Produces the dataset, an encoder and its cache under `runner`; returns
/// their paths and content hashes.
pub(crate) struct Prepared {
    pub dataset: PathBuf,
    pub dataset_hash: String,
    pub encoder: PathBuf,
    pub encoder_hash: String,
    pub cache: PathBuf,
    pub cache_hash: String,
}

pub(crate) fn prepare_data(runner: &mut StageRunner, cfg: &ExperimentConfig) -> Result<(PathBuf, String)> {
    let path = cfg.dataset_path();
    let external = cfg.dataset.is_some() && path.exists();
    if !external {
        let rig = ViewRig::default();
        let key = sha_hex(&["data", &cfg.objects.to_string(), &cfg.dataset_seed.to_string(), &GENERATOR_VERSION.to_string(), &format!("{rig:?}")]);
        runner.stage("data", &key, &[], &[path.clone()], || build_dataset(cfg.objects, cfg.dataset_seed, &rig, &path).map(drop))?;
    }
    let h = file_hash(&path)?;
    Ok((path, h))
}

pub(crate) fn prepare_encoder(
    runner: &mut StageRunner,
    cfg: &ExperimentConfig,
    mode: EncoderMode,
    encoder: PathBuf,
    cache: PathBuf,
    data: &(PathBuf, String),
) -> Result<Prepared> {
    let enc_stage = format!("encoder_{mode}");
    let cache_stage = format!("cache_{mode}");
    if !(cfg.encoder.is_some() && encoder.exists()) {
        let key = sha_hex(&["encoder", &data.1, &mode.to_string(), &cfg.pretrain_steps.to_string(), &cfg.encoder_seed.to_string()]);
        runner.stage(&enc_stage, &key, &["data"], &[encoder.clone()], || {
            let ds = Dataset::load(&data.0)?;
            let pc = PretrainConfig { steps: cfg.pretrain_steps, seed: cfg.encoder_seed, ..PretrainConfig::new(mode) };
            let init = RefEncoder::new(EncoderConfig::default(), cfg.encoder_seed)?;
            let (enc, _) = pretrain(init, &ds, &ds.split().train, &pc)?;
            enc.save(&encoder)
        })?;
    }
    let encoder_hash = file_hash(&encoder)?;
    let key = sha_hex(&["cache", &data.1, &encoder_hash]);
    runner.stage(&cache_stage, &key, &["data", &enc_stage], &[cache.clone()], || {
        let ds = Dataset::load(&data.0)?;
        cache_features(&load_encoder_frozen(&encoder)?, &ds, &cache)
    })?;
    let cache_hash = file_hash(&cache)?;
    Ok(Prepared { dataset: data.0.clone(), dataset_hash: data.1.clone(), encoder, encoder_hash, cache, cache_hash })
}

/// Trains one run from prepared inputs into `dir` and records provenance.
pub(crate) fn train_run(cfg: &ExperimentConfig, prep: &Prepared, metric: Option<&(PathBuf, String)>, dir: &Path) -> Result<()> {
    let ds = Dataset::load(&prep.dataset)?;
    let encoder = load_encoder_frozen(&prep.encoder)?;
    let cache = FeatureCache::open_for(&prep.cache, &encoder, &ds)?;
    let metric_encoder = metric.map(|(p, _)| load_encoder_frozen(p)).transpose()?;
    let split = ds.split();
    let data = FitData {
        dataset: &ds,
        train_objects: &split.train,
        val_objects: &split.val,
        features: FeatureSource::Cache(&cache),
        metric_encoder: metric_encoder.as_ref(),
    };
    let mut inputs = vec![("dataset", prep.dataset_hash.clone()), ("encoder", prep.encoder_hash.clone()), ("cache", prep.cache_hash.clone())];
    if let Some((_, h)) = metric {
        inputs.push(("metric_encoder", h.clone()));
    }
    write_provenance(dir, &cfg.resolved(), cfg.train.seed, &inputs)?;
    fit::<f32>(&cfg.train, &data, Some(dir)).map(drop)
}

/// Runs every stage whose inputs changed since the last invocation.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineReport> {
    run_stages(cfg, true)
}

/// Like [`run_pipeline`] but stops after training.
pub fn train_experiment(cfg: &ExperimentConfig) -> Result<PipelineReport> {
    run_stages(cfg, false)
}

fn run_stages(cfg: &ExperimentConfig, downstream: bool) -> Result<PipelineReport> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut runner = StageRunner::open(&out.join("pipeline.manifest"))?;
    let mode = cfg.train.encoder_mode;
    let data = prepare_data(&mut runner, cfg)?;
    let prep = prepare_encoder(&mut runner, cfg, mode, cfg.encoder_path(), cfg.cache_path(), &data)?;
    let enc_stage = format!("encoder_{mode}");
    let cache_stage = format!("cache_{mode}");

    let metric = match (&cfg.metric_encoder, mode) {
        (Some(p), _) => Some((p.clone(), file_hash(p)?)),
        (None, EncoderMode::Dense) => Some((prep.encoder.clone(), prep.encoder_hash.clone())),
        (None, EncoderMode::Global) => None,
    };
    let train_dir = out.join("train");
    let ckpt = train_dir.join("final.ckpt");
    let metric_hash = metric.as_ref().map(|m| m.1.clone()).unwrap_or_default();
    let mut train_kv = KvConfig::default();
    cfg.train.to_kv(&mut train_kv);
    let key = sha_hex(&["train", &train_kv.render(), &prep.dataset_hash, &prep.cache_hash, &metric_hash]);
    runner.stage("train", &key, &["data", &enc_stage, &cache_stage], &[ckpt.clone(), train_dir.join("metrics.csv")], || {
        train_run(cfg, &prep, metric.as_ref(), &train_dir)
    })?;
    if !downstream {
        return Ok(PipelineReport { ran: runner.ran, skipped: runner.skipped, out_dir: out });
    }

    let samples_dir = out.join("samples");
    let sample_csv = samples_dir.join("samples.csv");
    let ckpt_hash = file_hash(&ckpt)?;
    let key = sha_hex(&["sample", &ckpt_hash, &prep.encoder_hash, &cfg.sample_steps.to_string(), &cfg.eta.to_string(), &cfg.train.seed.to_string(), &cfg.samples.to_string()]);
    runner.stage("sample", &key, &["train"], &[sample_csv.clone()], || {
        let ds = Dataset::load(&prep.dataset)?;
        let model = Checkpoint::load(&ckpt)?.model::<f32>()?;
        let encoder = load_encoder_frozen(&prep.encoder)?;
        let split = ds.split();
        let pairs = eval_pairs(&ds, &split.val, cfg.samples.max(1));
        let sampler = SamplerConfig { steps: cfg.sample_steps, eta: cfg.eta, seed: cfg.train.seed };
        let output = sample_pairs(&model, &encoder, &ds, &pairs, &sampler)?;
        let errors = write_samples(&samples_dir, &ds, &pairs, &output, 10)?;
        let mut csv = String::from("object,reference,target,mse\n");
        for (p, e) in pairs.iter().zip(&errors) {
            csv.push_str(&format!("{},{},{},{e:.6}\n", p.object, p.reference, p.target));
        }
        write_provenance(&samples_dir, &cfg.resolved(), cfg.train.seed, &[("checkpoint", ckpt_hash.clone()), ("encoder", prep.encoder_hash.clone())])?;
        report::write_text(&sample_csv, &csv)
    })?;

    let report_dir = out.join("report");
    let metrics_hash = file_hash(&train_dir.join("metrics.csv"))?;
    let key = sha_hex(&["report", &metrics_hash]);
    runner.stage("report", &key, &["train"], &[report_dir.join("summary.csv")], || {
        report::report(&[train_dir.clone()], &report_dir).map(drop)
    })?;
    Ok(PipelineReport { ran: runner.ran, skipped: runner.skipped, out_dir: out })
}
