//! Fine-tuning loop: noise-matching loss, gradient accumulation, Adam with a
//! warmup-cosine schedule, EMA weights, periodic validation and checkpoints.

pub mod checkpoint;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::analysis::plot::METRICS_HEADER;
use crate::analysis::{feat_dist_batch, mse};
use crate::config::KvConfig;
use crate::denoiser::{Conditioning, UNetConfig, UNetDenoiser};
use crate::error::{Error, Result};
use crate::inference::{single_pass_estimate, Conditioned, T_EVAL};
use crate::nn::{GradBuffer, Graph, ParamStore};
use crate::optim::{ema_update, Adam, AdamConfig, LrSchedule};
use crate::refnet::{pose_embedding, ConditionBundle, EncoderConfig, EncoderMode, FeatureCache, Features, RefEncoder};
use crate::schedule::NoiseSchedule;
use crate::synthdata::{sample_pair, Dataset, ViewPair};
use crate::tensor::{Element, Var};
use crate::tsampler::{TimestepDistribution, TimestepKind};

pub use checkpoint::Checkpoint;

/// Seed of the fixed validation draw, shared by every run so cells compare
/// on the same examples.
const VAL_SEED: u64 = 0x5eed_0a1;
const VAL_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub max_steps: usize,
    /// Examples per optimizer step, split evenly into `grad_accum` micro-batches.
    pub batch_size: usize,
    pub grad_accum: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub ema_decay: f64,
    pub timesteps: TimestepKind,
    pub conditioning: Conditioning,
    pub encoder_mode: EncoderMode,
    pub seed: u64,
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    pub val_every: usize,
    pub val_pairs: usize,
    pub prefetch: usize,
    /// Restrict the loss to the target view's foreground pixels.
    pub loss_mask: bool,
    /// When false the `wall_clock_s` column is written as 0 so the CSV is
    /// byte-stable across reruns.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 3000,
            batch_size: 32,
            grad_accum: 4,
            base_lr: 1e-4,
            final_lr: 1e-5,
            warmup_steps: 200,
            adam: AdamConfig::default(),
            ema_decay: 0.999,
            timesteps: TimestepKind::Gaussian { mean: 1000.0, std: 200.0 },
            conditioning: Conditioning::Amalgamation,
            encoder_mode: EncoderMode::Dense,
            seed: 0,
            channels: vec![32, 64, 128],
            res_blocks: 2,
            val_every: 100,
            val_pairs: 64,
            prefetch: 4,
            loss_mask: false,
            record_wall_clock: true,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "max_steps",
    "batch_size",
    "grad_accum",
    "base_lr",
    "final_lr",
    "warmup_steps",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "ema_decay",
    "timesteps",
    "t_mean",
    "t_std",
    "conditioning",
    "encoder_mode",
    "seed",
    "channels",
    "res_blocks",
    "val_every",
    "val_pairs",
    "prefetch",
    "loss_mask",
    "record_wall_clock",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.max_steps > 0 && self.warmup_steps >= self.max_steps {
            return bad(format!("warmup_steps {} must be below max_steps {}", self.warmup_steps, self.max_steps));
        }
        if self.grad_accum == 0 || self.batch_size == 0 || self.batch_size % self.grad_accum != 0 {
            return bad(format!("batch_size {} must be a positive multiple of grad_accum {}", self.batch_size, self.grad_accum));
        }
        for (name, v) in [("base_lr", self.base_lr), ("final_lr", self.final_lr), ("adam_eps", self.adam.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam.beta1), ("adam_beta2", self.adam.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.adam.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.adam.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if self.val_every == 0 || self.val_pairs == 0 || self.prefetch == 0 {
            return bad("val_every, val_pairs and prefetch must be positive".into());
        }
        TimestepDistribution::from_kind(self.timesteps)?;
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.base_lr,
            final_lr: self.final_lr,
            warmup: self.warmup_steps,
            total: self.max_steps,
        }
    }

    pub fn micro_batch(&self) -> usize {
        self.batch_size / self.grad_accum
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        kv.read_into("max_steps", &mut self.max_steps)?;
        kv.read_into("batch_size", &mut self.batch_size)?;
        kv.read_into("grad_accum", &mut self.grad_accum)?;
        kv.read_into("base_lr", &mut self.base_lr)?;
        kv.read_into("final_lr", &mut self.final_lr)?;
        kv.read_into("warmup_steps", &mut self.warmup_steps)?;
        kv.read_into("adam_beta1", &mut self.adam.beta1)?;
        kv.read_into("adam_beta2", &mut self.adam.beta2)?;
        kv.read_into("adam_eps", &mut self.adam.eps)?;
        kv.read_into("weight_decay", &mut self.adam.weight_decay)?;
        kv.read_into("ema_decay", &mut self.ema_decay)?;
        let (mut mean, mut std) = match self.timesteps {
            TimestepKind::Gaussian { mean, std } => (mean, std),
            TimestepKind::Uniform => (1000.0, 200.0),
        };
        kv.read_into("t_mean", &mut mean)?;
        kv.read_into("t_std", &mut std)?;
        let kind = kv.raw("timesteps").map(str::to_string).unwrap_or_else(|| match self.timesteps {
            TimestepKind::Uniform => "uniform".into(),
            TimestepKind::Gaussian { .. } => "gaussian".into(),
        });
        self.timesteps = match kind.as_str() {
            "uniform" => TimestepKind::Uniform,
            "gaussian" => TimestepKind::Gaussian { mean, std },
            other => return Err(Error::invalid(format!("timesteps must be uniform or gaussian, got {other:?}"))),
        };
        kv.read_into("conditioning", &mut self.conditioning)?;
        kv.read_into("encoder_mode", &mut self.encoder_mode)?;
        kv.read_into("seed", &mut self.seed)?;
        if let Some(c) = kv.raw("channels") {
            self.channels = checkpoint::parse_channels(c)?;
        }
        kv.read_into("res_blocks", &mut self.res_blocks)?;
        kv.read_into("val_every", &mut self.val_every)?;
        kv.read_into("val_pairs", &mut self.val_pairs)?;
        kv.read_into("prefetch", &mut self.prefetch)?;
        kv.read_into("loss_mask", &mut self.loss_mask)?;
        kv.read_into("record_wall_clock", &mut self.record_wall_clock)?;
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvConfig) {
        kv.set("max_steps", self.max_steps);
        kv.set("batch_size", self.batch_size);
        kv.set("grad_accum", self.grad_accum);
        kv.set("base_lr", self.base_lr);
        kv.set("final_lr", self.final_lr);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("adam_beta1", self.adam.beta1);
        kv.set("adam_beta2", self.adam.beta2);
        kv.set("adam_eps", self.adam.eps);
        kv.set("weight_decay", self.adam.weight_decay);
        kv.set("ema_decay", self.ema_decay);
        match self.timesteps {
            TimestepKind::Uniform => kv.set("timesteps", "uniform"),
            TimestepKind::Gaussian { mean, std } => {
                kv.set("timesteps", "gaussian");
                kv.set("t_mean", mean);
                kv.set("t_std", std);
            }
        }
        kv.set("conditioning", self.conditioning);
        kv.set("encoder_mode", self.encoder_mode);
        kv.set("seed", self.seed);
        let ch: Vec<String> = self.channels.iter().map(ToString::to_string).collect();
        kv.set("channels", ch.join(","));
        kv.set("res_blocks", self.res_blocks);
        kv.set("val_every", self.val_every);
        kv.set("val_pairs", self.val_pairs);
        kv.set("prefetch", self.prefetch);
        kv.set("loss_mask", self.loss_mask);
        kv.set("record_wall_clock", self.record_wall_clock);
    }

    /// Denoiser architecture for features of the given encoder layout.
    pub fn unet_config(&self, enc: &EncoderConfig) -> UNetConfig {
        UNetConfig {
            channels: self.channels.clone(),
            res_blocks: self.res_blocks,
            ..UNetConfig::for_encoder(enc, self.conditioning)
        }
    }
}

/// Shadow copy of the denoiser parameters.
#[derive(Clone, Debug)]
pub struct EmaState<E: Element> {
    pub model: UNetDenoiser<E>,
    pub decay: f64,
}

impl<E: Element> EmaState<E> {
    pub fn new(live: &UNetDenoiser<E>, decay: f64) -> Self {
        Self { model: live.clone(), decay }
    }

    pub fn update(&mut self, live: &ParamStore<E>) -> Result<()> {
        ema_update(&mut self.model.params, live, self.decay)
    }
}

/// Where reference-view features come from.
#[derive(Clone, Copy)]
pub enum FeatureSource<'a> {
    Cache(&'a FeatureCache),
    Encoder(&'a RefEncoder),
}

impl FeatureSource<'_> {
    pub fn encoder_config(&self) -> EncoderConfig {
        match self {
            FeatureSource::Encoder(e) => e.config.clone(),
            FeatureSource::Cache(c) => {
                let h = c.header();
                let grid = (h.tokens as f64).sqrt().round() as usize;
                EncoderConfig { dim: h.dim, depth: h.layers, patch: EncoderConfig::default().image / grid.max(1), ..Default::default() }
            }
        }
    }

    fn features(&self, dataset: &Dataset, pairs: &[ViewPair]) -> Result<Vec<Features>> {
        match self {
            FeatureSource::Cache(c) => pairs.iter().map(|p| c.read(p.object, p.reference)).collect(),
            FeatureSource::Encoder(e) => {
                if !e.frozen {
                    return Err(Error::invalid("training needs a frozen reference encoder"));
                }
                let views: Vec<_> = pairs.iter().map(|p| dataset.view(p.object, p.reference)).collect();
                e.features_batch(&views)
            }
        }
    }
}

/// One training or validation example.
#[derive(Clone, Debug)]
pub struct Example {
    pub pair: ViewPair,
    pub x0: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub mask: Option<Vec<f64>>,
    pub cond: ConditionBundle,
}

pub struct FitData<'a> {
    pub dataset: &'a Dataset,
    pub train_objects: &'a [usize],
    pub val_objects: &'a [usize],
    pub features: FeatureSource<'a>,
    /// Frozen encoder scoring `val_featdist`; the column is NaN without one.
    pub metric_encoder: Option<&'a RefEncoder>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub wall_clock_s: f64,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_featdist: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.3},{:.8},{:.8},{:.8},{:.6e}",
            self.step, self.wall_clock_s, self.train_loss, self.val_mse, self.val_featdist, self.lr
        )
    }
}

#[derive(Debug)]
pub struct FitReport<E: Element> {
    pub model: UNetDenoiser<E>,
    pub ema: EmaState<E>,
    /// Mean loss of each optimizer step's batch, before that step's update.
    pub losses: Vec<f64>,
    pub micro_batches: usize,
    pub optimizer_steps: usize,
    pub ema_updates: usize,
    pub rows: Vec<MetricsRow>,
    pub best_val_mse: Option<(usize, f64)>,
}

/// Draws one example and its noisy input `x_t`; the reference features are
/// filled in by [`attach_features`].
pub fn draw_example<R: Rng>(
    dataset: &Dataset,
    objects: &[usize],
    dist: &TimestepDistribution,
    schedule: &NoiseSchedule,
    with_mask: bool,
    rng: &mut R,
) -> Result<(Example, Vec<f64>)> {
    let pair = sample_pair(dataset, objects, true, rng);
    let target = dataset.view(pair.object, pair.target);
    let x0 = target.to_signed_chw();
    let t = dist.sample(rng, 1)[0];
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let x_t = schedule.forward_diffuse(&x0, t, &eps)?;
    let mask = with_mask.then(|| {
        let m: Vec<f64> = target.mask().into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        m.iter().cycle().take(3 * m.len()).copied().collect()
    });
    let cond = ConditionBundle {
        features: Features { grids: Vec::new(), cls: Vec::new() },
        pose: pose_embedding(pair.pose),
    };
    Ok((Example { pair, x0, t, eps, mask, cond }, x_t))
}

/// A fully materialized optimizer-step batch: examples plus their `x_t`.
struct Batch {
    examples: Vec<Example>,
    x_t: Vec<Vec<f64>>,
}

pub fn attach_features(source: &FeatureSource, dataset: &Dataset, examples: &mut [Example]) -> Result<()> {
    let pairs: Vec<ViewPair> = examples.iter().map(|e| e.pair).collect();
    for (e, f) in examples.iter_mut().zip(source.features(dataset, &pairs)?) {
        e.cond.features = f;
    }
    Ok(())
}

/// Noise-matching loss `mean ||eps_theta(x_t; t; cond) - eps||^2` with unit
/// weighting, optionally restricted to masked pixels.
pub fn batch_loss<E: Element>(
    model: &UNetDenoiser<E>,
    g: &mut Graph<E>,
    examples: &[Example],
    x_t: &[Vec<f64>],
) -> Result<Var> {
    let s = model.config.image;
    let b = examples.len();
    let shape = [b, 3, s, s];
    let cast = |v: &[f64]| v.iter().map(|&x| E::from_f64(x)).collect::<Vec<E>>();
    let xv = g.input(&shape, x_t.iter().flat_map(|x| cast(x)).collect())?;
    let eps = g.input(&shape, examples.iter().flat_map(|e| cast(&e.eps)).collect())?;
    let bundles: Vec<&ConditionBundle> = examples.iter().map(|e| &e.cond).collect();
    let cond = model.cond_inputs(g, &bundles)?;
    let t: Vec<usize> = examples.iter().map(|e| e.t).collect();
    let masked = examples.iter().all(|e| e.mask.is_some());
    if !masked {
        return Ok(model.eps_loss(g, xv, &t, &cond, eps)?.0);
    }
    let pred = model.forward(g, xv, &t, &cond)?;
    let diff = g.tape.sub(pred, eps)?;
    let sq = g.tape.square(diff);
    let mask: Vec<f64> = examples.iter().flat_map(|e| e.mask.clone().unwrap_or_default()).collect();
    let count = mask.iter().sum::<f64>().max(1.0);
    let m = g.input(&shape, cast(&mask))?;
    let sq = g.tape.mul(sq, m)?;
    let total = g.tape.sum(sq);
    Ok(g.tape.scale(total, 1.0 / count))
}

/// Mean gradient of one batch split into `accum` equal micro-batches.
///
/// `grads` is overwritten; returns the mean micro-batch loss.
pub fn accumulate_gradients<E: Element>(
    model: &UNetDenoiser<E>,
    examples: &[Example],
    x_t: &[Vec<f64>],
    accum: usize,
    grads: &mut GradBuffer<E>,
) -> Result<f64> {
    if accum == 0 || examples.len() % accum != 0 || x_t.len() != examples.len() {
        return Err(Error::invalid(format!("{} examples cannot form {accum} equal micro-batches", examples.len())));
    }
    let micro = examples.len() / accum;
    grads.clear();
    let mut total = 0.0;
    for (ex, xs) in examples.chunks(micro).zip(x_t.chunks(micro)) {
        let mut g = Graph::new(&model.params, true);
        let loss = batch_loss(model, &mut g, ex, xs)?;
        let value = g.tape.scalar(loss)?.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("micro-batch loss {value}")));
        }
        g.backward(loss)?;
        g.accumulate(grads);
        total += value;
    }
    grads.scale(E::from_f64(1.0 / accum as f64));
    Ok(total / accum as f64)
}

/// Fixed validation examples with features attached.
pub fn validation_set(config: &TrainConfig, data: &FitData) -> Result<Vec<Example>> {
    if data.val_objects.is_empty() {
        return Ok(Vec::new());
    }
    let schedule = NoiseSchedule::default();
    let dist = TimestepDistribution::uniform();
    let mut rng = ChaCha8Rng::seed_from_u64(VAL_SEED);
    let mut out = Vec::with_capacity(config.val_pairs);
    for _ in 0..config.val_pairs {
        out.push(draw_example(data.dataset, data.val_objects, &dist, &schedule, false, &mut rng)?.0);
    }
    attach_features(&data.features, data.dataset, &mut out)?;
    Ok(out)
}

/// Single-pass `x0` estimates at `T_EVAL`, scored by MSE and feature distance.
pub fn evaluate<E: Element>(
    model: &UNetDenoiser<E>,
    examples: &[Example],
    metric_encoder: Option<&RefEncoder>,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let schedule = NoiseSchedule::default();
    let (mut total_mse, mut total_fd) = (0.0, 0.0);
    for (ci, chunk) in examples.chunks(VAL_CHUNK).enumerate() {
        let predictor = Conditioned {
            model,
            bundles: chunk.iter().map(|e| &e.cond).collect(),
        };
        let x0: Vec<f64> = chunk.iter().flat_map(|e| e.x0.iter().copied()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(VAL_SEED ^ (ci as u64 + 1));
        let est = single_pass_estimate(&predictor, &schedule, &x0, T_EVAL, &mut rng)?;
        let n = chunk[0].x0.len();
        let est: Vec<Vec<f64>> = est.chunks(n).map(|c| c.iter().map(|v| v.clamp(-1.0, 1.0)).collect()).collect();
        for (e, x) in chunk.iter().zip(&est) {
            total_mse += mse(x, &e.x0)?;
        }
        if let Some(enc) = metric_encoder {
            let a: Vec<Vec<f32>> = est.iter().map(|x| x.iter().map(|&v| v as f32).collect()).collect();
            let b: Vec<Vec<f32>> = chunk.iter().map(|e| e.x0.iter().map(|&v| v as f32).collect()).collect();
            total_fd += feat_dist_batch(&a, &b, enc)?.iter().sum::<f64>();
        }
    }
    let n = examples.len() as f64;
    let fd = if metric_encoder.is_some() { total_fd / n } else { f64::NAN };
    Ok((total_mse / n, fd))
}

/// Trains a denoiser from scratch and optionally writes `metrics.csv`,
/// `final.ckpt`, `best.ckpt` and `config.txt` into `out_dir`.
pub fn fit<E: Element>(config: &TrainConfig, data: &FitData, out_dir: Option<&Path>) -> Result<FitReport<E>> {
    config.validate()?;
    if data.train_objects.is_empty() {
        return Err(Error::invalid("no training objects"));
    }
    let schedule = NoiseSchedule::default();
    let dist = TimestepDistribution::from_kind(config.timesteps)?;
    let unet = config.unet_config(&data.features.encoder_config());
    let model = UNetDenoiser::<E>::new(unet, config.seed)?;
    let mut kv = KvConfig::default();
    config.to_kv(&mut kv);
    kv.set("dataset_hash", data.dataset.content_hash());
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let mut full = kv.clone();
        checkpoint::unet_to_kv(&model.config, &mut full);
        std::fs::write(d.join("config.txt"), full.render()).map_err(|e| Error::io(d.join("config.txt"), e))?;
    }
    let val = validation_set(config, data)?;
    let mut csv = match out_dir {
        Some(d) => {
            let p = d.join("metrics.csv");
            let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
            writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(&p, e))?;
            Some((p, w))
        }
        None => None,
    };

    let (tx, rx) = sync_channel::<Result<Batch>>(config.prefetch);
    let data_seed = config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xda7a;
    let steps = config.max_steps;
    let (dist, sched) = (&dist, &schedule);
    std::thread::scope(|scope| -> Result<FitReport<E>> {
        scope.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
            for _ in 0..steps {
                let batch = (|| {
                    let mut examples = Vec::with_capacity(config.batch_size);
                    let mut x_t = Vec::with_capacity(config.batch_size);
                    for _ in 0..config.batch_size {
                        let (e, x) = draw_example(data.dataset, data.train_objects, dist, sched, config.loss_mask, &mut rng)?;
                        examples.push(e);
                        x_t.push(x);
                    }
                    attach_features(&data.features, data.dataset, &mut examples)?;
                    Ok(Batch { examples, x_t })
                })();
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        let result = run_loop(config, model, &val, data, &rx, out_dir, &mut csv, &kv, sched);
        // unblocks the producer if the loop ended early
        drop(rx);
        result
    })
}

#[allow(clippy::too_many_arguments)]
fn run_loop<E: Element>(
    config: &TrainConfig,
    mut model: UNetDenoiser<E>,
    val: &[Example],
    data: &FitData,
    rx: &std::sync::mpsc::Receiver<Result<Batch>>,
    out_dir: Option<&Path>,
    csv: &mut Option<(std::path::PathBuf, BufWriter<File>)>,
    kv: &KvConfig,
    schedule: &NoiseSchedule,
) -> Result<FitReport<E>> {
    let start = Instant::now();
    let lr = config.lr_schedule();
    let mut adam = Adam::new(&model.params, config.adam);
    let mut ema = EmaState::new(&model, config.ema_decay);
    let mut grads = GradBuffer::zeros(&model.params);
    let mut losses = Vec::with_capacity(config.max_steps);
    let mut rows = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let (mut micro_batches, mut ema_updates) = (0usize, 0usize);
    let mut since_row = (0.0f64, 0usize);

    for step in 1..=config.max_steps {
        let batch = rx
            .recv()
            .map_err(|_| Error::invalid("batch producer stopped early"))??;
        let step_loss = match accumulate_gradients(&model, &batch.examples, &batch.x_t, config.grad_accum, &mut grads) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => return Err(dump_state(out_dir, step, &batch.examples, &model, "loss")),
            Err(e) => return Err(e),
        };
        micro_batches += config.grad_accum;
        if !grads.is_finite() {
            return Err(dump_state(out_dir, step, &batch.examples, &model, "gradient"));
        }
        adam.update(&mut model.params, &grads, lr.at(step))?;
        ema.update(&model.params)?;
        ema_updates += 1;
        losses.push(step_loss);
        since_row.0 += step_loss;
        since_row.1 += 1;

        if step % config.val_every == 0 || step == config.max_steps {
            let before = (model.params.content_hash(), ema.model.params.content_hash());
            let (val_mse, val_featdist) = evaluate(&ema.model, val, data.metric_encoder)?;
            let after = (model.params.content_hash(), ema.model.params.content_hash());
            if before != after {
                return Err(Error::invalid("validation mutated model parameters"));
            }
            let row = MetricsRow {
                step,
                wall_clock_s: if config.record_wall_clock { start.elapsed().as_secs_f64() } else { 0.0 },
                train_loss: since_row.0 / since_row.1 as f64,
                val_mse,
                val_featdist,
                lr: lr.at(step),
            };
            since_row = (0.0, 0);
            log::info!("step {step}: {}", row.csv());
            if let Some((p, w)) = csv.as_mut() {
                writeln!(w, "{}", row.csv()).and_then(|_| w.flush()).map_err(|e| Error::io(p.as_path(), e))?;
            }
            if val_mse.is_finite() && best.is_none_or(|(_, b)| val_mse < b) {
                best = Some((step, val_mse));
                if let Some(d) = out_dir {
                    Checkpoint::new(&ema.model, schedule, kv).save(&d.join("best.ckpt"))?;
                }
            }
            rows.push(row);
        }
    }
    if let Some(d) = out_dir {
        Checkpoint::new(&ema.model, schedule, kv).save(&d.join("final.ckpt"))?;
    }
    Ok(FitReport {
        model,
        ema,
        losses,
        micro_batches,
        optimizer_steps: adam.step as usize,
        ema_updates,
        rows,
        best_val_mse: best,
    })
}

/// Writes a short diagnostic next to the outputs and builds the abort error.
fn dump_state<E: Element>(out_dir: Option<&Path>, step: usize, examples: &[Example], model: &UNetDenoiser<E>, what: &str) -> Error {
    let mut text = format!("non-finite {what} at step {step}\n");
    let ts: Vec<String> = examples.iter().map(|e| e.t.to_string()).collect();
    text.push_str(&format!("timesteps: {}\n", ts.join(",")));
    for (name, t) in model.params.iter() {
        let norm: f64 = t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        text.push_str(&format!("{name} {:?} norm={norm:e}\n", t.shape()));
    }
    if let Some(d) = out_dir {
        let _ = std::fs::write(d.join("nonfinite_state.txt"), &text);
    }
    Error::NonFinite(format!("{what} at step {step}"))
}
