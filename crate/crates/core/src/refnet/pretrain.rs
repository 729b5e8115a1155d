//! Self-supervised pretraining of the reference encoder.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::Augment;
use super::{EncoderMode, RefEncoder};
use crate::error::{Error, Result};
use crate::nn::layers::{declare_linear, linear};
use crate::nn::{GradBuffer, Graph, ParamStore};
use crate::optim::{ema_update, Adam, AdamConfig, LrSchedule};
use crate::synthdata::Dataset;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub mode: EncoderMode,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub teacher_decay: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn new(mode: EncoderMode) -> Self {
        Self {
            mode,
            steps: 1000,
            batch: 16,
            lr: 1e-3,
            teacher_decay: 0.996,
            temperature: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    /// Teacher parameter hashes before and after training (dense mode only).
    pub teacher_hashes: Option<([u8; 32], [u8; 32])>,
}

const PREDICTOR_HIDDEN: usize = 128;
/// Large negative logit that removes self-similarity from the contrastive softmax.
const SELF_MASK: f64 = -1e4;

/// Trains `encoder` on views of `objects` and returns it frozen.
///
/// `steps == 0` returns the encoder with unchanged parameters.
pub fn pretrain(
    encoder: RefEncoder,
    dataset: &Dataset,
    objects: &[usize],
    config: &PretrainConfig,
) -> Result<(RefEncoder, PretrainReport)> {
    if objects.is_empty() {
        return Err(Error::invalid("pretraining needs at least one object"));
    }
    if config.mode == EncoderMode::Global && config.batch < 4 {
        return Err(Error::invalid("contrastive pretraining needs batch >= 4"));
    }
    if config.batch == 0 {
        return Err(Error::invalid("batch must be >= 1"));
    }
    let mut report = PretrainReport::default();
    if config.steps == 0 {
        return Ok((encoder.freeze(), report));
    }
    let enc_cfg = encoder.config.clone();
    let mut student = encoder.params.clone();
    if config.mode == EncoderMode::Dense {
        declare_linear(&mut student, "pred.fc1", enc_cfg.dim, PREDICTOR_HIDDEN)?;
        declare_linear(&mut student, "pred.fc2", PREDICTOR_HIDDEN, enc_cfg.dim)?;
    }
    let mut teacher = student.clone();
    let teacher_start = teacher.content_hash();
    let mut opt = Adam::new(&student, AdamConfig::default());
    let sched = LrSchedule {
        base: config.lr,
        final_lr: config.lr * 0.1,
        warmup: (config.steps / 10).min(100),
        total: config.steps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grads = GradBuffer::zeros(&student);
    for step in 0..config.steps {
        grads.clear();
        let loss = match config.mode {
            EncoderMode::Dense => dense_step(&encoder, &student, &teacher, dataset, objects, config, &mut rng, &mut grads)?,
            EncoderMode::Global => global_step(&encoder, &student, dataset, objects, config, &mut rng, &mut grads)?,
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} pretraining diverged at step {step}: loss {loss}, grad norm {}",
                config.mode,
                grads.l2_norm()
            )));
        }
        opt.update(&mut student, &grads, sched.at(step + 1))?;
        if config.mode == EncoderMode::Dense {
            ema_update(&mut teacher, &student, config.teacher_decay)?;
        }
        report.losses.push(loss);
        if step % 100 == 0 {
            log::debug!("{} pretrain step {step}: loss {loss:.5}", config.mode);
        }
    }
    if config.mode == EncoderMode::Dense {
        report.teacher_hashes = Some((teacher_start, teacher.content_hash()));
    }
    let mut out = encoder;
    for i in 0..out.params.len() {
        let name = out.params.name(i).to_string();
        let trained = student.get(&name).expect("student holds every encoder parameter").clone();
        *out.params.tensor_mut(i) = trained;
    }
    Ok((out.freeze(), report))
}

fn view_pixels(dataset: &Dataset, object: usize, view: usize) -> Vec<f32> {
    dataset.view(object, view).to_signed_chw().into_iter().map(|v| v as f32).collect()
}

/// Whether any pixel of each patch is foreground, raster order.
fn patch_foreground(dataset: &Dataset, object: usize, view: usize, patch: usize) -> Vec<bool> {
    let v = dataset.view(object, view);
    let grid = v.width / patch;
    let mut fg = vec![false; grid * grid];
    for (i, m) in v.mask().into_iter().enumerate() {
        if m {
            let (y, x) = (i / v.width, i % v.width);
            fg[(y / patch) * grid + x / patch] = true;
        }
    }
    fg
}

#[allow(clippy::too_many_arguments)]
fn dense_step(
    encoder: &RefEncoder,
    student: &ParamStore<f32>,
    teacher: &ParamStore<f32>,
    dataset: &Dataset,
    objects: &[usize],
    config: &PretrainConfig,
    rng: &mut ChaCha8Rng,
    grads: &mut GradBuffer<f32>,
) -> Result<f64> {
    let c = &encoder.config;
    let (b, size, patch, d, tokens) = (config.batch, c.image, c.patch, c.dim, c.tokens());
    let mut s_pix = Vec::with_capacity(b * 3 * size * size);
    let mut t_pix = Vec::with_capacity(b * 3 * size * size);
    let mut pairs = Vec::new();
    for i in 0..b {
        let obj = objects[rng.random_range(0..objects.len())];
        let view = rng.random_range(0..dataset.views_per_object);
        let src = view_pixels(dataset, obj, view);
        let fg = patch_foreground(dataset, obj, view, patch);
        let sa = Augment::random(rng, size, patch, true);
        let ta = Augment::random(rng, size, patch, false);
        s_pix.extend(sa.apply(&src, size));
        t_pix.extend(ta.apply(&src, size));
        for (st, tt) in Augment::correspondences(&sa, &ta, size, patch) {
            let (pr, pc) = sa.source_patch(size, patch, st / c.grid(), st % c.grid()).expect("paired");
            if fg[pr * c.grid() + pc] {
                pairs.push((i * (tokens + 1) + 1 + st, i * (tokens + 1) + 1 + tt));
            }
        }
    }
    // teacher targets carry no gradient
    let target = {
        let mut g = Graph::new(teacher, false);
        let x = g.input(&[b, 3, size, size], t_pix)?;
        let out = encoder.forward(&mut g, x)?;
        g.tape.value(out.normed).to_vec()
    };
    let mut g = Graph::new(student, true);
    let x = g.input(&[b, 3, size, size], s_pix)?;
    let out = encoder.forward(&mut g, x)?;
    let h = linear(&mut g, "pred.fc1", out.normed)?;
    let h = g.tape.silu(h);
    let pred = linear(&mut g, "pred.fc2", h)?;
    let flat = g.tape.reshape(pred, &[b * (tokens + 1), d])?;

    let mut rows: Vec<(usize, usize)> = (0..b).map(|i| (i * (tokens + 1), i * (tokens + 1))).collect();
    let n_cls = rows.len();
    rows.extend(pairs);
    let s_ids: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let mut t_vals = Vec::with_capacity(rows.len() * d);
    for &(_, t) in &rows {
        t_vals.extend_from_slice(&target[t * d..(t + 1) * d]);
    }
    let s_rows = g.tape.embedding(flat, &s_ids)?;
    let s_rows = g.tape.l2_normalize(s_rows, 1e-6)?;
    let t_rows = g.input(&[rows.len(), d], t_vals)?;
    let t_rows = g.tape.l2_normalize(t_rows, 1e-6)?;
    let cos = g.tape.mul(s_rows, t_rows)?;
    let cos = g.tape.sum_last(cos)?;
    let cls_cos = g.tape.narrow(cos, 0, 0, n_cls)?;
    let mut loss = g.tape.mean(cls_cos);
    if rows.len() > n_cls {
        let patch_cos = g.tape.narrow(cos, 0, n_cls, rows.len() - n_cls)?;
        let patch_mean = g.tape.mean(patch_cos);
        loss = g.tape.add(loss, patch_mean)?;
    }
    let loss = g.tape.scale(loss, -1.0);
    g.backward(loss)?;
    g.accumulate(grads);
    Ok(g.tape.scalar(loss)? as f64)
}

fn global_step(
    encoder: &RefEncoder,
    student: &ParamStore<f32>,
    dataset: &Dataset,
    objects: &[usize],
    config: &PretrainConfig,
    rng: &mut ChaCha8Rng,
    grads: &mut GradBuffer<f32>,
) -> Result<f64> {
    let c = &encoder.config;
    let (size, patch, d, tokens) = (c.image, c.patch, c.dim, c.tokens());
    let b = config.batch.min(objects.len());
    if b < 2 || dataset.views_per_object < 2 {
        return Err(Error::invalid("contrastive pretraining needs >= 2 objects with >= 2 views"));
    }
    let chosen: Vec<usize> = sample_indices(rng, objects.len(), b).into_iter().map(|i| objects[i]).collect();
    let mut first = Vec::with_capacity(b * 3 * size * size);
    let mut second = Vec::with_capacity(b * 3 * size * size);
    for &obj in &chosen {
        let views = sample_indices(rng, dataset.views_per_object, 2);
        for (k, buf) in [&mut first, &mut second].into_iter().enumerate() {
            let aug = Augment::random(rng, size, patch, false);
            buf.extend(aug.apply(&view_pixels(dataset, obj, views.index(k)), size));
        }
    }
    first.extend(second);
    let n = 2 * b;
    let mut g = Graph::new(student, true);
    let x = g.input(&[n, 3, size, size], first)?;
    let out = encoder.forward(&mut g, x)?;
    let flat = g.tape.reshape(out.normed, &[n * (tokens + 1), d])?;
    let cls_ids: Vec<usize> = (0..n).map(|i| i * (tokens + 1)).collect();
    let cls = g.tape.embedding(flat, &cls_ids)?;
    let z = g.tape.l2_normalize(cls, 1e-6)?;
    let sim = g.tape.matmul_nt(z, z)?;
    let sim = g.tape.scale(sim, 1.0 / config.temperature);
    let mut mask = vec![0.0f32; n * n];
    for i in 0..n {
        mask[i * n + i] = SELF_MASK as f32;
    }
    let mask = g.input(&[n, n], mask)?;
    let logits = g.tape.add(sim, mask)?;
    let targets: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    let loss = g.tape.cross_entropy(logits, &targets)?;
    g.backward(loss)?;
    g.accumulate(grads);
    Ok(g.tape.scalar(loss)? as f64)
}
