//! Tiny vision transformer used as the frozen reference encoder.

pub mod augment;
pub mod cache;
pub mod pretrain;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::layers::{declare_layer_norm, declare_linear, layer_norm, linear};
use crate::nn::io::{decode_params, encode_params, ByteReader};
use crate::nn::{Graph, Init, ParamStore};
use crate::synthdata::container::write_atomically;
use crate::synthdata::{RelativePose, RenderedView};
use crate::tensor::{Element, Var};

pub use cache::{cache_features, FeatureCache};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};

const ENCODER_MAGIC: &[u8; 4] = b"VDEN";
const ENCODER_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderMode {
    /// Patch-level self-distillation against an EMA teacher.
    Dense,
    /// Contrastive loss on the CLS token only.
    Global,
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderMode::Dense => "dense",
            EncoderMode::Global => "global",
        })
    }
}

impl FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(EncoderMode::Dense),
            "global" => Ok(EncoderMode::Global),
            _ => Err(Error::invalid(format!("unknown encoder mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image: 32,
            patch: 4,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_hidden: 128,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image % self.patch != 0 {
            return Err(Error::invalid(format!("patch {} does not tile image {}", self.patch, self.image)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.depth == 0 {
            return Err(Error::invalid("encoder depth must be >= 1"));
        }
        Ok(())
    }
}

/// Encoder weights plus architecture.
#[derive(Clone, Debug)]
pub struct RefEncoder {
    pub config: EncoderConfig,
    pub params: ParamStore<f32>,
    pub frozen: bool,
}

/// Patch grids after every block plus the final CLS token, for one image.
///
/// Each grid is token-major: `tokens * dim` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub grids: Vec<Vec<f32>>,
    pub cls: Vec<f32>,
}

impl Features {
    pub fn zeros(config: &EncoderConfig) -> Self {
        Self {
            grids: vec![vec![0.0; config.tokens() * config.dim]; config.depth],
            cls: vec![0.0; config.dim],
        }
    }

    pub fn num_values(&self) -> usize {
        self.grids.iter().map(Vec::len).sum::<usize>() + self.cls.len()
    }
}

/// Everything the denoiser is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub features: Features,
    pub pose: [f32; 8],
}

/// Sin/cos of both relative angles at frequencies 1 and 2.
pub fn pose_embedding(pose: RelativePose) -> [f32; 8] {
    let [a, e] = pose.to_vector();
    let mut out = [0.0f32; 8];
    for (k, f) in [1.0, 2.0].into_iter().enumerate() {
        out[4 * k] = (f * a).sin() as f32;
        out[4 * k + 1] = (f * a).cos() as f32;
        out[4 * k + 2] = (f * e).sin() as f32;
        out[4 * k + 3] = (f * e).cos() as f32;
    }
    out
}

/// Handles to the encoder activations of one batched forward pass.
pub struct EncoderOutputs {
    /// Patch embeddings before any attention, `[b, tokens, dim]`.
    pub embedded: Var,
    /// Patch tokens after each block, `[b, tokens, dim]`.
    pub grids: Vec<Var>,
    /// Final-norm tokens including CLS at index 0, `[b, 1 + tokens, dim]`.
    pub normed: Var,
}

impl RefEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(seed);
        let d = config.dim;
        let pixels = 3 * config.patch * config.patch;
        declare_linear(&mut ps, "enc.patch", pixels, d)?;
        ps.declare("enc.cls", &[1, d], Init::Normal(0.02))?;
        ps.declare("enc.pos", &[1 + config.tokens(), d], Init::Normal(0.02))?;
        for i in 0..config.depth {
            let p = format!("enc.blk{i}");
            declare_layer_norm(&mut ps, &format!("{p}.ln1"), d)?;
            declare_linear(&mut ps, &format!("{p}.qkv"), d, 3 * d)?;
            declare_linear(&mut ps, &format!("{p}.proj"), d, d)?;
            declare_layer_norm(&mut ps, &format!("{p}.ln2"), d)?;
            declare_linear(&mut ps, &format!("{p}.fc1"), d, config.mlp_hidden)?;
            declare_linear(&mut ps, &format!("{p}.fc2"), config.mlp_hidden, d)?;
        }
        declare_layer_norm(&mut ps, "enc.ln_f", d)?;
        Ok(Self {
            config,
            params: ps,
            frozen: false,
        })
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn content_hash(&self) -> [u8; 32] {
        self.params.content_hash()
    }

    /// `VDEN` file: magic, u16 version, u8 frozen flag, six u16 architecture
    /// fields, then the named weights.
    pub fn encode(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(ENCODER_MAGIC);
        out.extend_from_slice(&ENCODER_VERSION.to_le_bytes());
        out.push(self.frozen as u8);
        for v in [c.image, c.patch, c.dim, c.depth, c.heads, c.mlp_hidden] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        encode_params(&self.params, &mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "VDEN");
        if r.take(4)? != ENCODER_MAGIC {
            return Err(Error::format("VDEN", "missing magic"));
        }
        let version = r.u16()?;
        if version != ENCODER_VERSION {
            return Err(Error::format("VDEN", format!("unsupported version {version}")));
        }
        let frozen = r.take(1)?[0] != 0;
        let mut f = [0usize; 6];
        for v in &mut f {
            *v = r.u16()? as usize;
        }
        let config = EncoderConfig { image: f[0], patch: f[1], dim: f[2], depth: f[3], heads: f[4], mlp_hidden: f[5] };
        let params = decode_params(&mut r, 0)?;
        r.finish()?;
        let fresh = Self::new(config.clone(), 0)?;
        if !fresh.params.same_layout(&params) {
            return Err(Error::format("VDEN", "weights do not match the stored architecture"));
        }
        Ok(Self { config, params, frozen })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        write_atomically(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Batched forward of `images: [b, 3, H, W]`.
    pub fn forward<E: Element>(&self, g: &mut Graph<E>, images: Var) -> Result<EncoderOutputs> {
        encode(&self.config, g, images)
    }

    /// Features of a batch of views, computed without gradient bookkeeping.
    pub fn features_batch(&self, views: &[&RenderedView]) -> Result<Vec<Features>> {
        let c = &self.config;
        let mut data = Vec::with_capacity(views.len() * 3 * c.image * c.image);
        for v in views {
            if v.height != c.image || v.width != c.image {
                return Err(Error::shape(
                    "forward_features",
                    format!("image {}x{} but encoder expects {}x{}", v.height, v.width, c.image, c.image),
                ));
            }
            data.extend(v.to_signed_chw().into_iter().map(|x| x as f32));
        }
        self.features_from_pixels(&data, views.len())
    }

    /// As [`RefEncoder::features_batch`] for planar RGB already scaled to `[-1, 1]`.
    pub fn features_from_pixels(&self, pixels: &[f32], batch: usize) -> Result<Vec<Features>> {
        let c = &self.config;
        let mut g = Graph::new(&self.params, false);
        let x = g.input(&[batch, 3, c.image, c.image], pixels.to_vec())?;
        let out = self.forward(&mut g, x)?;
        let per = c.tokens() * c.dim;
        let normed = g.tape.value(out.normed);
        let mut feats = Vec::with_capacity(batch);
        for b in 0..batch {
            let grids = out
                .grids
                .iter()
                .map(|&v| g.tape.value(v)[b * per..(b + 1) * per].to_vec())
                .collect();
            let start = b * (c.tokens() + 1) * c.dim;
            feats.push(Features {
                grids,
                cls: normed[start..start + c.dim].to_vec(),
            });
        }
        Ok(feats)
    }

    pub fn forward_features(&self, view: &RenderedView) -> Result<Features> {
        Ok(self.features_batch(&[view])?.remove(0))
    }
}

/// `[b, 3, H, W]` -> `[b, tokens, 3 * patch * patch]` with patches in raster order.
pub fn patchify<E: Element>(g: &mut Graph<E>, config: &EncoderConfig, images: Var) -> Result<Var> {
    let s = g.tape.shape(images).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != config.image || s[3] != config.image {
        return Err(Error::shape(
            "encoder",
            format!("input {:?}, expected [b, 3, {}, {}]", s, config.image, config.image),
        ));
    }
    let (b, n, p) = (s[0], config.grid(), config.patch);
    let x = g.tape.reshape(images, &[b, 3, n, p, n, p])?;
    let x = g.tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    g.tape.reshape(x, &[b, n * n, 3 * p * p])
}

fn encode<E: Element>(config: &EncoderConfig, g: &mut Graph<E>, images: Var) -> Result<EncoderOutputs> {
    let b = g.tape.shape(images)[0];
    let (d, t) = (config.dim, config.tokens());
    let patches = patchify(g, config, images)?;
    let embedded = linear(g, "enc.patch", patches)?;
    let cls_table = g.param("enc.cls")?;
    let cls = g.tape.embedding(cls_table, &vec![0; b])?;
    let cls = g.tape.reshape(cls, &[b, 1, d])?;
    let mut x = g.tape.concat(&[cls, embedded], 1)?;
    let pos = g.param("enc.pos")?;
    x = g.tape.add(x, pos)?;
    let mut grids = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        x = block(g, config, &format!("enc.blk{i}"), x)?;
        grids.push(g.tape.narrow(x, 1, 1, t)?);
    }
    let normed = layer_norm(g, "enc.ln_f", x)?;
    Ok(EncoderOutputs {
        embedded,
        grids,
        normed,
    })
}

fn block<E: Element>(g: &mut Graph<E>, config: &EncoderConfig, p: &str, x: Var) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let (h, hd) = (config.heads, config.dim / config.heads);
    let y = layer_norm(g, &format!("{p}.ln1"), x)?;
    let qkv = linear(g, &format!("{p}.qkv"), y)?;
    let mut heads = Vec::with_capacity(3);
    for k in 0..3 {
        let part = g.tape.narrow(qkv, 2, k * d, d)?;
        let part = g.tape.reshape(part, &[b, n, h, hd])?;
        heads.push(g.tape.permute(part, &[0, 2, 1, 3])?);
    }
    let a = g.tape.attention(heads[0], heads[1], heads[2])?;
    let a = g.tape.permute(a, &[0, 2, 1, 3])?;
    let a = g.tape.reshape(a, &[b, n, d])?;
    let a = linear(g, &format!("{p}.proj"), a)?;
    let x = g.tape.add(x, a)?;
    let y = layer_norm(g, &format!("{p}.ln2"), x)?;
    let y = linear(g, &format!("{p}.fc1"), y)?;
    let y = g.tape.silu(y);
    let y = linear(g, &format!("{p}.fc2"), y)?;
    g.tape.add(x, y)
}
