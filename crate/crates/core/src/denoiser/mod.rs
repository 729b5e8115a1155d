//! Conditional UNet noise predictor with multi-scale feature amalgamation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::layers::{
    conv, declare_conv, declare_conv_scaled, declare_group_norm, declare_linear, declare_linear_zero, group_norm, groups_for, linear,
    sinusoidal, NORM_EPS,
};
use crate::nn::{Graph, Init, ParamStore};
use crate::refnet::{ConditionBundle, EncoderConfig};
use crate::tensor::{Element, InterpMode, Var};

/// Which encoder signals reach the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// CLS token through bottleneck cross-attention only.
    ClsOnly,
    /// CLS cross-attention plus multi-scale patch features in every encoder stage.
    Amalgamation,
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conditioning::ClsOnly => "cls_only",
            Conditioning::Amalgamation => "amalgamation",
        })
    }
}

impl FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls_only" => Ok(Conditioning::ClsOnly),
            "amalgamation" => Ok(Conditioning::Amalgamation),
            _ => Err(Error::invalid(format!("unknown conditioning mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub image: usize,
    /// Channel count per resolution stage; each stage halves the resolution.
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub conditioning: Conditioning,
    pub interp: InterpMode,
    /// Encoder feature layout the adapter expects.
    pub enc_layers: usize,
    pub enc_grid: usize,
    pub enc_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::for_encoder(&EncoderConfig::default(), Conditioning::Amalgamation)
    }
}

impl UNetConfig {
    pub fn for_encoder(enc: &EncoderConfig, conditioning: Conditioning) -> Self {
        Self {
            image: enc.image,
            channels: vec![32, 64, 128],
            res_blocks: 2,
            time_dim: 64,
            emb_dim: 128,
            conditioning,
            interp: InterpMode::Bilinear,
            enc_layers: enc.depth,
            enc_grid: enc.grid(),
            enc_dim: enc.dim,
        }
    }

    pub fn stage_size(&self, stage: usize) -> usize {
        self.image >> stage
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.res_blocks == 0 {
            return Err(Error::invalid("UNet needs at least one stage and one residual block"));
        }
        let last = self.channels.len() - 1;
        if self.image % (1 << last) != 0 || self.stage_size(last) == 0 {
            return Err(Error::invalid(format!("image {} cannot be halved {last} times", self.image)));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::invalid("time embedding dimension must be even"));
        }
        if self.channels.iter().any(|&c| c < 2) {
            return Err(Error::invalid("every stage needs at least 2 channels"));
        }
        Ok(())
    }
}

pub const POSE_DIM: usize = 8;
/// Init scale of the output convolution relative to He initialization.
pub const OUT_GAIN: f64 = 0.1;

/// The noise-prediction network `eps_theta(x_t; t; cond)`.
#[derive(Clone, Debug)]
pub struct UNetDenoiser<E: Element> {
    pub config: UNetConfig,
    pub params: ParamStore<E>,
}

/// Conditioning signals recorded as constants on a graph.
pub struct CondVars {
    /// Per encoder layer, `[b, tokens, dim]`.
    pub grids: Vec<Var>,
    /// `[b, dim]`
    pub cls: Var,
    /// `[b, 8]`
    pub pose: Var,
}

impl<E: Element> UNetDenoiser<E> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(seed);
        let c = &config;
        declare_linear(&mut ps, "emb.pose", POSE_DIM, c.time_dim)?;
        declare_linear(&mut ps, "emb.fc1", c.time_dim, c.emb_dim)?;
        declare_linear(&mut ps, "emb.fc2", c.emb_dim, c.emb_dim)?;
        declare_conv(&mut ps, "in", 3, c.channels[0])?;
        let last = c.channels.len() - 1;
        for (s, &ch) in c.channels.iter().enumerate() {
            for r in 0..c.res_blocks {
                declare_res(&mut ps, &format!("down{s}.res{r}"), ch, ch, c.emb_dim)?;
            }
            if c.conditioning == Conditioning::Amalgamation {
                declare_linear(&mut ps, &format!("amal{s}.proj"), c.enc_layers * c.enc_dim, ch)?;
                ps.declare(&format!("amal{s}.gamma"), &[1], Init::Zeros)?;
            }
            if s < last {
                declare_conv(&mut ps, &format!("down{s}.pool"), ch, c.channels[s + 1])?;
            }
        }
        let cb = c.channels[last];
        declare_res(&mut ps, "mid.res0", cb, cb, c.emb_dim)?;
        declare_group_norm(&mut ps, "mid.attn.norm", cb)?;
        declare_linear(&mut ps, "mid.attn.q", cb, cb)?;
        declare_linear(&mut ps, "mid.attn.k", c.enc_dim, cb)?;
        declare_linear(&mut ps, "mid.attn.v", c.enc_dim, cb)?;
        declare_linear_zero(&mut ps, "mid.attn.out", cb, cb)?;
        declare_res(&mut ps, "mid.res1", cb, cb, c.emb_dim)?;
        for s in (0..=last).rev() {
            let ch = c.channels[s];
            declare_conv(&mut ps, &format!("up{s}.merge"), 2 * ch, ch)?;
            for r in 0..c.res_blocks {
                declare_res(&mut ps, &format!("up{s}.res{r}"), ch, ch, c.emb_dim)?;
            }
            if s > 0 {
                declare_conv(&mut ps, &format!("up{s}.unpool"), ch, c.channels[s - 1])?;
            }
        }
        declare_group_norm(&mut ps, "out.norm", c.channels[0])?;
        // small but nonzero, so the initial prediction is near zero yet still depends on t
        declare_conv_scaled(&mut ps, "out", c.channels[0], 3, OUT_GAIN)?;
        Ok(Self { config, params: ps })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Records a batch of condition bundles as graph constants.
    pub fn cond_inputs(&self, g: &mut Graph<E>, bundles: &[&ConditionBundle]) -> Result<CondVars> {
        let c = &self.config;
        let b = bundles.len();
        let tokens = c.enc_grid * c.enc_grid;
        let per = tokens * c.enc_dim;
        for (i, bd) in bundles.iter().enumerate() {
            let f = &bd.features;
            if f.grids.len() != c.enc_layers || f.grids.iter().any(|g| g.len() != per) || f.cls.len() != c.enc_dim {
                return Err(Error::shape(
                    "denoiser",
                    format!(
                        "bundle {i}: {} grids of {:?} values and cls of {}, adapter expects {} x {per} and {}",
                        f.grids.len(),
                        f.grids.iter().map(Vec::len).collect::<Vec<_>>(),
                        f.cls.len(),
                        c.enc_layers,
                        c.enc_dim
                    ),
                ));
            }
        }
        let mut grids = Vec::with_capacity(c.enc_layers);
        for l in 0..c.enc_layers {
            let data = bundles.iter().flat_map(|bd| widen::<E>(&bd.features.grids[l])).collect();
            grids.push(g.input(&[b, tokens, c.enc_dim], data)?);
        }
        let cls = g.input(&[b, c.enc_dim], bundles.iter().flat_map(|bd| widen::<E>(&bd.features.cls)).collect())?;
        let pose = g.input(&[b, POSE_DIM], bundles.iter().flat_map(|bd| widen::<E>(&bd.pose)).collect())?;
        Ok(CondVars { grids, cls, pose })
    }

    /// Predicts the noise in `x_t: [b, 3, H, W]` at timesteps `t`.
    pub fn forward(&self, g: &mut Graph<E>, x_t: Var, t: &[usize], cond: &CondVars) -> Result<Var> {
        let c = &self.config;
        let s = g.tape.shape(x_t).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != c.image || s[3] != c.image || s[0] != t.len() {
            return Err(Error::shape(
                "denoiser",
                format!("x_t {:?} with {} timesteps, expected [{}, 3, {}, {}]", s, t.len(), t.len(), c.image, c.image),
            ));
        }
        let b = s[0];
        let temb: Vec<E> = t
            .iter()
            .flat_map(|&ti| sinusoidal(ti as f64, c.time_dim))
            .map(E::from_f64)
            .collect();
        let temb = g.input(&[b, c.time_dim], temb)?;
        let pemb = linear(g, "emb.pose", cond.pose)?;
        let emb = g.tape.add(temb, pemb)?;
        let emb = linear(g, "emb.fc1", emb)?;
        let emb = g.tape.silu(emb);
        let emb = linear(g, "emb.fc2", emb)?;
        let emb = g.tape.silu(emb);

        let features = match c.conditioning {
            Conditioning::Amalgamation => Some(normalized_features(g, &cond.grids)?),
            Conditioning::ClsOnly => None,
        };
        let last = c.channels.len() - 1;
        let mut h = conv(g, "in", x_t, 1)?;
        let mut skips = Vec::with_capacity(c.channels.len());
        for stage in 0..=last {
            for r in 0..c.res_blocks {
                h = res_block(g, &format!("down{stage}.res{r}"), h, emb)?;
                if r == 0 {
                    if let Some(f) = features {
                        h = self.amalgamate(g, stage, h, f)?;
                    }
                }
            }
            skips.push(h);
            if stage < last {
                h = conv(g, &format!("down{stage}.pool"), h, 2)?;
            }
        }
        h = res_block(g, "mid.res0", h, emb)?;
        h = cross_attend_cls(g, "mid.attn", h, cond.cls)?;
        h = res_block(g, "mid.res1", h, emb)?;
        for stage in (0..=last).rev() {
            h = g.tape.concat(&[h, skips[stage]], 1)?;
            h = conv(g, &format!("up{stage}.merge"), h, 1)?;
            for r in 0..c.res_blocks {
                h = res_block(g, &format!("up{stage}.res{r}"), h, emb)?;
            }
            if stage > 0 {
                let sz = c.stage_size(stage - 1);
                h = g.tape.interpolate2d(h, sz, sz, InterpMode::Nearest)?;
                h = conv(g, &format!("up{stage}.unpool"), h, 1)?;
            }
        }
        let groups = groups_for(c.channels[0]);
        h = group_norm(g, "out.norm", h, groups)?;
        h = g.tape.silu(h);
        conv(g, "out", h, 1)
    }

    /// Adds the projected, resampled encoder features into a stage activation.
    ///
    /// `features` is the concatenation of the LayerNormed encoder grids,
    /// `[b, tokens, layers * dim]`.
    pub fn amalgamate(&self, g: &mut Graph<E>, stage: usize, activation: Var, features: Var) -> Result<Var> {
        let c = &self.config;
        let b = g.tape.shape(activation)[0];
        let ch = c.channels[stage];
        let size = c.stage_size(stage);
        let p = linear(g, &format!("amal{stage}.proj"), features)?;
        let p = g.tape.permute(p, &[0, 2, 1])?;
        let p = g.tape.reshape(p, &[b, ch, c.enc_grid, c.enc_grid])?;
        let p = if size == c.enc_grid {
            p
        } else {
            g.tape.interpolate2d(p, size, size, c.interp)?
        };
        let gamma = g.param(&format!("amal{stage}.gamma"))?;
        let p = g.tape.mul(p, gamma)?;
        g.tape.add(activation, p)
    }

    /// Loss and prediction for one batch; see [`UNetDenoiser::forward`].
    pub fn eps_loss(&self, g: &mut Graph<E>, x_t: Var, t: &[usize], cond: &CondVars, eps: Var) -> Result<(Var, Var)> {
        let pred = self.forward(g, x_t, t, cond)?;
        let diff = g.tape.sub(pred, eps)?;
        let sq = g.tape.square(diff);
        Ok((g.tape.mean(sq), pred))
    }
}

fn widen<E: Element>(v: &[f32]) -> impl Iterator<Item = E> + '_ {
    v.iter().map(|&x| E::from_f64(x as f64))
}

/// LayerNorm each encoder grid over its feature channels, then concatenate.
pub fn normalized_features<E: Element>(g: &mut Graph<E>, grids: &[Var]) -> Result<Var> {
    let normed = grids
        .iter()
        .map(|&v| g.tape.layer_norm(v, NORM_EPS))
        .collect::<Result<Vec<_>>>()?;
    g.tape.concat(&normed, 2)
}

fn declare_res<E: Element>(ps: &mut ParamStore<E>, p: &str, cin: usize, cout: usize, emb: usize) -> Result<()> {
    declare_group_norm(ps, &format!("{p}.norm1"), cin)?;
    declare_conv(ps, &format!("{p}.conv1"), cin, cout)?;
    declare_linear(ps, &format!("{p}.emb"), emb, cout)?;
    declare_group_norm(ps, &format!("{p}.norm2"), cout)?;
    declare_conv(ps, &format!("{p}.conv2"), cout, cout)?;
    if cin != cout {
        declare_conv(ps, &format!("{p}.skip"), cin, cout)?;
    }
    Ok(())
}

/// Residual block with the embedding added between its two convolutions.
fn res_block<E: Element>(g: &mut Graph<E>, p: &str, x: Var, emb: Var) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    let (b, cin) = (s[0], s[1]);
    let h = group_norm(g, &format!("{p}.norm1"), x, groups_for(cin))?;
    let h = g.tape.silu(h);
    let h = conv(g, &format!("{p}.conv1"), h, 1)?;
    let cout = g.tape.shape(h)[1];
    let e = linear(g, &format!("{p}.emb"), emb)?;
    let e = g.tape.reshape(e, &[b, cout, 1, 1])?;
    let h = g.tape.add(h, e)?;
    let h = group_norm(g, &format!("{p}.norm2"), h, groups_for(cout))?;
    let h = g.tape.silu(h);
    let h = conv(g, &format!("{p}.conv2"), h, 1)?;
    let skip = if cin == cout { x } else { conv(g, &format!("{p}.skip"), x, 1)? };
    g.tape.add(skip, h)
}

/// Bottleneck tokens attend to the single CLS token; the result is added back.
pub fn cross_attend_cls<E: Element>(g: &mut Graph<E>, p: &str, h: Var, cls: Var) -> Result<Var> {
    let s = g.tape.shape(h).to_vec();
    let (b, c, hh, ww) = (s[0], s[1], s[2], s[3]);
    let n = hh * ww;
    let x = group_norm(g, &format!("{p}.norm"), h, groups_for(c))?;
    let x = g.tape.reshape(x, &[b, c, n])?;
    let x = g.tape.permute(x, &[0, 2, 1])?;
    let q = linear(g, &format!("{p}.q"), x)?;
    let q = g.tape.reshape(q, &[b, 1, n, c])?;
    let k = linear(g, &format!("{p}.k"), cls)?;
    let k = g.tape.reshape(k, &[b, 1, 1, c])?;
    let v = linear(g, &format!("{p}.v"), cls)?;
    let v = g.tape.reshape(v, &[b, 1, 1, c])?;
    let a = g.tape.attention(q, k, v)?;
    let a = g.tape.reshape(a, &[b, n, c])?;
    let a = linear(g, &format!("{p}.out"), a)?;
    let a = g.tape.permute(a, &[0, 2, 1])?;
    let a = g.tape.reshape(a, &[b, c, hh, ww])?;
    g.tape.add(h, a)
}
