//! Denoiser checkpoint container.
//!
//! Layout (little endian): magic `VDCK`, u16 version, 32-byte SHA-256 of the
//! config text, u32 length plus config text, u32 `T`, f64 beta start and end,
//! `T` f64 betas, then the EMA weights as named tensors.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::KvConfig;
use crate::denoiser::{Conditioning, UNetConfig, UNetDenoiser};
use crate::error::{Error, Result};
use crate::nn::io::{decode_params, encode_params, ByteReader};
use crate::nn::ParamStore;
use crate::schedule::NoiseSchedule;
use crate::synthdata::container::{hex, write_atomically};
use crate::tensor::{Element, InterpMode};

const MAGIC: &[u8; 4] = b"VDCK";
const VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub unet: UNetConfig,
    /// Resolved configuration of the run that produced the weights.
    pub config_text: String,
    pub schedule: NoiseSchedule,
    pub params: ParamStore<f32>,
}

/// `unet.*` keys describing a denoiser architecture.
pub fn unet_to_kv(c: &UNetConfig, kv: &mut KvConfig) {
    let channels: Vec<String> = c.channels.iter().map(ToString::to_string).collect();
    kv.set("unet.image", c.image);
    kv.set("unet.channels", channels.join(","));
    kv.set("unet.res_blocks", c.res_blocks);
    kv.set("unet.time_dim", c.time_dim);
    kv.set("unet.emb_dim", c.emb_dim);
    kv.set("unet.conditioning", c.conditioning);
    kv.set("unet.interp", c.interp);
    kv.set("unet.enc_layers", c.enc_layers);
    kv.set("unet.enc_grid", c.enc_grid);
    kv.set("unet.enc_dim", c.enc_dim);
}

pub fn parse_channels(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| Error::invalid(format!("channel list {s:?}: {e}"))))
        .collect()
}

pub fn unet_from_kv(kv: &KvConfig) -> Result<UNetConfig> {
    let need = |k: &str| kv.raw(k).ok_or_else(|| Error::format("VDCK", format!("config lacks {k}")));
    let num = |k: &str| -> Result<usize> {
        need(k)?.parse().map_err(|e| Error::format("VDCK", format!("{k}: {e}")))
    };
    Ok(UNetConfig {
        image: num("unet.image")?,
        channels: parse_channels(need("unet.channels")?)?,
        res_blocks: num("unet.res_blocks")?,
        time_dim: num("unet.time_dim")?,
        emb_dim: num("unet.emb_dim")?,
        conditioning: need("unet.conditioning")?.parse::<Conditioning>()?,
        interp: need("unet.interp")?.parse::<InterpMode>()?,
        enc_layers: num("unet.enc_layers")?,
        enc_grid: num("unet.enc_grid")?,
        enc_dim: num("unet.enc_dim")?,
    })
}

impl Checkpoint {
    pub fn new<E: Element>(model: &UNetDenoiser<E>, schedule: &NoiseSchedule, extra: &KvConfig) -> Self {
        let mut kv = extra.clone();
        unet_to_kv(&model.config, &mut kv);
        Self {
            unet: model.config.clone(),
            config_text: kv.render(),
            schedule: schedule.clone(),
            params: model.params.cast(),
        }
    }

    pub fn config_hash(&self) -> [u8; 32] {
        Sha256::digest(self.config_text.as_bytes()).into()
    }

    /// Rebuilds the denoiser, checking the stored tensors against its layout.
    pub fn model<E: Element>(&self) -> Result<UNetDenoiser<E>> {
        let fresh = UNetDenoiser::<f32>::new(self.unet.clone(), 0)?;
        if !fresh.params.same_layout(&self.params) {
            return Err(Error::format("VDCK", "parameter layout does not match the stored architecture"));
        }
        Ok(UNetDenoiser {
            config: self.unet.clone(),
            params: self.params.cast(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        let s = &self.schedule;
        out.extend_from_slice(&(s.steps() as u32).to_le_bytes());
        out.extend_from_slice(&s.beta_start().to_le_bytes());
        out.extend_from_slice(&s.beta_end().to_le_bytes());
        for t in 1..=s.steps() {
            out.extend_from_slice(&s.beta(t).expect("in range").to_le_bytes());
        }
        encode_params(&self.params, &mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "VDCK");
        if r.take(4)? != MAGIC {
            return Err(Error::format("VDCK", "missing magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format("VDCK", format!("unsupported version {version}")));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format("VDCK", "config text is not UTF-8"))?;
        let found: [u8; 32] = Sha256::digest(config_text.as_bytes()).into();
        if found != hash {
            return Err(Error::HashMismatch {
                kind: "checkpoint config",
                expected: hex(&hash),
                found: hex(&found),
            });
        }
        let steps = r.u32()? as usize;
        let (start, end) = (r.f64()?, r.f64()?);
        let schedule = NoiseSchedule::linear(steps, start, end)?;
        for t in 1..=steps {
            if r.f64()?.to_bits() != schedule.beta(t)?.to_bits() {
                return Err(Error::format("VDCK", format!("stored beta at t={t} disagrees with the linear schedule")));
            }
        }
        let params = decode_params(&mut r, 0)?;
        r.finish()?;
        let unet = unet_from_kv(&KvConfig::parse(&config_text)?)?;
        Ok(Self {
            unet,
            config_text,
            schedule,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        write_atomically(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
