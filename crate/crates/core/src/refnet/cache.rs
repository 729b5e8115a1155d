//! On-disk store of encoder features keyed by encoder and dataset hashes.

use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;

use super::{EncoderConfig, Features, RefEncoder};
use crate::error::{Error, Result};
use crate::synthdata::container::{hex, write_atomically};
use crate::synthdata::Dataset;

pub const MAGIC: &[u8; 4] = b"FCCH";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 32 + 32 + 4 + 1 + 2 + 2 + 2;
/// Objects encoded per batch while writing.
const ENCODE_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheHeader {
    pub encoder_hash: [u8; 32],
    pub dataset_hash: [u8; 32],
    pub n_objects: usize,
    pub views: usize,
    pub layers: usize,
    pub tokens: usize,
    pub dim: usize,
}

impl CacheHeader {
    fn record_values(&self) -> usize {
        self.layers * self.tokens * self.dim + self.dim
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.encoder_hash);
        out.extend_from_slice(&self.dataset_hash);
        out.extend_from_slice(&(self.n_objects as u32).to_le_bytes());
        out.push(self.views as u8);
        out.extend_from_slice(&(self.layers as u16).to_le_bytes());
        out.extend_from_slice(&(self.tokens as u16).to_le_bytes());
        out.extend_from_slice(&(self.dim as u16).to_le_bytes());
        out
    }

    fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_BYTES || &b[..4] != MAGIC {
            return Err(Error::format("FCCH", "missing magic"));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != VERSION {
            return Err(Error::format("FCCH", format!("unsupported version {version}")));
        }
        let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]) as usize;
        Ok(Self {
            encoder_hash: b[6..38].try_into().expect("32 bytes"),
            dataset_hash: b[38..70].try_into().expect("32 bytes"),
            n_objects: u32::from_le_bytes(b[70..74].try_into().expect("4 bytes")) as usize,
            views: b[74] as usize,
            layers: u16_at(75),
            tokens: u16_at(77),
            dim: u16_at(79),
        })
    }
}

fn header_for(encoder: &RefEncoder, dataset: &Dataset) -> CacheHeader {
    let c: &EncoderConfig = &encoder.config;
    CacheHeader {
        encoder_hash: encoder.content_hash(),
        dataset_hash: dataset.digest(),
        n_objects: dataset.n_objects(),
        views: dataset.views_per_object,
        layers: c.depth,
        tokens: c.tokens(),
        dim: c.dim,
    }
}

/// Encodes every view of `dataset` and writes the cache atomically.
pub fn cache_features(encoder: &RefEncoder, dataset: &Dataset, path: &Path) -> Result<()> {
    if !encoder.frozen {
        return Err(Error::invalid("features may only be cached from a frozen encoder"));
    }
    let header = header_for(encoder, dataset);
    if header.tokens > u16::MAX as usize || header.dim > u16::MAX as usize {
        return Err(Error::invalid("encoder too large for the cache format"));
    }
    let objects: Vec<usize> = (0..dataset.n_objects()).collect();
    let mut failure = None;
    write_atomically(path, |w| {
        w.write_all(&header.encode())?;
        for chunk in objects.chunks(ENCODE_CHUNK * rayon::current_num_threads()) {
            let encoded: Result<Vec<Vec<Features>>> = chunk
                .par_chunks(ENCODE_CHUNK)
                .map(|objs| {
                    let views: Vec<_> = objs
                        .iter()
                        .flat_map(|&o| dataset.objects[o].iter())
                        .collect();
                    encoder.features_batch(&views)
                })
                .collect();
            let encoded = match encoded {
                Ok(e) => e,
                Err(e) => {
                    failure = Some(e);
                    return Err(std::io::Error::other("feature extraction failed"));
                }
            };
            for f in encoded.iter().flatten() {
                write_features(w, f)?;
            }
        }
        Ok(())
    })
    .map_err(|e| failure.take().unwrap_or(e))
}

fn write_features(w: &mut impl Write, f: &Features) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(f.num_values() * 4);
    for v in f.grids.iter().flatten().chain(&f.cls) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Read handle onto a validated feature cache.
pub struct FeatureCache {
    path: PathBuf,
    header: CacheHeader,
    file: Mutex<BufReader<File>>,
}

impl FeatureCache {
    /// Opens `path`, refusing it unless both hashes match.
    pub fn open(path: &Path, encoder_hash: &[u8; 32], dataset_hash: &[u8; 32]) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut head = vec![0u8; HEADER_BYTES];
        file.read_exact(&mut head)
            .map_err(|_| Error::format("FCCH", "truncated header"))?;
        let header = CacheHeader::decode(&head)?;
        for (kind, expected, found) in [
            ("encoder", encoder_hash, &header.encoder_hash),
            ("dataset", dataset_hash, &header.dataset_hash),
        ] {
            if expected != found {
                return Err(Error::HashMismatch {
                    kind,
                    expected: hex(expected),
                    found: hex(found),
                });
            }
        }
        let expected_len = HEADER_BYTES + header.n_objects * header.views * header.record_values() * 4;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
        if len != expected_len {
            return Err(Error::format("FCCH", format!("expected {expected_len} bytes, found {len}")));
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            file: Mutex::new(BufReader::new(file)),
        })
    }

    /// Opens the cache for a specific encoder and dataset.
    pub fn open_for(path: &Path, encoder: &RefEncoder, dataset: &Dataset) -> Result<Self> {
        Self::open(path, &encoder.content_hash(), &dataset.digest())
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    pub fn read(&self, object: usize, view: usize) -> Result<Features> {
        let h = &self.header;
        if object >= h.n_objects || view >= h.views {
            return Err(Error::invalid(format!(
                "cache entry ({object}, {view}) outside {} objects x {} views",
                h.n_objects, h.views
            )));
        }
        let n = h.record_values();
        let offset = HEADER_BYTES + (object * h.views + view) * n * 4;
        let mut bytes = vec![0u8; n * 4];
        {
            let mut f = self.file.lock().expect("cache reader poisoned");
            f.seek(SeekFrom::Start(offset as u64))
                .and_then(|_| f.read_exact(&mut bytes))
                .map_err(|e| Error::io(&self.path, e))?;
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let per = h.tokens * h.dim;
        Ok(Features {
            grids: (0..h.layers).map(|l| vals[l * per..(l + 1) * per].to_vec()).collect(),
            cls: vals[h.layers * per..].to_vec(),
        })
    }
}
