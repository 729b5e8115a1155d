use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::render::{render_view_sized, RenderedView, IMAGE_SIZE};
use super::scene::generate_object;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NVDS";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 4 + 1 + 2 + 2;
pub const DEFAULT_VIEWS: usize = 12;
pub const DEFAULT_ELEVATION: f32 = 30.0;
/// Objects rendered per batch before being handed to the writer.
const RENDER_CHUNK: usize = 64;

/// Camera placement shared by every object.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRig {
    pub views: usize,
    pub elevation: f32,
    pub height: usize,
    pub width: usize,
}

impl Default for ViewRig {
    fn default() -> Self {
        Self {
            views: DEFAULT_VIEWS,
            elevation: DEFAULT_ELEVATION,
            height: IMAGE_SIZE,
            width: IMAGE_SIZE,
        }
    }
}

impl ViewRig {
    /// Evenly spaced azimuths starting at 0.
    pub fn azimuths(&self) -> Vec<f32> {
        (0..self.views)
            .map(|k| (360.0 * k as f64 / self.views as f64) as f32)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.views == 0 || self.views > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("views per object {} not in 1..=255", self.views)));
        }
        if self.height == 0 || self.width == 0 || self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("image size {}x{}", self.height, self.width)));
        }
        Ok(())
    }
}

/// Per-object seed derived from the dataset seed.
pub fn object_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut z = dataset_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn render_object(dataset_seed: u64, index: usize, rig: &ViewRig) -> Vec<RenderedView> {
    let spec = generate_object(object_seed(dataset_seed, index));
    rig.azimuths()
        .into_iter()
        .map(|az| render_view_sized(&spec, az, rig.elevation, rig.height, rig.width))
        .collect()
}

/// In-memory multi-view dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub views_per_object: usize,
    pub height: usize,
    pub width: usize,
    pub objects: Vec<Vec<RenderedView>>,
}

/// Object indices of the train and validation partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Split {
    /// The last `max(1, round(2% of n))` objects are held out once `n >= 2`.
    pub fn by_object(n_objects: usize) -> Self {
        let n_val = if n_objects >= 2 {
            ((n_objects as f64 * 0.02).round() as usize).max(1)
        } else {
            0
        };
        let cut = n_objects - n_val;
        Self {
            train: (0..cut).collect(),
            val: (cut..n_objects).collect(),
        }
    }
}

impl Dataset {
    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn view(&self, object: usize, view: usize) -> &RenderedView {
        &self.objects[object][view]
    }

    pub fn split(&self) -> Split {
        Split::by_object(self.n_objects())
    }

    pub fn file_size(n_objects: usize, views: usize, height: usize, width: usize) -> usize {
        HEADER_BYTES + n_objects * views * (8 + height * width * 4)
    }

    /// Renders `n_objects` objects in memory.
    pub fn generate(n_objects: usize, seed: u64, rig: &ViewRig) -> Result<Self> {
        rig.validate()?;
        let objects = (0..n_objects)
            .into_par_iter()
            .map(|i| render_object(seed, i, rig))
            .collect();
        Ok(Self {
            views_per_object: rig.views,
            height: rig.height,
            width: rig.width,
            objects,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::file_size(self.n_objects(), self.views_per_object, self.height, self.width));
        write_header(&mut out, self.n_objects(), self.views_per_object, self.height, self.width);
        for obj in &self.objects {
            for v in obj {
                write_view(&mut out, v);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
            return Err(Error::format("NVDS", "missing magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::format("NVDS", format!("unsupported version {version}")));
        }
        let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let views = bytes[10] as usize;
        let height = u16::from_le_bytes([bytes[11], bytes[12]]) as usize;
        let width = u16::from_le_bytes([bytes[13], bytes[14]]) as usize;
        let expected = Self::file_size(n, views, height, width);
        if bytes.len() != expected {
            return Err(Error::format("NVDS", format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let pixels = height * width * 4;
        let mut pos = HEADER_BYTES;
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let mut obj = Vec::with_capacity(views);
            for _ in 0..views {
                let azimuth = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
                let elevation = f32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
                pos += 8;
                obj.push(RenderedView {
                    azimuth,
                    elevation,
                    height,
                    width,
                    rgba: bytes[pos..pos + pixels].to_vec(),
                });
                pos += pixels;
            }
            objects.push(obj);
        }
        Ok(Self {
            views_per_object: views,
            height,
            width,
            objects,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomically(path, |w| w.write_all(&self.encode()))
    }

    /// SHA-256 of the encoded container.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.encode()).into()
    }

    /// Hex form of [`Dataset::digest`].
    pub fn content_hash(&self) -> String {
        hex(&self.digest())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_header(out: &mut Vec<u8>, n: usize, views: usize, height: usize, width: usize) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.push(views as u8);
    out.extend_from_slice(&(height as u16).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
}

fn write_view(out: &mut Vec<u8>, v: &RenderedView) {
    out.extend_from_slice(&v.azimuth.to_le_bytes());
    out.extend_from_slice(&v.elevation.to_le_bytes());
    out.extend_from_slice(&v.rgba);
}

/// Writes to a sibling temp file and renames it into place; the temp file is
/// removed on any failure.
pub(crate) fn write_atomically(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let tmp = temp_path(path);
    let result = File::create(&tmp).and_then(|f| {
        let mut w = BufWriter::new(f);
        body(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()
    });
    let result = result.and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Renders and streams a dataset to `path` without holding it all in memory.
///
/// Returns the hex SHA-256 of the written file.
pub fn build_dataset(n_objects: usize, seed: u64, rig: &ViewRig, path: &Path) -> Result<String> {
    if n_objects == 0 {
        return Err(Error::InvalidArgument("n_objects must be at least 1".into()));
    }
    if n_objects > u32::MAX as usize {
        return Err(Error::InvalidArgument(format!("n_objects {n_objects} exceeds u32")));
    }
    rig.validate()?;
    let mut hasher = Sha256::new();
    write_atomically(path, |w| {
        let mut header = Vec::with_capacity(HEADER_BYTES);
        write_header(&mut header, n_objects, rig.views, rig.height, rig.width);
        hasher.update(&header);
        w.write_all(&header)?;
        let (tx, rx) = mpsc::sync_channel::<Vec<Vec<RenderedView>>>(2);
        std::thread::scope(|scope| {
            let producer = scope.spawn(move || {
                for start in (0..n_objects).step_by(RENDER_CHUNK) {
                    let end = (start + RENDER_CHUNK).min(n_objects);
                    let chunk: Vec<_> = (start..end)
                        .into_par_iter()
                        .map(|i| render_object(seed, i, rig))
                        .collect();
                    if tx.send(chunk).is_err() {
                        return;
                    }
                }
            });
            let mut buf = Vec::new();
            let mut outcome = Ok(());
            for chunk in rx {
                for obj in &chunk {
                    for v in obj {
                        buf.clear();
                        write_view(&mut buf, v);
                        hasher.update(&buf);
                        if let Err(e) = w.write_all(&buf) {
                            outcome = Err(e);
                        }
                    }
                }
                if outcome.is_err() {
                    break;
                }
            }
            producer.join().expect("render thread panicked");
            outcome
        })
    })?;
    log::info!("wrote {n_objects} objects to {}", path.display());
    Ok(hex(&hasher.finalize()))
}
