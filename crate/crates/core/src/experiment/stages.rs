//! Hash-gated stage execution.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthdata::container::hex;

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

fn outputs_hash(outputs: &[PathBuf]) -> Result<String> {
    let mut parts = Vec::with_capacity(outputs.len());
    for p in outputs {
        parts.push(file_hash(p)?);
    }
    Ok(super::sha_hex(&parts.iter().map(String::as_str).collect::<Vec<_>>()))
}

/// Runs named stages, skipping any whose input key and outputs match the
/// manifest and whose dependencies were not rerun in this invocation.
///
/// Manifest lines are `stage key outputs_hash`.
pub struct StageRunner {
    path: PathBuf,
    entries: BTreeMap<String, (String, String)>,
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
    rerun: BTreeSet<String>,
}

impl StageRunner {
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        match std::fs::read_to_string(path) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate() {
                    let f: Vec<&str> = line.split_whitespace().collect();
                    if f.len() != 3 {
                        return Err(Error::Config { line: i + 1, detail: format!("bad manifest entry {line:?}") });
                    }
                    entries.insert(f[0].to_string(), (f[1].to_string(), f[2].to_string()));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(path, e)),
        }
        Ok(Self { path: path.to_path_buf(), entries, ran: Vec::new(), skipped: Vec::new(), rerun: BTreeSet::new() })
    }

    /// True when the stage can be skipped.
    pub fn is_fresh(&self, name: &str, key: &str, deps: &[&str], outputs: &[PathBuf]) -> bool {
        if deps.iter().any(|d| self.rerun.contains(*d)) {
            return false;
        }
        match self.entries.get(name) {
            Some((k, h)) if k == key => outputs.iter().all(|p| p.exists()) && outputs_hash(outputs).is_ok_and(|o| &o == h),
            _ => false,
        }
    }

    /// Runs `body` unless the stage is fresh; failures carry the stage name.
    pub fn stage(
        &mut self,
        name: &str,
        key: &str,
        deps: &[&str],
        outputs: &[PathBuf],
        body: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        if self.is_fresh(name, key, deps, outputs) {
            log::info!("stage {name}: up to date");
            self.skipped.push(name.to_string());
            return Ok(());
        }
        log::info!("stage {name}: running");
        body().map_err(|e| e.in_stage(name))?;
        self.record(name, key, outputs).map_err(|e| e.in_stage(name))
    }

    /// Marks a stage as run with the given key and current outputs.
    pub fn record(&mut self, name: &str, key: &str, outputs: &[PathBuf]) -> Result<()> {
        let h = outputs_hash(outputs)?;
        self.entries.insert(name.to_string(), (key.to_string(), h));
        self.save()?;
        self.rerun.insert(name.to_string());
        self.ran.push(name.to_string());
        Ok(())
    }

    pub fn mark_skipped(&mut self, name: &str) {
        self.skipped.push(name.to_string());
    }

    fn save(&self) -> Result<()> {
        let text: String = self.entries.iter().map(|(n, (k, h))| format!("{n} {k} {h}\n")).collect();
        if let Some(d) = self.path.parent() {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        std::fs::write(&self.path, text).map_err(|e| Error::io(&self.path, e))
    }
}
