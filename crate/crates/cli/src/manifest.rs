//! One JSON record per command run: what ran, with which resolved
//! configuration, and checksums of everything it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// Resolved configuration, in the command's native format.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// SHA-256 of every artifact, keyed by path relative to `out_dir`.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != FILE) {
            let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            out.insert(rel, sha256_file(&p)?);
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, out_dir: &Path) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config_path: None,
            config,
            seed: None,
            out_dir: out_dir.to_path_buf(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Checksums every file under `out_dir` and writes `manifest.json` there.
    pub fn write(mut self) -> Result<PathBuf> {
        self.artifacts.clear();
        collect(&self.out_dir, &self.out_dir, &mut self.artifacts)?;
        let path = self.out_dir.join(FILE);
        fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(path)
    }

    #[cfg(test)]
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
