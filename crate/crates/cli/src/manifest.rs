//! `manifest.json`: what a run produced and how to produce it again.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub tool: String,
    pub version: String,
    pub task: String,
    /// Fully resolved configuration, without the output directory.
    pub config: RunConfig,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else if path.strip_prefix(root).map_or(true, |p| p != Path::new(MANIFEST_NAME)) {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes every file under `dir` except the manifest itself, sorted by path.
pub fn hash_outputs(dir: &Path) -> CliResult<Vec<Artifact>> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    let mut artifacts = files
        .iter()
        .map(|f| {
            let bytes = fs::read(f)?;
            let rel = f.strip_prefix(dir).expect("under root");
            let path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            Ok(Artifact { path, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 })
        })
        .collect::<CliResult<Vec<_>>>()?;
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(artifacts)
}

impl Manifest {
    pub fn build(config: &RunConfig, dir: &Path) -> CliResult<Self> {
        let mut config = config.clone();
        config.output = None;
        Ok(Self {
            schema: SCHEMA,
            tool: "forge".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            task: config.task.map(|t| t.name().to_owned()).unwrap_or_default(),
            config,
            artifacts: hash_outputs(dir)?,
        })
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(dir.join(MANIFEST_NAME), text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if m.schema != SCHEMA {
            return Err(CliError::Config(format!("unsupported manifest schema {}", m.schema)));
        }
        Ok(m)
    }

    /// Artifacts that differ between `self` and `other` (by path or hash).
    pub fn differences(&self, other: &Manifest) -> Vec<String> {
        let mut out = Vec::new();
        for a in &self.artifacts {
            match other.artifacts.iter().find(|b| b.path == a.path) {
                None => out.push(format!("missing {}", a.path)),
                Some(b) if b.sha256 != a.sha256 => out.push(format!("changed {}", a.path)),
                _ => {}
            }
        }
        for b in &other.artifacts {
            if !self.artifacts.iter().any(|a| a.path == b.path) {
                out.push(format!("extra {}", b.path));
            }
        }
        out
    }
}
