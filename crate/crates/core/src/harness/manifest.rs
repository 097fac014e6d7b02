//! Run manifests: what each command produced and how to check it.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::layout::write_json;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Source revision recorded in manifests; `BEDFUSE_REVISION` at build time
/// overrides the package version.
pub fn revision() -> String {
    option_env!("BEDFUSE_REVISION").map_or_else(|| format!("bedfuse {}", env!("CARGO_PKG_VERSION")), str::to_string)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub kind: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    /// Resolved configuration as used by the run.
    pub config: serde_json::Value,
    pub revision: String,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<Artifact>,
}

/// Every run written into one output directory, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub runs: Vec<RunRecord>,
}

impl RunManifest {
    /// The manifest in `out`, or an empty one when there is none yet.
    pub fn load(out: &Path) -> Result<Self> {
        let p = out.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::load(&p, e.to_string()))
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        write_json(&out.join(MANIFEST_FILE), self)
    }

    /// Re-hashes every listed artifact. Later runs may legitimately rewrite
    /// a file, so only the newest record of each path is checked.
    pub fn verify(&self, out: &Path) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for run in self.runs.iter().rev() {
            for a in &run.artifacts {
                if !seen.insert(a.path.clone()) {
                    continue;
                }
                let p = out.join(&a.path);
                if !p.is_file() {
                    return Err(Error::load(&p, "listed in the manifest but missing"));
                }
                let h = sha256_file(&p)?;
                if h != a.sha256 {
                    return Err(Error::load(&p, format!("hash {h} does not match manifest {}", a.sha256)));
                }
            }
        }
        Ok(())
    }
}

/// Collects artifacts while a command runs, then appends its record.
#[derive(Debug)]
pub struct RunRecorder {
    out: PathBuf,
    command: String,
    seed: u64,
    config: serde_json::Value,
    started: Instant,
    started_unix: u64,
    artifacts: Vec<(PathBuf, String)>,
}

impl RunRecorder {
    pub fn start(out: &Path, command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let config = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            out: out.to_path_buf(),
            command: command.to_string(),
            seed,
            config,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            artifacts: Vec::new(),
        })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    /// Registers a file written under the output directory.
    pub fn add(&mut self, path: &Path, kind: &str) {
        let rel = path.strip_prefix(&self.out).unwrap_or(path).to_path_buf();
        if !self.artifacts.iter().any(|(p, _)| *p == rel) {
            self.artifacts.push((rel, kind.to_string()));
        }
    }

    /// Hashes the artifacts, appends the record to the manifest and returns it.
    pub fn finish(self) -> Result<RunRecord> {
        let mut artifacts = Vec::with_capacity(self.artifacts.len());
        for (rel, kind) in &self.artifacts {
            artifacts.push(Artifact {
                path: rel.clone(),
                kind: kind.clone(),
                sha256: sha256_file(&self.out.join(rel))?,
            });
        }
        let record = RunRecord {
            command: self.command,
            seed: self.seed,
            config: self.config,
            revision: revision(),
            started_unix: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            artifacts,
        };
        let mut m = RunManifest::load(&self.out)?;
        m.runs.push(record.clone());
        m.save(&self.out)?;
        m.verify(&self.out)?;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_accumulate_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        for (i, name) in ["a.txt", "b.txt"].iter().enumerate() {
            let mut r = RunRecorder::start(out, "test", i as u64, &serde_json::json!({ "i": i })).unwrap();
            let p = out.join(name);
            std::fs::write(&p, name).unwrap();
            r.add(&p, "text");
            r.finish().unwrap();
        }
        let m = RunManifest::load(out).unwrap();
        assert_eq!(m.runs.len(), 2);
        assert_eq!(m.runs[1].artifacts[0].path, Path::new("b.txt"));
        m.verify(out).unwrap();
        std::fs::write(out.join("a.txt"), "changed").unwrap();
        assert!(matches!(m.verify(out), Err(Error::Load { .. })));
    }
}
