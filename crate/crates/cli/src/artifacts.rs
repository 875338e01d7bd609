//! Artifact bookkeeping: manifests, config-hash checks and exit codes.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use pressuresim::checkpoint::Checkpoint;
use pressuresim::config::{file_sha256, hex, PipelineConfig, Seeds};

/// Bad config, bad flags or a missing prerequisite artifact.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

/// 2 for config and prerequisite errors, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(pressuresim::Error::Config(_)) = cause.downcast_ref::<pressuresim::Error>() {
            return 2;
        }
    }
    1
}

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub details: serde_json::Value,
}

/// Output directory plus the config everything in it must agree with.
pub struct Workspace {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    inputs: Vec<PathBuf>,
}

impl Workspace {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        let out = cfg.paths.outputs.clone();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            cfg,
            out,
            inputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Path of a prerequisite artifact, recorded as an input of this run.
    pub fn require(&mut self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return usage(format!(
                "missing {}; run `pressuresim {producer}` with the same config first",
                p.display()
            ));
        }
        self.inputs.push(p.clone());
        Ok(p)
    }

    pub fn note_input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    /// Reads a checkpoint and checks it was produced under this config.
    pub fn load_checkpoint(&mut self, name: &str, kind: &[u8; 4], producer: &str) -> Result<Checkpoint> {
        let p = self.require(name, producer)?;
        let ck = Checkpoint::read_kind(&p, kind)?;
        if ck.config_hash != self.cfg.hash_bytes() {
            return usage(format!(
                "{} was produced under config {}, not the current {}; rerun `pressuresim {producer}`",
                p.display(),
                hex(&ck.config_hash),
                self.cfg.hash()
            ));
        }
        Ok(ck)
    }

    pub fn save_checkpoint(&self, name: &str, ck: Checkpoint) -> Result<PathBuf> {
        let p = self.path(name);
        ck.with_config_hash(self.cfg.hash_bytes()).write(&p)?;
        Ok(p)
    }

    /// Checks that a CSV artifact's producing manifest used this config.
    pub fn check_manifest(&self, producer: &str) -> Result<()> {
        let p = self.path(&format!("{producer}.manifest.json"));
        let text = std::fs::read_to_string(&p)
            .map_err(|_| Usage(format!("missing {}; run `pressuresim {producer}` first", p.display())))?;
        let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        let hash = v["config_hash"].as_str().unwrap_or_default();
        if hash != self.cfg.hash() {
            return usage(format!(
                "{} records config {hash}, not the current {}; rerun `pressuresim {producer}`",
                p.display(),
                self.cfg.hash()
            ));
        }
        Ok(())
    }

    pub fn write_manifest(&self, command: &str, outputs: &[PathBuf], details: serde_json::Value) -> Result<PathBuf> {
        let hash_all = |paths: &[PathBuf]| -> Result<Vec<FileHash>> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileHash {
                        path: p.clone(),
                        sha256: file_sha256(p)?,
                    })
                })
                .collect()
        };
        let m = Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.cfg.hash(),
            seeds: self.cfg.seeds.clone(),
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(outputs)?,
            details,
        };
        let p = self.path(&format!("{command}.manifest.json"));
        std::fs::write(&p, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

/// Creates `path` for writing, with context on failure.
pub fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(std::io::BufWriter::new(f))
}
