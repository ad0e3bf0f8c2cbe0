//! Run-directory layout and hash-stamped files.
//!
//! ```text
//! <run>/manifest.json        schema, config hash, stages written so far
//! <run>/config.json          resolved configuration
//! <run>/<stage>/state.json   stage summary
//! <run>/<stage>/*.jsonl      metric, audit and report lines
//! <run>/<stage>/client_NNN.ckpt
//! <run>/table.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use dfu_core::dpsgd::ClientState;
use dfu_core::models::{load_checkpoint, save_checkpoint, Checkpoint};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

pub const SCHEMA: &str = "dfu-run v1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> CliError + '_ {
    move |source| CliError::Json { path: path.display().to_string(), source }
}

/// A value tagged with the schema and the config hash it was produced under.
#[derive(Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub schema: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Stage name to the files it wrote, relative to the run directory.
    pub stages: BTreeMap<String, Vec<String>>,
}

/// A run directory bound to one config hash.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub hash: String,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>, hash: impl Into<String>) -> Self {
        Self { root: root.into(), hash: hash.into() }
    }

    /// Opens an existing run, taking the hash from its manifest.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join("manifest.json");
        if !path.exists() {
            return Err(CliError::Protocol(format!("{} has no manifest.json", root.display())));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Stamped<Manifest> = serde_json::from_str(&text).map_err(json_err(&path))?;
        if m.schema != SCHEMA {
            return Err(CliError::Protocol(format!("{}: schema {:?}, expected {SCHEMA:?}", path.display(), m.schema)));
        }
        Ok(Self { root, hash: m.config_hash })
    }

    pub fn stage(&self, name: &str) -> Result<PathBuf> {
        let dir = self.root.join(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.root.join("manifest.json");
        if !path.exists() {
            return Ok(Manifest::default());
        }
        self.read_json(&path)
    }

    /// Records `files` under `stage`, creating the manifest on first use.
    pub fn register(&self, stage: &str, files: &[PathBuf]) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let mut m = self.manifest()?;
        let rel: Vec<String> = files
            .iter()
            .map(|p| p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/"))
            .collect();
        m.stages.insert(stage.to_string(), rel);
        self.write_json(&self.root.join("manifest.json"), &m)
    }

    pub fn has_stage(&self, stage: &str) -> Result<bool> {
        Ok(self.manifest()?.stages.contains_key(stage))
    }

    pub fn require_stage(&self, stage: &str) -> Result<PathBuf> {
        if !self.has_stage(stage)? {
            return Err(CliError::Protocol(format!("{} has no {stage} artifacts; run that stage first", self.root.display())));
        }
        Ok(self.root.join(stage))
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, body: &T) -> Result<()> {
        let stamped = Stamped { schema: SCHEMA.to_string(), config_hash: self.hash.clone(), body };
        let text = serde_json::to_string_pretty(&stamped).map_err(json_err(path))?;
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn read_json<T: DeserializeOwned>(&self, path: &Path) -> Result<T> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Protocol(format!("missing artifact {}", path.display())),
            _ => CliError::Io { path: path.display().to_string(), source: e },
        })?;
        let s: Stamped<T> = serde_json::from_str(&text).map_err(json_err(path))?;
        self.check(path, &s.schema, &s.config_hash)?;
        Ok(s.body)
    }

    fn check(&self, path: &Path, schema: &str, hash: &str) -> Result<()> {
        if schema != SCHEMA {
            return Err(CliError::Protocol(format!("{}: schema {schema:?}, expected {SCHEMA:?}", path.display())));
        }
        if hash != self.hash {
            return Err(CliError::Protocol(format!("{}: config hash {hash} does not match {}", path.display(), self.hash)));
        }
        Ok(())
    }

    pub fn write_jsonl<T: Serialize>(&self, path: &Path, rows: &[T]) -> Result<()> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        for body in rows {
            let line = serde_json::to_string(&Stamped { schema: SCHEMA.to_string(), config_hash: self.hash.clone(), body })
                .map_err(json_err(path))?;
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, path: &Path) -> Result<Vec<T>> {
        let file = fs::File::open(path).map_err(|_| CliError::Protocol(format!("missing artifact {}", path.display())))?;
        let mut out = Vec::new();
        for (k, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Stamped<T> = serde_json::from_str(&line).map_err(|e| CliError::Protocol(format!("{} line {}: {e}", path.display(), k + 1)))?;
            self.check(path, &s.schema, &s.config_hash)?;
            out.push(s.body);
        }
        Ok(out)
    }

    /// One checkpoint per client, tagged with the client id and config hash.
    pub fn save_clients(&self, dir: &Path, clients: &[ClientState]) -> Result<Vec<PathBuf>> {
        clients
            .iter()
            .map(|c| {
                let path = checkpoint_path(dir, c.id);
                let ckpt = Checkpoint::new(c.model.clone()).with_tag("client", &c.id.to_string()).with_tag("config", &self.hash);
                save_checkpoint(&path, &ckpt)?;
                Ok(path)
            })
            .collect()
    }

    /// Loads the checkpoints of `shards` (id, shard) from `dir`; statistics are left empty.
    pub fn load_clients(&self, dir: &Path, shards: &[(usize, Vec<usize>)]) -> Result<Vec<ClientState>> {
        shards
            .iter()
            .map(|(id, shard)| {
                let path = checkpoint_path(dir, *id);
                if !path.exists() {
                    return Err(CliError::Protocol(format!("missing checkpoint {}", path.display())));
                }
                let ckpt = load_checkpoint(&path)?;
                let hash = ckpt.tag("config").unwrap_or_default();
                self.check(&path, SCHEMA, hash)?;
                if ckpt.tag("client") != Some(id.to_string().as_str()) {
                    return Err(CliError::Protocol(format!("{} is not client {id}'s checkpoint", path.display())));
                }
                Ok(ClientState { id: *id, model: ckpt.model, shard: shard.clone(), statistic: None })
            })
            .collect()
    }
}

pub fn checkpoint_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("client_{id:03}.ckpt"))
}

/// Writes a CSV whose last column repeats the config hash.
pub fn write_table(run: &RunDir, path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",") + ",Config hash\n";
    for row in rows {
        text += &row.join(",");
        text += &format!(",{}\n", run.hash);
    }
    fs::write(path, text).map_err(io_err(path))
}
