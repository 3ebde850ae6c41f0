use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CHECKPOINT_DIR: &str = "checkpoints";

pub const DATASET_FILE: &str = "dataset/dataset.selx";
pub const MANIFESTS: [&str; 3] = [
    "dataset/meta_train.jsonl",
    "dataset/meta_val.jsonl",
    "dataset/meta_test.jsonl",
];

/// Provenance written next to the outputs of every command. Paths are
/// relative to the work directory so reruns elsewhere compare equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub tool_version: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, serde_json::Value>,
}

/// The header embedded in JSON reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_hash: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Output staging for one command inside the work directory.
pub struct Workspace {
    root: PathBuf,
    force: bool,
    written: BTreeMap<String, String>,
    read: BTreeMap<String, String>,
}

impl Workspace {
    pub fn new(root: PathBuf, force: bool) -> Self {
        Self {
            root,
            force,
            written: BTreeMap::new(),
            read: BTreeMap::new(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Fails before any work is done if an output would be overwritten.
    pub fn claim(&self, rels: &[String]) -> Result<()> {
        for rel in rels {
            let p = self.path(rel);
            if p.exists() && !self.force {
                return Err(CliError::Exists { path: p });
            }
        }
        for rel in rels {
            if let Some(parent) = self.path(rel).parent() {
                fs::create_dir_all(parent)?;
            }
        }
        Ok(())
    }

    /// Requires an input file and records its hash.
    pub fn input(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.is_file() {
            return Err(CliError::Data(format!("missing input {}", p.display())));
        }
        let h = sha256_file(&p)?;
        self.read.insert(rel.to_string(), h);
        Ok(p)
    }

    pub fn input_hash(&self, rel: &str) -> Option<&str> {
        self.read.get(rel).map(String::as_str)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        let tmp = p.with_extension("partial");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &p)?;
        self.written.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    /// Records a file some other writer produced.
    pub fn record(&mut self, rel: &str) -> Result<()> {
        let h = sha256_file(&self.path(rel))?;
        self.written.insert(rel.to_string(), h);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    pub fn write_csv<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        self.write(rel, &bytes)
    }

    pub fn finish(
        mut self,
        meta_rel: &str,
        command: &str,
        strategy: Option<&str>,
        stamp: &Stamp,
        notes: BTreeMap<String, serde_json::Value>,
    ) -> Result<Meta> {
        let meta = Meta {
            tool_version: stamp.tool_version.clone(),
            command: command.to_string(),
            strategy: strategy.map(str::to_string),
            config_hash: stamp.config_hash.clone(),
            seed: stamp.seed,
            dataset_hash: stamp.dataset_hash.clone(),
            inputs: std::mem::take(&mut self.read),
            outputs: std::mem::take(&mut self.written),
            notes,
        };
        self.write_json(meta_rel, &meta)?;
        Ok(meta)
    }
}

pub fn read_meta(path: &Path) -> Result<Meta> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Hash of the dataset file and the three manifests, in that order.
pub fn dataset_hash(root: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for rel in std::iter::once(DATASET_FILE).chain(MANIFESTS) {
        h.update(sha256_file(&root.join(rel))?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

pub fn stamp(config: &RunConfig, dataset_hash: String) -> Stamp {
    Stamp {
        tool_version: selab_core::TOOL_VERSION.to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        dataset_hash,
    }
}

/// Refuses inputs produced from a different dataset.
pub fn check_dataset(meta: &Meta, origin: &Path, expected: &str) -> Result<()> {
    if meta.dataset_hash != expected {
        return Err(CliError::Data(format!(
            "{} was produced from dataset {} but the current dataset is {}",
            origin.display(),
            meta.dataset_hash,
            expected
        )));
    }
    Ok(())
}
