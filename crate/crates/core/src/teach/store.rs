//! On-disk layout of a data directory.
//!
//! ```text
//! flow.json                imported flow
//! entities.json            entity lexicon, grows with entity corrections
//! catalog.json             templates and masks, grows with new templates
//! dialogs/compiled.jsonl   training dialogs from the flow
//! dialogs/corrected.jsonl  corrected log copies, last record per log wins
//! dialogs/authored.jsonl   optional hand-written training dialogs
//! logs.jsonl               conversation log events
//! models/manifest.json     model registry
//! models/v{N}.hcn          model files, never rewritten
//! runs/{id}.json           regression runs, ratings in runs/{id}.ratings.jsonl
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::TeachError;
use crate::compile::Catalog;
use crate::flow::{entity_defs_from_json, entity_defs_to_json, parse_flow, serialize_flow, DialogFlow, EntityDef};
use crate::hcn::{Hyperparams, TrainMetrics};

pub const FLOW: &str = "flow.json";
pub const ENTITIES: &str = "entities.json";
pub const CATALOG: &str = "catalog.json";
pub const COMPILED: &str = "dialogs/compiled.jsonl";
pub const CORRECTED: &str = "dialogs/corrected.jsonl";
pub const AUTHORED: &str = "dialogs/authored.jsonl";
pub const LOGS: &str = "logs.jsonl";
pub const MANIFEST: &str = "models/manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub version: u64,
    pub file: String,
    pub created_at: u64,
    /// SHA-256 over the training dialogs, catalog, lexicon and hyperparameters.
    pub training_hash: String,
    /// SHA-256 of the model content, version field excluded.
    pub model_hash: String,
    pub hyper: Hyperparams,
    pub metrics: TrainMetrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub active: Option<u64>,
    pub versions: Vec<ModelEntry>,
}

impl Manifest {
    pub fn latest(&self) -> u64 {
        self.versions.iter().map(|v| v.version).max().unwrap_or(0)
    }

    pub fn entry(&self, version: u64) -> Option<&ModelEntry> {
        self.versions.iter().find(|v| v.version == version)
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn corrupt(file: &Path, message: impl ToString) -> TeachError {
    TeachError::Corrupt { file: file.display().to_string(), message: message.to_string() }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, TeachError> {
        let root = root.into();
        for dir in ["dialogs", "models", "runs"] {
            fs::create_dir_all(root.join(dir))?;
        }
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn read_bytes(&self, rel: &str) -> Result<Option<Vec<u8>>, TeachError> {
        match fs::read(self.path(rel)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes through a temporary file and a rename, so readers see either
    /// the old or the new content.
    pub fn write_atomic(&self, rel: &str, bytes: &[u8]) -> Result<(), TeachError> {
        let path = self.path(rel);
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn append<T: Serialize>(&self, rel: &str, record: &T) -> Result<(), TeachError> {
        let mut line = serde_json::to_vec(record).map_err(|e| corrupt(&self.path(rel), e))?;
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(self.path(rel))?;
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }

    /// Every record of a JSON Lines file. A final line cut short by a crash
    /// (no trailing newline) is ignored; any other bad line is an error.
    pub fn read_records<T: DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>, TeachError> {
        let path = self.path(rel);
        let Some(bytes) = self.read_bytes(rel)? else { return Ok(Vec::new()) };
        let text = String::from_utf8(bytes).map_err(|e| corrupt(&path, e))?;
        let complete = text.ends_with('\n');
        let lines: Vec<&str> = text.lines().collect();
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(record) => out.push(record),
                Err(_) if i + 1 == lines.len() && !complete => break,
                Err(e) => return Err(corrupt(&path, format!("line {}: {e}", i + 1))),
            }
        }
        Ok(out)
    }

    pub fn write_records<T: Serialize>(&self, rel: &str, records: &[T]) -> Result<(), TeachError> {
        let mut out = Vec::new();
        for r in records {
            serde_json::to_writer(&mut out, r).map_err(|e| corrupt(&self.path(rel), e))?;
            out.push(b'\n');
        }
        self.write_atomic(rel, &out)
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<Option<T>, TeachError> {
        self.read_bytes(rel)?.map(|b| serde_json::from_slice(&b).map_err(|e| corrupt(&self.path(rel), e))).transpose()
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), TeachError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| corrupt(&self.path(rel), e))?;
        bytes.push(b'\n');
        self.write_atomic(rel, &bytes)
    }

    pub fn load_flow(&self) -> Result<Option<DialogFlow>, TeachError> {
        Ok(self.read_bytes(FLOW)?.map(|b| parse_flow(&b)).transpose()?)
    }

    pub fn save_flow(&self, flow: &DialogFlow) -> Result<(), TeachError> {
        self.write_atomic(FLOW, &serialize_flow(flow)?)
    }

    pub fn load_entities(&self) -> Result<Option<Vec<EntityDef>>, TeachError> {
        Ok(self.read_bytes(ENTITIES)?.map(|b| entity_defs_from_json(&b)).transpose()?)
    }

    pub fn save_entities(&self, defs: &[EntityDef]) -> Result<(), TeachError> {
        self.write_atomic(ENTITIES, entity_defs_to_json(defs).as_bytes())
    }

    pub fn load_catalog(&self) -> Result<Catalog, TeachError> {
        Ok(self.read_json(CATALOG)?.unwrap_or_default())
    }

    pub fn save_catalog(&self, catalog: &Catalog) -> Result<(), TeachError> {
        self.write_json(CATALOG, catalog)
    }

    pub fn load_manifest(&self) -> Result<Manifest, TeachError> {
        Ok(self.read_json(MANIFEST)?.unwrap_or_default())
    }

    pub fn save_manifest(&self, manifest: &Manifest) -> Result<(), TeachError> {
        self.write_json(MANIFEST, manifest)
    }

    pub fn model_file(version: u64) -> String {
        format!("models/v{version}.hcn")
    }

    /// Stores a new model file; an existing version is never overwritten.
    pub fn save_model_bytes(&self, version: u64, bytes: &[u8]) -> Result<String, TeachError> {
        let rel = Store::model_file(version);
        if self.path(&rel).exists() {
            return Err(std::io::Error::new(ErrorKind::AlreadyExists, format!("{rel} already exists")).into());
        }
        self.write_atomic(&rel, bytes)?;
        Ok(rel)
    }

    pub fn load_model_bytes(&self, version: u64) -> Result<Vec<u8>, TeachError> {
        self.read_bytes(&Store::model_file(version))?.ok_or(TeachError::UnknownVersion(version))
    }

    pub fn run_file(id: u64) -> String {
        format!("runs/{id}.json")
    }

    pub fn ratings_file(id: u64) -> String {
        format!("runs/{id}.ratings.jsonl")
    }

    pub fn load_run<T: DeserializeOwned>(&self, id: u64) -> Result<Option<T>, TeachError> {
        self.read_json(&Store::run_file(id))
    }

    pub fn save_run<T: Serialize>(&self, id: u64, run: &T) -> Result<(), TeachError> {
        self.write_json(&Store::run_file(id), run)
    }

    /// Highest stored regression run id, 0 when there is none.
    pub fn last_run_id(&self) -> Result<u64, TeachError> {
        let mut last = 0;
        for entry in fs::read_dir(self.path("runs"))? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(id) = name.strip_suffix(".json").and_then(|n| n.parse::<u64>().ok()) {
                last = last.max(id);
            }
        }
        Ok(last)
    }
}
