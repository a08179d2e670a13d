use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::manifest::RunManifest;
use crate::llm_client::{FailureClass, GenerationRecord};
use crate::perturb::Provenance;
use crate::scoring::ItemResult;
use crate::twostep::IntermediateRecord;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One line of the record log. Every record carries the job key and the
/// attempt ordinal that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum StoreRecord {
    Generation {
        job: String,
        attempt: u32,
        generation: GenerationRecord,
    },
    Intermediate {
        job: String,
        attempt: u32,
        intermediate: IntermediateRecord,
    },
    Result {
        job: String,
        attempt: u32,
        result: ItemResult,
        /// How the presented options were derived from the base item.
        provenance: Provenance,
    },
    Failure {
        job: String,
        attempt: u32,
        class: FailureClass,
        message: String,
    },
}

impl StoreRecord {
    pub fn job(&self) -> &str {
        match self {
            StoreRecord::Generation { job, .. }
            | StoreRecord::Intermediate { job, .. }
            | StoreRecord::Result { job, .. }
            | StoreRecord::Failure { job, .. } => job,
        }
    }

    pub fn attempt(&self) -> u32 {
        match self {
            StoreRecord::Generation { attempt, .. }
            | StoreRecord::Intermediate { attempt, .. }
            | StoreRecord::Result { attempt, .. }
            | StoreRecord::Failure { attempt, .. } => *attempt,
        }
    }
}

/// Latest terminal state of a job.
#[derive(Debug, Clone, PartialEq)]
pub enum JobOutcome {
    Completed(Box<ItemResult>),
    Failed { class: FailureClass, message: String },
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store record at {path}:{line}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
    #[error("store {path} belongs to manifest {found}, expected {expected}")]
    DigestMismatch {
        path: String,
        expected: String,
        found: String,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredManifest {
    digest: String,
    manifest: RunManifest,
}

#[derive(Debug, Default)]
struct Index {
    /// Highest attempt ordinal seen per job, with its terminal outcome.
    latest: HashMap<String, (u32, Option<JobOutcome>)>,
}

impl Index {
    fn apply(&mut self, rec: &StoreRecord) {
        let entry = self.latest.entry(rec.job().to_string()).or_insert((0, None));
        let attempt = rec.attempt();
        if attempt > entry.0 {
            *entry = (attempt, None);
        }
        if attempt < entry.0 {
            return;
        }
        match rec {
            StoreRecord::Result { result, .. } => entry.1 = Some(JobOutcome::Completed(Box::new(result.clone()))),
            StoreRecord::Failure { class, message, .. } => {
                entry.1 = Some(JobOutcome::Failed {
                    class: *class,
                    message: message.clone(),
                })
            }
            _ => {}
        }
    }
}

/// Append-only JSONL record log under `<root>/<manifest digest>/`.
#[derive(Debug)]
pub struct ResultStore {
    dir: PathBuf,
    digest: String,
    manifest: RunManifest,
    index: Mutex<Index>,
    writer: Mutex<File>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads every record of a log. A torn final line (no trailing newline) is
/// reported through the second tuple element instead of failing.
pub fn read_records(path: &Path) -> Result<(Vec<StoreRecord>, Option<u64>), StoreError> {
    if !path.exists() {
        return Ok((Vec::new(), None));
    }
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let end = bytes[offset..].iter().position(|b| *b == b'\n').map(|p| offset + p);
        let line = &bytes[offset..end.unwrap_or(bytes.len())];
        let parsed = std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<StoreRecord>(s).map_err(|e| e.to_string()));
        match (parsed, end) {
            (Ok(rec), _) => records.push(rec),
            (Err(_), None) => return Ok((records, Some(offset as u64))),
            (Err(_), Some(_)) if line.iter().all(u8::is_ascii_whitespace) => {}
            (Err(message), Some(_)) => {
                return Err(StoreError::Corrupt {
                    path: path.display().to_string(),
                    line: line_no,
                    message,
                })
            }
        }
        offset = end.map_or(bytes.len(), |e| e + 1);
    }
    Ok((records, None))
}

impl ResultStore {
    /// Opens (or creates) the store for `manifest` under `root`.
    pub fn open(root: impl AsRef<Path>, manifest: &RunManifest) -> Result<Self, StoreError> {
        let digest = manifest.digest();
        let dir = root.as_ref().join(&digest);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let stored = Self::read_manifest(&manifest_path)?;
            if stored.digest != digest {
                return Err(StoreError::DigestMismatch {
                    path: dir.display().to_string(),
                    expected: digest,
                    found: stored.digest,
                });
            }
        } else {
            let body = serde_json::to_string_pretty(&StoredManifest {
                digest: digest.clone(),
                manifest: manifest.clone(),
            })
            .expect("manifest serializes");
            std::fs::write(&manifest_path, body + "\n").map_err(io_err(&manifest_path))?;
        }
        Self::open_inner(dir, digest, manifest.clone())
    }

    /// Opens an existing store directory.
    pub fn open_dir(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let stored = Self::read_manifest(&dir.join(MANIFEST_FILE))?;
        let actual = stored.manifest.digest();
        if actual != stored.digest {
            return Err(StoreError::DigestMismatch {
                path: dir.display().to_string(),
                expected: actual,
                found: stored.digest,
            });
        }
        Self::open_inner(dir, stored.digest, stored.manifest)
    }

    fn read_manifest(path: &Path) -> Result<StoredManifest, StoreError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    fn open_inner(dir: PathBuf, digest: String, manifest: RunManifest) -> Result<Self, StoreError> {
        let path = dir.join(RECORDS_FILE);
        let (records, torn_at) = read_records(&path)?;
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        if let Some(offset) = torn_at {
            tracing::warn!(path = %path.display(), offset, "discarding torn final record");
            writer.set_len(offset).map_err(io_err(&path))?;
        }
        let mut index = Index::default();
        for rec in &records {
            index.apply(rec);
        }
        Ok(Self {
            dir,
            digest,
            manifest,
            index: Mutex::new(index),
            writer: Mutex::new(writer),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn records_path(&self) -> PathBuf {
        self.dir.join(RECORDS_FILE)
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn outcome(&self, job: &str) -> Option<JobOutcome> {
        self.index
            .lock()
            .expect("store index lock")
            .latest
            .get(job)
            .and_then(|(_, o)| o.clone())
    }

    /// Jobs without a terminal record, or whose latest attempt failed in a
    /// retryable way, still need to run.
    pub fn needs_run(&self, job: &str) -> bool {
        match self.outcome(job) {
            None => true,
            Some(JobOutcome::Completed(_)) => false,
            Some(JobOutcome::Failed { class, .. }) => class == FailureClass::Retryable,
        }
    }

    pub fn next_attempt(&self, job: &str) -> u32 {
        self.index
            .lock()
            .expect("store index lock")
            .latest
            .get(job)
            .map_or(1, |(a, _)| a + 1)
    }

    /// Appends the records of one job in a single write.
    pub fn append(&self, records: &[StoreRecord]) -> Result<(), StoreError> {
        let mut buf = String::new();
        for rec in records {
            buf.push_str(&serde_json::to_string(rec).expect("store record serializes"));
            buf.push('\n');
        }
        let path = self.records_path();
        {
            let mut w = self.writer.lock().expect("store writer lock");
            w.write_all(buf.as_bytes()).map_err(io_err(&path))?;
            w.flush().map_err(io_err(&path))?;
        }
        let mut index = self.index.lock().expect("store index lock");
        for rec in records {
            index.apply(rec);
        }
        Ok(())
    }

    /// Latest completed result per job key.
    pub fn results(&self) -> BTreeMap<String, ItemResult> {
        self.index
            .lock()
            .expect("store index lock")
            .latest
            .iter()
            .filter_map(|(k, (_, o))| match o {
                Some(JobOutcome::Completed(r)) => Some((k.clone(), (**r).clone())),
                _ => None,
            })
            .collect()
    }

    /// Latest failure per job key, for jobs whose latest attempt failed.
    pub fn failures(&self) -> BTreeMap<String, (FailureClass, String)> {
        self.index
            .lock()
            .expect("store index lock")
            .latest
            .iter()
            .filter_map(|(k, (_, o))| match o {
                Some(JobOutcome::Failed { class, message }) => Some((k.clone(), (*class, message.clone()))),
                _ => None,
            })
            .collect()
    }

    pub fn records(&self) -> Result<Vec<StoreRecord>, StoreError> {
        read_records(&self.records_path()).map(|(r, _)| r)
    }
}
