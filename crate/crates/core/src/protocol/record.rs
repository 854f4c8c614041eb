use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{validate_tsid, Orientation, Phase, PracticeTrial, SessionConfig, Task, TrialRecord, VoidedTrial};
use crate::apparatus::AlignmentReport;
use crate::bape::Postmean;
use crate::stats::BiasReport;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("record io at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("record json at {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("unsupported record schema version {0}")]
    Schema(u32),
    #[error("invalid record identifier {0:?}")]
    InvalidId(String),
}

/// Device-clock and optional wall-clock stamps. Simulated sessions leave the
/// wall-clock fields unset so records replay byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub device_started_ms: f64,
    pub device_finished_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
}

/// The persisted form of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub schema_version: u32,
    pub session_id: String,
    pub tsid: String,
    pub phase: Phase,
    pub config: SessionConfig,
    pub first_orientation: Orientation,
    pub alignment: AlignmentReport,
    pub trials: Vec<TrialRecord>,
    #[serde(default)]
    pub voided: Vec<VoidedTrial>,
    #[serde(default)]
    pub practice: Vec<PracticeTrial>,
    pub postmean: Option<Postmean>,
    pub bias_report: Option<BiasReport>,
    pub timestamps: Timestamps,
}

impl SessionRecord {
    /// Canonical serialization; identical inputs give identical bytes.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("records serialize");
        out.push(b'\n');
        out
    }

    pub fn from_json_slice(bytes: &[u8], path: &Path) -> Result<Self, RecordError> {
        let record: Self =
            serde_json::from_slice(bytes).map_err(|source| RecordError::Json { path: path.to_path_buf(), source })?;
        if record.schema_version != SCHEMA_VERSION {
            return Err(RecordError::Schema(record.schema_version));
        }
        Ok(record)
    }

    pub fn load(path: &Path) -> Result<Self, RecordError> {
        let bytes = fs::read(path).map_err(|source| RecordError::Io { path: path.to_path_buf(), source })?;
        Self::from_json_slice(&bytes, path)
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.session_id.clone(),
            tsid: self.tsid.clone(),
            task: self.config.task,
            phase: self.phase,
            trials: self.trials.len(),
            planned_trials: self.config.planned_trials(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub tsid: String,
    pub task: Task,
    pub phase: Phase,
    pub trials: usize,
    pub planned_trials: usize,
}

/// Records laid out as `<root>/<tsid>/<session_id>.json`.
#[derive(Debug, Clone)]
pub struct RecordStore {
    root: PathBuf,
}

impl RecordStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, tsid: &str, session_id: &str) -> Result<PathBuf, RecordError> {
        validate_tsid(tsid).map_err(|_| RecordError::InvalidId(tsid.into()))?;
        validate_tsid(session_id).map_err(|_| RecordError::InvalidId(session_id.into()))?;
        Ok(self.root.join(tsid).join(format!("{session_id}.json")))
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial record.
    pub fn save(&self, record: &SessionRecord) -> Result<PathBuf, RecordError> {
        let path = self.path_for(&record.tsid, &record.session_id)?;
        let io_err = |source| RecordError::Io { path: path.clone(), source };
        fs::create_dir_all(path.parent().expect("record path has a parent")).map_err(io_err)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, record.to_json_bytes()).map_err(io_err)?;
        fs::rename(&tmp, &path).map_err(io_err)?;
        Ok(path)
    }

    pub fn load(&self, tsid: &str, session_id: &str) -> Result<SessionRecord, RecordError> {
        SessionRecord::load(&self.path_for(tsid, session_id)?)
    }

    /// Every `*.json` record under the root, sorted by path.
    pub fn record_paths(&self) -> Result<Vec<PathBuf>, RecordError> {
        let mut out = Vec::new();
        let dirs = match fs::read_dir(&self.root) {
            Ok(d) => d,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
            Err(source) => return Err(RecordError::Io { path: self.root.clone(), source }),
        };
        for dir in dirs {
            let dir = dir.map_err(|source| RecordError::Io { path: self.root.clone(), source })?.path();
            if !dir.is_dir() {
                continue;
            }
            let files = fs::read_dir(&dir).map_err(|source| RecordError::Io { path: dir.clone(), source })?;
            for f in files {
                let f = f.map_err(|source| RecordError::Io { path: dir.clone(), source })?.path();
                if f.extension().is_some_and(|e| e == "json") {
                    out.push(f);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn load_all(&self) -> Result<Vec<SessionRecord>, RecordError> {
        self.record_paths()?.iter().map(|p| SessionRecord::load(p)).collect()
    }
}
