//! Campaign results as line-delimited JSON.
//!
//! `results.ndjson` starts with a header line and then holds one tagged object
//! per line: `calibration`, `run` or `event`. The file is only ever appended
//! to while a campaign runs, so an interrupted campaign can be resumed from it.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::CalibrationReport;
use crate::metrics::{RunKey, RunRecord};

pub const RESULTS_FILE: &str = "results.ndjson";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: unsupported results version {found} (expected {STORE_VERSION})")]
    Version { path: String, found: u32 },
    #[error("{path}: missing or unreadable header line")]
    Header { path: String },
    #[error("{path} belongs to campaign `{found}`, not `{expected}`")]
    CampaignMismatch {
        path: String,
        found: String,
        expected: String,
    },
    #[error("duplicate run key {0}")]
    DuplicateKey(RunKey),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> StoreError + '_ {
    move |e| StoreError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn unix_ms_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Outcome of one tier's calibration. `report` is present whenever a probe
/// ran, including searches that did not converge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub tier_name: String,
    pub ok: bool,
    pub report: Option<CalibrationReport>,
    /// Re-measurement taken after the search, before any run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified: Option<CalibrationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub at_unix_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    CampaignStarted,
    CampaignFinished,
    CampaignAborted,
    TierFailed,
    RunFailed,
    RunSkipped,
    Warning,
    DeviceReset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub at_unix_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<RunKey>,
    pub message: String,
}

impl Event {
    pub fn new(kind: EventKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            at_unix_ms: unix_ms_now(),
            tier_name: None,
            key: None,
            message: message.into(),
        }
    }

    pub fn tier(mut self, tier: &str) -> Self {
        self.tier_name = Some(tier.to_string());
        self
    }

    pub fn key(mut self, key: RunKey) -> Self {
        self.tier_name = Some(key.tier_name.clone());
        self.key = Some(key);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header { version: u32, campaign_id: String },
    Calibration(CalibrationEntry),
    Run(RunRecord),
    Event(Event),
}

fn to_line(line: &Line) -> String {
    serde_json::to_string(line).expect("store lines always serialize")
}

/// One stored item, in file order.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Calibration(CalibrationEntry),
    Run(RunRecord),
    Event(Event),
}

impl From<Entry> for Line {
    fn from(e: Entry) -> Self {
        match e {
            Entry::Calibration(c) => Line::Calibration(c),
            Entry::Run(r) => Line::Run(r),
            Entry::Event(e) => Line::Event(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultStore {
    pub campaign_id: String,
    pub entries: Vec<Entry>,
}

/// Problems found while loading that did not prevent it.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadWarning {
    pub line_no: usize,
    pub message: String,
}

impl std::fmt::Display for LoadWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line_no, self.message)
    }
}

impl ResultStore {
    pub fn new(campaign_id: impl Into<String>) -> Self {
        Self {
            campaign_id: campaign_id.into(),
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.entries.iter().filter_map(|e| match e {
            Entry::Run(r) => Some(r),
            _ => None,
        })
    }

    pub fn calibrations(&self) -> impl Iterator<Item = &CalibrationEntry> {
        self.entries.iter().filter_map(|e| match e {
            Entry::Calibration(c) => Some(c),
            _ => None,
        })
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.entries.iter().filter_map(|e| match e {
            Entry::Event(e) => Some(e),
            _ => None,
        })
    }

    pub fn contains(&self, key: &RunKey) -> bool {
        self.records().any(|r| &r.key() == key)
    }

    pub fn keys(&self) -> HashSet<RunKey> {
        self.records().map(RunRecord::key).collect()
    }

    /// The most recent calibration of `tier`.
    pub fn calibration(&self, tier: &str) -> Option<&CalibrationEntry> {
        self.calibrations().filter(|c| c.tier_name == tier).last()
    }

    pub fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    fn lines(&self) -> Vec<Line> {
        let mut out = vec![Line::Header {
            version: STORE_VERSION,
            campaign_id: self.campaign_id.clone(),
        }];
        out.extend(self.entries.iter().cloned().map(Line::from));
        out
    }

    /// Writes `dir/results.ndjson`, replacing any existing file.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf, StoreError> {
        let path = dir.join(RESULTS_FILE);
        let mut text = String::new();
        for line in self.lines() {
            text.push_str(&to_line(&line));
            text.push('\n');
        }
        let tmp = dir.join(format!("{RESULTS_FILE}.tmp"));
        std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Reads `dir/results.ndjson`. A missing file is an empty store; corrupt
    /// lines are skipped and reported, as are repeated run keys (first wins).
    pub fn load(dir: &Path) -> Result<(ResultStore, Vec<LoadWarning>), StoreError> {
        let path = dir.join(RESULTS_FILE);
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((ResultStore::default(), vec![])),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let mut store = ResultStore::default();
        let mut warnings = Vec::new();
        let mut seen = HashSet::new();
        let mut header = false;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let text = line.map_err(io_err(&path))?;
            if text.trim().is_empty() {
                continue;
            }
            let parsed: Line = match serde_json::from_str(&text) {
                Ok(l) => l,
                Err(e) if header => {
                    warnings.push(LoadWarning {
                        line_no,
                        message: format!("skipped corrupt line: {e}"),
                    });
                    continue;
                }
                Err(_) => {
                    return Err(StoreError::Header {
                        path: path.display().to_string(),
                    })
                }
            };
            match parsed {
                Line::Header { version, campaign_id } if !header => {
                    if version != STORE_VERSION {
                        return Err(StoreError::Version {
                            path: path.display().to_string(),
                            found: version,
                        });
                    }
                    store.campaign_id = campaign_id;
                    header = true;
                }
                _ if !header => {
                    return Err(StoreError::Header {
                        path: path.display().to_string(),
                    })
                }
                Line::Header { .. } => warnings.push(LoadWarning {
                    line_no,
                    message: "skipped repeated header".into(),
                }),
                Line::Calibration(c) => store.push(Entry::Calibration(c)),
                Line::Run(r) => {
                    if seen.insert(r.key()) {
                        store.push(Entry::Run(r));
                    } else {
                        warnings.push(LoadWarning {
                            line_no,
                            message: format!("skipped duplicate run {}", r.key()),
                        });
                    }
                }
                Line::Event(e) => store.push(Entry::Event(e)),
            }
        }
        Ok((store, warnings))
    }
}

/// Appends to `results.ndjson` as a campaign progresses, flushing each line.
pub struct StoreWriter {
    path: PathBuf,
    file: File,
    store: ResultStore,
}

impl StoreWriter {
    /// Opens the store in `dir`, creating it if absent. An existing store must
    /// belong to the same campaign.
    pub fn open(dir: &Path, campaign_id: &str) -> Result<(Self, Vec<LoadWarning>), StoreError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(RESULTS_FILE);
        let (store, warnings) = ResultStore::load(dir)?;
        let exists = path.exists();
        if exists && store.campaign_id != campaign_id {
            return Err(StoreError::CampaignMismatch {
                path: path.display().to_string(),
                found: store.campaign_id,
                expected: campaign_id.to_string(),
            });
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let store = if exists {
            store
        } else {
            let header = Line::Header {
                version: STORE_VERSION,
                campaign_id: campaign_id.to_string(),
            };
            writeln!(file, "{}", to_line(&header)).map_err(io_err(&path))?;
            ResultStore::new(campaign_id)
        };
        Ok((Self { path, file, store }, warnings))
    }

    pub fn store(&self) -> &ResultStore {
        &self.store
    }

    pub fn into_store(self) -> ResultStore {
        self.store
    }

    fn append(&mut self, entry: Entry) -> Result<(), StoreError> {
        let text = to_line(&Line::from(entry.clone()));
        writeln!(self.file, "{text}").map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))?;
        self.store.push(entry);
        Ok(())
    }

    pub fn add_calibration(&mut self, entry: CalibrationEntry) -> Result<(), StoreError> {
        self.append(Entry::Calibration(entry))
    }

    pub fn add_record(&mut self, record: RunRecord) -> Result<(), StoreError> {
        if self.store.contains(&record.key()) {
            return Err(StoreError::DuplicateKey(record.key()));
        }
        self.append(Entry::Run(record))
    }

    pub fn add_event(&mut self, event: Event) -> Result<(), StoreError> {
        self.append(Entry::Event(event))
    }
}
