//! Line-delimited record files. Every line carries `schema_version`; the first
//! line of each file is a header holding the resolved configuration.

use boxworld_core::client::AgentInfo;
use boxworld_core::genesis::{Instance, InstanceSettings};
use boxworld_core::probe::Trial;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    Instances,
    Transcripts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub record: String,
    pub file: FileKind,
    pub tool_version: String,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentInfo>,
}

impl Header {
    pub fn new(file: FileKind, config: &RunConfig, agent: Option<AgentInfo>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            record: "header".into(),
            file,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            agent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub schema_version: u32,
    pub record: String,
    pub cell: InstanceSettings,
    pub sample: usize,
    pub instance: Instance,
}

impl InstanceRecord {
    pub fn new(cell: InstanceSettings, sample: usize, instance: Instance) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            record: "instance".into(),
            cell,
            sample,
            instance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub schema_version: u32,
    pub record: String,
    pub instance_id: String,
    pub cell: InstanceSettings,
    pub sample: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial: Option<Trial>,
    /// Set when the protocol could not run on this instance at all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn new(source: &InstanceRecord, outcome: Result<Trial, String>) -> Self {
        let (trial, error) = match outcome {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(e)),
        };
        Self {
            schema_version: SCHEMA_VERSION,
            record: "trial".into(),
            instance_id: source.instance.id.clone(),
            cell: source.cell,
            sample: source.sample,
            trial,
            error,
        }
    }
}

fn check_version(line: &str, path: &Path, lineno: usize) -> Result<serde_json::Value, Error> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::parse(path, lineno, e))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => Ok(value),
        Some(v) => Err(Error::Schema {
            path: path.to_path_buf(),
            line: lineno,
            found: Some(v),
        }),
        None => Err(Error::Schema {
            path: path.to_path_buf(),
            line: lineno,
            found: None,
        }),
    }
}

/// A parsed file: the header and body records.
#[derive(Debug, Clone)]
pub struct RecordFile<T> {
    pub header: Header,
    pub records: Vec<T>,
}

pub fn read_file<T: DeserializeOwned>(path: &Path, expect: FileKind) -> Result<RecordFile<T>, Error> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = check_version(&line, path, i + 1)?;
        if header.is_none() {
            let h: Header = serde_json::from_value(value).map_err(|e| Error::parse(path, i + 1, e))?;
            if h.file != expect {
                return Err(Error::Config(format!(
                    "{}: expected a {expect:?} file, found {:?}",
                    path.display(),
                    h.file
                )));
            }
            header = Some(h);
        } else {
            records.push(serde_json::from_value(value).map_err(|e| Error::parse(path, i + 1, e))?);
        }
    }
    let header = header.ok_or_else(|| Error::EmptyInput(path.to_path_buf()))?;
    Ok(RecordFile { header, records })
}

/// Serialized appender; one per output file.
pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RecordWriter {
    /// Truncates `path` and writes `header`.
    pub fn create(path: &Path, header: &Header) -> Result<Self, Error> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.write(header)?;
        w.flush()?;
        Ok(w)
    }

    /// Opens for appending after dropping any torn final line.
    pub fn append(path: &Path) -> Result<Self, Error> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1) as u64;
        if keep < len {
            file.set_len(keep).map_err(|e| Error::io(path, e))?;
        }
        file.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), Error> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| Error::io(&self.path, e.into()))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<(), Error> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads whatever complete trial records a partially written file holds.
pub fn completed_trials(path: &Path) -> Result<Option<RecordFile<TrialRecord>>, Error> {
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    if keep == 0 {
        return Ok(None);
    }
    let text = std::str::from_utf8(&bytes[..keep]).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = check_version(line, path, i + 1)?;
        if header.is_none() {
            header = Some(serde_json::from_value(value).map_err(|e| Error::parse(path, i + 1, e))?);
        } else {
            records.push(serde_json::from_value(value).map_err(|e| Error::parse(path, i + 1, e))?);
        }
    }
    Ok(header.map(|header| RecordFile { header, records }))
}
