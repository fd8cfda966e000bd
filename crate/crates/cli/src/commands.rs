//! Subcommand implementations, callable without the argument parser.

use boxworld_core::client::{Agent, AgentInfo, ChatClient, ScriptedAgent};
use boxworld_core::genesis::{gen_instance_with_pool, DistractorPool};
use boxworld_core::probe::{run_batch, ProbeError, Protocol};
use boxworld_core::prompt::RenderStyle;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use tracing::info;

use crate::config::{derive_seed, RunConfig};
use crate::records::{
    completed_trials, read_file, FileKind, Header, InstanceRecord, RecordFile, RecordWriter, TrialRecord,
    SCHEMA_VERSION,
};
use crate::report;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub instances: usize,
    pub cells: usize,
}

pub fn generate(config: &RunConfig) -> Result<GenerateSummary, Error> {
    config.validate()?;
    let pool = match &config.distractor_file {
        Some(p) => DistractorPool::from_file(p)?,
        None => DistractorPool::bundled(),
    };
    let path = config.instances_path();
    let mut w = RecordWriter::create(&path, &Header::new(FileKind::Instances, config, None))?;
    let cells = config.cells();
    let mut count = 0;
    for cell in &cells {
        for sample in 0..config.samples {
            let seed = derive_seed(config.base_seed, cell.n_shots, sample);
            let instance = gen_instance_with_pool(seed, cell, &pool)?;
            w.write(&InstanceRecord::new(*cell, sample, instance))?;
            count += 1;
        }
    }
    w.flush()?;
    info!(path = %path.display(), instances = count, cells = cells.len(), "wrote instances");
    Ok(GenerateSummary {
        path,
        instances: count,
        cells: cells.len(),
    })
}

pub fn build_agent(config: &RunConfig) -> Box<dyn Agent> {
    match config.scripted_kind() {
        Some(kind) => Box::new(ScriptedAgent::new(kind)),
        None => Box::new(ChatClient::new(config.client.clone())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub path: PathBuf,
    pub written: usize,
    pub resumed: usize,
    pub skipped: usize,
    pub queries: usize,
    pub responded: usize,
}

impl RunSummary {
    pub fn response_rate(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.responded as f64 / self.queries as f64
        }
    }
}

/// Settings that must match for a transcript file to be resumed.
#[derive(PartialEq)]
struct Fingerprint {
    protocol: Protocol,
    style: RenderStyle,
    agent: AgentInfo,
}

/// Runs the configured protocol on every instance not yet in the transcript file.
pub fn run(config: &RunConfig, instances: &Path) -> Result<RunSummary, Error> {
    let agent = build_agent(config);
    run_with_agent(config, instances, agent.as_ref())
}

pub fn run_with_agent<A: Agent + ?Sized>(config: &RunConfig, instances: &Path, agent: &A) -> Result<RunSummary, Error> {
    config.validate()?;
    if !instances.exists() {
        return Err(Error::Config(format!(
            "{} not found; run `generate` first",
            instances.display()
        )));
    }
    let file: RecordFile<InstanceRecord> = read_file(instances, FileKind::Instances)?;
    let protocol = config.protocol();
    let path = config.transcripts_path();
    let want = Fingerprint {
        protocol,
        style: config.style,
        agent: agent.info(),
    };

    let mut done: HashSet<String> = HashSet::new();
    let mut writer = match completed_trials(&path)? {
        Some(existing) => {
            let h = &existing.header;
            let found = Fingerprint {
                protocol: h.config.protocol(),
                style: h.config.style,
                agent: h.agent.clone().unwrap_or(AgentInfo {
                    name: String::new(),
                    model: None,
                    decoding: None,
                }),
            };
            if found != want {
                return Err(Error::Config(format!(
                    "{} was written with a different protocol, style or agent; choose another --out",
                    path.display()
                )));
            }
            done.extend(existing.records.into_iter().map(|r| r.instance_id));
            RecordWriter::append(&path)?
        }
        None => RecordWriter::create(
            &path,
            &Header::new(FileKind::Transcripts, config, Some(want.agent.clone())),
        )?,
    };
    let resumed = done.len();
    let pending: Vec<&InstanceRecord> = file.records.iter().filter(|r| !done.contains(&r.instance.id)).collect();
    info!(pending = pending.len(), resumed, protocol = %protocol.tag(), "starting run");

    let mut summary = RunSummary {
        path: path.clone(),
        written: 0,
        resumed,
        skipped: 0,
        queries: 0,
        responded: 0,
    };
    let chunk = (config.concurrency.max(1) * 4).max(8);
    for group in pending.chunks(chunk) {
        let insts: Vec<_> = group.iter().map(|r| r.instance.clone()).collect();
        let outcome = run_batch(&insts, protocol, config.style, agent, config.concurrency);
        let results = match outcome {
            Ok(r) => r,
            Err(e) => {
                writer.flush()?;
                return Err(e.into());
            }
        };
        for (src, result) in group.iter().zip(results) {
            let record = match result {
                Ok(trial) => {
                    summary.queries += trial.queries.len();
                    summary.responded += trial.responded();
                    TrialRecord::new(src, Ok(trial))
                }
                Err(e @ (ProbeError::BadK { .. } | ProbeError::Env(_) | ProbeError::Metrics(_))) => {
                    summary.skipped += 1;
                    TrialRecord::new(src, Err(e.to_string()))
                }
                Err(e) => return Err(e.into()),
            };
            writer.write(&record)?;
            summary.written += 1;
        }
        writer.flush()?;
    }
    info!(
        written = summary.written,
        skipped = summary.skipped,
        response_rate = summary.response_rate(),
        "run finished"
    );
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    tool_version: &'a str,
    input: ManifestInput<'a>,
    header: &'a Header,
    outputs: &'a [&'a str],
}

#[derive(Debug, Clone, Serialize)]
struct ManifestInput<'a> {
    path: &'a Path,
    sha256: String,
    trials: usize,
}

pub const REPORT_FILES: [&str; 6] = [
    "table.csv",
    "summary.csv",
    "curves.csv",
    "transitions.csv",
    "curves.svg",
    "transitions.svg",
];

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub dir: PathBuf,
    pub report: report::Report,
}

/// Default report directory for a transcript file.
pub fn report_dir(config: &RunConfig) -> PathBuf {
    config.out.join(format!("report-{}", config.protocol().tag()))
}

pub fn report(transcripts: &Path, dir: &Path) -> Result<ReportSummary, Error> {
    let file: RecordFile<TrialRecord> = read_file(transcripts, FileKind::Transcripts)?;
    if file.records.is_empty() {
        return Err(Error::EmptyInput(transcripts.to_path_buf()));
    }
    let rep = report::compute(&file.records)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    report::write_table(&dir.join("table.csv"), &rep.summaries)?;
    report::write_summary(&dir.join("summary.csv"), &rep.summaries)?;
    report::write_curves(&dir.join("curves.csv"), &rep.curves)?;
    report::write_transitions(&dir.join("transitions.csv"), &rep.curves)?;
    report::plot_curves(&dir.join("curves.svg"), &rep.curves)?;
    report::plot_transitions(&dir.join("transitions.svg"), &rep.curves)?;

    let bytes = std::fs::read(transcripts).map_err(|e| Error::io(transcripts, e))?;
    let digest = Sha256::digest(&bytes);
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION"),
        input: ManifestInput {
            path: transcripts,
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            trials: file.records.len(),
        },
        header: &file.header,
        outputs: &REPORT_FILES,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::io(&path, e.into()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    info!(dir = %dir.display(), cells = rep.summaries.len(), "wrote report");
    Ok(ReportSummary {
        dir: dir.to_path_buf(),
        report: rep,
    })
}
