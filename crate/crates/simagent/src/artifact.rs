//! Versioned JSON artifacts: scenario sets, token dumps, rollouts, logs and
//! reports. Every file carries a `format_version`; readers reject others.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use simagent_core::environment::RolloutBatch;
use simagent_core::generator::Template;
use simagent_core::metrics::MetricReport;
use simagent_core::posttrain::PosttrainReport;
use simagent_core::pretrain::TrainReport;
use simagent_core::scenario::Scenario;
use simagent_core::testtime::Telemetry;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub format_version: u32,
    pub kind: String,
    #[serde(flatten)]
    pub body: T,
}

pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub template: Template,
    pub seed: u64,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub seed: u64,
    pub entries: Vec<ScenarioEntry>,
}

impl Artifact for ScenarioSet {
    const KIND: &'static str = "scenarios";
}

impl ScenarioSet {
    pub fn scenarios(&self) -> Vec<Scenario> {
        self.entries.iter().map(|e| e.scenario.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTokens {
    pub agent_id: u32,
    pub reference_bins: (i32, i32),
    pub tokens: Vec<u32>,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDump {
    pub scenarios: Vec<Vec<AgentTokens>>,
}

impl Artifact for TokenDump {
    const KIND: &'static str = "tokens";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutEntry {
    pub scenario: usize,
    pub sampled: usize,
    pub feasible: usize,
    pub budget_exhausted: bool,
    pub warning: Option<String>,
    pub batch: RolloutBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSet {
    pub checkpoint: String,
    pub entries: Vec<RolloutEntry>,
}

impl Artifact for RolloutSet {
    const KIND: &'static str = "rollouts";
}

/// Wall-clock stage timings; kept apart from the rollouts so those stay
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingLog {
    pub per_scenario: Vec<Telemetry>,
    pub total: Telemetry,
}

impl Artifact for TimingLog {
    const KIND: &'static str = "timing";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub report: TrainReport,
}

impl Artifact for PretrainLog {
    const KIND: &'static str = "pretrain_log";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosttrainLog {
    pub report: PosttrainReport,
    pub kl_to_reference: f64,
}

impl Artifact for PosttrainLog {
    const KIND: &'static str = "posttrain_log";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub metrics: MetricReport,
}

impl Artifact for EvalReport {
    const KIND: &'static str = "report";
}

pub fn to_json<T: Artifact>(value: &T) -> String {
    #[derive(Serialize)]
    struct Out<'a, T> {
        format_version: u32,
        kind: &'static str,
        #[serde(flatten)]
        body: &'a T,
    }
    let mut s = serde_json::to_string_pretty(&Out { format_version: FORMAT_VERSION, kind: T::KIND, body: value }).expect("artifact serializes");
    s.push('\n');
    s
}

pub fn write<T: Artifact>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_json(value)).map_err(|e| Error::io(path, e))
}

pub fn from_json<T: Artifact>(path: &Path, text: &str) -> Result<T> {
    #[derive(Deserialize)]
    struct Header {
        format_version: u32,
        kind: String,
    }
    let h: Header = serde_json::from_str(text).map_err(|e| Error::format(path, e))?;
    if h.kind != T::KIND {
        return Err(Error::format(path, format!("expected a {} artifact, found {}", T::KIND, h.kind)));
    }
    if h.format_version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format_version {} (expected {FORMAT_VERSION})", h.format_version)));
    }
    let v: Versioned<T> = serde_json::from_str(text).map_err(|e| Error::format(path, e))?;
    Ok(v.body)
}

/// Reads an artifact, reporting a missing file as a missing prerequisite.
pub fn read<T: Artifact>(path: &Path, hint: &'static str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact { what: T::KIND, path: path.to_path_buf(), hint });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(path, &text)
}
