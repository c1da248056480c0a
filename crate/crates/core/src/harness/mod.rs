//! Running scenarios end to end: build, run, check, report.

pub mod workload;

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ProtocolKind, ScenarioConfig};
use crate::crypto;
use crate::sim::{Sim, SimError, SimOutput};
use crate::trace::{EventKind, Trace};
use crate::tracecheck::{
    self, check_agreement, check_channels, check_lease_exclusion, linear, scan_for_secrets, Violation,
};
use crate::transport::{AdversaryPolicy, TcpNet};
use crate::types::NodeId;

use self::workload::WorkloadSpec;

/// Column order of the metrics CSV. Stable across versions.
pub const METRICS_HEADER: &str = "protocol,nodes,faults,seed,adversary,transport,confidential,\
ops,committed,ticks,ops_per_tick,rounds_per_op,messages,bytes_on_wire,rejects,violations,trace_digest";

/// Values shorter than this are too likely to occur by chance to count as
/// a leak when found in a byte scan.
pub const MIN_SECRET_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Sim,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" => Ok(TransportKind::Sim),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(format!("unknown transport {other:?} (expected sim or tcp)")),
        }
    }
}

impl TransportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransportKind::Sim => "sim",
            TransportKind::Tcp => "tcp",
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("invalid {what}: {msg}")]
    Parse { what: &'static str, msg: String },
    #[error("the tcp transport does not support {0}")]
    TcpUnsupported(&'static str),
}

/// The adversaries every protocol is exercised against, by name.
pub const STANDARD_ADVERSARIES: [&str; 6] =
    ["identity", "drop", "reorder", "replay", "tamper", "leader-partition"];

/// Looks up a standard adversary. The leader partition isolates the
/// bootstrap leader (node 0) for a while and then heals.
pub fn named_adversary(name: &str) -> Option<AdversaryPolicy> {
    Some(match name {
        "identity" => AdversaryPolicy::identity(),
        "drop" => AdversaryPolicy::drop(0.2),
        "reorder" => AdversaryPolicy::reorder(8),
        "replay" | "replay-all" => AdversaryPolicy::replay_all(),
        "tamper" => AdversaryPolicy::tamper(0.1),
        "leader-partition" => AdversaryPolicy::partition(vec![NodeId(0)], 100, 600),
        _ => return None,
    })
}

/// Reads an adversary from a JSON file, or takes a standard name.
pub fn load_adversary(spec: &str) -> Result<AdversaryPolicy, HarnessError> {
    if let Some(p) = named_adversary(spec) {
        return Ok(p);
    }
    let text = fs::read_to_string(spec)?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        what: "adversary",
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub protocol: ProtocolKind,
    pub nodes: usize,
    pub faults: usize,
    pub seed: u64,
    pub adversary: String,
    pub transport: TransportKind,
    pub confidential: bool,
    pub completed: bool,
    pub ops: usize,
    pub committed_ops: usize,
    pub ticks: u64,
    pub ops_per_tick: f64,
    pub rounds_per_op: f64,
    pub message_count: u64,
    pub bytes_on_wire: u64,
    pub rejects: BTreeMap<String, u64>,
    pub violations: Vec<serde_json::Value>,
    /// Set when the history was too concurrent to check.
    pub unchecked: Option<String>,
    pub trace_digest: String,
}

impl RunReport {
    pub fn total_rejects(&self) -> u64 {
        self.rejects.values().sum()
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.4},{:.3},{},{},{},{},{}",
            self.protocol,
            self.nodes,
            self.faults,
            self.seed,
            self.adversary,
            self.transport.as_str(),
            self.confidential,
            self.ops,
            self.committed_ops,
            self.ticks,
            self.ops_per_tick,
            self.rounds_per_op,
            self.message_count,
            self.bytes_on_wire,
            self.total_rejects(),
            self.violations.len(),
            self.trace_digest,
        )
    }
}

/// Hex SHA-256 of the trace in its JSONL form.
pub fn trace_digest(trace: &Trace) -> String {
    hex::encode(crypto::digest(&trace.to_jsonl()))
}

/// Written values long enough to be recognisable in a byte scan.
pub fn written_secrets(out: &SimOutput) -> Vec<Vec<u8>> {
    out.history
        .iter()
        .filter(|h| h.is_write())
        .filter_map(|h| h.value.clone())
        .filter(|v| v.len() >= MIN_SECRET_LEN)
        .collect()
}

/// Every check that applies to the run. Returns the violations and, if
/// the history could not be checked, why.
pub fn analyze(cfg: &ScenarioConfig, out: &SimOutput) -> (Vec<Violation>, Option<String>) {
    let mut v = check_channels(&out.trace);
    v.extend(check_agreement(&out.trace, cfg.protocol.totally_ordered()));
    if cfg.protocol == ProtocolKind::Raft {
        v.extend(check_lease_exclusion(&out.lease_claims));
    }
    let mut unchecked = None;
    match cfg.protocol {
        ProtocolKind::AllConcur => {
            v.extend(linear::check_sequential(&out.history, &linear::commit_order(&out.trace)));
        }
        _ => match tracecheck::check_linearizable(&out.history) {
            Ok(found) => v.extend(found),
            Err(e) => unchecked = Some(e.to_string()),
        },
    }
    if cfg.confidential {
        let secrets = written_secrets(out);
        let regions = out
            .arenas
            .iter()
            .enumerate()
            .map(|(i, a)| (format!("arena[{i}]"), a.as_slice()))
            .chain(
                out.wire
                    .iter()
                    .enumerate()
                    .map(|(i, f)| (format!("frame[{i}]"), f.as_slice())),
            );
        v.extend(scan_for_secrets(regions, &secrets));
    }
    (v, unchecked)
}

/// Builds the report for a finished run.
pub fn report(cfg: &ScenarioConfig, adversary: &str, transport: TransportKind, out: &SimOutput) -> RunReport {
    let (violations, unchecked) = analyze(cfg, out);
    let committed = out.history.iter().filter(|h| h.is_complete()).count();
    let rounds: Vec<u32> = out
        .proto_stats
        .values()
        .flat_map(|s| s.rounds.iter().map(|(_, r)| *r))
        .collect();
    let rounds_per_op = if rounds.is_empty() {
        0.0
    } else {
        rounds.iter().map(|r| f64::from(*r)).sum::<f64>() / rounds.len() as f64
    };
    let mut rejects = BTreeMap::new();
    for ev in out.trace.iter() {
        if let EventKind::Reject { reason, .. } = &ev.kind {
            *rejects.entry(reason.to_string()).or_insert(0) += 1;
        }
    }
    RunReport {
        protocol: cfg.protocol,
        nodes: cfg.n,
        faults: cfg.f,
        seed: cfg.seed,
        adversary: adversary.to_string(),
        transport,
        confidential: cfg.confidential,
        completed: out.completed,
        ops: out.history.len(),
        committed_ops: committed,
        ticks: out.ticks,
        ops_per_tick: if out.ticks == 0 { 0.0 } else { committed as f64 / out.ticks as f64 },
        rounds_per_op,
        message_count: out.net.frames_sent,
        bytes_on_wire: out.net.bytes_sent,
        rejects,
        violations: violations.iter().map(Violation::to_json).collect(),
        unchecked,
        trace_digest: trace_digest(&out.trace),
    }
}

/// Builds the simulation for `cfg` on the chosen transport.
pub fn build(cfg: &ScenarioConfig, transport: TransportKind) -> Result<Sim, HarnessError> {
    match transport {
        TransportKind::Sim => Ok(Sim::new(cfg.clone())?),
        TransportKind::Tcp => {
            if !cfg.joins.is_empty() {
                return Err(HarnessError::TcpUnsupported("membership joins"));
            }
            if !cfg.adversary.is_identity() {
                return Err(HarnessError::TcpUnsupported("adversary policies"));
            }
            let ids: Vec<NodeId> = (0..cfg.n as u32).map(NodeId).collect();
            Ok(Sim::with_network(cfg.clone(), Box::new(TcpNet::bind(&ids)?))?)
        }
    }
}

/// Runs a scenario to completion (or budget) and reports on it.
pub fn run(
    cfg: &ScenarioConfig,
    adversary: &str,
    transport: TransportKind,
) -> Result<(SimOutput, RunReport), HarnessError> {
    let mut sim = build(cfg, transport)?;
    sim.run();
    let out = sim.finish();
    let rep = report(cfg, adversary, transport, &out);
    Ok((out, rep))
}

/// Writes `trace.jsonl`, `report.json` and `metrics.csv` into `dir`.
pub fn write_artifacts(dir: &Path, out: &SimOutput, rep: &RunReport) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    out.trace
        .write_jsonl(io::BufWriter::new(fs::File::create(dir.join("trace.jsonl"))?))?;
    let json = serde_json::to_vec_pretty(rep).map_err(io::Error::other)?;
    fs::write(dir.join("report.json"), json)?;
    write_metrics(&dir.join("metrics.csv"), std::slice::from_ref(rep))
}

pub fn write_metrics(path: &Path, reports: &[RunReport]) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{METRICS_HEADER}")?;
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()
}

fn default_n() -> usize {
    3
}

fn default_f() -> usize {
    1
}

fn default_delta() -> u64 {
    5
}

fn default_protocols() -> Vec<ProtocolKind> {
    ProtocolKind::ALL.to_vec()
}

fn default_adversaries() -> Vec<String> {
    STANDARD_ADVERSARIES.iter().map(|s| s.to_string()).collect()
}

/// A grid of runs: every protocol against every adversary for every seed.
/// Adversaries are standard names or paths to policy files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSpec {
    #[serde(default = "default_protocols")]
    pub protocols: Vec<ProtocolKind>,
    #[serde(default = "default_adversaries")]
    pub adversaries: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_f")]
    pub f: usize,
    #[serde(default)]
    pub gst: u64,
    #[serde(default = "default_delta")]
    pub delta: u64,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub confidential: bool,
}

impl MatrixSpec {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Parse {
            what: "matrix spec",
            msg: e.to_string(),
        })
    }

    /// One scenario per cell, with the adversary's label.
    pub fn scenarios(&self) -> Result<Vec<(String, ScenarioConfig)>, HarnessError> {
        let mut out = Vec::new();
        for &p in &self.protocols {
            for a in &self.adversaries {
                let policy = load_adversary(a)?;
                for &seed in &self.seeds {
                    let mut c = ScenarioConfig::new(p, seed);
                    c.n = self.n;
                    c.f = self.f;
                    c.gst = self.gst;
                    c.delta = self.delta;
                    c.adversary = policy.clone();
                    c.workload = self.workload.clone();
                    c.confidential = self.confidential;
                    out.push((a.clone(), c));
                }
            }
        }
        Ok(out)
    }

    pub fn run(&self) -> Result<Vec<RunReport>, HarnessError> {
        self.scenarios()?
            .iter()
            .map(|(label, cfg)| run(cfg, label, TransportKind::Sim).map(|(_, r)| r))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_standard_name_resolves() {
        for n in STANDARD_ADVERSARIES {
            assert!(named_adversary(n).is_some(), "{n}");
        }
        assert!(named_adversary("bogus").is_none());
    }

    #[test]
    fn csv_row_matches_header_width() {
        let mut cfg = ScenarioConfig::new(ProtocolKind::Abd, 3);
        cfg.workload.op_count = 20;
        let (_, rep) = run(&cfg, "identity", TransportKind::Sim).unwrap();
        assert_eq!(
            rep.csv_row().split(',').count(),
            METRICS_HEADER.split(',').count()
        );
        assert!(rep.violations.is_empty(), "{:?}", rep.violations);
        assert_eq!(rep.committed_ops, 20);
    }

    #[test]
    fn matrix_spec_defaults() {
        let m = MatrixSpec::from_json(r#"{"seeds":[1,2]}"#).unwrap();
        assert_eq!(m.scenarios().unwrap().len(), 4 * 6 * 2);
    }
}
