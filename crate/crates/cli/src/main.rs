use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use trustrep::harness::{self, MatrixSpec, TransportKind};
use trustrep::tracecheck::{check_agreement, check_channels};
use trustrep::{KeyDistribution, ProtocolKind, ScenarioConfig, Trace};

#[derive(Parser)]
#[command(name = "trustrep", version, about = "Run and check hardened replication scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Workload {
    Ycsb,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Sim,
    Tcp,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace, report and metrics.
    Run(RunArgs),
    /// Check the channel and agreement properties of a recorded trace.
    Check {
        trace: PathBuf,
        /// Treat commit indices as per-key versions instead of one global
        /// sequence (use for r-abd traces).
        #[arg(long)]
        per_key: bool,
    },
    /// Run a grid of scenarios described by a JSON spec.
    Matrix {
        #[arg(long)]
        spec: PathBuf,
        /// Write matrix.csv and reports.json here instead of printing CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, value_parser = parse_protocol)]
    protocol: ProtocolKind,
    #[arg(long, default_value_t = 3)]
    nodes: usize,
    #[arg(long, default_value_t = 1)]
    faults: usize,
    /// Adversary policy file (JSON) or one of: identity, drop, reorder,
    /// replay, tamper, leader-partition.
    #[arg(long, default_value = "identity")]
    adversary: String,
    #[arg(long, value_enum, default_value_t = Workload::Ycsb)]
    workload: Workload,
    #[arg(long, default_value_t = 0.5)]
    read_ratio: f64,
    #[arg(long, default_value_t = 64)]
    value_size: usize,
    #[arg(long, default_value_t = 10_000)]
    keys: u64,
    /// Zipf exponent; 0 picks keys uniformly.
    #[arg(long, default_value_t = 0.99)]
    zipf: f64,
    #[arg(long, default_value_t = 200)]
    ops: usize,
    #[arg(long, default_value_t = 8)]
    clients: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    confidential: bool,
    /// Tick at which the network stabilises.
    #[arg(long, default_value_t = 0)]
    gst: u64,
    /// Post-GST delivery bound in ticks.
    #[arg(long, default_value_t = 5)]
    delta: u64,
    #[arg(long, value_enum, default_value_t = Transport::Sim)]
    transport: Transport,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_protocol(s: &str) -> Result<ProtocolKind, String> {
    s.parse().map_err(|e: trustrep::ConfigError| e.to_string())
}

fn scenario(a: &RunArgs) -> Result<ScenarioConfig> {
    let mut c = ScenarioConfig::new(a.protocol, a.seed);
    c.n = a.nodes;
    c.f = a.faults;
    c.gst = a.gst;
    c.delta = a.delta;
    c.confidential = a.confidential;
    c.adversary = harness::load_adversary(&a.adversary)
        .with_context(|| format!("loading adversary {:?}", a.adversary))?;
    match a.workload {
        Workload::Ycsb => {
            c.workload.read_ratio = a.read_ratio;
            c.workload.value_size = a.value_size;
            c.workload.key_count = a.keys;
            c.workload.op_count = a.ops;
            c.workload.client_count = a.clients;
            c.workload.distribution = if a.zipf == 0.0 {
                KeyDistribution::Uniform
            } else {
                KeyDistribution::Zipfian { theta: a.zipf }
            };
        }
    }
    c.validate()?;
    Ok(c)
}

fn run(a: RunArgs) -> Result<bool> {
    let cfg = scenario(&a)?;
    let transport = match a.transport {
        Transport::Sim => TransportKind::Sim,
        Transport::Tcp => TransportKind::Tcp,
    };
    let (out, rep) = harness::run(&cfg, &a.adversary, transport)?;
    harness::write_artifacts(&a.out, &out, &rep)
        .with_context(|| format!("writing artifacts to {}", a.out.display()))?;
    println!(
        "{} n={} f={} seed={}: {}/{} ops in {} ticks, {} messages, {} rejects, {} violations",
        rep.protocol,
        rep.nodes,
        rep.faults,
        rep.seed,
        rep.committed_ops,
        rep.ops,
        rep.ticks,
        rep.message_count,
        rep.total_rejects(),
        rep.violations.len()
    );
    if let Some(why) = &rep.unchecked {
        eprintln!("history not checked: {why}");
    }
    println!("artifacts in {}", a.out.display());
    Ok(rep.violations.is_empty())
}

fn check(path: PathBuf, per_key: bool) -> Result<bool> {
    let f = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let trace = Trace::read_jsonl(BufReader::new(f)).context("parsing trace")?;
    let mut v = check_channels(&trace);
    v.extend(check_agreement(&trace, !per_key));
    let verdict = serde_json::json!({
        "events": trace.len(),
        "violations": v.iter().map(|v| v.to_json()).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&verdict)?);
    eprintln!("{} events, {} violations", trace.len(), v.len());
    Ok(v.is_empty())
}

fn matrix(spec: PathBuf, out: Option<PathBuf>) -> Result<bool> {
    let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec = MatrixSpec::from_json(&text)?;
    let reports = spec.run()?;
    let clean = reports.iter().all(|r| r.violations.is_empty());
    match out {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            harness::write_metrics(&dir.join("matrix.csv"), &reports)?;
            fs::write(dir.join("reports.json"), serde_json::to_vec_pretty(&reports)?)?;
            eprintln!("{} runs written to {}", reports.len(), dir.display());
        }
        None => {
            println!("{}", harness::METRICS_HEADER);
            for r in &reports {
                println!("{}", r.csv_row());
            }
        }
    }
    Ok(clean)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Check { trace, per_key } => check(trace, per_key),
        Command::Matrix { spec, out } => matrix(spec, out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
