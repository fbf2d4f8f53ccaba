//! `rkesim`: run scenarios, the attack matrix, the trace auditor and the
//! key-exchange demo.
//!
//! Exit codes: 0 success, 1 the run or trace violates a protocol rule,
//! 2 bad configuration or input.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rkesim_core::audit::{AuditConfig, AuditReport, Auditor};
use rkesim_core::demo::ProvisionDemo;
use rkesim_core::matrix::{run_matrix, MatrixConfig};
use rkesim_core::scenario::{ConfigError, Scenario};
use rkesim_core::trace::parse_trace;

#[derive(Parser)]
#[command(name = "rkesim", version, about = "Remote keyless entry protocol simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Override the seed given in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for reports and traces.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Write a trace file (default).
    #[arg(long, overrides_with = "no_trace")]
    trace: bool,
    /// Skip the trace file.
    #[arg(long, overrides_with = "trace")]
    no_trace: bool,
}

impl Common {
    fn want_trace(&self) -> bool {
        !self.no_trace
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file.
    Simulate {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Measure every attack against every technique.
    Matrix {
        /// Matrix configuration; desk-scale defaults when omitted.
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Check a trace file against the protocol rules.
    Audit {
        trace: PathBuf,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run the workshop key exchange, optionally with injected write faults.
    ProvisionDemo {
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Violation(String),
    Input(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Input(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// `println!` that stops quietly when stdout is closed (`rkesim ... | head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize") + "\n"
}

fn simulate(path: &Path, common: &Common) -> Result<(), Failure> {
    let mut scenario = Scenario::parse(&read(path)?)?;
    if let Some(seed) = common.seed {
        scenario.testbed.seed = seed;
    }
    let result = scenario.run(common.want_trace());
    let r = &result.report;
    let json = write(&common.out_dir, &format!("{}.json", scenario.name), &pretty(r))?;
    out!("scenario   {}", r.scenario);
    out!("technique  {}", r.technique.name());
    out!("seed       {}", r.seed);
    if let Some(a) = r.attack {
        out!(
            "attack     {} ({} of {} attempts succeeded, rate {:.6})",
            a.name(),
            r.successes,
            r.attempts,
            r.success_rate
        );
    }
    out!("report     {}", json.display());
    if let Some(trace) = &result.trace {
        let p = write(&common.out_dir, &format!("{}.trace", scenario.name), trace)?;
        out!("trace      {}", p.display());
    }
    if r.violations > 0 {
        return Err(Failure::Violation(format!("{} rule violation(s), see the report", r.violations)));
    }
    Ok(())
}

fn matrix(path: Option<&Path>, common: &Common) -> Result<(), Failure> {
    let mut config = match path {
        Some(p) => MatrixConfig::parse(&read(p)?)?,
        None => MatrixConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let report = run_matrix(&config);
    write(&common.out_dir, "matrix.csv", &report.to_csv())?;
    write(&common.out_dir, "matrix.json", &pretty(&report))?;
    out!("{:<20} {:<10} {:>10} {:>10} {:>10} {:>5}", "attack", "technique", "attempts", "successes", "rate", "rank");
    for c in &report.cells {
        out!(
            "{:<20} {:<10} {:>10} {:>10} {:>10.6} {:>5}",
            c.attack.name(),
            c.technique.name(),
            c.attempts,
            c.successes,
            c.rate,
            c.rank
        );
    }
    for row in &report.rows {
        let order: Vec<_> = row.ordering.iter().map(|t| t.name()).collect();
        out!(
            "{}: {} ({})",
            row.attack.name(),
            order.join(" >= "),
            if row.monotone { "monotone" } else { "NOT monotone" }
        );
    }
    out!("wrote {}", common.out_dir.join("matrix.{csv,json}").display());
    Ok(())
}

fn audit(path: &Path, json: bool) -> Result<(), Failure> {
    let text = read(path)?;
    let trace = parse_trace(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let config = AuditConfig::from_trace(&trace).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let auditor = Auditor::audit(&trace, config);
    if json {
        out!("{}", pretty(&AuditReport::from(&auditor)).trim_end());
    } else {
        out!("{} records, {} actuator events", trace.records.len(), auditor.attributions().len());
        for a in auditor.adversarial() {
            out!("adversarial actuation: line {} t={} {} {:?}", a.line, a.at, a.endpoint, a.actuator);
        }
        for v in auditor.violations() {
            out!("{v}");
        }
    }
    match auditor.violations().len() {
        0 => Ok(()),
        n => Err(Failure::Violation(format!("{n} rule violation(s)"))),
    }
}

fn provision_demo(path: Option<&Path>, common: &Common) -> Result<(), Failure> {
    let mut demo = match path {
        Some(p) => ProvisionDemo::parse(&read(p)?)?,
        None => ProvisionDemo::default(),
    };
    if let Some(seed) = common.seed {
        demo.seed = seed;
    }
    let report = demo.run();
    write(&common.out_dir, "provision.json", &pretty(&report))?;
    if common.want_trace() && !report.first_trace.is_empty() {
        write(&common.out_dir, "provision.transcript", &(report.first_trace.join("\n") + "\n"))?;
    }
    out!("runs {}", report.runs);
    for (outcome, n) in &report.outcomes {
        out!("  {outcome:<13} {n}");
    }
    out!("unreported divergence {}", report.unreported_divergence);
    if report.unreported_divergence > 0 {
        return Err(Failure::Violation("tables diverged without being reported".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { scenario, common } => simulate(scenario, common),
        Command::Matrix { config, common } => matrix(config.as_deref(), common),
        Command::Audit { trace, json } => audit(trace, *json),
        Command::ProvisionDemo { config, common } => provision_demo(config.as_deref(), common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violation(msg)) => {
            eprintln!("violation: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
