//! The key-exchange demonstration behind `rkesim provision-demo`.

use std::collections::BTreeMap;

use serde::Serialize;
use toml::Value;

use crate::devices::KeyFob;
use crate::keystore::StrongSource;
use crate::provisioning::{
    classify_tables, BoardComputer, ExchangeOutcome, ExchangeReport, FaultKey, FaultPlan,
    ProvisionError, TableSet, WritePhase, ATTEMPTS_PER_BLOCK, BLOCKS_PER_TABLE,
};
use crate::scenario::{ConfigError, Reader};
use crate::testbed::{derive_seed, TestbedConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProvisionDemo {
    pub seed: u64,
    /// Password stored in the board computer.
    pub password: String,
    /// Password the workshop enters.
    pub entered_password: String,
    pub ports: [bool; 2],
    /// Independent per-write failure probability for runs after the first.
    pub fault_probability: f64,
    pub runs: u64,
    /// Explicit failures for the first run.
    pub faults: Vec<FaultKey>,
}

impl Default for ProvisionDemo {
    fn default() -> Self {
        ProvisionDemo {
            seed: 0,
            password: "workshop".into(),
            entered_password: "workshop".into(),
            ports: [true, true],
            fault_probability: 0.0,
            runs: 1,
            faults: Vec::new(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub outcome: Option<ExchangeOutcome>,
    pub error: Option<String>,
    pub tables: TableSet,
    /// Table state matches what the outcome promised.
    pub consistent: bool,
}

#[derive(Debug, Serialize)]
pub struct DemoReport {
    pub runs: u64,
    pub outcomes: BTreeMap<String, u64>,
    /// Runs whose tables disagree with the reported outcome. Must be 0.
    pub unreported_divergence: u64,
    pub first: serde_json::Value,
    #[serde(skip)]
    pub first_trace: Vec<String>,
}

impl ProvisionDemo {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let root = Reader::parse(text)?;
        let mut r = Reader::new(&root);
        let d = ProvisionDemo::default();
        r.unknown_keys(
            &root,
            "",
            &[
                "seed",
                "password",
                "entered_password",
                "ports",
                "fault_probability",
                "runs",
                "faults",
            ],
        );
        let top = Some(r.root());
        let seed = r.uint(top, "", "seed", 0, u64::MAX >> 1);
        let password = r.string(top, "", "password").unwrap_or(&d.password).to_string();
        let entered_password = r
            .string(top, "", "entered_password")
            .unwrap_or(&password)
            .to_string();
        let fault_probability = r.float(top, "", "fault_probability", 0.0);
        let runs = r.uint(top, "", "runs", 1, 10_000_000);
        if runs == 0 {
            r.error("runs", "must be at least 1");
        }
        let mut ports = d.ports;
        match root.get("ports") {
            None => {}
            Some(Value::Array(a)) if a.len() == 2 && a.iter().all(Value::is_bool) => {
                ports = [a[0].as_bool().unwrap(), a[1].as_bool().unwrap()];
            }
            Some(_) => r.error("ports", "expected two booleans"),
        }
        let mut faults = Vec::new();
        match root.get("faults") {
            None => {}
            Some(Value::Array(items)) => {
                for (i, item) in items.iter().enumerate() {
                    let path = format!("faults[{i}]");
                    let Value::Table(t) = item else {
                        r.error(path, "expected a table");
                        continue;
                    };
                    r.unknown_keys(t, &path, &["fob", "phase", "block", "attempt"]);
                    let t = Some(t);
                    let fob = r.uint(t, &path, "fob", 0, 1) as usize;
                    let block = r.uint(t, &path, "block", 0, (BLOCKS_PER_TABLE - 1) as u64) as u16;
                    let attempt = r.uint(t, &path, "attempt", 1, ATTEMPTS_PER_BLOCK as u64) as u8;
                    if attempt == 0 {
                        r.error(format!("{path}.attempt"), "attempts are numbered from 1");
                    }
                    let phase = match r.string(t, &path, "phase") {
                        None | Some("program") => WritePhase::Program,
                        Some("restore") => WritePhase::Restore,
                        Some(other) => {
                            r.error(
                                format!("{path}.phase"),
                                format!("unknown phase `{other}` (expected program|restore)"),
                            );
                            WritePhase::Program
                        }
                    };
                    faults.push(FaultKey {
                        fob,
                        phase,
                        block,
                        attempt,
                    });
                }
            }
            Some(_) => r.error("faults", "expected an array of tables ([[faults]])"),
        }
        r.finish()?;
        Ok(ProvisionDemo {
            seed,
            password,
            entered_password,
            ports,
            fault_probability,
            runs,
            faults,
        })
    }

    fn plan(&self, run: u64) -> FaultPlan {
        if run == 0 {
            self.faults.iter().fold(FaultPlan::none(), |p, k| {
                p.fail(k.fob, k.phase, k.block, k.attempt)
            })
        } else {
            FaultPlan::random(derive_seed(self.seed, 2_000 + run), self.fault_probability)
        }
    }

    /// One exchange against a fresh board and two fobs.
    pub fn run_one(&self, run: u64) -> (RunSummary, Option<ExchangeReport>) {
        let cfg = TestbedConfig {
            seed: derive_seed(self.seed, run),
            ..TestbedConfig::default()
        };
        let id = cfg.car_id();
        let old = cfg.table();
        let mut board = BoardComputer::new(id, old.clone(), self.password.clone());
        let mut a = KeyFob::new(id, old.clone(), Box::new(StrongSource::from_seed(1)));
        let mut b = KeyFob::new(id, old.clone(), Box::new(StrongSource::from_seed(2)));
        let mut entropy = StrongSource::from_seed(derive_seed(cfg.seed, 7));

        let result = board
            .begin_programming(&self.entered_password, self.ports)
            .and_then(|_| board.run_key_exchange([&mut a, &mut b], &mut entropy, &self.plan(run)));
        let report = match result {
            Ok(r) => Ok(r),
            Err(ProvisionError::ExchangeFailed(r)) => Ok(*r),
            Err(e) => Err(e),
        };
        let tables = classify_tables(&old, board.table(), [a.table(), b.table()]);
        match report {
            Ok(r) => (
                RunSummary {
                    outcome: Some(r.outcome),
                    error: None,
                    tables,
                    consistent: tables == r.outcome.expected_tables(),
                },
                Some(r),
            ),
            Err(e) => (
                RunSummary {
                    outcome: None,
                    error: Some(e.to_string()),
                    tables,
                    consistent: tables == TableSet::AllOld,
                },
                None,
            ),
        }
    }

    pub fn run(&self) -> DemoReport {
        let mut outcomes = BTreeMap::new();
        let mut unreported = 0;
        let mut first = serde_json::Value::Null;
        let mut first_trace = Vec::new();
        for run in 0..self.runs {
            let (summary, report) = self.run_one(run);
            let key = match (&summary.outcome, &summary.error) {
                (Some(o), _) => outcome_name(o).to_string(),
                (None, _) => "REFUSED".to_string(),
            };
            *outcomes.entry(key).or_insert(0) += 1;
            if !summary.consistent {
                unreported += 1;
            }
            if run == 0 {
                first = serde_json::json!({
                    "summary": summary,
                    "exchange": report.as_ref().map(ExchangeReport::to_json),
                });
                first_trace = report.map(|r| r.trace_lines()).unwrap_or_default();
            }
        }
        DemoReport {
            runs: self.runs,
            outcomes,
            unreported_divergence: unreported,
            first,
            first_trace,
        }
    }
}

fn outcome_name(o: &ExchangeOutcome) -> &'static str {
    match o {
        ExchangeOutcome::Done => "DONE",
        ExchangeOutcome::Aborted { .. } => "ABORTED",
        ExchangeOutcome::RolledBack { .. } => "ROLLED_BACK",
        ExchangeOutcome::Inconsistent { .. } => "INCONSISTENT",
    }
}
