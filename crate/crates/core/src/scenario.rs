//! Scenario files: TOML documents describing one deterministic run.
//!
//! ```toml
//! name = "unlock_happy"
//! technique = "proposed"
//! seed = 7
//!
//! [protocol]
//! entropy = "strong"
//!
//! [[events]]
//! at = 100
//! target = "fob"
//! action = "button"
//! button = "unlock"
//! ```
//!
//! Validation collects every problem before giving up, so a broken file is
//! fixed in one pass.

use std::fmt;

use serde::Serialize;
use serde_json::json;
use toml::{Table, Value};

use crate::adversaries::{
    forward_prediction_attack, jam_attack, obd_clone_demo, playback_attack, relay_attack,
    scan_attack, AttackKind, AttackOutcome, JamPlan, ScanPlan, DEFAULT_RELAY_DELAY_MS,
};
use crate::authcrypt::ProtocolParams;
use crate::baselines::Technique;
use crate::channel::Input;
use crate::devices::{Millis, Timing, VehicleEvent};
use crate::keystore::EntropyKind;
use crate::testbed::{derive_seed, Testbed, TestbedConfig};
use crate::wire::Button;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub errors: Vec<FieldError>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration ({} problem(s)):", self.errors.len())?;
        for e in &self.errors {
            writeln!(f, "  {}: {}", e.field, e.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// Field-by-field reader over a TOML table that records every problem.
pub(crate) struct Reader<'a> {
    errors: Vec<FieldError>,
    root: &'a Table,
}

impl<'a> Reader<'a> {
    pub(crate) fn parse(text: &str) -> Result<Table, ConfigError> {
        text.parse::<Table>().map_err(|e| ConfigError {
            errors: vec![FieldError {
                field: "<file>".into(),
                message: e.message().to_string(),
            }],
        })
    }

    pub(crate) fn new(root: &'a Table) -> Self {
        Reader {
            errors: Vec::new(),
            root,
        }
    }

    pub(crate) fn error(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.errors.push(FieldError {
            field: field.into(),
            message: message.into(),
        });
    }

    pub(crate) fn finish(self) -> Result<(), ConfigError> {
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError {
                errors: self.errors,
            })
        }
    }

    pub(crate) fn section(&mut self, name: &str, known: &[&str]) -> Option<&'a Table> {
        match self.root.get(name) {
            None => None,
            Some(Value::Table(t)) => {
                self.unknown_keys(t, name, known);
                Some(t)
            }
            Some(_) => {
                self.error(name, "expected a table");
                None
            }
        }
    }

    pub(crate) fn unknown_keys(&mut self, t: &Table, path: &str, known: &[&str]) {
        for k in t.keys() {
            if !known.contains(&k.as_str()) {
                let field = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                self.error(field, "unknown field");
            }
        }
    }

    fn path(path: &str, key: &str) -> String {
        if path.is_empty() {
            key.to_string()
        } else {
            format!("{path}.{key}")
        }
    }

    pub(crate) fn uint(&mut self, t: Option<&Table>, path: &str, key: &str, default: u64, max: u64) -> u64 {
        match t.and_then(|t| t.get(key)) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 && (*i as u64) <= max => *i as u64,
            Some(Value::Integer(_)) => {
                self.error(Self::path(path, key), format!("must be between 0 and {max}"));
                default
            }
            Some(other) => {
                self.error(
                    Self::path(path, key),
                    format!("expected a non-negative integer, got {}", other.type_str()),
                );
                default
            }
        }
    }

    pub(crate) fn float(&mut self, t: Option<&Table>, path: &str, key: &str, default: f64) -> f64 {
        match t.and_then(|t| t.get(key)) {
            None => default,
            Some(Value::Float(f)) if (0.0..=1.0).contains(f) => *f,
            Some(Value::Integer(i)) if (0..=1).contains(i) => *i as f64,
            Some(_) => {
                self.error(Self::path(path, key), "expected a number between 0 and 1");
                default
            }
        }
    }

    pub(crate) fn boolean(&mut self, t: Option<&Table>, path: &str, key: &str, default: bool) -> bool {
        match t.and_then(|t| t.get(key)) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(other) => {
                self.error(
                    Self::path(path, key),
                    format!("expected true or false, got {}", other.type_str()),
                );
                default
            }
        }
    }

    pub(crate) fn string(&mut self, t: Option<&'a Table>, path: &str, key: &str) -> Option<&'a str> {
        match t.and_then(|t| t.get(key)) {
            None => None,
            Some(Value::String(s)) => Some(s.as_str()),
            Some(other) => {
                self.error(
                    Self::path(path, key),
                    format!("expected a string, got {}", other.type_str()),
                );
                None
            }
        }
    }

    pub(crate) fn parsed<T: std::str::FromStr<Err = String>>(
        &mut self,
        t: Option<&'a Table>,
        path: &str,
        key: &str,
        default: T,
    ) -> T {
        match self.string(t, path, key) {
            None => default,
            Some(s) => match s.parse() {
                Ok(v) => v,
                Err(e) => {
                    self.error(Self::path(path, key), e);
                    default
                }
            },
        }
    }

    pub(crate) fn root(&self) -> &'a Table {
        self.root
    }
}

const MAX_MS: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum AttackSpec {
    None,
    Scan { budget: u64, probe_ms: Millis },
    Playback { n_record: u64, n_replay: u64 },
    ForwardPrediction { n_observe: u64 },
    Relay { relay_delay_ms: Millis, victim_presses: bool },
    Jam(JamPlan),
    Clone { password: String },
}

impl AttackSpec {
    pub fn kind(&self) -> Option<AttackKind> {
        Some(match self {
            AttackSpec::None => return None,
            AttackSpec::Scan { .. } => AttackKind::Scan,
            AttackSpec::Playback { .. } => AttackKind::Playback,
            AttackSpec::ForwardPrediction { .. } => AttackKind::ForwardPrediction,
            AttackSpec::Relay { .. } => AttackKind::Relay,
            AttackSpec::Jam(_) => AttackKind::Jam,
            AttackSpec::Clone { .. } => AttackKind::Clone,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Target {
    Fob,
    Car,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ScriptedEvent {
    pub at: Millis,
    pub target: Target,
    #[serde(skip)]
    pub input: Input,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub testbed: TestbedConfig,
    pub owner_near_car: bool,
    pub repetitions: u64,
    pub duration_ms: Millis,
    pub attack: AttackSpec,
    pub events: Vec<ScriptedEvent>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ConfigError> {
        let root = Reader::parse(text)?;
        let mut r = Reader::new(&root);
        r.unknown_keys(
            &root,
            "",
            &[
                "name",
                "technique",
                "seed",
                "repetitions",
                "duration_ms",
                "owner_near_car",
                "protocol",
                "timing",
                "baselines",
                "attack",
                "events",
            ],
        );
        let top = Some(r.root());
        let name = r.string(top, "", "name").unwrap_or("unnamed").to_string();
        if name.is_empty() {
            r.error("name", "must not be empty");
        }
        let technique = r.parsed(top, "", "technique", Technique::Proposed);
        let seed = r.uint(top, "", "seed", 0, u64::MAX >> 1);
        let repetitions = r.uint(top, "", "repetitions", 1, 1_000_000);
        if repetitions == 0 {
            r.error("repetitions", "must be at least 1");
        }
        let duration_ms = r.uint(top, "", "duration_ms", 5_000, MAX_MS);
        let owner_near_car = r.boolean(top, "", "owner_near_car", true);

        let p = r.section(
            "protocol",
            &["width", "sums", "index_space", "entropy", "lockout", "jam_defense"],
        );
        let full = ProtocolParams::FULL;
        let width = r.uint(p, "protocol", "width", full.width as u64, 16);
        let sums = r.uint(p, "protocol", "sums", full.sums as u64, 5);
        let index_space = r.uint(p, "protocol", "index_space", full.index_space as u64, 2000);
        let params = match ProtocolParams::new(width as u32, sums as usize, index_space as u16) {
            Ok(p) => p,
            Err(e) => {
                r.error("protocol", e.to_string());
                full
            }
        };
        let entropy = r.parsed(p, "protocol", "entropy", EntropyKind::Strong);
        let lockout = r.boolean(p, "protocol", "lockout", true);
        let jam_defense = r.boolean(p, "protocol", "jam_defense", true);

        let d = Timing::default();
        let t = r.section(
            "timing",
            &[
                "challenge_ms",
                "response_ms",
                "auth_ok_ms",
                "command_ms",
                "start_ms",
                "jam_ms",
                "autolock_ms",
                "ping_ms",
                "honk_spacing_ms",
                "block_ms",
                "fail_window_ms",
            ],
        );
        let ms = |r: &mut Reader, key: &str, default: Millis| {
            let v = r.uint(t, "timing", key, default, MAX_MS);
            if v == 0 {
                r.error(format!("timing.{key}"), "must be positive");
            }
            v
        };
        let timing = Timing {
            challenge_ms: ms(&mut r, "challenge_ms", d.challenge_ms),
            response_ms: ms(&mut r, "response_ms", d.response_ms),
            auth_ok_ms: ms(&mut r, "auth_ok_ms", d.auth_ok_ms),
            command_ms: ms(&mut r, "command_ms", d.command_ms),
            start_ms: ms(&mut r, "start_ms", d.start_ms),
            jam_ms: ms(&mut r, "jam_ms", d.jam_ms),
            autolock_ms: ms(&mut r, "autolock_ms", d.autolock_ms),
            ping_ms: ms(&mut r, "ping_ms", d.ping_ms),
            honk_spacing_ms: ms(&mut r, "honk_spacing_ms", d.honk_spacing_ms),
            block_ms: ms(&mut r, "block_ms", d.block_ms),
            fail_window_ms: ms(&mut r, "fail_window_ms", d.fail_window_ms),
        };

        let b = r.section(
            "baselines",
            &["fixed_bits", "rolling_bits", "rolling_window", "cr_bits"],
        );
        let defaults = TestbedConfig::default();
        let fixed_bits = r.uint(b, "baselines", "fixed_bits", defaults.fixed_bits as u64, 32);
        let rolling_bits = r.uint(b, "baselines", "rolling_bits", defaults.rolling_bits as u64, 32);
        let rolling_window = r.uint(b, "baselines", "rolling_window", defaults.rolling_window as u64, 1 << 20);
        let cr_bits = r.uint(b, "baselines", "cr_bits", defaults.cr_bits as u64, 32);
        if fixed_bits == 0 {
            r.error("baselines.fixed_bits", "must be between 1 and 32");
        }
        for (key, v) in [("rolling_bits", rolling_bits), ("cr_bits", cr_bits)] {
            if v < 2 || v % 2 != 0 {
                r.error(format!("baselines.{key}"), "must be even and between 2 and 32");
            }
        }
        if rolling_window == 0 {
            r.error("baselines.rolling_window", "must be at least 1");
        }

        let attack = Self::read_attack(&mut r);
        let events = Self::read_events(&mut r);
        if !events.is_empty() && attack != AttackSpec::None {
            r.error("events", "scripted events are only allowed when attack.kind = \"none\"");
        }
        r.finish()?;

        Ok(Scenario {
            name,
            testbed: TestbedConfig {
                technique,
                params,
                timing,
                lockout,
                jam_defense,
                entropy,
                fixed_bits: fixed_bits as u32,
                rolling_bits: rolling_bits as u32,
                rolling_window: rolling_window as u32,
                cr_bits: cr_bits as u32,
                driver_on_board: false,
                seed,
            },
            owner_near_car,
            repetitions,
            duration_ms,
            attack,
            events,
        })
    }

    fn read_attack(r: &mut Reader) -> AttackSpec {
        let a = r.section(
            "attack",
            &[
                "kind",
                "budget",
                "probe_ms",
                "n_record",
                "n_replay",
                "n_observe",
                "relay_delay_ms",
                "victim_presses",
                "jam_start_after",
                "jam_end_after",
                "lock_press_after",
                "observe_for",
                "password",
            ],
        );
        let kind = r.string(a, "attack", "kind").unwrap_or("none");
        let jp = JamPlan::default();
        match kind {
            "none" => AttackSpec::None,
            "scan" => AttackSpec::Scan {
                budget: r.uint(a, "attack", "budget", 1_000, 100_000_000),
                probe_ms: r.uint(a, "attack", "probe_ms", 1_000, MAX_MS).max(1),
            },
            "playback" => AttackSpec::Playback {
                n_record: r.uint(a, "attack", "n_record", 10, 1_000_000),
                n_replay: r.uint(a, "attack", "n_replay", 100, 100_000_000),
            },
            "forward_prediction" => {
                let n = r.uint(a, "attack", "n_observe", 3, 10_000);
                if n == 0 {
                    r.error("attack.n_observe", "must be at least 1");
                }
                AttackSpec::ForwardPrediction { n_observe: n }
            }
            "relay" => AttackSpec::Relay {
                relay_delay_ms: r.uint(a, "attack", "relay_delay_ms", DEFAULT_RELAY_DELAY_MS, MAX_MS),
                victim_presses: r.boolean(a, "attack", "victim_presses", false),
            },
            "jam" => {
                let plan = JamPlan {
                    jam_start_after: r.uint(a, "attack", "jam_start_after", jp.jam_start_after, MAX_MS),
                    jam_end_after: r.uint(a, "attack", "jam_end_after", jp.jam_end_after, MAX_MS),
                    lock_press_after: r.uint(a, "attack", "lock_press_after", jp.lock_press_after, MAX_MS),
                    observe_for: r.uint(a, "attack", "observe_for", jp.observe_for, MAX_MS),
                    ..jp
                };
                if plan.jam_end_after < plan.jam_start_after {
                    r.error("attack.jam_end_after", "must not be before jam_start_after");
                }
                AttackSpec::Jam(plan)
            }
            "clone" => AttackSpec::Clone {
                password: r.string(a, "attack", "password").unwrap_or("workshop").to_string(),
            },
            other => {
                r.error(
                    "attack.kind",
                    format!("unknown attack `{other}` (expected none|scan|playback|forward_prediction|relay|jam|clone)"),
                );
                AttackSpec::None
            }
        }
    }

    fn read_events(r: &mut Reader) -> Vec<ScriptedEvent> {
        let Some(v) = r.root().get("events") else {
            return Vec::new();
        };
        let Value::Array(items) = v else {
            r.error("events", "expected an array of tables ([[events]])");
            return Vec::new();
        };
        let mut out = Vec::new();
        for (i, item) in items.iter().enumerate() {
            let path = format!("events[{i}]");
            let Value::Table(t) = item else {
                r.error(path, "expected a table");
                continue;
            };
            r.unknown_keys(t, &path, &["at", "target", "action", "button", "event"]);
            let t = Some(t);
            let at = r.uint(t, &path, "at", 0, MAX_MS);
            let target = match r.string(t, &path, "target") {
                Some("fob") => Some(Target::Fob),
                Some("car") => Some(Target::Car),
                Some(other) => {
                    r.error(format!("{path}.target"), format!("unknown target `{other}` (expected fob|car)"));
                    None
                }
                None => {
                    r.error(format!("{path}.target"), "missing");
                    None
                }
            };
            let input = match r.string(t, &path, "action") {
                Some("button") => match r.string(t, &path, "button") {
                    Some(b) => match b.parse::<Button>() {
                        Ok(b) => Some(Input::Button(b)),
                        Err(e) => {
                            r.error(format!("{path}.button"), e);
                            None
                        }
                    },
                    None => {
                        r.error(format!("{path}.button"), "missing");
                        None
                    }
                },
                Some("vehicle") => match r.string(t, &path, "event") {
                    Some(e) => match e.parse::<VehicleEvent>() {
                        Ok(e) => Some(Input::Vehicle(e)),
                        Err(e) => {
                            r.error(format!("{path}.event"), e);
                            None
                        }
                    },
                    None => {
                        r.error(format!("{path}.event"), "missing");
                        None
                    }
                },
                Some("start") => Some(Input::StartButton),
                Some("handle_pull") => Some(Input::HandlePull),
                Some(other) => {
                    r.error(
                        format!("{path}.action"),
                        format!("unknown action `{other}` (expected button|vehicle|start|handle_pull)"),
                    );
                    None
                }
                None => {
                    r.error(format!("{path}.action"), "missing");
                    None
                }
            };
            match (&target, &input) {
                (Some(Target::Fob), Some(Input::Button(_)))
                | (Some(Target::Car), Some(Input::Vehicle(_) | Input::StartButton | Input::HandlePull)) => {}
                (Some(_), Some(_)) => r.error(
                    format!("{path}.action"),
                    "buttons go to the fob; vehicle, start and handle_pull go to the car",
                ),
                _ => {}
            }
            if let (Some(target), Some(input)) = (target, input) {
                out.push(ScriptedEvent { at, target, input });
            }
        }
        out
    }

    /// Seed used for repetition `rep`. Repetition 0 uses the scenario seed.
    pub fn repetition_seed(&self, rep: u64) -> u64 {
        if rep == 0 {
            self.testbed.seed
        } else {
            derive_seed(self.testbed.seed, 1_000 + rep)
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub technique: Technique,
    pub seed: u64,
    pub repetitions: u64,
    pub attack: Option<AttackKind>,
    pub successes: u64,
    pub attempts: u64,
    pub success_rate: f64,
    pub first_run: serde_json::Value,
    pub violations: usize,
}

pub struct RunResult {
    pub report: RunReport,
    /// Trace of the first repetition, if traces were requested.
    pub trace: Option<String>,
}

fn outcome_json(o: &AttackOutcome) -> serde_json::Value {
    json!({
        "succeeded": o.succeeded,
        "attempts": o.attempts,
        "successes": o.successes,
        "elapsed_ms": o.elapsed,
        "blocks": o.blocks,
        "evidence": o.evidence.iter().take(100).collect::<Vec<_>>(),
        "detail": o.detail,
    })
}

fn actuator_log(tb: &Testbed) -> serde_json::Value {
    json!(tb
        .sim
        .actuations()
        .iter()
        .map(|a| json!({
            "at": a.at,
            "endpoint": tb.sim.endpoint_name(a.endpoint),
            "actuator": a.kind,
        }))
        .collect::<Vec<_>>())
}

impl Scenario {
    /// Runs every repetition. Deterministic in the scenario contents.
    pub fn run(&self, want_trace: bool) -> RunResult {
        let mut trace = None;
        let mut successes = 0;
        let mut attempts = 0;
        let mut violations = 0;
        let mut first_run = serde_json::Value::Null;
        for rep in 0..self.repetitions {
            let mut config = self.testbed;
            config.seed = self.repetition_seed(rep);
            let text = want_trace && rep == 0;
            let (summary, tb) = self.run_once(config, text);
            successes += summary["successes"].as_u64().unwrap_or(0);
            attempts += summary["attempts"].as_u64().unwrap_or(0);
            violations += summary["violations"].as_array().map_or(0, |v| v.len());
            if rep == 0 {
                first_run = summary;
                trace = tb.and_then(|tb| tb.into_trace_text());
            }
        }
        RunResult {
            report: RunReport {
                scenario: self.name.clone(),
                technique: self.testbed.technique,
                seed: self.testbed.seed,
                repetitions: self.repetitions,
                attack: self.attack.kind(),
                successes,
                attempts,
                success_rate: if attempts == 0 {
                    0.0
                } else {
                    successes as f64 / attempts as f64
                },
                first_run,
                violations,
            },
            trace,
        }
    }

    fn run_once(&self, config: TestbedConfig, text: bool) -> (serde_json::Value, Option<Testbed>) {
        let with_outcome = |o: AttackOutcome, tb: Testbed, extra: serde_json::Value| {
            let mut v = outcome_json(&o);
            v["violations"] = json!(o.violations);
            v["actuators"] = actuator_log(&tb);
            v["extra"] = extra;
            (v, Some(tb))
        };
        match &self.attack {
            AttackSpec::None => {
                let mut tb = Testbed::new(config, self.owner_near_car, text);
                for e in &self.events {
                    let ep = match e.target {
                        Target::Fob => tb.fob,
                        Target::Car => tb.car,
                    };
                    tb.sim.schedule(e.at, ep, e.input.clone());
                }
                tb.sim.run_until(self.duration_ms);
                let audit = tb.auditor();
                let v = json!({
                    "attempts": 0,
                    "successes": 0,
                    "violations": audit.violations(),
                    "attributions": audit.attributions(),
                    "actuators": actuator_log(&tb),
                    "blocks": audit.blocks(),
                });
                (v, Some(tb))
            }
            AttackSpec::Scan { budget, probe_ms } => {
                let plan = ScanPlan {
                    budget: *budget,
                    probe_ms: *probe_ms,
                    max_elapsed: None,
                };
                let (o, tb) = scan_attack(config, plan, text);
                with_outcome(o, tb, serde_json::Value::Null)
            }
            AttackSpec::Playback { n_record, n_replay } => {
                let (o, tb, rec) = playback_attack(config, *n_record as usize, *n_replay, text);
                let extra = json!({ "recorded_pairs": rec.pairs.len() + rec.cr_pairs.len(), "recorded_codes": rec.codes.len() });
                with_outcome(o, tb, extra)
            }
            AttackSpec::ForwardPrediction { n_observe } => {
                let (o, tb) = forward_prediction_attack(config, *n_observe as usize, text);
                with_outcome(o, tb, serde_json::Value::Null)
            }
            AttackSpec::Relay {
                relay_delay_ms,
                victim_presses,
            } => {
                let (o, tb) = relay_attack(config, *relay_delay_ms, *victim_presses, text);
                with_outcome(o, tb, serde_json::Value::Null)
            }
            AttackSpec::Jam(plan) => {
                let (o, report, tb) = jam_attack(config, *plan, text);
                with_outcome(o, tb, json!(report))
            }
            AttackSpec::Clone { password } => {
                let r = obd_clone_demo(config, password);
                let v = json!({
                    "attempts": 1,
                    "successes": u64::from(r.clone_unlocked_after),
                    "succeeded": r.clone_unlocked_after,
                    "violations": [],
                    "extra": r,
                });
                (v, None)
            }
        }
    }
}
