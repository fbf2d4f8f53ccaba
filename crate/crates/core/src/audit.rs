//! Offline trace auditor.
//!
//! Works from the record stream alone, never from device internals. For
//! every actuator event it finds the frame (or timer) that caused it and
//! checks the safety, lockout and jam-defense rules. Works the same when fed
//! live from the simulator (as a [`TraceSink`]) or from a parsed trace file.

use std::any::Any;
use std::collections::{HashMap, VecDeque};
use std::rc::Rc;

use serde::Serialize;

use crate::devices::{ActuatorKind, Millis, Timing, FAILURES_BEFORE_BLOCK, HONK_COUNT};
use crate::trace::{is_adversary, ParsedTrace, RecordKind, TraceRecord, TraceSink};
use crate::wire::{Button, Message, MessageType};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AuditConfig {
    pub lockout: bool,
    pub block_ms: Millis,
    pub fail_window_ms: Millis,
    pub jam_ms: Millis,
    pub autolock_ms: Millis,
    pub honk_spacing_ms: Millis,
}

impl AuditConfig {
    pub fn new(timing: &Timing, lockout: bool) -> Self {
        AuditConfig {
            lockout,
            block_ms: timing.block_ms,
            fail_window_ms: timing.fail_window_ms,
            jam_ms: timing.jam_ms,
            autolock_ms: timing.autolock_ms,
            honk_spacing_ms: timing.honk_spacing_ms,
        }
    }

    /// Header parameters for a trace produced under this configuration.
    pub fn header(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lockout", u8::from(self.lockout).to_string()),
            ("block_ms", self.block_ms.to_string()),
            ("fail_window_ms", self.fail_window_ms.to_string()),
            ("jam_ms", self.jam_ms.to_string()),
            ("autolock_ms", self.autolock_ms.to_string()),
            ("honk_spacing_ms", self.honk_spacing_ms.to_string()),
        ]
    }

    /// Reads `# param` lines, falling back to defaults for missing keys.
    pub fn from_trace(trace: &ParsedTrace) -> Result<Self, String> {
        let mut c = AuditConfig::default();
        for (k, v) in &trace.params {
            let num = || v.parse::<Millis>().map_err(|_| format!("param {k}: bad value `{v}`"));
            match k.as_str() {
                "lockout" => c.lockout = num()? != 0,
                "block_ms" => c.block_ms = num()?,
                "fail_window_ms" => c.fail_window_ms = num()?,
                "jam_ms" => c.jam_ms = num()?,
                "autolock_ms" => c.autolock_ms = num()?,
                "honk_spacing_ms" => c.honk_spacing_ms = num()?,
                _ => {}
            }
        }
        Ok(c)
    }
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig::new(&Timing::default(), true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Safety,
    Lockout,
    JamDefense,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub line: usize,
    pub at: Millis,
    pub endpoint: String,
    pub rule: Rule,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "line {}: t={} {} [{:?}] {}",
            self.line, self.at, self.endpoint, self.rule, self.detail
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cause {
    Frame { sender: String, message: String },
    AutoLock,
    JamWatchdog,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Attribution {
    pub line: usize,
    pub at: Millis,
    pub endpoint: String,
    pub actuator: ActuatorKind,
    pub cause: Cause,
}

impl Attribution {
    pub fn adversarial(&self) -> bool {
        matches!(&self.cause, Cause::Frame { sender, .. } if is_adversary(sender))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockSpan {
    pub endpoint: String,
    pub from: Millis,
    pub to: Option<Millis>,
}

#[derive(Default)]
struct View {
    main: Option<Rc<str>>,
    jam: Option<Rc<str>>,

    challenged: bool,
    responded: bool,
    auth_ok: bool,
    command: Option<(Button, Rc<str>)>,
    start_init: bool,
    start_auth_sent: bool,
    start_confirm: Option<Rc<str>>,
    verdict_pending: Option<Millis>,

    cr_challenged: bool,
    credential: Option<(Millis, MessageType, Rc<str>)>,

    failures: VecDeque<Millis>,
    expect_block: bool,
    blocked_since: Option<Millis>,

    armed_at: Option<Millis>,
    honks: Vec<Millis>,
    disarmed_by_frame: bool,
    autolocks: u32,

    door_locked: Option<bool>,
}

impl View {
    fn main_is(&self, name: &str) -> bool {
        self.main.as_deref() == Some(name)
    }

    fn jam_is(&self, name: &str) -> bool {
        self.jam.as_deref() == Some(name)
    }

    fn reset_session(&mut self) {
        self.challenged = false;
        self.responded = false;
        self.auth_ok = false;
        self.command = None;
        self.start_init = false;
        self.start_auth_sent = false;
        self.start_confirm = None;
        self.cr_challenged = false;
        self.credential = None;
    }
}

fn button_actuator(b: Button) -> ActuatorKind {
    match b {
        Button::Lock => ActuatorKind::LockDoors,
        Button::Unlock => ActuatorKind::UnlockDoors,
        Button::Boot => ActuatorKind::OpenBoot,
    }
}

#[derive(Default)]
pub struct Auditor {
    config: AuditConfig,
    views: HashMap<Rc<str>, View>,
    violations: Vec<Violation>,
    attributions: Vec<Attribution>,
    blocks: Vec<BlockSpan>,
    honks: Vec<(String, Millis)>,
    records: usize,
    line_offset: usize,
}

impl Auditor {
    pub fn new(config: AuditConfig) -> Self {
        Auditor {
            config,
            ..Auditor::default()
        }
    }

    /// Line numbers reported for live records start after `lines` header lines.
    pub fn with_line_offset(mut self, lines: usize) -> Self {
        self.line_offset = lines;
        self
    }

    pub fn audit(trace: &ParsedTrace, config: AuditConfig) -> Self {
        let mut a = Auditor::new(config);
        for (line, rec) in &trace.records {
            a.observe(*line, rec);
        }
        a
    }

    pub fn config(&self) -> &AuditConfig {
        &self.config
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn attributions(&self) -> &[Attribution] {
        &self.attributions
    }

    pub fn adversarial(&self) -> impl Iterator<Item = &Attribution> {
        self.attributions.iter().filter(|a| a.adversarial())
    }

    pub fn blocks(&self) -> &[BlockSpan] {
        &self.blocks
    }

    pub fn honks(&self) -> &[(String, Millis)] {
        &self.honks
    }

    pub fn records(&self) -> usize {
        self.records
    }

    /// Door state as last actuated, `None` if never actuated.
    pub fn door_locked(&self, endpoint: &str) -> Option<bool> {
        self.views.get(endpoint).and_then(|v| v.door_locked)
    }

    fn violate(&mut self, line: usize, at: Millis, endpoint: &str, rule: Rule, detail: String) {
        self.violations.push(Violation {
            line,
            at,
            endpoint: endpoint.to_string(),
            rule,
            detail,
        });
    }

    pub fn observe(&mut self, line: usize, rec: &TraceRecord) {
        self.records += 1;
        let at = rec.at;
        let mut found: Vec<(Rule, String)> = Vec::new();
        let endpoint: Rc<str> = match &rec.kind {
            RecordKind::Tx { endpoint, .. }
            | RecordKind::Rx { endpoint, .. }
            | RecordKind::Act { endpoint, .. }
            | RecordKind::State { endpoint, .. } => endpoint.clone(),
        };
        // Adversary radios follow no protocol; only honest devices are held
        // to the rules. What they cause is attributed on the receiving side.
        if is_adversary(&endpoint) {
            return;
        }
        let config = self.config;
        let view = self.views.entry(endpoint.clone()).or_default();

        match &rec.kind {
            RecordKind::Tx { frame, .. } => {
                let ty = frame.msg_type();
                if view.blocked_since.is_some() {
                    found.push((Rule::Lockout, format!("{} transmitted while blocked", ty.label())));
                }
                match ty {
                    MessageType::Challenge => {
                        view.challenged = true;
                        view.responded = false;
                        view.auth_ok = false;
                    }
                    MessageType::AuthOk => {
                        if !(view.challenged && view.responded) {
                            found.push((
                                Rule::Safety,
                                "AUTH_OK without own CHALLENGE and AUTH_RESPONSE".into(),
                            ));
                        }
                        view.auth_ok = true;
                        view.verdict_pending = None;
                    }
                    MessageType::IdRequest => {
                        view.start_init = false;
                        view.start_auth_sent = false;
                        view.start_confirm = None;
                    }
                    MessageType::StartAuth => {
                        if !view.start_init {
                            found.push((Rule::Safety, "START_AUTH without START_INIT".into()));
                        }
                        view.start_auth_sent = true;
                    }
                    MessageType::CrChallenge => view.cr_challenged = true,
                    _ => {}
                }
            }
            RecordKind::Rx { from, frame, .. } => match Message::from(frame.as_ref()) {
                Message::AuthResponse(_) if view.challenged && view.main_is("WAIT_AUTH") => {
                    view.responded = true;
                    view.verdict_pending = Some(at);
                }
                Message::Command(b) if view.auth_ok && view.main_is("WAIT_COMMAND") => {
                    view.command = Some((b, from.clone()));
                }
                Message::StartInit { .. } if view.main_is("START_WAIT_INIT") => {
                    view.start_init = true;
                }
                Message::StartConfirm(_)
                    if view.start_auth_sent && view.main_is("START_WAIT_CONFIRM") =>
                {
                    view.start_confirm = Some(from.clone());
                    view.verdict_pending = Some(at);
                }
                Message::PingReply(_) if view.armed_at.is_some() => {
                    view.disarmed_by_frame = true;
                }
                Message::FixedCode(_) | Message::RollingCode(_) => {
                    view.credential = Some((at, frame.msg_type(), from.clone()));
                }
                Message::CrResponse(_) if view.cr_challenged => {
                    view.credential = Some((at, frame.msg_type(), from.clone()));
                }
                _ => {}
            },
            RecordKind::Act { actuator, .. } => {
                let kind = *actuator;
                if view.blocked_since.is_some() {
                    found.push((Rule::Lockout, format!("{} while blocked", kind.name())));
                }
                let mut cause = None;
                match kind {
                    ActuatorKind::Honk => {
                        let watching = view.jam_is("jam/WAIT_LOCK_OR_REPLY")
                            || view.jam_is("jam/HONKING");
                        if !watching {
                            found.push((Rule::JamDefense, "HONK outside the jam watchdog".into()));
                        } else if view.disarmed_by_frame {
                            found.push((Rule::JamDefense, "HONK after the defense was answered".into()));
                        }
                        if let Some(armed) = view.armed_at {
                            let expected = match view.honks.first() {
                                None => armed + config.jam_ms,
                                Some(&first) => {
                                    first + view.honks.len() as Millis * config.honk_spacing_ms
                                }
                            };
                            if at != expected {
                                found.push((
                                    Rule::JamDefense,
                                    format!("HONK at {at}, expected {expected}"),
                                ));
                            }
                        }
                        view.honks.push(at);
                        if view.honks.len() > HONK_COUNT as usize {
                            found.push((Rule::JamDefense, "more than five honks".into()));
                        }
                        self.honks.push((endpoint.to_string(), at));
                        cause = Some(Cause::JamWatchdog);
                    }
                    ActuatorKind::StartEngine => match view.start_confirm.take() {
                        Some(sender) if view.start_auth_sent => {
                            view.verdict_pending = None;
                            if view.armed_at.is_some() {
                                view.disarmed_by_frame = true;
                            }
                            cause = Some(Cause::Frame {
                                sender: sender.to_string(),
                                message: "START_CONFIRM".into(),
                            });
                        }
                        _ => found.push((
                            Rule::Safety,
                            "START_ENGINE without mutual authentication".into(),
                        )),
                    },
                    _ => {
                        if let Some((b, sender)) = view.command.take() {
                            if button_actuator(b) == kind {
                                if kind == ActuatorKind::LockDoors && view.armed_at.is_some() {
                                    view.disarmed_by_frame = true;
                                }
                                cause = Some(Cause::Frame {
                                    sender: sender.to_string(),
                                    message: "COMMAND".into(),
                                });
                            }
                        }
                        if cause.is_none()
                            && kind == ActuatorKind::LockDoors
                            && view.jam_is("jam/AUTOLOCK_COUNTDOWN")
                        {
                            view.autolocks += 1;
                            if view.honks.len() != HONK_COUNT as usize {
                                found.push((
                                    Rule::JamDefense,
                                    format!("auto-lock after {} honks", view.honks.len()),
                                ));
                            }
                            if let Some(&first) = view.honks.first() {
                                if at != first + config.autolock_ms {
                                    found.push((
                                        Rule::JamDefense,
                                        format!(
                                            "auto-lock at {at}, expected {}",
                                            first + config.autolock_ms
                                        ),
                                    ));
                                }
                            }
                            cause = Some(Cause::AutoLock);
                        }
                        if cause.is_none() {
                            if let Some((t, ty, sender)) = view.credential.take() {
                                if t == at {
                                    cause = Some(Cause::Frame {
                                        sender: sender.to_string(),
                                        message: ty.label().into(),
                                    });
                                }
                            }
                        }
                        if cause.is_none() {
                            found.push((
                                Rule::Safety,
                                format!("{} without verified authentication", kind.name()),
                            ));
                        }
                        match kind {
                            ActuatorKind::LockDoors => view.door_locked = Some(true),
                            ActuatorKind::UnlockDoors => view.door_locked = Some(false),
                            _ => {}
                        }
                    }
                }
                if let Some(cause) = cause {
                    self.attributions.push(Attribution {
                        line,
                        at,
                        endpoint: endpoint.to_string(),
                        actuator: kind,
                        cause,
                    });
                }
            }
            RecordKind::State { state, .. } => {
                if state.starts_with("jam/") {
                    match &**state {
                        "jam/WAIT_LOCK_OR_REPLY" => {
                            view.armed_at = Some(at);
                            view.honks.clear();
                            view.disarmed_by_frame = false;
                            view.autolocks = 0;
                        }
                        "jam/AUTOLOCK_COUNTDOWN" if view.honks.len() != HONK_COUNT as usize => {
                            found.push((
                                Rule::JamDefense,
                                format!("auto-lock countdown after {} honks", view.honks.len()),
                            ));
                        }
                        "jam/INACTIVE" | "jam/WATCH_DOOR" => {
                            if view.armed_at.take().is_some()
                                && !view.disarmed_by_frame
                                && view.autolocks != 1
                            {
                                found.push((
                                    Rule::JamDefense,
                                    "defense ended without reply, lock or auto-lock".into(),
                                ));
                            }
                        }
                        _ => {}
                    }
                    view.jam = Some(state.clone());
                } else {
                    let name = &**state;
                    if matches!(name, "IDLE" | "BLOCKED") {
                        if let Some(t) = view.verdict_pending.take() {
                            let window = config.fail_window_ms;
                            while matches!(view.failures.front(), Some(&f) if t.saturating_sub(f) > window)
                            {
                                view.failures.pop_front();
                            }
                            view.failures.push_back(t);
                            if config.lockout && view.failures.len() >= FAILURES_BEFORE_BLOCK {
                                view.failures.clear();
                                view.expect_block = true;
                            }
                        }
                        if name == "BLOCKED" {
                            if !std::mem::take(&mut view.expect_block) {
                                found.push((
                                    Rule::Lockout,
                                    "blocked without three wrong authentications".into(),
                                ));
                            }
                            view.blocked_since = Some(at);
                            self.blocks.push(BlockSpan {
                                endpoint: endpoint.to_string(),
                                from: at,
                                to: None,
                            });
                        } else {
                            if std::mem::take(&mut view.expect_block) {
                                found.push((
                                    Rule::Lockout,
                                    "three wrong authentications without a block".into(),
                                ));
                            }
                            if let Some(since) = view.blocked_since.take() {
                                if at - since != config.block_ms {
                                    found.push((
                                        Rule::Lockout,
                                        format!(
                                            "block lasted {} ms, expected {}",
                                            at - since,
                                            config.block_ms
                                        ),
                                    ));
                                }
                                if let Some(b) = self
                                    .blocks
                                    .iter_mut()
                                    .rev()
                                    .find(|b| *b.endpoint == *endpoint && b.to.is_none())
                                {
                                    b.to = Some(at);
                                }
                            }
                        }
                        view.reset_session();
                    }
                    view.main = Some(state.clone());
                }
            }
        }
        for (rule, detail) in found {
            self.violate(line, at, &endpoint, rule, detail);
        }
    }
}

impl TraceSink for Auditor {
    fn record(&mut self, rec: &TraceRecord) {
        let line = self.line_offset + self.records + 1;
        self.observe(line, rec);
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub records: usize,
    pub clean: bool,
    pub violations: Vec<Violation>,
    pub attributions: Vec<Attribution>,
    pub blocks: Vec<BlockSpan>,
    pub honks: Vec<(String, Millis)>,
}

impl From<&Auditor> for AuditReport {
    fn from(a: &Auditor) -> Self {
        AuditReport {
            records: a.records,
            clean: a.is_clean(),
            violations: a.violations.clone(),
            attributions: a.attributions.clone(),
            blocks: a.blocks.clone(),
            honks: a.honks.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_trace;

    fn audit(text: &str) -> Auditor {
        let t = parse_trace(text).unwrap();
        Auditor::audit(&t, AuditConfig::from_trace(&t).unwrap())
    }

    #[test]
    fn unlock_without_auth_is_flagged() {
        let a = audit("0 STATE car IDLE\n5 ACT car UNLOCK_DOORS\n");
        assert_eq!(a.violations().len(), 1);
        assert_eq!(a.violations()[0].line, 2);
        assert_eq!(a.violations()[0].rule, Rule::Safety);
    }

    #[test]
    fn honk_outside_watchdog_is_flagged() {
        let a = audit("0 STATE car jam/INACTIVE\n5 ACT car HONK\n");
        assert_eq!(a.violations()[0].rule, Rule::JamDefense);
    }

    #[test]
    fn unexpected_block_is_flagged() {
        let a = audit("0 STATE car IDLE\n5 STATE car BLOCKED\n");
        assert_eq!(a.violations()[0].rule, Rule::Lockout);
    }
}
