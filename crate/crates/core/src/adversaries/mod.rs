//! Attacker models. Adversaries only touch the radio: they listen through
//! their own endpoints and taps and transmit frames. Whether an attack
//! worked is decided by the trace auditor, never by the attack code.

mod clone;
mod forward;
mod jam;
mod playback;
pub mod predictor;
mod relay;
mod scan;

pub use clone::{obd_clone_demo, CloneReport};
pub use forward::forward_prediction_attack;
pub use jam::{jam_attack, JamPlan, JamReport};
pub use playback::{playback_attack, Recording};
pub use predictor::PredictorFailed;
pub use relay::{relay_attack, DEFAULT_RELAY_DELAY_MS};
pub use scan::{scan_attack, ScanPlan};

use serde::Serialize;

use crate::audit::{Attribution, Violation};
use crate::baselines::Technique;
use crate::channel::{ChannelId, EndpointId, Radio};
use crate::devices::{ActuatorKind, Millis};
use crate::testbed::Testbed;
use crate::wire::{Frame, Message};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Scan,
    Playback,
    ForwardPrediction,
    Relay,
    Jam,
    Clone,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Scan => "scan",
            AttackKind::Playback => "playback",
            AttackKind::ForwardPrediction => "forward_prediction",
            AttackKind::Relay => "relay",
            AttackKind::Jam => "jam",
            AttackKind::Clone => "clone",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [
            AttackKind::Scan,
            AttackKind::Playback,
            AttackKind::ForwardPrediction,
            AttackKind::Relay,
            AttackKind::Jam,
            AttackKind::Clone,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| {
            format!("unknown attack `{s}` (expected scan|playback|forward_prediction|relay|jam|clone)")
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackOutcome {
    pub attack: AttackKind,
    pub technique: Technique,
    pub succeeded: bool,
    pub attempts: u64,
    /// Actuator events the auditor attributed to adversary frames.
    pub successes: u64,
    pub elapsed: Millis,
    pub evidence: Vec<Attribution>,
    pub violations: Vec<Violation>,
    pub blocks: usize,
    pub detail: serde_json::Value,
}

impl AttackOutcome {
    pub fn rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.successes as f64 / self.attempts as f64
        }
    }

    /// Reads the verdict off the testbed's auditor.
    pub(crate) fn from_testbed(tb: &Testbed, attack: AttackKind, attempts: u64) -> Self {
        let audit = tb.auditor();
        let evidence: Vec<Attribution> = audit
            .adversarial()
            .filter(|a| {
                matches!(
                    a.actuator,
                    ActuatorKind::UnlockDoors | ActuatorKind::OpenBoot | ActuatorKind::StartEngine
                )
            })
            .cloned()
            .collect();
        AttackOutcome {
            attack,
            technique: tb.config.technique,
            succeeded: !evidence.is_empty(),
            attempts,
            successes: evidence.len() as u64,
            elapsed: tb.elapsed(),
            evidence,
            violations: audit.violations().to_vec(),
            blocks: audit.blocks().len(),
            detail: serde_json::Value::Null,
        }
    }
}

/// Adds an adversary radio. Its endpoint name carries the adversary prefix.
pub(crate) fn add_radio(tb: &mut Testbed, name: &str, near_car: bool) -> EndpointId {
    let channel: ChannelId = if near_car { tb.near_car } else { tb.near_owner };
    tb.sim.add_node(&format!("adv.{name}"), channel, Radio::new())
}

pub(crate) fn send(tb: &mut Testbed, radio: EndpointId, msg: Message) {
    let frame = msg.to_frame().expect("adversary frames are schema-valid");
    tb.sim.transmit_now(radio, frame);
}

pub(crate) fn hear(tb: &mut Testbed, radio: EndpointId) -> Vec<Message> {
    tb.sim
        .with_node::<Radio, _>(radio, |r| r.drain())
        .into_iter()
        .map(|(_, f): (Millis, Frame)| Message::from(&f))
        .collect()
}

/// Transmits, waits `wait` ms and returns what the radio heard meanwhile.
pub(crate) fn exchange(tb: &mut Testbed, radio: EndpointId, msg: Message, wait: Millis) -> Vec<Message> {
    hear(tb, radio);
    send(tb, radio, msg);
    tb.sim.run_for(wait);
    hear(tb, radio)
}

/// Eavesdrops one legitimate session and returns the frames sent over the air.
pub(crate) fn eavesdrop_session(tb: &mut Testbed) -> Vec<Message> {
    let tap = tb
        .sim
        .add_tap(tb.near_car, crate::channel::Recorder::new(false));
    tb.owner_session(crate::wire::Button::Unlock);
    let rec = tb.sim.tap_mut::<crate::channel::Recorder>(tap);
    rec.active = false;
    std::mem::take(&mut rec.frames)
        .iter()
        .map(|(_, _, f)| Message::from(f))
        .collect()
}
