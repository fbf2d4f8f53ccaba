//! Reference implementations of the three conventional techniques: fixed
//! code, rolling code and passive challenge-response. They share the frame
//! envelope and run as simulator nodes next to the table-based protocol.

use std::any::Any;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{any_methods, Input, Node};
use crate::devices::{ActuatorKind, DeviceOutput, Millis};
use crate::keystore::EntropySource;
use crate::wire::{Frame, Message};

const FEISTEL_ROUNDS: usize = 4;

/// Keyed permutation over `width` bits (even, 2..=32): a balanced Feistel
/// network with four rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Feistel {
    subkeys: [u32; FEISTEL_ROUNDS],
    half_bits: u32,
}

impl Feistel {
    pub fn new(key: u64, width: u32) -> Self {
        assert!(
            width >= 2 && width <= 32 && width % 2 == 0,
            "feistel width must be even and in 2..=32"
        );
        let mut subkeys = [0u32; FEISTEL_ROUNDS];
        for (i, k) in subkeys.iter_mut().enumerate() {
            *k = (key >> (16 * i)) as u32 & 0xFFFF;
        }
        Feistel {
            subkeys,
            half_bits: width / 2,
        }
    }

    pub fn width(&self) -> u32 {
        self.half_bits * 2
    }

    fn half_mask(&self) -> u32 {
        ((1u64 << self.half_bits) - 1) as u32
    }

    fn round(&self, x: u32, round: usize) -> u32 {
        let mut v = (x ^ self.subkeys[round]).wrapping_add(0x9E37_79B9u32.wrapping_mul(round as u32 + 1));
        v = v.wrapping_mul(0x85EB_CA6B);
        v ^= v >> 13;
        v = v.wrapping_mul(0xC2B2_AE35);
        v ^= v >> 16;
        v & self.half_mask()
    }

    pub fn encrypt(&self, value: u32) -> u32 {
        let m = self.half_mask();
        let (mut l, mut r) = ((value >> self.half_bits) & m, value & m);
        for i in 0..FEISTEL_ROUNDS {
            (l, r) = (r, l ^ self.round(r, i));
        }
        (l << self.half_bits) | r
    }

    pub fn decrypt(&self, value: u32) -> u32 {
        let m = self.half_mask();
        let (mut l, mut r) = ((value >> self.half_bits) & m, value & m);
        for i in (0..FEISTEL_ROUNDS).rev() {
            (l, r) = (r ^ self.round(l, i), l);
        }
        (l << self.half_bits) | r
    }
}

fn width_mask(bits: u32) -> u32 {
    ((1u64 << bits) - 1) as u32
}

/// Draws a `bits`-wide value. Wide values take two 16-bit draws, high half
/// first, so every draw stays inside a 32-bit bound.
pub fn draw_bits(entropy: &mut dyn EntropySource, bits: u32) -> u32 {
    if bits <= 16 {
        entropy.next_uniform(1 << bits)
    } else {
        let hi = entropy.next_uniform(1 << (bits - 16));
        let lo = entropy.next_uniform(1 << 16);
        (hi << 16) | lo
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    Fixed,
    Rolling,
    PassiveCr,
    Proposed,
}

impl Technique {
    pub const ALL: [Technique; 4] = [
        Technique::Fixed,
        Technique::Rolling,
        Technique::PassiveCr,
        Technique::Proposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Technique::Fixed => "fixed",
            Technique::Rolling => "rolling",
            Technique::PassiveCr => "passive_cr",
            Technique::Proposed => "proposed",
        }
    }
}

impl std::str::FromStr for Technique {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Technique::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown technique `{s}` (expected fixed|rolling|passive_cr|proposed)"))
    }
}

// ---------------------------------------------------------------- fixed code

#[derive(Clone, Debug)]
pub struct FixedCodeFob {
    code: u32,
}

impl FixedCodeFob {
    pub fn new(code: u32) -> Self {
        FixedCodeFob { code }
    }

    pub fn press(&self) -> Message {
        Message::FixedCode(self.code)
    }
}

#[derive(Clone, Debug)]
pub struct FixedCodeCar {
    code: u32,
    bits: u32,
}

impl FixedCodeCar {
    /// Only the low `bits` bits of a received code are compared.
    pub fn new(code: u32, bits: u32) -> Self {
        assert!((1..=32).contains(&bits));
        FixedCodeCar {
            code: code & width_mask(bits),
            bits,
        }
    }

    pub fn accept(&self, received: u32) -> bool {
        received & width_mask(self.bits) == self.code
    }
}

pub fn fixed_code_session(tx: &FixedCodeFob, rx: &FixedCodeCar) -> bool {
    match tx.press() {
        Message::FixedCode(c) => rx.accept(c),
        _ => unreachable!(),
    }
}

impl Node for FixedCodeFob {
    fn on_frame(&mut self, _frame: &Frame, _now: Millis) -> DeviceOutput {
        DeviceOutput::default()
    }

    fn on_input(&mut self, input: &Input, _now: Millis) -> DeviceOutput {
        let mut out = DeviceOutput::default();
        if let Input::Button(_) = input {
            out.send(self.press());
        }
        out
    }

    fn states(&self) -> [Option<&'static str>; 2] {
        [Some("IDLE"), None]
    }

    any_methods!();
}

impl Node for FixedCodeCar {
    fn on_frame(&mut self, frame: &Frame, now: Millis) -> DeviceOutput {
        let mut out = DeviceOutput::default();
        if let Message::FixedCode(c) = Message::from(frame) {
            if self.accept(c) {
                out.actuate(ActuatorKind::UnlockDoors, now);
            }
        }
        out
    }

    fn states(&self) -> [Option<&'static str>; 2] {
        [Some("IDLE"), None]
    }

    any_methods!();
}

// -------------------------------------------------------------- rolling code

pub const DEFAULT_ROLLING_WINDOW: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RollingReject {
    #[error("counter {counter} is not ahead of the last accepted {last}")]
    Replay { counter: u32, last: u32 },
    #[error("counter {counter} is more than {window} ahead of {last}")]
    Desync { counter: u32, last: u32, window: u32 },
}

#[derive(Clone, Debug)]
pub struct RollingCodeFob {
    counter: u32,
    prp: Feistel,
}

impl RollingCodeFob {
    pub fn new(key: u64, bits: u32) -> Self {
        RollingCodeFob {
            counter: 0,
            prp: Feistel::new(key, bits),
        }
    }

    pub fn counter(&self) -> u32 {
        self.counter
    }

    /// Advances the counter and returns the encrypted credential.
    pub fn press(&mut self) -> Message {
        self.counter = (self.counter + 1) & width_mask(self.prp.width());
        Message::RollingCode(self.prp.encrypt(self.counter))
    }
}

#[derive(Clone, Debug)]
pub struct RollingCodeCar {
    last_accepted: u32,
    window: u32,
    prp: Feistel,
    desyncs: u64,
}

impl RollingCodeCar {
    pub fn new(key: u64, bits: u32, window: u32) -> Self {
        RollingCodeCar {
            last_accepted: 0,
            window,
            prp: Feistel::new(key, bits),
            desyncs: 0,
        }
    }

    pub fn last_accepted(&self) -> u32 {
        self.last_accepted
    }

    pub fn desyncs(&self) -> u64 {
        self.desyncs
    }

    pub fn accept(&mut self, code: u32) -> Result<u32, RollingReject> {
        let counter = self.prp.decrypt(code & width_mask(self.prp.width()));
        let last = self.last_accepted;
        if counter <= last {
            return Err(RollingReject::Replay { counter, last });
        }
        if counter - last > self.window {
            self.desyncs += 1;
            return Err(RollingReject::Desync {
                counter,
                last,
                window: self.window,
            });
        }
        self.last_accepted = counter;
        Ok(counter)
    }
}

pub fn rolling_code_session(
    tx: &mut RollingCodeFob,
    rx: &mut RollingCodeCar,
) -> Result<u32, RollingReject> {
    match tx.press() {
        Message::RollingCode(c) => rx.accept(c),
        _ => unreachable!(),
    }
}

impl Node for RollingCodeFob {
    fn on_frame(&mut self, _frame: &Frame, _now: Millis) -> DeviceOutput {
        DeviceOutput::default()
    }

    fn on_input(&mut self, input: &Input, _now: Millis) -> DeviceOutput {
        let mut out = DeviceOutput::default();
        if let Input::Button(_) = input {
            let msg = self.press();
            out.send(msg);
        }
        out
    }

    fn states(&self) -> [Option<&'static str>; 2] {
        [Some("IDLE"), None]
    }

    any_methods!();
}

impl Node for RollingCodeCar {
    fn on_frame(&mut self, frame: &Frame, now: Millis) -> DeviceOutput {
        let mut out = DeviceOutput::default();
        if let Message::RollingCode(c) = Message::from(frame) {
            if self.accept(c).is_ok() {
                out.actuate(ActuatorKind::UnlockDoors, now);
            }
        }
        out
    }

    fn states(&self) -> [Option<&'static str>; 2] {
        [Some("IDLE"), None]
    }

    any_methods!();
}

// -------------------------------------------------- passive challenge-response

pub const DEFAULT_CHALLENGE_BITS: u32 = 32;

/// Customer identification device: answers any challenge it hears.
#[derive(Clone, Debug)]
pub struct Cid {
    prp: Feistel,
}

impl Cid {
    pub fn new(key: u64, challenge_bits: u32) -> Self {
        Cid {
            prp: Feistel::new(key, challenge_bits),
        }
    }

    pub fn respond(&self, challenge: u32) -> u32 {
        self.prp
            .encrypt(challenge & width_mask(self.prp.width()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrState {
    Idle,
    WaitResponse { challenge: u32, deadline: Millis },
}

pub struct PassiveCrCar {
    prp: Feistel,
    entropy: Box<dyn EntropySource>,
    response_ms: Millis,
    state: CrState,
}

impl PassiveCrCar {
    pub fn new(key: u64, challenge_bits: u32, entropy: Box<dyn EntropySource>) -> Self {
        PassiveCrCar {
            prp: Feistel::new(key, challenge_bits),
            entropy,
            response_ms: 500,
            state: CrState::Idle,
        }
    }

    pub fn with_response_ms(mut self, ms: Millis) -> Self {
        self.response_ms = ms;
        self
    }

    pub fn challenge_bits(&self) -> u32 {
        self.prp.width()
    }

    pub fn state(&self) -> CrState {
        self.state
    }

    /// Handle pulled: interrogate whatever credential is in range.
    pub fn handle_pull(&mut self, now: Millis) -> Option<Message> {
        if self.state != CrState::Idle {
            return None;
        }
        let challenge = draw_bits(self.entropy.as_mut(), self.prp.width());
        self.state = CrState::WaitResponse {
            challenge,
            deadline: now + self.response_ms,
        };
        Some(Message::CrChallenge(challenge))
    }

    pub fn check(&mut self, response: u32) -> bool {
        match self.state {
            CrState::WaitResponse { challenge, .. } => {
                self.state = CrState::Idle;
                self.prp.encrypt(challenge) == response
            }
            CrState::Idle => false,
        }
    }
}

pub fn passive_cr_session(car: &mut PassiveCrCar, cid: &Cid) -> bool {
    match car.handle_pull(0) {
        Some(Message::CrChallenge(c)) => car.check(cid.respond(c)),
        _ => false,
    }
}

impl Node for Cid {
    fn on_frame(&mut self, frame: &Frame, _now: Millis) -> DeviceOutput {
        let mut out = DeviceOutput::default();
        if let Message::CrChallenge(c) = Message::from(frame) {
            out.send(Message::CrResponse(self.respond(c)));
        }
        out
    }

    fn states(&self) -> [Option<&'static str>; 2] {
        [Some("IDLE"), None]
    }

    any_methods!();
}

impl Node for PassiveCrCar {
    fn on_frame(&mut self, frame: &Frame, now: Millis) -> DeviceOutput {
        let mut out = DeviceOutput::default();
        if let Message::CrResponse(r) = Message::from(frame) {
            if matches!(self.state, CrState::WaitResponse { .. }) && self.check(r) {
                out.actuate(ActuatorKind::UnlockDoors, now);
            }
        }
        out
    }

    fn on_input(&mut self, input: &Input, now: Millis) -> DeviceOutput {
        let mut out = DeviceOutput::default();
        if let Input::HandlePull = input {
            if let Some(m) = self.handle_pull(now) {
                out.send(m);
            }
        }
        out
    }

    fn on_timer(&mut self, now: Millis) -> DeviceOutput {
        if matches!(self.state, CrState::WaitResponse { deadline, .. } if deadline <= now) {
            self.state = CrState::Idle;
        }
        DeviceOutput::default()
    }

    fn next_deadline(&self) -> Option<Millis> {
        match self.state {
            CrState::WaitResponse { deadline, .. } => Some(deadline),
            CrState::Idle => None,
        }
    }

    fn states(&self) -> [Option<&'static str>; 2] {
        let name = match self.state {
            CrState::Idle => "IDLE",
            CrState::WaitResponse { .. } => "WAIT_RESPONSE",
        };
        [Some(name), None]
    }

    any_methods!();
}
