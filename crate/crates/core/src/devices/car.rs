use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::authcrypt::{
    build_auth_message, generate_challenge, verify_auth_message, Challenge, ProtocolParams,
};
use crate::keystore::{CarKeyId, EntropySource, KeyTable};
use crate::wire::{Button, Frame, Message};

use super::{
    ActuatorKind, DeviceOutput, Millis, Timing, FAILURES_BEFORE_BLOCK, HONK_COUNT,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CarState {
    Idle,
    WaitAuth { challenge: Challenge, deadline: Millis },
    WaitCommand { deadline: Millis },
    StartWaitInit { deadline: Millis },
    StartWaitConfirm { own: Challenge, deadline: Millis },
    Blocked { until: Millis },
}

impl CarState {
    pub fn name(&self) -> &'static str {
        match self {
            CarState::Idle => "IDLE",
            CarState::WaitAuth { .. } => "WAIT_AUTH",
            CarState::WaitCommand { .. } => "WAIT_COMMAND",
            CarState::StartWaitInit { .. } => "START_WAIT_INIT",
            CarState::StartWaitConfirm { .. } => "START_WAIT_CONFIRM",
            CarState::Blocked { .. } => "BLOCKED",
        }
    }

    fn deadline(&self) -> Option<Millis> {
        match *self {
            CarState::Idle => None,
            CarState::WaitAuth { deadline, .. }
            | CarState::WaitCommand { deadline }
            | CarState::StartWaitInit { deadline }
            | CarState::StartWaitConfirm { deadline, .. } => Some(deadline),
            CarState::Blocked { until } => Some(until),
        }
    }
}

/// Anti-jamming watchdog, running alongside the main state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum JamDefense {
    Inactive,
    WatchDoor { door_opened: bool },
    WaitLockOrReply { deadline: Millis, next_ping: Millis },
    Honking { done: u32, next_honk: Millis, autolock_at: Millis },
    AutolockCountdown { deadline: Millis },
}

impl JamDefense {
    pub fn name(&self) -> &'static str {
        match self {
            JamDefense::Inactive => "jam/INACTIVE",
            JamDefense::WatchDoor { .. } => "jam/WATCH_DOOR",
            JamDefense::WaitLockOrReply { .. } => "jam/WAIT_LOCK_OR_REPLY",
            JamDefense::Honking { .. } => "jam/HONKING",
            JamDefense::AutolockCountdown { .. } => "jam/AUTOLOCK_COUNTDOWN",
        }
    }

    pub fn is_armed(&self) -> bool {
        matches!(
            self,
            JamDefense::WaitLockOrReply { .. }
                | JamDefense::Honking { .. }
                | JamDefense::AutolockCountdown { .. }
        )
    }

    fn deadline(&self) -> Option<Millis> {
        match *self {
            JamDefense::Inactive | JamDefense::WatchDoor { .. } => None,
            JamDefense::WaitLockOrReply {
                deadline,
                next_ping,
            } => Some(deadline.min(next_ping)),
            JamDefense::Honking { next_honk, .. } => Some(next_honk),
            JamDefense::AutolockCountdown { deadline } => Some(deadline),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VehicleEvent {
    MotorOff,
    DoorOpened,
    DoorClosed,
}

impl std::str::FromStr for VehicleEvent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "MOTOR_OFF" => Ok(VehicleEvent::MotorOff),
            "DOOR_OPENED" => Ok(VehicleEvent::DoorOpened),
            "DOOR_CLOSED" => Ok(VehicleEvent::DoorClosed),
            _ => Err(format!(
                "unknown vehicle event `{s}` (expected MOTOR_OFF|DOOR_OPENED|DOOR_CLOSED)"
            )),
        }
    }
}

/// Vehicle-side endpoint: verifies fobs, drives actuators, enforces the
/// lockout policy and runs the anti-jamming watchdog.
pub struct CarTransceiver {
    id: CarKeyId,
    table: KeyTable,
    entropy: Box<dyn EntropySource>,
    params: ProtocolParams,
    timing: Timing,
    lockout_enabled: bool,
    jam_defense_enabled: bool,
    state: CarState,
    failure_log: VecDeque<Millis>,
    jam: JamDefense,
    door_locked: bool,
    engine_running: bool,
    foreign_ids_seen: u64,
    blocks_entered: u64,
}

impl CarTransceiver {
    pub fn new(id: CarKeyId, table: KeyTable, entropy: Box<dyn EntropySource>) -> Self {
        CarTransceiver {
            id,
            table,
            entropy,
            params: ProtocolParams::FULL,
            timing: Timing::default(),
            lockout_enabled: true,
            jam_defense_enabled: true,
            state: CarState::Idle,
            failure_log: VecDeque::new(),
            jam: JamDefense::Inactive,
            door_locked: true,
            engine_running: false,
            foreign_ids_seen: 0,
            blocks_entered: 0,
        }
    }

    pub fn with_params(mut self, params: ProtocolParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_timing(mut self, timing: Timing) -> Self {
        self.timing = timing;
        self
    }

    pub fn with_lockout(mut self, enabled: bool) -> Self {
        self.lockout_enabled = enabled;
        self
    }

    pub fn with_jam_defense(mut self, enabled: bool) -> Self {
        self.jam_defense_enabled = enabled;
        self
    }

    /// Starts with the engine running and doors unlocked (driver on board).
    pub fn with_driver_on_board(mut self) -> Self {
        self.engine_running = true;
        self.door_locked = false;
        self
    }

    pub fn id(&self) -> CarKeyId {
        self.id
    }

    pub fn table(&self) -> &KeyTable {
        &self.table
    }

    pub fn state(&self) -> &CarState {
        &self.state
    }

    pub fn jam_defense(&self) -> &JamDefense {
        &self.jam
    }

    pub fn door_locked(&self) -> bool {
        self.door_locked
    }

    pub fn engine_running(&self) -> bool {
        self.engine_running
    }

    pub fn failure_log(&self) -> impl Iterator<Item = Millis> + '_ {
        self.failure_log.iter().copied()
    }

    /// Frames announcing a foreign car key id, dropped without logging.
    pub fn foreign_ids_seen(&self) -> u64 {
        self.foreign_ids_seen
    }

    pub fn blocks_entered(&self) -> u64 {
        self.blocks_entered
    }

    pub fn timing(&self) -> &Timing {
        &self.timing
    }

    fn is_blocked(&self) -> bool {
        matches!(self.state, CarState::Blocked { .. })
    }

    pub fn next_deadline(&self) -> Option<Millis> {
        let main = self.state.deadline();
        if self.is_blocked() {
            return main;
        }
        match (main, self.jam.deadline()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn record_failure(&mut self, now: Millis) {
        let window = self.timing.fail_window_ms;
        while matches!(self.failure_log.front(), Some(&t) if now.saturating_sub(t) > window) {
            self.failure_log.pop_front();
        }
        self.failure_log.push_back(now);
        if self.lockout_enabled && self.failure_log.len() >= FAILURES_BEFORE_BLOCK {
            self.failure_log.clear();
            self.blocks_entered += 1;
            self.state = CarState::Blocked {
                until: now + self.timing.block_ms,
            };
        } else {
            self.state = CarState::Idle;
        }
    }

    fn execute(&mut self, button: Button, now: Millis, out: &mut DeviceOutput) {
        let kind = match button {
            Button::Lock => {
                self.door_locked = true;
                if self.jam.is_armed() {
                    self.jam = JamDefense::Inactive;
                }
                ActuatorKind::LockDoors
            }
            Button::Unlock => {
                self.door_locked = false;
                ActuatorKind::UnlockDoors
            }
            Button::Boot => ActuatorKind::OpenBoot,
        };
        out.actuate(kind, now);
    }

    pub fn handle_frame(&mut self, frame: &Frame, now: Millis) -> DeviceOutput {
        let mut out = DeviceOutput::default();
        if self.is_blocked() {
            return out;
        }
        let msg = Message::from(frame);

        if let Message::PingReply(id) = msg {
            if id == self.id && self.jam.is_armed() {
                self.jam = JamDefense::Inactive;
            }
            return out;
        }

        match (&self.state, msg) {
            (CarState::Idle, Message::IdAnnounce(id)) => {
                if id != self.id {
                    self.foreign_ids_seen += 1;
                    return out;
                }
                let challenge = generate_challenge(self.entropy.as_mut(), &self.params);
                out.send(Message::Challenge(challenge));
                self.state = CarState::WaitAuth {
                    challenge,
                    deadline: now + self.timing.response_ms,
                };
            }
            (CarState::Idle, Message::StartInit { id, .. }) if id != self.id => {
                self.foreign_ids_seen += 1;
            }
            (&CarState::WaitAuth { challenge, .. }, Message::AuthResponse(received)) => {
                if verify_auth_message(&self.table, &challenge, &received, &self.params) {
                    out.send(Message::AuthOk);
                    self.state = CarState::WaitCommand {
                        deadline: now + self.timing.command_ms,
                    };
                } else {
                    self.record_failure(now);
                }
            }
            (CarState::WaitCommand { .. }, Message::Command(button)) => {
                self.execute(button, now, &mut out);
                self.state = CarState::Idle;
            }
            (CarState::StartWaitInit { .. }, Message::StartInit { id, challenge }) => {
                if id != self.id {
                    self.foreign_ids_seen += 1;
                    return out;
                }
                if challenge.check(&self.params).is_err() {
                    return out;
                }
                let Ok(response) = build_auth_message(&self.table, &challenge, &self.params)
                else {
                    return out;
                };
                let own = generate_challenge(self.entropy.as_mut(), &self.params);
                out.send(Message::StartAuth {
                    response,
                    challenge: own,
                });
                self.state = CarState::StartWaitConfirm {
                    own,
                    deadline: now + self.timing.start_ms,
                };
            }
            (&CarState::StartWaitConfirm { own, .. }, Message::StartConfirm(received)) => {
                if verify_auth_message(&self.table, &own, &received, &self.params) {
                    out.actuate(ActuatorKind::StartEngine, now);
                    self.engine_running = true;
                    self.jam = JamDefense::Inactive;
                    self.state = CarState::Idle;
                } else {
                    self.record_failure(now);
                }
            }
            _ => {}
        }
        out
    }

    /// Driver presses the start button inside the car.
    pub fn press_start(&mut self, now: Millis) -> DeviceOutput {
        let mut out = DeviceOutput::default();
        if self.state == CarState::Idle {
            out.send(Message::IdRequest);
            self.state = CarState::StartWaitInit {
                deadline: now + self.timing.start_ms,
            };
        }
        out
    }

    pub fn vehicle_event(&mut self, event: VehicleEvent, now: Millis) -> DeviceOutput {
        let mut out = DeviceOutput::default();
        match event {
            VehicleEvent::MotorOff => {
                self.engine_running = false;
                if self.jam_defense_enabled {
                    self.jam = JamDefense::WatchDoor { door_opened: false };
                }
            }
            VehicleEvent::DoorOpened => {
                if let JamDefense::WatchDoor { door_opened } = &mut self.jam {
                    *door_opened = true;
                }
            }
            VehicleEvent::DoorClosed => {
                if self.jam == (JamDefense::WatchDoor { door_opened: true }) {
                    self.jam = JamDefense::WaitLockOrReply {
                        deadline: now + self.timing.jam_ms,
                        next_ping: now + self.timing.ping_ms,
                    };
                    if !self.is_blocked() {
                        out.send(Message::Ping(self.id));
                    }
                }
            }
        }
        out
    }

    pub fn tick(&mut self, now: Millis) -> DeviceOutput {
        let mut out = DeviceOutput::default();
        match self.state {
            CarState::Blocked { until } if until <= now => self.state = CarState::Idle,
            CarState::Blocked { .. } => return out,
            ref s if matches!(s.deadline(), Some(d) if d <= now) => self.state = CarState::Idle,
            _ => {}
        }

        loop {
            match self.jam {
                JamDefense::WaitLockOrReply { deadline, .. } if deadline <= now => {
                    out.actuate(ActuatorKind::Honk, now);
                    self.jam = JamDefense::Honking {
                        done: 1,
                        next_honk: now + self.timing.honk_spacing_ms,
                        autolock_at: now + self.timing.autolock_ms,
                    };
                }
                JamDefense::WaitLockOrReply {
                    deadline,
                    next_ping,
                } if next_ping <= now => {
                    out.send(Message::Ping(self.id));
                    self.jam = JamDefense::WaitLockOrReply {
                        deadline,
                        next_ping: next_ping + self.timing.ping_ms,
                    };
                }
                JamDefense::Honking {
                    done,
                    next_honk,
                    autolock_at,
                } if next_honk <= now => {
                    out.actuate(ActuatorKind::Honk, now);
                    self.jam = if done + 1 >= HONK_COUNT {
                        JamDefense::AutolockCountdown {
                            deadline: autolock_at,
                        }
                    } else {
                        JamDefense::Honking {
                            done: done + 1,
                            next_honk: next_honk + self.timing.honk_spacing_ms,
                            autolock_at,
                        }
                    };
                }
                JamDefense::AutolockCountdown { deadline } if deadline <= now => {
                    out.actuate(ActuatorKind::LockDoors, now);
                    self.door_locked = true;
                    self.jam = JamDefense::Inactive;
                }
                _ => break,
            }
        }
        out
    }
}

impl std::fmt::Debug for CarTransceiver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CarTransceiver")
            .field("id", &self.id)
            .field("state", &self.state)
            .field("jam", &self.jam)
            .field("door_locked", &self.door_locked)
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::authcrypt::AuthMessage;
    use crate::keystore::StrongSource;

    const ID: CarKeyId = CarKeyId::new(0x1234);

    fn car() -> CarTransceiver {
        let table = KeyTable::generate(&mut StrongSource::from_seed(1));
        CarTransceiver::new(ID, table, Box::new(StrongSource::from_seed(9)))
    }

    fn f(msg: Message) -> Frame {
        msg.to_frame().unwrap()
    }

    fn challenge_of(out: &DeviceOutput) -> Challenge {
        match Message::from(&out.frames[0]) {
            Message::Challenge(c) => c,
            other => panic!("expected challenge, got {other:?}"),
        }
    }

    fn wrong_auth(c: &mut CarTransceiver, now: Millis) {
        let out = c.handle_frame(&f(Message::IdAnnounce(ID)), now);
        assert_eq!(out.frames.len(), 1);
        c.handle_frame(&f(Message::AuthResponse(AuthMessage::new([1, 2, 3, 4, 5]))), now + 1);
    }

    #[test]
    fn happy_unlock() {
        let mut c = car();
        let out = c.handle_frame(&f(Message::IdAnnounce(ID)), 10);
        let ch = challenge_of(&out);
        let resp = build_auth_message(c.table(), &ch, &ProtocolParams::FULL).unwrap();
        let out = c.handle_frame(&f(Message::AuthResponse(resp)), 12);
        assert_eq!(out.frames, vec![f(Message::AuthOk)]);
        let out = c.handle_frame(&f(Message::Command(Button::Unlock)), 14);
        assert_eq!(out.actuators.len(), 1);
        assert_eq!(out.actuators[0].kind, ActuatorKind::UnlockDoors);
        assert!(!c.door_locked());
        assert_eq!(c.state(), &CarState::Idle);
    }

    #[test]
    fn foreign_ids_change_nothing() {
        let mut c = car();
        for i in 0..100 {
            let out = c.handle_frame(&f(Message::IdAnnounce(CarKeyId::new(0x9999))), i);
            assert!(out.is_empty());
        }
        assert_eq!(c.state(), &CarState::Idle);
        assert_eq!(c.foreign_ids_seen(), 100);
        assert_eq!(c.blocks_entered(), 0);
    }

    #[test]
    fn three_wrong_auths_block_for_three_minutes() {
        let mut c = car();
        wrong_auth(&mut c, 0);
        wrong_auth(&mut c, 1000);
        assert_eq!(c.state(), &CarState::Idle);
        wrong_auth(&mut c, 2000);
        assert_eq!(c.state(), &CarState::Blocked { until: 2001 + 180_000 });
        assert!(c.handle_frame(&f(Message::IdAnnounce(ID)), 50_000).is_empty());
        c.tick(182_000);
        assert!(matches!(c.state(), CarState::Blocked { .. }));
        c.tick(182_001);
        assert_eq!(c.state(), &CarState::Idle);
        assert_eq!(c.handle_frame(&f(Message::IdAnnounce(ID)), 182_002).frames.len(), 1);
    }

    #[test]
    fn failures_outside_window_do_not_block() {
        let mut c = car();
        wrong_auth(&mut c, 0);
        wrong_auth(&mut c, 30_000);
        wrong_auth(&mut c, 70_000);
        assert_eq!(c.state(), &CarState::Idle);
        assert_eq!(c.failure_log().collect::<Vec<_>>(), vec![30_001, 70_001]);
    }

    #[test]
    fn lockout_can_be_disabled() {
        let mut c = car().with_lockout(false);
        for i in 0..10 {
            wrong_auth(&mut c, i * 10);
        }
        assert_eq!(c.state(), &CarState::Idle);
    }

    #[test]
    fn timeout_is_not_a_failure() {
        let mut c = car();
        c.handle_frame(&f(Message::IdAnnounce(ID)), 0);
        c.tick(500);
        assert_eq!(c.state(), &CarState::Idle);
        assert_eq!(c.failure_log().count(), 0);
    }

    #[test]
    fn start_transaction_with_honest_fob() {
        use crate::devices::KeyFob;
        let table = KeyTable::generate(&mut StrongSource::from_seed(1));
        let mut c = car().with_driver_on_board();
        let mut fob = KeyFob::new(ID, table, Box::new(StrongSource::from_seed(4)));
        let req = c.press_start(0);
        let init = fob.handle_frame(&req.frames[0], 1);
        let auth = c.handle_frame(&init.frames[0], 2);
        let confirm = fob.handle_frame(&auth.frames[0], 3);
        let done = c.handle_frame(&confirm.frames[0], 4);
        assert_eq!(done.actuators.len(), 1);
        assert_eq!(done.actuators[0].kind, ActuatorKind::StartEngine);
    }

    #[test]
    fn jam_defense_honks_then_locks() {
        let mut c = car().with_driver_on_board();
        c.vehicle_event(VehicleEvent::MotorOff, 0);
        c.vehicle_event(VehicleEvent::DoorOpened, 500);
        let out = c.vehicle_event(VehicleEvent::DoorClosed, 1000);
        assert_eq!(out.frames, vec![f(Message::Ping(ID))]);
        let mut honks = vec![];
        let mut locks = vec![];
        let mut pings = 1;
        let mut now = 1000;
        while let Some(d) = c.next_deadline() {
            now = d;
            let out = c.tick(now);
            pings += out.frames.len();
            for a in out.actuators {
                match a.kind {
                    ActuatorKind::Honk => honks.push(a.at),
                    ActuatorKind::LockDoors => locks.push(a.at),
                    _ => unreachable!(),
                }
            }
        }
        assert_eq!(honks, vec![11_000, 11_500, 12_000, 12_500, 13_000]);
        assert_eq!(locks, vec![21_000]);
        assert_eq!(pings, 5);
        assert!(c.door_locked());
        assert_eq!(now, 21_000);
    }

    #[test]
    fn ping_reply_disarms() {
        let mut c = car().with_driver_on_board();
        c.vehicle_event(VehicleEvent::MotorOff, 0);
        c.vehicle_event(VehicleEvent::DoorOpened, 1);
        c.vehicle_event(VehicleEvent::DoorClosed, 2);
        c.handle_frame(&f(Message::PingReply(ID)), 3_002);
        assert_eq!(c.jam_defense(), &JamDefense::Inactive);
        assert_eq!(c.next_deadline(), None);
    }

    #[test]
    fn door_without_motor_off_does_not_arm() {
        let mut c = car().with_driver_on_board();
        c.vehicle_event(VehicleEvent::DoorOpened, 0);
        c.vehicle_event(VehicleEvent::DoorClosed, 1);
        assert_eq!(c.jam_defense(), &JamDefense::Inactive);
    }
}
