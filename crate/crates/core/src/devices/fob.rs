use crate::authcrypt::{
    build_auth_message, generate_challenge, verify_auth_message, Challenge, ProtocolParams,
};
use crate::keystore::{CarKeyId, EntropySource, KeyTable, TABLE_LEN};
use crate::wire::{Button, Frame, Message, PROG_BLOCK_VALUES};

use super::{Busy, DeviceOutput, Millis, Timing};

const BLOCKS: usize = TABLE_LEN / PROG_BLOCK_VALUES;

/// Sequence number used in PROG_ACK/PROG_NACK for commit and rollback replies.
pub const PROG_CONTROL_SEQ: u16 = 0xFFFF;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FobState {
    Idle,
    WaitChallenge { pending: Button, deadline: Millis },
    WaitAuthOk { pending: Button, deadline: Millis },
    StartWaitAuth { sent: Challenge, deadline: Millis },
}

impl FobState {
    pub fn name(&self) -> &'static str {
        match self {
            FobState::Idle => "IDLE",
            FobState::WaitChallenge { .. } => "WAIT_CHALLENGE",
            FobState::WaitAuthOk { .. } => "WAIT_AUTH_OK",
            FobState::StartWaitAuth { .. } => "START_WAIT_AUTH",
        }
    }

    fn deadline(&self) -> Option<Millis> {
        match *self {
            FobState::Idle => None,
            FobState::WaitChallenge { deadline, .. }
            | FobState::WaitAuthOk { deadline, .. }
            | FobState::StartWaitAuth { deadline, .. } => Some(deadline),
        }
    }
}

struct Staging {
    values: Box<[u16; TABLE_LEN]>,
    written: [bool; BLOCKS],
}

/// Handheld transmitter holding one copy of the key table.
pub struct KeyFob {
    id: CarKeyId,
    table: KeyTable,
    entropy: Box<dyn EntropySource>,
    params: ProtocolParams,
    timing: Timing,
    state: FobState,
    staging: Option<Staging>,
}

impl KeyFob {
    pub fn new(id: CarKeyId, table: KeyTable, entropy: Box<dyn EntropySource>) -> Self {
        KeyFob {
            id,
            table,
            entropy,
            params: ProtocolParams::FULL,
            timing: Timing::default(),
            state: FobState::Idle,
            staging: None,
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

    pub fn id(&self) -> CarKeyId {
        self.id
    }

    pub fn table(&self) -> &KeyTable {
        &self.table
    }

    pub fn state(&self) -> &FobState {
        &self.state
    }

    pub fn next_deadline(&self) -> Option<Millis> {
        self.state.deadline()
    }

    pub fn press_button(&mut self, button: Button, now: Millis) -> Result<DeviceOutput, Busy> {
        if self.state != FobState::Idle {
            return Err(Busy);
        }
        let mut out = DeviceOutput::default();
        out.send(Message::IdAnnounce(self.id));
        self.state = FobState::WaitChallenge {
            pending: button,
            deadline: now + self.timing.challenge_ms,
        };
        Ok(out)
    }

    pub fn handle_frame(&mut self, frame: &Frame, now: Millis) -> DeviceOutput {
        let mut out = DeviceOutput::default();
        let msg = Message::from(frame);

        // Ping replies do not disturb an ongoing transaction.
        if let Message::Ping(id) = msg {
            if id == self.id {
                out.send(Message::PingReply(self.id));
            }
            return out;
        }

        match (&self.state, msg) {
            (&FobState::WaitChallenge { pending, .. }, Message::Challenge(challenge)) => {
                if let Ok(response) = build_auth_message(&self.table, &challenge, &self.params)
                    .and_then(|r| challenge.check(&self.params).map(|_| r))
                {
                    out.send(Message::AuthResponse(response));
                    self.state = FobState::WaitAuthOk {
                        pending,
                        deadline: now + self.timing.auth_ok_ms,
                    };
                }
            }
            (&FobState::WaitAuthOk { pending, .. }, Message::AuthOk) => {
                out.send(Message::Command(pending));
                self.state = FobState::Idle;
            }
            (FobState::Idle, Message::IdRequest) => {
                let sent = generate_challenge(self.entropy.as_mut(), &self.params);
                out.send(Message::StartInit {
                    id: self.id,
                    challenge: sent,
                });
                self.state = FobState::StartWaitAuth {
                    sent,
                    deadline: now + self.timing.start_ms,
                };
            }
            (
                &FobState::StartWaitAuth { sent, .. },
                Message::StartAuth {
                    response,
                    challenge,
                },
            ) => {
                // A car that cannot prove table knowledge gets nothing back.
                if verify_auth_message(&self.table, &sent, &response, &self.params)
                    && challenge.check(&self.params).is_ok()
                {
                    if let Ok(confirm) = build_auth_message(&self.table, &challenge, &self.params) {
                        out.send(Message::StartConfirm(confirm));
                    }
                }
                self.state = FobState::Idle;
            }
            _ => {}
        }
        out
    }

    pub fn tick(&mut self, now: Millis) -> DeviceOutput {
        if matches!(self.state.deadline(), Some(d) if d <= now) {
            self.state = FobState::Idle;
        }
        DeviceOutput::default()
    }

    /// Wired programming interface. `write_ok` is false when the EEPROM
    /// write for this block fails.
    pub fn handle_prog(&mut self, msg: &Message, write_ok: bool) -> Option<Message> {
        match msg {
            Message::ProgIdRequest => Some(Message::ProgIdResponse(self.id)),
            Message::ProgWrite { block, values } => {
                let b = *block as usize;
                let start = b * PROG_BLOCK_VALUES;
                let fits = b < BLOCKS && values.len() == PROG_BLOCK_VALUES;
                if !fits || !write_ok {
                    return Some(Message::ProgNack(*block));
                }
                let staging = self.staging.get_or_insert_with(|| Staging {
                    values: Box::new(*self.table.values()),
                    written: [false; BLOCKS],
                });
                staging.values[start..start + PROG_BLOCK_VALUES].copy_from_slice(values);
                staging.written[b] = true;
                Some(Message::ProgAck(*block))
            }
            Message::ProgCommit { generation } => match self.staging.take() {
                Some(s) if s.written.iter().all(|&w| w) => {
                    self.table = KeyTable::from_values(*s.values, *generation);
                    Some(Message::ProgAck(PROG_CONTROL_SEQ))
                }
                other => {
                    self.staging = other;
                    Some(Message::ProgNack(PROG_CONTROL_SEQ))
                }
            },
            Message::ProgRollback => {
                self.staging = None;
                Some(Message::ProgAck(PROG_CONTROL_SEQ))
            }
            _ => None,
        }
    }

    /// True while a partially written table sits in the staging area.
    pub fn has_staged_writes(&self) -> bool {
        self.staging.is_some()
    }
}

impl std::fmt::Debug for KeyFob {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyFob")
            .field("id", &self.id)
            .field("state", &self.state)
            .field("generation", &self.table.generation())
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::authcrypt::AuthMessage;
    use crate::keystore::StrongSource;

    fn fob() -> KeyFob {
        let table = KeyTable::generate(&mut StrongSource::from_seed(1));
        KeyFob::new(CarKeyId::new(7), table, Box::new(StrongSource::from_seed(2)))
    }

    fn frame(msg: Message) -> Frame {
        msg.to_frame().unwrap()
    }

    #[test]
    fn press_announces_id_once() {
        let mut f = fob();
        let out = f.press_button(Button::Unlock, 0).unwrap();
        assert_eq!(out.frames, vec![frame(Message::IdAnnounce(CarKeyId::new(7)))]);
        assert_eq!(f.state().name(), "WAIT_CHALLENGE");
        assert_eq!(f.press_button(Button::Lock, 1), Err(Busy));
    }

    #[test]
    fn challenge_gets_five_sums() {
        let mut f = fob();
        f.press_button(Button::Unlock, 0).unwrap();
        let c = Challenge::new([0, 1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
        let out = f.handle_frame(&frame(Message::Challenge(c)), 2);
        let expected =
            build_auth_message(f.table(), &c, &ProtocolParams::FULL).unwrap();
        assert_eq!(out.frames, vec![frame(Message::AuthResponse(expected))]);
        assert_eq!(f.state().name(), "WAIT_AUTH_OK");
        let out = f.handle_frame(&frame(Message::AuthOk), 4);
        assert_eq!(out.frames, vec![frame(Message::Command(Button::Unlock))]);
        assert_eq!(f.state(), &FobState::Idle);
    }

    #[test]
    fn unexpected_frames_are_ignored() {
        let mut f = fob();
        assert!(f.handle_frame(&frame(Message::AuthOk), 0).is_empty());
        assert_eq!(f.state(), &FobState::Idle);
        let c = Challenge::new([1; 10]).unwrap();
        assert!(f.handle_frame(&frame(Message::Challenge(c)), 0).is_empty());
        assert_eq!(f.state(), &FobState::Idle);
    }

    #[test]
    fn car_emulator_gets_no_confirm() {
        let mut f = fob();
        let out = f.handle_frame(&frame(Message::IdRequest), 0);
        assert_eq!(out.frames.len(), 1);
        assert_eq!(f.state().name(), "START_WAIT_AUTH");
        let bogus = Message::StartAuth {
            response: AuthMessage::new([1, 2, 3, 4, 5]),
            challenge: Challenge::new([9; 10]).unwrap(),
        };
        let out = f.handle_frame(&frame(bogus), 2);
        assert!(out.frames.is_empty());
        assert_eq!(f.state(), &FobState::Idle);
    }

    #[test]
    fn deadline_returns_to_idle() {
        let mut f = fob();
        f.press_button(Button::Lock, 100).unwrap();
        f.tick(599);
        assert_eq!(f.state().name(), "WAIT_CHALLENGE");
        f.tick(600);
        assert_eq!(f.state(), &FobState::Idle);
    }

    #[test]
    fn ping_reply_only_for_own_id() {
        let mut f = fob();
        assert!(f.handle_frame(&frame(Message::Ping(CarKeyId::new(8))), 0).is_empty());
        let out = f.handle_frame(&frame(Message::Ping(CarKeyId::new(7))), 0);
        assert_eq!(out.frames, vec![frame(Message::PingReply(CarKeyId::new(7)))]);
    }

    #[test]
    fn commit_requires_every_block() {
        let mut f = fob();
        let old = f.table().clone();
        for b in 0..19u16 {
            let r = f.handle_prog(&Message::ProgWrite { block: b, values: vec![5; 100] }, true);
            assert_eq!(r, Some(Message::ProgAck(b)));
        }
        assert_eq!(
            f.handle_prog(&Message::ProgCommit { generation: 1 }, true),
            Some(Message::ProgNack(PROG_CONTROL_SEQ))
        );
        assert_eq!(f.table(), &old);
        assert_eq!(
            f.handle_prog(&Message::ProgWrite { block: 19, values: vec![5; 100] }, false),
            Some(Message::ProgNack(19))
        );
        f.handle_prog(&Message::ProgWrite { block: 19, values: vec![5; 100] }, true);
        assert_eq!(
            f.handle_prog(&Message::ProgCommit { generation: 1 }, true),
            Some(Message::ProgAck(PROG_CONTROL_SEQ))
        );
        assert_eq!(f.table().values(), &[5; TABLE_LEN]);
        assert_eq!(f.table().generation(), 1);
        assert!(!f.has_staged_writes());
    }
}
