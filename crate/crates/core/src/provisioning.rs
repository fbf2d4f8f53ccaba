//! Wired re-keying of both fobs and the board computer.
//!
//! The board streams a fresh table to fob A, then fob B, in 20 PROG_WRITE
//! blocks each. A NACKed block is retried once. Fobs stage incoming blocks and
//! only swap their live table on PROG_COMMIT, so an interrupted stream leaves
//! the old table intact. If fob B cannot be written after fob A committed, fob
//! A is restored to the old table. The board adopts the new table last.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::devices::KeyFob;
use crate::keystore::{CarKeyId, EntropySource, KeyTable, TABLE_LEN};
use crate::wire::{Frame, Message, PROG_BLOCK_VALUES};

pub const BLOCKS_PER_TABLE: u16 = (TABLE_LEN / PROG_BLOCK_VALUES) as u16;
/// Attempts per block: the original write plus one retry.
pub const ATTEMPTS_PER_BLOCK: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProgState {
    Locked,
    Ready,
    VerifyIds,
    Writing { fob_index: usize, block_seq: u16 },
    Committing,
    RollingBack,
    Done,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WritePhase {
    /// Streaming the new table.
    Program,
    /// Re-writing the old table onto a fob that already took the new one.
    Restore,
}

/// One scheduled EEPROM write failure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FaultKey {
    pub fob: usize,
    pub phase: WritePhase,
    pub block: u16,
    /// 1 for the first write of the block, 2 for its retry.
    pub attempt: u8,
}

/// Deterministic write-failure schedule; unlisted writes succeed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    failures: BTreeSet<FaultKey>,
}

impl FaultPlan {
    pub fn none() -> Self {
        FaultPlan::default()
    }

    pub fn fail(mut self, fob: usize, phase: WritePhase, block: u16, attempt: u8) -> Self {
        self.failures.insert(FaultKey {
            fob,
            phase,
            block,
            attempt,
        });
        self
    }

    /// Fails both attempts of one block.
    pub fn fail_block(self, fob: usize, phase: WritePhase, block: u16) -> Self {
        self.fail(fob, phase, block, 1).fail(fob, phase, block, 2)
    }

    /// Each (fob, phase, block, attempt) fails independently with `p`.
    pub fn random(seed: u64, p: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failures = BTreeSet::new();
        for fob in 0..2 {
            for phase in [WritePhase::Program, WritePhase::Restore] {
                for block in 0..BLOCKS_PER_TABLE {
                    for attempt in 1..=ATTEMPTS_PER_BLOCK {
                        if rng.random_bool(p) {
                            failures.insert(FaultKey {
                                fob,
                                phase,
                                block,
                                attempt,
                            });
                        }
                    }
                }
            }
        }
        FaultPlan { failures }
    }

    pub fn fails(&self, key: &FaultKey) -> bool {
        self.failures.contains(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &FaultKey> {
        self.failures.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExchangeOutcome {
    Done,
    /// The first fob could not be written; nothing changed.
    Aborted { failed_fob: usize },
    /// The second fob failed; the first was restored to the old table.
    RolledBack { failed_fob: usize, restored_fob: usize },
    /// Restoring the first fob failed too; it holds a table nobody else has.
    Inconsistent { failed_fob: usize, divergent_fob: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Direction {
    ToFob,
    FromFob,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TranscriptEntry {
    Wired {
        port: usize,
        direction: Direction,
        frame: Frame,
    },
    BoardTableWritten {
        generation: u32,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExchangeReport {
    pub outcome: ExchangeOutcome,
    pub old_generation: u32,
    pub new_generation: u32,
    pub blocks_sent: u32,
    pub retries: u32,
    pub transcript: Vec<TranscriptEntry>,
}

impl ExchangeReport {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "outcome": self.outcome,
            "old_generation": self.old_generation,
            "new_generation": self.new_generation,
            "blocks_sent": self.blocks_sent,
            "retries": self.retries,
            "transcript_len": self.transcript.len(),
        })
    }

    /// Transcript in trace-line form, one wired message per millisecond.
    pub fn trace_lines(&self) -> Vec<String> {
        self.transcript
            .iter()
            .enumerate()
            .map(|(t, e)| match e {
                TranscriptEntry::Wired {
                    port,
                    direction: Direction::ToFob,
                    frame,
                } => format!("{t} TX board->port{port} {}", hex::encode(frame.encode())),
                TranscriptEntry::Wired {
                    port,
                    direction: Direction::FromFob,
                    frame,
                } => format!("{t} RX board<-port{port} {}", hex::encode(frame.encode())),
                TranscriptEntry::BoardTableWritten { .. } => format!("{t} STATE board TABLE_WRITTEN"),
            })
            .collect()
    }
}

/// Where the three table holders ended up relative to the old table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TableSet {
    AllOld,
    AllNew,
    Divergent,
}

pub fn classify_tables(old: &KeyTable, board: &KeyTable, fobs: [&KeyTable; 2]) -> TableSet {
    if fobs.iter().all(|t| *t == board) {
        if board == old {
            TableSet::AllOld
        } else {
            TableSet::AllNew
        }
    } else {
        TableSet::Divergent
    }
}

impl ExchangeOutcome {
    /// The table state this outcome promises.
    pub fn expected_tables(&self) -> TableSet {
        match self {
            ExchangeOutcome::Done => TableSet::AllNew,
            ExchangeOutcome::Aborted { .. } | ExchangeOutcome::RolledBack { .. } => TableSet::AllOld,
            ExchangeOutcome::Inconsistent { .. } => TableSet::Divergent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProvisionError {
    #[error("wrong board computer password")]
    WrongPassword,
    #[error("fob port {0} is empty")]
    PortEmpty(usize),
    #[error("programming not unlocked (state {0:?})")]
    NotReady(ProgState),
    #[error("fob on port {port} reports car key id {got}, expected {expected}")]
    IdMismatch {
        port: usize,
        got: CarKeyId,
        expected: CarKeyId,
    },
    #[error("key exchange failed: {:?}", .0.outcome)]
    ExchangeFailed(Box<ExchangeReport>),
}

/// Board computer with two wired fob ports.
#[derive(Debug)]
pub struct BoardComputer {
    id: CarKeyId,
    table: KeyTable,
    password: String,
    prog_state: ProgState,
}

impl BoardComputer {
    pub fn new(id: CarKeyId, table: KeyTable, password: impl Into<String>) -> Self {
        BoardComputer {
            id,
            table,
            password: password.into(),
            prog_state: ProgState::Locked,
        }
    }

    pub fn id(&self) -> CarKeyId {
        self.id
    }

    pub fn table(&self) -> &KeyTable {
        &self.table
    }

    pub fn prog_state(&self) -> ProgState {
        self.prog_state
    }

    /// Unlocks the programming button. `connected` says which ports hold a fob.
    pub fn begin_programming(
        &mut self,
        password_attempt: &str,
        connected: [bool; 2],
    ) -> Result<ProgState, ProvisionError> {
        if password_attempt != self.password {
            self.prog_state = ProgState::Locked;
            return Err(ProvisionError::WrongPassword);
        }
        if let Some(port) = connected.iter().position(|&c| !c) {
            self.prog_state = ProgState::Locked;
            return Err(ProvisionError::PortEmpty(port));
        }
        self.prog_state = ProgState::Ready;
        Ok(self.prog_state)
    }

    pub fn run_key_exchange(
        &mut self,
        fobs: [&mut KeyFob; 2],
        entropy: &mut dyn EntropySource,
        faults: &FaultPlan,
    ) -> Result<ExchangeReport, ProvisionError> {
        if self.prog_state != ProgState::Ready {
            return Err(ProvisionError::NotReady(self.prog_state));
        }
        let [fob_a, fob_b] = fobs;
        let old_generation = self.table.generation();
        let mut link = Link {
            transcript: Vec::new(),
            blocks_sent: 0,
            retries: 0,
        };

        self.prog_state = ProgState::VerifyIds;
        for (port, fob) in [(0, &mut *fob_a), (1, &mut *fob_b)] {
            let reply = link.exchange(port, fob, Message::ProgIdRequest, true);
            let got = match reply {
                Some(Message::ProgIdResponse(id)) => id,
                _ => CarKeyId::new(0),
            };
            if got != self.id {
                self.prog_state = ProgState::Failed;
                return Err(ProvisionError::IdMismatch {
                    port,
                    got,
                    expected: self.id,
                });
            }
        }

        let mut new_table = KeyTable::generate(entropy);
        let new_generation = old_generation.wrapping_add(1);
        new_table.set_generation(new_generation);

        let finish = |link: Link, outcome| ExchangeReport {
            outcome,
            old_generation,
            new_generation,
            blocks_sent: link.blocks_sent,
            retries: link.retries,
            transcript: link.transcript,
        };

        if !link.write_table(0, fob_a, &new_table, WritePhase::Program, faults, &mut self.prog_state) {
            self.prog_state = ProgState::Failed;
            let report = finish(link, ExchangeOutcome::Aborted { failed_fob: 0 });
            return Err(ProvisionError::ExchangeFailed(Box::new(report)));
        }
        if !link.write_table(1, fob_b, &new_table, WritePhase::Program, faults, &mut self.prog_state) {
            self.prog_state = ProgState::RollingBack;
            let restored =
                link.write_table(0, fob_a, &self.table, WritePhase::Restore, faults, &mut self.prog_state);
            self.prog_state = ProgState::Failed;
            let outcome = if restored {
                ExchangeOutcome::RolledBack {
                    failed_fob: 1,
                    restored_fob: 0,
                }
            } else {
                ExchangeOutcome::Inconsistent {
                    failed_fob: 1,
                    divergent_fob: 0,
                }
            };
            return Err(ProvisionError::ExchangeFailed(Box::new(finish(link, outcome))));
        }

        self.table = new_table;
        link.transcript.push(TranscriptEntry::BoardTableWritten {
            generation: new_generation,
        });
        self.prog_state = ProgState::Done;
        Ok(finish(link, ExchangeOutcome::Done))
    }
}

struct Link {
    transcript: Vec<TranscriptEntry>,
    blocks_sent: u32,
    retries: u32,
}

impl Link {
    fn exchange(
        &mut self,
        port: usize,
        fob: &mut KeyFob,
        msg: Message,
        write_ok: bool,
    ) -> Option<Message> {
        let frame = msg.to_frame().expect("provisioning messages are schema-valid");
        self.transcript.push(TranscriptEntry::Wired {
            port,
            direction: Direction::ToFob,
            frame,
        });
        let reply = fob.handle_prog(&msg, write_ok)?;
        self.transcript.push(TranscriptEntry::Wired {
            port,
            direction: Direction::FromFob,
            frame: reply.to_frame().expect("fob replies are schema-valid"),
        });
        Some(reply)
    }

    /// Streams `table` to one fob and commits it. Returns false if a block
    /// failed twice or the commit was refused; staged writes are discarded.
    fn write_table(
        &mut self,
        port: usize,
        fob: &mut KeyFob,
        table: &KeyTable,
        phase: WritePhase,
        faults: &FaultPlan,
        state: &mut ProgState,
    ) -> bool {
        for block in 0..BLOCKS_PER_TABLE {
            *state = ProgState::Writing {
                fob_index: port,
                block_seq: block,
            };
            let start = block as usize * PROG_BLOCK_VALUES;
            let values = table.values()[start..start + PROG_BLOCK_VALUES].to_vec();
            let mut written = false;
            for attempt in 1..=ATTEMPTS_PER_BLOCK {
                if attempt > 1 {
                    self.retries += 1;
                }
                self.blocks_sent += 1;
                let key = FaultKey {
                    fob: port,
                    phase,
                    block,
                    attempt,
                };
                let msg = Message::ProgWrite {
                    block,
                    values: values.clone(),
                };
                if self.exchange(port, fob, msg, !faults.fails(&key)) == Some(Message::ProgAck(block))
                {
                    written = true;
                    break;
                }
            }
            if !written {
                self.exchange(port, fob, Message::ProgRollback, true);
                return false;
            }
        }
        *state = ProgState::Committing;
        let reply = self.exchange(
            port,
            fob,
            Message::ProgCommit {
                generation: table.generation(),
            },
            true,
        );
        matches!(reply, Some(Message::ProgAck(_)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keystore::StrongSource;

    const ID: CarKeyId = CarKeyId::new(0xC0FFEE);

    fn setup() -> (BoardComputer, KeyFob, KeyFob) {
        let table = KeyTable::generate(&mut StrongSource::from_seed(1));
        let board = BoardComputer::new(ID, table.clone(), "hunter2");
        let a = KeyFob::new(ID, table.clone(), Box::new(StrongSource::from_seed(2)));
        let b = KeyFob::new(ID, table, Box::new(StrongSource::from_seed(3)));
        (board, a, b)
    }

    fn run(faults: &FaultPlan) -> (BoardComputer, KeyFob, KeyFob, Result<ExchangeReport, ProvisionError>) {
        let (mut board, mut a, mut b) = setup();
        board.begin_programming("hunter2", [true, true]).unwrap();
        let r = board.run_key_exchange([&mut a, &mut b], &mut StrongSource::from_seed(50), faults);
        (board, a, b, r)
    }

    #[test]
    fn password_and_ports() {
        let (mut board, ..) = setup();
        assert_eq!(
            board.begin_programming("nope", [true, true]),
            Err(ProvisionError::WrongPassword)
        );
        assert_eq!(board.prog_state(), ProgState::Locked);
        assert_eq!(
            board.begin_programming("hunter2", [true, false]),
            Err(ProvisionError::PortEmpty(1))
        );
        assert_eq!(board.begin_programming("hunter2", [true, true]), Ok(ProgState::Ready));
    }

    #[test]
    fn exchange_requires_unlock() {
        let (mut board, mut a, mut b) = setup();
        let r = board.run_key_exchange([&mut a, &mut b], &mut StrongSource::from_seed(1), &FaultPlan::none());
        assert_eq!(r, Err(ProvisionError::NotReady(ProgState::Locked)));
    }

    #[test]
    fn happy_path_updates_all_three() {
        let (board, a, b, r) = run(&FaultPlan::none());
        let report = r.unwrap();
        assert_eq!(report.outcome, ExchangeOutcome::Done);
        assert_eq!(board.table(), a.table());
        assert_eq!(board.table(), b.table());
        assert_eq!(board.table().generation(), 1);
        assert_eq!(report.blocks_sent, 40);
        assert_eq!(board.prog_state(), ProgState::Done);
        // board writes its own table only after both fob commits
        assert!(matches!(
            report.transcript.last(),
            Some(TranscriptEntry::BoardTableWritten { generation: 1 })
        ));
    }

    #[test]
    fn single_retry_absorbs_a_fault() {
        let faults = FaultPlan::none().fail(0, WritePhase::Program, 7, 1);
        let (board, a, b, r) = run(&faults);
        let report = r.unwrap();
        assert_eq!(report.retries, 1);
        assert_eq!(board.table(), a.table());
        assert_eq!(board.table(), b.table());
    }

    #[test]
    fn first_fob_failure_aborts_without_changes() {
        let (old_board, ..) = setup();
        let faults = FaultPlan::none().fail_block(0, WritePhase::Program, 3);
        let (board, a, b, r) = run(&faults);
        let Err(ProvisionError::ExchangeFailed(report)) = r else {
            panic!("expected failure")
        };
        assert_eq!(report.outcome, ExchangeOutcome::Aborted { failed_fob: 0 });
        assert_eq!(board.table(), old_board.table());
        assert_eq!(a.table(), old_board.table());
        assert_eq!(b.table(), old_board.table());
        assert!(!a.has_staged_writes());
        assert_eq!(board.prog_state(), ProgState::Failed);
    }

    #[test]
    fn second_fob_failure_rolls_back_the_first() {
        let (old_board, ..) = setup();
        let faults = FaultPlan::none().fail_block(1, WritePhase::Program, 12);
        let (board, a, b, r) = run(&faults);
        let Err(ProvisionError::ExchangeFailed(report)) = r else {
            panic!("expected failure")
        };
        assert_eq!(
            report.outcome,
            ExchangeOutcome::RolledBack {
                failed_fob: 1,
                restored_fob: 0
            }
        );
        assert_eq!(a.table(), old_board.table());
        assert_eq!(a.table().generation(), 0);
        assert_eq!(b.table(), old_board.table());
        assert_eq!(board.table(), old_board.table());
    }

    #[test]
    fn failed_restore_is_reported_inconsistent() {
        let faults = FaultPlan::none()
            .fail_block(1, WritePhase::Program, 0)
            .fail_block(0, WritePhase::Restore, 19);
        let (board, a, _b, r) = run(&faults);
        let Err(ProvisionError::ExchangeFailed(report)) = r else {
            panic!("expected failure")
        };
        assert_eq!(
            report.outcome,
            ExchangeOutcome::Inconsistent {
                failed_fob: 1,
                divergent_fob: 0
            }
        );
        assert_ne!(a.table(), board.table());
        assert_eq!(a.table().generation(), 1);
    }

    #[test]
    fn foreign_fob_is_rejected_before_writing() {
        let (mut board, mut a, _) = setup();
        let mut stranger = KeyFob::new(
            CarKeyId::new(1),
            KeyTable::zeroed(),
            Box::new(StrongSource::from_seed(0)),
        );
        board.begin_programming("hunter2", [true, true]).unwrap();
        let before = a.table().clone();
        let r = board.run_key_exchange([&mut a, &mut stranger], &mut StrongSource::from_seed(1), &FaultPlan::none());
        assert!(matches!(r, Err(ProvisionError::IdMismatch { port: 1, .. })));
        assert_eq!(a.table(), &before);
    }
}
