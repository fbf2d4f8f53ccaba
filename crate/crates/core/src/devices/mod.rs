//! Key-fob and car-transceiver state machines.
//!
//! Devices never touch the channel. Every entry point takes the current
//! simulated time and returns the frames to transmit (and, for the car, the
//! actuator events it fired).

mod car;
mod fob;

pub use car::{CarState, CarTransceiver, JamDefense, VehicleEvent};
pub use fob::{FobState, KeyFob, PROG_CONTROL_SEQ};

use serde::{Deserialize, Serialize};

use crate::wire::{Frame, Message};

/// Simulated milliseconds.
pub type Millis = u64;

/// Protocol timeouts and policy windows, all in simulated milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    /// Fob waiting for CHALLENGE after announcing its id.
    pub challenge_ms: Millis,
    /// Car waiting for AUTH_RESPONSE after sending CHALLENGE.
    pub response_ms: Millis,
    /// Fob waiting for AUTH_OK.
    pub auth_ok_ms: Millis,
    /// Car waiting for COMMAND after AUTH_OK.
    pub command_ms: Millis,
    /// Either side waiting for the next step of the engine-start exchange.
    pub start_ms: Millis,
    /// Silence tolerated after the door closes before the car honks.
    pub jam_ms: Millis,
    /// Delay between the first honk and the automatic lock.
    pub autolock_ms: Millis,
    pub ping_ms: Millis,
    pub honk_spacing_ms: Millis,
    pub block_ms: Millis,
    /// Window in which three wrong authentication messages trigger a block.
    pub fail_window_ms: Millis,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            challenge_ms: 500,
            response_ms: 500,
            auth_ok_ms: 500,
            command_ms: 500,
            start_ms: 500,
            jam_ms: 10_000,
            autolock_ms: 10_000,
            ping_ms: 2_000,
            honk_spacing_ms: 500,
            block_ms: 180_000,
            fail_window_ms: 60_000,
        }
    }
}

pub const HONK_COUNT: u32 = 5;
pub const FAILURES_BEFORE_BLOCK: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActuatorKind {
    LockDoors,
    UnlockDoors,
    OpenBoot,
    StartEngine,
    Honk,
}

impl ActuatorKind {
    pub const ALL: [ActuatorKind; 5] = [
        ActuatorKind::LockDoors,
        ActuatorKind::UnlockDoors,
        ActuatorKind::OpenBoot,
        ActuatorKind::StartEngine,
        ActuatorKind::Honk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActuatorKind::LockDoors => "LOCK_DOORS",
            ActuatorKind::UnlockDoors => "UNLOCK_DOORS",
            ActuatorKind::OpenBoot => "OPEN_BOOT",
            ActuatorKind::StartEngine => "START_ENGINE",
            ActuatorKind::Honk => "HONK",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ActuatorKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActuatorEvent {
    pub kind: ActuatorKind,
    pub at: Millis,
}

/// What a device wants done after handling one input.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DeviceOutput {
    pub frames: Vec<Frame>,
    pub actuators: Vec<ActuatorEvent>,
}

impl DeviceOutput {
    pub(crate) fn send(&mut self, msg: Message) {
        self.frames
            .push(msg.to_frame().expect("device messages are schema-valid"));
    }

    pub(crate) fn actuate(&mut self, kind: ActuatorKind, at: Millis) {
        self.actuators.push(ActuatorEvent { kind, at });
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty() && self.actuators.is_empty()
    }
}

/// Returned when a button is pressed while a transaction is in flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("fob is busy with another transaction")]
pub struct Busy;
