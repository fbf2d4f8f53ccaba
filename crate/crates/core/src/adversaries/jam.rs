use serde::Serialize;
use serde_json::json;

use super::{AttackKind, AttackOutcome};
use crate::baselines::Technique;
use crate::channel::Input;
use crate::devices::{ActuatorKind, Millis, VehicleEvent};
use crate::testbed::{Testbed, TestbedConfig, CAR};
use crate::wire::Button;

/// Timeline of the parking scenario, relative to the door closing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct JamPlan {
    pub t_motor_off: Millis,
    pub t_door_open: Millis,
    pub t_door_close: Millis,
    /// The owner presses LOCK this long after closing the door.
    pub lock_press_after: Millis,
    /// Jammer active over `[t_door_close + start, t_door_close + end]`.
    pub jam_start_after: Millis,
    pub jam_end_after: Millis,
    /// How long after the door closes the run continues.
    pub observe_for: Millis,
}

impl Default for JamPlan {
    fn default() -> Self {
        JamPlan {
            t_motor_off: 1_000,
            t_door_open: 2_000,
            t_door_close: 3_000,
            lock_press_after: 500,
            jam_start_after: 0,
            jam_end_after: 30_000,
            observe_for: 60_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct JamReport {
    pub t_door_close: Millis,
    pub honks: Vec<Millis>,
    pub locks: Vec<Millis>,
    pub door_locked_at_end: bool,
}

/// The driver parks, walks away and presses LOCK while a jammer near the
/// car suppresses every frame. The attack succeeds if the doors are still
/// unlocked when the thief tries them.
pub fn jam_attack(
    mut config: TestbedConfig,
    plan: JamPlan,
    text_trace: bool,
) -> (AttackOutcome, JamReport, Testbed) {
    config.technique = Technique::Proposed;
    config.driver_on_board = true;
    let mut tb = Testbed::new(config, true, text_trace);
    let close = plan.t_door_close;
    tb.sim.add_jam_window(
        tb.near_car,
        close + plan.jam_start_after,
        close + plan.jam_end_after,
    );
    tb.sim.schedule(plan.t_motor_off, tb.car, Input::Vehicle(VehicleEvent::MotorOff));
    tb.sim.schedule(plan.t_door_open, tb.car, Input::Vehicle(VehicleEvent::DoorOpened));
    tb.sim.schedule(close, tb.car, Input::Vehicle(VehicleEvent::DoorClosed));
    tb.sim.schedule(close + plan.lock_press_after, tb.fob, Input::Button(Button::Lock));
    tb.sim.run_until(close + plan.observe_for);

    let acts = tb.sim.actuations();
    let report = JamReport {
        t_door_close: close,
        honks: acts
            .iter()
            .filter(|a| a.kind == ActuatorKind::Honk)
            .map(|a| a.at)
            .collect(),
        locks: acts
            .iter()
            .filter(|a| a.kind == ActuatorKind::LockDoors)
            .map(|a| a.at)
            .collect(),
        // Judged from the trace: the car starts unlocked with the driver inside.
        door_locked_at_end: tb.auditor().door_locked(CAR) == Some(true),
    };
    let mut outcome = AttackOutcome::from_testbed(&tb, AttackKind::Jam, 1);
    outcome.succeeded = !report.door_locked_at_end;
    outcome.successes = u64::from(outcome.succeeded);
    outcome.detail = json!({
        "defense_enabled": config.jam_defense,
        "jam_window": [close + plan.jam_start_after, close + plan.jam_end_after],
    });
    (outcome, report, tb)
}
