use serde_json::json;

use super::{add_radio, AttackKind, AttackOutcome};
use crate::channel::{Input, RelayTap};
use crate::devices::Millis;
use crate::testbed::{Testbed, TestbedConfig};
use crate::wire::Button;

pub const DEFAULT_RELAY_DELAY_MS: Millis = 20;

/// Two thieves: one next to the car pulls the door handle, one next to the
/// owner forwards whatever each side transmits. With `victim_presses` the
/// owner also presses UNLOCK during the attack window.
pub fn relay_attack(
    config: TestbedConfig,
    relay_delay: Millis,
    victim_presses: bool,
    text_trace: bool,
) -> (AttackOutcome, Testbed) {
    let mut tb = Testbed::new(config, false, text_trace);
    let at_car = add_radio(&mut tb, "relay_car", true);
    let at_owner = add_radio(&mut tb, "relay_owner", false);
    let ours = vec![at_car, at_owner];
    let to_owner = tb
        .sim
        .add_tap(tb.near_car, RelayTap::new(at_owner, ours.clone(), relay_delay));
    let to_car = tb
        .sim
        .add_tap(tb.near_owner, RelayTap::new(at_car, ours, relay_delay));

    let start: Millis = 1_000;
    tb.sim.schedule(start, tb.car, Input::HandlePull);
    if victim_presses {
        tb.sim.schedule(start, tb.fob, Input::Button(Button::Unlock));
    }
    tb.sim.run_until(start + 2_000 + 4 * relay_delay);

    let forwarded = tb.sim.tap::<RelayTap>(to_owner).forwarded + tb.sim.tap::<RelayTap>(to_car).forwarded;
    let mut outcome = AttackOutcome::from_testbed(&tb, AttackKind::Relay, 1);
    outcome.detail = json!({
        "relay_delay_ms": relay_delay,
        "victim_pressed": victim_presses,
        "frames_forwarded": forwarded,
    });
    (outcome, tb)
}
