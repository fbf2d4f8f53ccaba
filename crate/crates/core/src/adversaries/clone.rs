use serde::Serialize;

use crate::audit::{AuditConfig, Auditor};
use crate::channel::{Input, Simulator, DEFAULT_PROPAGATION_MS};
use crate::devices::{ActuatorKind, CarTransceiver, KeyFob};
use crate::keystore::{KeyTable, StrongSource};
use crate::provisioning::{BoardComputer, ExchangeOutcome, FaultPlan};
use crate::testbed::{derive_seed, TestbedConfig};
use crate::wire::Button;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CloneReport {
    pub clone_unlocked_before: bool,
    pub exchange: ExchangeOutcome,
    pub clone_unlocked_after: bool,
    pub owner_unlocked_after: bool,
}

fn unlocks(car_table: &KeyTable, fob_table: &KeyTable, config: &TestbedConfig, name: &str, seed: u64) -> bool {
    let mut sim = Simulator::new();
    let audit = sim.add_sink(Auditor::new(AuditConfig::new(&config.timing, config.lockout)));
    let ch = sim.add_channel("near_car", DEFAULT_PROPAGATION_MS);
    let id = config.car_id();
    let car = CarTransceiver::new(id, car_table.clone(), Box::new(StrongSource::from_seed(seed)));
    let fob = KeyFob::new(id, fob_table.clone(), Box::new(StrongSource::from_seed(seed + 1)));
    sim.add_node("car", ch, car);
    let f = sim.add_node(name, ch, fob);
    sim.schedule(0, f, Input::Button(Button::Unlock));
    sim.run_until(1_000);
    let auditor: &Auditor = sim.sink(audit);
    auditor
        .attributions()
        .iter()
        .any(|a| a.actuator == ActuatorKind::UnlockDoors)
}

/// A diagnostic-port tool copies a fob's table during a test drive. The
/// copy works until the owner re-programs the fobs.
pub fn obd_clone_demo(config: TestbedConfig, password: &str) -> CloneReport {
    let id = config.car_id();
    let table = config.table();
    let mut board = BoardComputer::new(id, table.clone(), password);
    let fob_entropy = |tag| Box::new(StrongSource::from_seed(derive_seed(config.seed, tag)));
    let mut fob_a = KeyFob::new(id, table.clone(), fob_entropy(10));
    let mut fob_b = KeyFob::new(id, table, fob_entropy(11));
    let cloned = fob_a.table().clone();

    let clone_unlocked_before = unlocks(board.table(), &cloned, &config, "adv.clone", 20);

    let exchange = board
        .begin_programming(password, [true, true])
        .and_then(|_| {
            let mut rng = StrongSource::from_seed(derive_seed(config.seed, 12));
            board.run_key_exchange([&mut fob_a, &mut fob_b], &mut rng, &FaultPlan::none())
        })
        .map(|r| r.outcome)
        .unwrap_or(ExchangeOutcome::Aborted { failed_fob: 0 });

    CloneReport {
        clone_unlocked_before,
        exchange,
        clone_unlocked_after: unlocks(board.table(), &cloned, &config, "adv.clone", 30),
        owner_unlocked_after: unlocks(board.table(), fob_a.table(), &config, "fob", 40),
    }
}
