use serde_json::json;

use super::{add_radio, eavesdrop_session, exchange, AttackKind, AttackOutcome};
use crate::authcrypt::AuthMessage;
use crate::baselines::{draw_bits, Technique};
use crate::channel::Input;
use crate::devices::Millis;
use crate::testbed::{Testbed, TestbedConfig};
use crate::wire::{Button, Message};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanPlan {
    /// Guesses to submit.
    pub budget: u64,
    /// Wait before probing again when the car does not answer (e.g. blocked).
    pub probe_ms: Millis,
    /// Give up after this much simulated time, if set.
    pub max_elapsed: Option<Millis>,
}

impl ScanPlan {
    pub fn new(budget: u64) -> Self {
        ScanPlan {
            budget,
            probe_ms: 1_000,
            max_elapsed: None,
        }
    }
}

/// Online guessing. Against the table protocol the attacker first learns the
/// car id by listening to one legitimate session, then answers every
/// challenge with a uniformly random authentication message.
pub fn scan_attack(config: TestbedConfig, plan: ScanPlan, text_trace: bool) -> (AttackOutcome, Testbed) {
    let mut tb = Testbed::new(config, true, text_trace);
    let announce = if config.technique == Technique::Proposed {
        eavesdrop_session(&mut tb)
            .into_iter()
            .find(|m| matches!(m, Message::IdAnnounce(_)))
    } else {
        None
    };
    tb.move_owner(false);
    let adv = add_radio(&mut tb, "scanner", true);
    let mut rng = config.adversary_entropy();
    let start = tb.sim.now();
    let mut attempts = 0u64;
    let mut unanswered = 0u64;

    while attempts < plan.budget {
        if matches!(plan.max_elapsed, Some(max) if tb.sim.now() - start >= max) {
            break;
        }
        match config.technique {
            Technique::Proposed => {
                let Some(announce) = announce.clone() else { break };
                let heard = exchange(&mut tb, adv, announce, 2);
                if !heard.iter().any(|m| matches!(m, Message::Challenge(_))) {
                    unanswered += 1;
                    tb.sim.run_for(plan.probe_ms);
                    continue;
                }
                attempts += 1;
                let guess = AuthMessage::random(&mut rng, &config.params);
                let heard = exchange(&mut tb, adv, Message::AuthResponse(guess), 2);
                if heard.contains(&Message::AuthOk) {
                    exchange(&mut tb, adv, Message::Command(Button::Unlock), 2);
                }
            }
            Technique::Fixed => {
                attempts += 1;
                let guess = draw_bits(&mut rng, config.fixed_bits);
                exchange(&mut tb, adv, Message::FixedCode(guess), 1);
            }
            Technique::Rolling => {
                attempts += 1;
                let guess = draw_bits(&mut rng, config.rolling_bits);
                exchange(&mut tb, adv, Message::RollingCode(guess), 1);
            }
            Technique::PassiveCr => {
                let now = tb.sim.now();
                tb.sim.schedule(now, tb.car, Input::HandlePull);
                tb.sim.run_for(1);
                let heard = super::hear(&mut tb, adv);
                if !heard.iter().any(|m| matches!(m, Message::CrChallenge(_))) {
                    unanswered += 1;
                    tb.sim.run_for(plan.probe_ms);
                    continue;
                }
                attempts += 1;
                let guess = draw_bits(&mut rng, config.cr_bits);
                exchange(&mut tb, adv, Message::CrResponse(guess), 1);
            }
        }
    }
    tb.settle();
    let mut outcome = AttackOutcome::from_testbed(&tb, AttackKind::Scan, attempts);
    outcome.detail = json!({ "unanswered_probes": unanswered });
    (outcome, tb)
}
