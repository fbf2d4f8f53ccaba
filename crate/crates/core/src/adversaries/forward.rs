use serde_json::json;

use super::predictor::{predict_next_challenge, predict_next_wide};
use super::{add_radio, eavesdrop_session, exchange, hear, AttackKind, AttackOutcome};
use crate::baselines::{draw_bits, Technique};
use crate::channel::{Input, Recorder};
use crate::testbed::{Testbed, TestbedConfig};
use crate::wire::{Button, Message};

/// Observe, predict, harvest, replay.
///
/// The attacker keeps one radio next to the car and one next to the owner.
/// It probes the car for `n_observe` challenges, forecasts the next one,
/// gets the owner's credential to answer the forecast and finally plays
/// that answer to the car. Against the table protocol the harvest needs the
/// owner to press a button while away from the car.
pub fn forward_prediction_attack(
    config: TestbedConfig,
    n_observe: usize,
    text_trace: bool,
) -> (AttackOutcome, Testbed) {
    let mut tb = Testbed::new(config, true, text_trace);
    let settle_ms = config.timing.response_ms + 1;
    let mut detail = json!({ "observed": n_observe });
    let mut attempts = 0;

    match config.technique {
        Technique::Proposed => {
            let announce = eavesdrop_session(&mut tb)
                .into_iter()
                .find(|m| matches!(m, Message::IdAnnounce(_)));
            tb.move_owner(false);
            let at_car = add_radio(&mut tb, "car_side", true);
            let at_owner = add_radio(&mut tb, "owner_side", false);
            if let Some(announce) = announce {
                let mut observed = Vec::new();
                for _ in 0..n_observe {
                    let heard = exchange(&mut tb, at_car, announce.clone(), 2);
                    observed.extend(heard.iter().filter_map(|m| match m {
                        Message::Challenge(c) => Some(*c),
                        _ => None,
                    }));
                    tb.sim.run_for(settle_ms);
                }
                let (predicted, recovered) = match predict_next_challenge(&observed, &config.params) {
                    Ok(c) => (Some(c), true),
                    Err(_) => (observed.last().copied(), false),
                };
                detail["predictor_recovered_state"] = json!(recovered);

                // Harvest: the owner presses a button far from the car.
                let now = tb.sim.now();
                tb.sim.schedule(now, tb.fob, Input::Button(Button::Unlock));
                tb.sim.run_for(1);
                let owner_announced = hear(&mut tb, at_owner)
                    .iter()
                    .any(|m| matches!(m, Message::IdAnnounce(_)));
                let harvested = match (owner_announced, predicted) {
                    (true, Some(c)) => exchange(&mut tb, at_owner, Message::Challenge(c), 2)
                        .into_iter()
                        .find_map(|m| match m {
                            Message::AuthResponse(a) => Some(a),
                            _ => None,
                        }),
                    _ => None,
                };
                tb.sim.run_for(settle_ms);

                if let Some(response) = harvested {
                    attempts = 1;
                    let heard = exchange(&mut tb, at_car, announce, 2);
                    let actual = heard.iter().find_map(|m| match m {
                        Message::Challenge(c) => Some(*c),
                        _ => None,
                    });
                    detail["prediction_correct"] = json!(actual.is_some() && actual == predicted);
                    let heard = exchange(&mut tb, at_car, Message::AuthResponse(response), 2);
                    if heard.contains(&Message::AuthOk) {
                        exchange(&mut tb, at_car, Message::Command(Button::Unlock), 2);
                    }
                }
            }
        }
        Technique::Fixed | Technique::Rolling => {
            let tap = tb.sim.add_tap(tb.near_car, Recorder::new(false));
            for _ in 0..n_observe {
                tb.owner_session(Button::Unlock);
            }
            let seen: Vec<Message> = tb
                .sim
                .tap::<Recorder>(tap)
                .frames
                .iter()
                .map(|(_, _, f)| Message::from(f))
                .collect();
            tb.move_owner(false);
            let adv = add_radio(&mut tb, "predictor", true);
            // A fixed code predicts itself. A rolling code's next value is
            // the encryption of a known counter under an unknown key, so
            // the best forecast is a guess.
            let guess = if config.technique == Technique::Fixed {
                seen.last().cloned()
            } else {
                let mut rng = config.adversary_entropy();
                Some(Message::RollingCode(draw_bits(&mut rng, config.rolling_bits)))
            };
            if let Some(g) = guess {
                attempts = 1;
                exchange(&mut tb, adv, g, 1);
            }
        }
        Technique::PassiveCr => {
            tb.move_owner(false);
            let at_car = add_radio(&mut tb, "car_side", true);
            let at_owner = add_radio(&mut tb, "owner_side", false);
            let bits = config.cr_bits;
            let mut observed = Vec::new();
            for _ in 0..n_observe {
                let now = tb.sim.now();
                tb.sim.schedule(now, tb.car, Input::HandlePull);
                tb.sim.run_for(1);
                observed.extend(hear(&mut tb, at_car).iter().filter_map(|m| match m {
                    Message::CrChallenge(c) => Some(*c),
                    _ => None,
                }));
                tb.sim.run_for(settle_ms);
            }
            let (predicted, recovered) = match predict_next_wide(&observed, bits) {
                Ok(c) => (Some(c), true),
                Err(_) => (observed.last().copied(), false),
            };
            detail["predictor_recovered_state"] = json!(recovered);
            // The CID answers whoever asks; no owner action needed.
            let harvested = predicted.and_then(|c| {
                exchange(&mut tb, at_owner, Message::CrChallenge(c), 2)
                    .into_iter()
                    .find_map(|m| match m {
                        Message::CrResponse(r) => Some(r),
                        _ => None,
                    })
            });
            if let Some(r) = harvested {
                attempts = 1;
                let now = tb.sim.now();
                tb.sim.schedule(now, tb.car, Input::HandlePull);
                tb.sim.run_for(1);
                let actual = hear(&mut tb, at_car).iter().find_map(|m| match m {
                    Message::CrChallenge(c) => Some(*c),
                    _ => None,
                });
                detail["prediction_correct"] = json!(actual.is_some() && actual == predicted);
                exchange(&mut tb, at_car, Message::CrResponse(r), 1);
            }
        }
    }
    tb.settle();
    let mut outcome = AttackOutcome::from_testbed(&tb, AttackKind::ForwardPrediction, attempts);
    outcome.detail = detail;
    (outcome, tb)
}
