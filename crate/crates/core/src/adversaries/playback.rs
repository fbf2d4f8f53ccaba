use std::collections::HashMap;

use serde_json::json;

use super::{add_radio, exchange, hear, AttackKind, AttackOutcome};
use crate::authcrypt::{AuthMessage, Challenge};
use crate::baselines::Technique;
use crate::channel::{Input, Recorder};
use crate::testbed::{Testbed, TestbedConfig};
use crate::wire::{Button, Message};

/// What the attacker captured from legitimate sessions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Recording {
    pub announce: Option<Message>,
    /// Challenge/response pairs, oldest first.
    pub pairs: Vec<(Challenge, AuthMessage)>,
    /// Fixed or rolling codes, oldest first.
    pub codes: Vec<Message>,
    /// Passive challenge-response pairs, oldest first.
    pub cr_pairs: Vec<(u32, u32)>,
}

impl Recording {
    fn from_air(frames: impl Iterator<Item = Message>) -> Self {
        let mut r = Recording::default();
        let mut challenge = None;
        let mut cr_challenge = None;
        for m in frames {
            match m {
                Message::IdAnnounce(_) => r.announce = Some(m),
                Message::Challenge(c) => challenge = Some(c),
                Message::AuthResponse(a) => {
                    if let Some(c) = challenge.take() {
                        r.pairs.push((c, a));
                    }
                }
                Message::FixedCode(_) | Message::RollingCode(_) => r.codes.push(m),
                Message::CrChallenge(c) => cr_challenge = Some(c),
                Message::CrResponse(v) => {
                    if let Some(c) = cr_challenge.take() {
                        r.cr_pairs.push((c, v));
                    }
                }
                _ => {}
            }
        }
        r
    }

    /// The response the attacker plays for a fresh challenge: the recorded
    /// one for the same challenge if any, else the most recent recording.
    pub fn response_for(&self, fresh: &Challenge) -> Option<AuthMessage> {
        self.pairs
            .iter()
            .rev()
            .find(|(c, _)| c == fresh)
            .or(self.pairs.last())
            .map(|&(_, a)| a)
    }
}

/// Records `n_record` legitimate sessions, sends the owner away and replays
/// captured material `n_replay` times.
pub fn playback_attack(
    config: TestbedConfig,
    n_record: usize,
    n_replay: u64,
    text_trace: bool,
) -> (AttackOutcome, Testbed, Recording) {
    let mut tb = Testbed::new(config, true, text_trace);
    let tap = tb.sim.add_tap(tb.near_car, Recorder::new(false));
    for _ in 0..n_record {
        tb.owner_session(Button::Unlock);
    }
    let recorder = tb.sim.tap_mut::<Recorder>(tap);
    recorder.active = false;
    let recording = Recording::from_air(
        std::mem::take(&mut recorder.frames)
            .into_iter()
            .map(|(_, _, f)| Message::from(&f)),
    );
    tb.move_owner(false);
    let adv = add_radio(&mut tb, "replayer", true);

    let cr_lookup: HashMap<u32, u32> = recording.cr_pairs.iter().copied().collect();
    let mut attempts = 0u64;
    let mut fresh_matches = 0u64;
    let mut unanswered = 0u64;
    while attempts < n_replay {
        match config.technique {
            Technique::Proposed => {
                let (Some(announce), false) = (recording.announce.clone(), recording.pairs.is_empty())
                else {
                    break;
                };
                let heard = exchange(&mut tb, adv, announce, 2);
                let Some(fresh) = heard.iter().find_map(|m| match m {
                    Message::Challenge(c) => Some(*c),
                    _ => None,
                }) else {
                    unanswered += 1;
                    tb.sim.run_for(1_000);
                    continue;
                };
                attempts += 1;
                if recording.pairs.iter().any(|(c, _)| *c == fresh) {
                    fresh_matches += 1;
                }
                let response = recording.response_for(&fresh).expect("pairs not empty");
                let heard = exchange(&mut tb, adv, Message::AuthResponse(response), 2);
                if heard.contains(&Message::AuthOk) {
                    exchange(&mut tb, adv, Message::Command(Button::Unlock), 2);
                }
            }
            Technique::Fixed | Technique::Rolling => {
                if recording.codes.is_empty() {
                    break;
                }
                let code = recording.codes[attempts as usize % recording.codes.len()].clone();
                attempts += 1;
                exchange(&mut tb, adv, code, 1);
            }
            Technique::PassiveCr => {
                let Some(&(_, latest)) = recording.cr_pairs.last() else { break };
                let now = tb.sim.now();
                tb.sim.schedule(now, tb.car, Input::HandlePull);
                tb.sim.run_for(1);
                let Some(fresh) = hear(&mut tb, adv).iter().find_map(|m| match m {
                    Message::CrChallenge(c) => Some(*c),
                    _ => None,
                }) else {
                    unanswered += 1;
                    tb.sim.run_for(1_000);
                    continue;
                };
                attempts += 1;
                let response = match cr_lookup.get(&fresh) {
                    Some(&r) => {
                        fresh_matches += 1;
                        r
                    }
                    None => latest,
                };
                exchange(&mut tb, adv, Message::CrResponse(response), 1);
            }
        }
    }
    tb.settle();
    let mut outcome = AttackOutcome::from_testbed(&tb, AttackKind::Playback, attempts);
    outcome.detail = json!({
        "recorded_sessions": n_record,
        "fresh_challenge_matches": fresh_matches,
        "unanswered_probes": unanswered,
    });
    (outcome, tb, recording)
}
