//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any
//! fails. Runs without the libtest harness so every line is always printed.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use rkesim_core::adversaries::predictor::predict_next_challenge;
use rkesim_core::adversaries::{
    jam_attack, playback_attack, relay_attack, scan_attack, JamPlan, ScanPlan,
    DEFAULT_RELAY_DELAY_MS,
};
use rkesim_core::authcrypt::{combine, generate_challenge, verify_auth_message, Challenge, ProtocolParams};
use rkesim_core::baselines::Technique;
use rkesim_core::channel::{Input, Radio};
use rkesim_core::demo::ProvisionDemo;
use rkesim_core::keystore::{KeyTable, StrongSource, WeakSource};
use rkesim_core::matrix::{run_matrix, MatrixConfig};
use rkesim_core::scenario::Scenario;
use rkesim_core::testbed::{Testbed, TestbedConfig};
use rkesim_core::trace::parse_trace;
use rkesim_core::wire::{Button, Frame, Message, MessageType};

type Verdict = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Verdict {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn within_3_sigma(successes: u64, n: u64, p: f64) -> (bool, f64, f64) {
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    ((successes as f64 - mean).abs() <= 3.0 * sigma, mean, sigma)
}

fn first_err(parts: Vec<Verdict>) -> Verdict {
    let mut oks = Vec::new();
    for p in parts {
        oks.push(p?);
    }
    Ok(oks.join("; "))
}

// 1. Guessing probability at desk scale.
fn guess_probability() -> Verdict {
    // (a) scan at w=4, k=2
    let cfg = TestbedConfig {
        lockout: false,
        params: ProtocolParams::new(4, 2, 2000).unwrap(),
        seed: 101,
        ..TestbedConfig::default()
    };
    let n = 1_000_000;
    let (out, _) = scan_attack(cfg, ScanPlan::new(n), false);
    let (ok, mean, sigma) = within_3_sigma(out.successes, out.attempts, 1.0 / 256.0);
    let a = check(
        ok && out.attempts == n && out.violations.is_empty(),
        format!("scan {}/{} (expected {mean:.0} +- {:.0})", out.successes, out.attempts, 3.0 * sigma),
        format!("scan {}/{} outside {mean:.0} +- {:.0}", out.successes, out.attempts, 3.0 * sigma),
    );

    // (b) exact enumeration at w=4 over an 8-slot table
    let params = ProtocolParams::new(4, 2, 8).unwrap();
    let mut slots;
    let mut exact = true;
    let mut coincident_even_only = true;
    for i in 0..8u16 {
        for j in 0..8u16 {
            let ch = Challenge::from_raw([i, 0, 0, 0, 0, j, 0, 0, 0, 0]);
            let mut counts = [0u32; 16];
            for vi in 0..16u16 {
                for vj in 0..16u16 {
                    slots = [0; 8];
                    slots[i as usize] = vi;
                    slots[j as usize] = vj;
                    counts[combine(&slots, &ch, &params).unwrap().sums()[0] as usize] += 1;
                }
            }
            if i != j {
                exact &= counts.iter().all(|&c| c == 16);
            } else {
                // both halves read one slot: 2*t only reaches even residues
                coincident_even_only &= counts
                    .iter()
                    .enumerate()
                    .all(|(r, &c)| c == if r % 2 == 0 { 32 } else { 0 });
            }
        }
    }
    // joint distribution of both sums over four distinct slots
    let ch = Challenge::from_raw([0, 1, 0, 0, 0, 2, 3, 0, 0, 0]);
    let mut joint = [0u32; 256];
    for v in 0..65_536u32 {
        slots = [0; 8];
        for (k, s) in slots.iter_mut().take(4).enumerate() {
            *s = ((v >> (4 * k)) & 0xF) as u16;
        }
        let m = combine(&slots, &ch, &params).unwrap();
        joint[(m.sums()[0] as usize) << 4 | m.sums()[1] as usize] += 1;
    }
    let joint_exact = joint.iter().all(|&c| c == 256);
    let b = check(
        exact && coincident_even_only && joint_exact,
        "enumeration exact for distinct slots".into(),
        format!("enumeration: distinct {exact}, coincident {coincident_even_only}, joint {joint_exact}"),
    );

    // (c) chi-square at w=16, 1e5 samples in 256 equal bins
    let full = ProtocolParams::FULL;
    let mut bins = [0u64; 256];
    let mut src = StrongSource::from_seed(103);
    for t in 0..100 {
        let table = KeyTable::generate(&mut StrongSource::from_seed(1_000 + t));
        for _ in 0..1_000 {
            let ch = generate_challenge(&mut src, &full);
            let m = combine(table.values(), &ch, &full).unwrap();
            bins[(m.sums()[0] >> 8) as usize] += 1;
        }
    }
    let expected = 100_000.0 / 256.0;
    let stat: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(255.0).unwrap().cdf(stat);
    let c = check(p > 0.001, format!("chi2={stat:.1} p={p:.3}"), format!("chi2={stat:.1} p={p:.5}"));
    first_err(vec![a, b, c])
}

// 2. Playback resistance.
fn playback() -> Verdict {
    let cfg = TestbedConfig {
        lockout: false,
        seed: 201,
        ..TestbedConfig::default()
    };
    let (out, ..) = playback_attack(cfg, 10_000, 10_000, false);
    let a = check(
        out.successes == 0 && out.attempts == 10_000,
        "full scale 0/10000".into(),
        format!("full scale {}/{}", out.successes, out.attempts),
    );

    // toy space: one sum, two indices over [0,7]
    let params = ProtocolParams::new(16, 1, 8).unwrap();
    let cfg = TestbedConfig {
        lockout: false,
        params,
        seed: 202,
        ..TestbedConfig::default()
    };
    let n = 100_000;
    let (out, _, rec) = playback_attack(cfg, 16, n, false);
    // Oracle: try the attacker's answer against all 64 possible fresh challenges.
    let table = cfg.table();
    let mut winning = 0;
    for i in 0..8u16 {
        for j in 0..8u16 {
            let fresh = Challenge::from_raw([i, 0, 0, 0, 0, j, 0, 0, 0, 0]);
            let answer = rec.response_for(&fresh).unwrap();
            if verify_auth_message(&table, &fresh, &answer, &params) {
                winning += 1;
            }
        }
    }
    let p = winning as f64 / 64.0;
    let (ok, mean, sigma) = within_3_sigma(out.successes, out.attempts, p);
    let b = check(
        ok && out.attempts == n,
        format!("toy {}/{} vs oracle {winning}/64 ({mean:.0} +- {:.0})", out.successes, out.attempts, 3.0 * sigma),
        format!("toy {}/{} vs oracle {mean:.0} +- {:.0}", out.successes, out.attempts, 3.0 * sigma),
    );
    first_err(vec![a, b])
}

// 3. Forward prediction.
fn forward_prediction() -> Verdict {
    let params = ProtocolParams::FULL;
    let trials = 1_000;
    let mut hits = 0;
    for seed in 0..trials {
        let mut src = WeakSource::from_seed(seed);
        let observed: Vec<Challenge> = (0..5).map(|_| generate_challenge(&mut src, &params)).collect();
        let next = generate_challenge(&mut src, &params);
        // use as few observations as needed, never more than five
        let predicted = (1..=5).find_map(|k| predict_next_challenge(&observed[..k], &params).ok().map(|c| (k, c)));
        if let Some((k, c)) = predicted {
            let truth = if k == 5 { next } else { observed[k] };
            if c == truth {
                hits += 1;
            }
        }
    }
    let weak_rate = hits as f64 / trials as f64;
    let a = check(
        weak_rate >= 0.99,
        format!("weak {hits}/{trials}"),
        format!("weak only {hits}/{trials}"),
    );

    let strong_trials = 1_000u64;
    let mut matches = 0u64;
    for seed in 0..strong_trials {
        let mut src = StrongSource::from_seed(seed);
        let observed: Vec<Challenge> = (0..5).map(|_| generate_challenge(&mut src, &params)).collect();
        let next = generate_challenge(&mut src, &params);
        let guess = predict_next_challenge(&observed, &params).unwrap_or(observed[4]);
        matches += guess
            .indices()
            .iter()
            .zip(next.indices())
            .filter(|(a, b)| a == b)
            .count() as u64;
    }
    let n = strong_trials * 10;
    let p = 1.0 / 2000.0;
    let bound = p + 3.0 * (p * (1.0 - p) / n as f64).sqrt();
    let acc = matches as f64 / n as f64;
    let b = check(
        acc <= bound,
        format!("strong per-index {acc:.5} <= {bound:.5}"),
        format!("strong per-index {acc:.5} > {bound:.5}"),
    );
    first_err(vec![a, b])
}

// 4. Two-thief relay.
fn relay() -> Verdict {
    let runs = 1_000u64;
    let mut rates = HashMap::new();
    for technique in [Technique::PassiveCr, Technique::Proposed] {
        let wins = (0..runs)
            .filter(|&seed| {
                let cfg = TestbedConfig {
                    technique,
                    seed: 400 + seed,
                    ..TestbedConfig::default()
                };
                relay_attack(cfg, DEFAULT_RELAY_DELAY_MS, false, false).0.succeeded
            })
            .count() as f64;
        rates.insert(technique, wins / runs as f64);
    }
    let (cr, prop) = (rates[&Technique::PassiveCr], rates[&Technique::Proposed]);
    check(
        cr == 1.0 && prop == 0.0,
        format!("passive CR {cr:.3}, proposed {prop:.3}"),
        format!("passive CR {cr:.3}, proposed {prop:.3}"),
    )
}

// 5. Jamming defense.
fn jamming() -> Verdict {
    let plan = JamPlan::default();
    let cfg = TestbedConfig {
        seed: 501,
        ..TestbedConfig::default()
    };
    let (_, report, tb) = jam_attack(cfg, plan, true);
    let close = report.t_door_close;
    let want_honks: Vec<u64> = (0..5).map(|i| close + 10_000 + 500 * i).collect();
    let trace = tb.trace_text().unwrap();
    let honk_lines = trace.lines().filter(|l| l.ends_with("ACT car HONK")).count();
    let lock_lines: Vec<&str> = trace.lines().filter(|l| l.ends_with("ACT car LOCK_DOORS")).collect();
    let a = check(
        report.honks == want_honks
            && honk_lines == 5
            && report.locks == vec![close + 20_000]
            && lock_lines == vec![format!("{} ACT car LOCK_DOORS", close + 20_000).as_str()],
        format!("5 honks from t_close+10000, lock at t_close+20000 (t_close={close})"),
        format!("honks {:?} locks {:?} (t_close={close})", report.honks, report.locks),
    );
    let off = TestbedConfig {
        jam_defense: false,
        ..cfg
    };
    let (_, report, tb) = jam_attack(off, plan, true);
    let b = check(
        report.locks.is_empty() && !tb.trace_text().unwrap().contains("LOCK_DOORS"),
        "defense off: no LOCK_DOORS".into(),
        format!("defense off locked at {:?}", report.locks),
    );
    first_err(vec![a, b])
}

// 6. Lockout.
fn lockout() -> Verdict {
    let cfg = TestbedConfig {
        seed: 601,
        ..TestbedConfig::default()
    };
    let mut tb = Testbed::new(cfg, true, true);
    let adv = tb.sim.add_node("adv.guesser", tb.near_car, Radio::new());
    let announce = Message::IdAnnounce(cfg.car_id()).to_frame().unwrap();
    let wrong = Message::AuthResponse(rkesim_core::authcrypt::AuthMessage::new([0; 5])).to_frame().unwrap();
    for t in [1_000, 2_000, 3_000] {
        tb.sim.schedule(t, adv, Input::Transmit(announce.clone()));
        tb.sim.schedule(t + 3, adv, Input::Transmit(wrong.clone()));
    }
    // During the block: the owner and the attacker both try.
    tb.sim.schedule(60_000, tb.fob, Input::Button(Button::Unlock));
    tb.sim.schedule(100_000, adv, Input::Transmit(announce.clone()));
    tb.sim.run_until(170_000);
    let trace = parse_trace(tb.trace_text().unwrap()).unwrap();
    let blocked_at = trace.records.iter().find_map(|(_, r)| {
        (r.to_string().ends_with(" STATE car BLOCKED")).then_some(r.at)
    });
    let Some(tb_start) = blocked_at else {
        return Err("car never blocked".into());
    };
    let until = tb_start + cfg.timing.block_ms;
    tb.sim.schedule(until + 1_000, tb.fob, Input::Button(Button::Unlock));
    tb.sim.run_until(until + 5_000);
    let text = tb.trace_text().unwrap().to_string();
    let trace = parse_trace(&text).unwrap();
    let lines: Vec<String> = trace.records.iter().map(|(_, r)| r.to_string()).collect();
    let silent = lines.iter().zip(&trace.records).all(|(l, (_, r))| {
        let inside = r.at > tb_start && r.at < until;
        !(inside && (l.contains(" TX car ") || l.contains(" ACT car ")))
    });
    let lifted = lines.iter().any(|l| *l == format!("{until} STATE car IDLE"));
    let still_blocked = !lines
        .iter()
        .zip(&trace.records)
        .any(|(l, (_, r))| r.at > tb_start && r.at < until && l.contains(" STATE car ") && !l.contains("jam/"));
    let resumed = trace.records.iter().zip(&lines).any(|((_, r), l)| {
        r.at > until && l.contains(" TX car aa5502")
    }) && lines.iter().any(|l| l.ends_with("ACT car UNLOCK_DOORS"));
    let clean = tb.auditor().is_clean() && tb.auditor().blocks().len() == 1;
    check(
        silent && lifted && still_blocked && resumed && clean,
        format!("blocked at {tb_start}, silent until {until}, then unlocked"),
        format!("silent {silent} lifted {lifted} held {still_blocked} resumed {resumed} clean {clean}"),
    )
}

// 7. Provisioning atomicity.
fn provisioning() -> Verdict {
    let mut runs = 0;
    let mut divergent = 0;
    let mut outcomes: HashMap<String, u64> = HashMap::new();
    for (i, p) in [0.01, 0.05, 0.2, 0.5].into_iter().enumerate() {
        let demo = ProvisionDemo {
            seed: 700 + i as u64,
            fault_probability: p,
            runs: 2_500,
            ..ProvisionDemo::default()
        };
        let r = demo.run();
        runs += r.runs;
        divergent += r.unreported_divergence;
        for (k, v) in r.outcomes {
            *outcomes.entry(k).or_default() += v;
        }
    }
    let mut summary: Vec<_> = outcomes.iter().map(|(k, v)| format!("{k}={v}")).collect();
    summary.sort();
    check(
        runs >= 10_000 && divergent == 0,
        format!("{runs} plans, silent divergence 0 ({})", summary.join(" ")),
        format!("{runs} plans, {divergent} silent divergences"),
    )
}

// 8. Matrix ordering.
fn matrix() -> Verdict {
    let report = run_matrix(&MatrixConfig::default());
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            let rates: Vec<String> = Technique::ALL
                .iter()
                .map(|t| {
                    let c = report.cells.iter().find(|c| c.attack == r.attack && c.technique == *t).unwrap();
                    format!("{:.4}", c.rate)
                })
                .collect();
            format!("{} [{}]", r.attack.name(), rates.join(" "))
        })
        .collect();
    check(report.is_monotone(), rows.join(", "), format!("not monotone: {}", rows.join(", ")))
}

fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
    let ty = MessageType::ALL[rng.random_range(0..MessageType::ALL.len())];
    let len = match ty {
        MessageType::AuthOk | MessageType::IdRequest | MessageType::ProgIdRequest | MessageType::ProgRollback => 0,
        MessageType::Challenge => 20,
        MessageType::AuthResponse | MessageType::StartConfirm => 10,
        MessageType::StartInit => 24,
        MessageType::StartAuth => 30,
        MessageType::ProgAck | MessageType::ProgNack => 2,
        MessageType::Command => 1,
        MessageType::ProgWrite => 3 + 2 * rng.random_range(1..=100usize),
        _ => 4,
    };
    let mut payload = vec![0u8; len];
    rng.fill(&mut payload[..]);
    match ty {
        MessageType::Command => payload[0] = rng.random_range(1..=3),
        MessageType::ProgWrite => payload[2] = ((len - 3) / 2) as u8,
        _ => {}
    }
    Frame::new(ty, payload).expect("generated to schema")
}

// 9. Wire robustness.
fn wire() -> Verdict {
    let crc = crc::Crc::<u16>::new(&crc::CRC_16_IBM_3740);
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    let mut round_trips = 0;
    let mut crc_agrees = 0;
    for _ in 0..100_000 {
        let f = random_frame(&mut rng);
        let bytes = f.encode();
        if Frame::decode(&bytes).as_ref() == Ok(&f) && Message::from(&f).to_frame().as_ref() == Ok(&f) {
            round_trips += 1;
        }
        let n = bytes.len();
        if crc.checksum(&bytes[2..n - 2]).to_be_bytes() == bytes[n - 2..] {
            crc_agrees += 1;
        }
    }
    let a = check(
        round_trips == 100_000 && crc_agrees == 100_000,
        "100000/100000 round trips".into(),
        format!("{round_trips} round trips, {crc_agrees} CRC matches"),
    );
    let mut flips = 0u64;
    let mut rejected = 0u64;
    for _ in 0..1_000 {
        let bytes = random_frame(&mut rng).encode();
        for bit in 0..bytes.len() * 8 {
            let mut b = bytes.clone();
            b[bit / 8] ^= 1 << (bit % 8);
            flips += 1;
            if Frame::decode(&b).is_err() {
                rejected += 1;
            }
        }
    }
    let b = check(
        rejected == flips,
        format!("{rejected}/{flips} bit flips rejected"),
        format!("only {rejected}/{flips} bit flips rejected"),
    );
    first_err(vec![a, b])
}

// 10. Determinism of bundled scenarios.
fn determinism() -> Verdict {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut names: Vec<_> = std::fs::read_dir(&dir)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "scn"))
        .collect();
    names.sort();
    let mut traced = 0;
    for path in &names {
        let s = Scenario::parse(&std::fs::read_to_string(path).unwrap()).map_err(|e| e.to_string())?;
        let a = s.run(true);
        let b = s.run(true);
        let ja = serde_json::to_string(&a.report).unwrap();
        let jb = serde_json::to_string(&b.report).unwrap();
        if a.trace != b.trace || ja != jb {
            return Err(format!("{} differs between runs", path.display()));
        }
        traced += usize::from(a.trace.is_some());
    }
    check(
        names.len() >= 10,
        format!("{} scenarios ({traced} with traces) byte-identical", names.len()),
        format!("only {} bundled scenarios", names.len()),
    )
}

fn main() {
    // `cargo test -- --list` and filters come through here too.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("guess probability", guess_probability),
        ("playback resistance", playback),
        ("forward prediction", forward_prediction),
        ("two-thief relay", relay),
        ("jamming defense", jamming),
        ("lockout", lockout),
        ("provisioning atomicity", provisioning),
        ("matrix ordering", matrix),
        ("wire robustness", wire),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = f();
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
