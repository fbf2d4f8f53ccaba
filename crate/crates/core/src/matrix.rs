//! Attack-by-technique matrix: every attack against every technique, each
//! cell measured by running the attack in its own simulator.

use serde::Serialize;

use crate::adversaries::{
    forward_prediction_attack, playback_attack, scan_attack, AttackKind, ScanPlan,
};
use crate::baselines::{Technique, DEFAULT_CHALLENGE_BITS, DEFAULT_ROLLING_WINDOW};
use crate::keystore::EntropyKind;
use crate::scenario::{ConfigError, Reader};
use crate::testbed::{derive_seed, TestbedConfig};

/// Attacks that yield a rate. Relay, jam and clone are qualitative and
/// have their own scenarios.
pub const MATRIX_ATTACKS: [AttackKind; 3] = [
    AttackKind::Scan,
    AttackKind::Playback,
    AttackKind::ForwardPrediction,
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixConfig {
    pub seed: u64,
    pub scan_attempts: u64,
    pub playback_record: u64,
    pub playback_replay: u64,
    pub forward_runs: u64,
    pub forward_observe: u64,
    pub fixed_bits: u32,
    pub rolling_bits: u32,
    pub rolling_window: u32,
    pub cr_bits: u32,
    pub entropy: EntropyKind,
    /// Lockout on the proposed car during scans. Off by default so the scan
    /// row measures the guess rate rather than the throttle.
    pub lockout: bool,
    pub threads: usize,
}

impl Default for MatrixConfig {
    /// Desk scale: small enough to run in seconds, wide enough that the
    /// ordering is visible.
    fn default() -> Self {
        MatrixConfig {
            seed: 0,
            scan_attempts: 20_000,
            playback_record: 50,
            playback_replay: 2_000,
            forward_runs: 200,
            forward_observe: 3,
            fixed_bits: 8,
            rolling_bits: 16,
            rolling_window: DEFAULT_ROLLING_WINDOW,
            cr_bits: DEFAULT_CHALLENGE_BITS,
            entropy: EntropyKind::Strong,
            lockout: false,
            threads: 0,
        }
    }
}

impl MatrixConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let root = Reader::parse(text)?;
        let mut r = Reader::new(&root);
        let d = MatrixConfig::default();
        r.unknown_keys(&root, "", &["seed", "budgets", "baselines", "protocol", "threads"]);
        let top = Some(r.root());
        let seed = r.uint(top, "", "seed", d.seed, u64::MAX >> 1);
        let threads = r.uint(top, "", "threads", 0, 1024) as usize;
        let b = r.section(
            "budgets",
            &[
                "scan_attempts",
                "playback_record",
                "playback_replay",
                "forward_runs",
                "forward_observe",
            ],
        );
        let positive = |r: &mut Reader, key: &str, default: u64, max: u64| {
            let v = r.uint(b, "budgets", key, default, max);
            if v == 0 {
                r.error(format!("budgets.{key}"), "must be at least 1");
            }
            v
        };
        let scan_attempts = positive(&mut r, "scan_attempts", d.scan_attempts, 100_000_000);
        let playback_record = positive(&mut r, "playback_record", d.playback_record, 1_000_000);
        let playback_replay = positive(&mut r, "playback_replay", d.playback_replay, 100_000_000);
        let forward_runs = positive(&mut r, "forward_runs", d.forward_runs, 1_000_000);
        let forward_observe = positive(&mut r, "forward_observe", d.forward_observe, 10_000);

        let bl = r.section(
            "baselines",
            &["fixed_bits", "rolling_bits", "rolling_window", "cr_bits"],
        );
        let fixed_bits = r.uint(bl, "baselines", "fixed_bits", d.fixed_bits as u64, 32) as u32;
        let rolling_bits = r.uint(bl, "baselines", "rolling_bits", d.rolling_bits as u64, 32) as u32;
        let rolling_window =
            r.uint(bl, "baselines", "rolling_window", d.rolling_window as u64, 1 << 20) as u32;
        let cr_bits = r.uint(bl, "baselines", "cr_bits", d.cr_bits as u64, 32) as u32;
        if fixed_bits == 0 {
            r.error("baselines.fixed_bits", "must be between 1 and 32");
        }
        for (key, v) in [("rolling_bits", rolling_bits), ("cr_bits", cr_bits)] {
            if v < 2 || v % 2 != 0 {
                r.error(format!("baselines.{key}"), "must be even and between 2 and 32");
            }
        }
        if rolling_window == 0 {
            r.error("baselines.rolling_window", "must be at least 1");
        }
        let p = r.section("protocol", &["entropy", "lockout"]);
        let entropy = r.parsed(p, "protocol", "entropy", d.entropy);
        let lockout = r.boolean(p, "protocol", "lockout", d.lockout);
        r.finish()?;
        Ok(MatrixConfig {
            seed,
            scan_attempts,
            playback_record,
            playback_replay,
            forward_runs,
            forward_observe,
            fixed_bits,
            rolling_bits,
            rolling_window,
            cr_bits,
            entropy,
            lockout,
            threads,
        })
    }

    fn testbed(&self, technique: Technique, seed: u64) -> TestbedConfig {
        TestbedConfig {
            technique,
            entropy: self.entropy,
            lockout: self.lockout,
            fixed_bits: self.fixed_bits,
            rolling_bits: self.rolling_bits,
            rolling_window: self.rolling_window,
            cr_bits: self.cr_bits,
            seed,
            ..TestbedConfig::default()
        }
    }

    fn measure(&self, attack: AttackKind, technique: Technique) -> (u64, u64) {
        let seed = derive_seed(self.seed, 100 * attack as u64 + technique as u64);
        match attack {
            AttackKind::Scan => {
                let (o, _) = scan_attack(
                    self.testbed(technique, seed),
                    ScanPlan::new(self.scan_attempts),
                    false,
                );
                (o.attempts, o.successes)
            }
            AttackKind::Playback => {
                let (o, ..) = playback_attack(
                    self.testbed(technique, seed),
                    self.playback_record as usize,
                    self.playback_replay,
                    false,
                );
                (o.attempts, o.successes)
            }
            AttackKind::ForwardPrediction => {
                let wins = (0..self.forward_runs)
                    .filter(|&run| {
                        let cfg = self.testbed(technique, derive_seed(seed, run));
                        forward_prediction_attack(cfg, self.forward_observe as usize, false)
                            .0
                            .succeeded
                    })
                    .count() as u64;
                (self.forward_runs, wins)
            }
            other => unreachable!("{other:?} is not a matrix attack"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub attack: AttackKind,
    pub technique: Technique,
    pub attempts: u64,
    pub successes: u64,
    pub rate: f64,
    /// Wilson 95% interval on the rate.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Dense rank within the row: 0 for the highest rate, equal rates share.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowSummary {
    pub attack: AttackKind,
    /// Techniques from most to least successful attack.
    pub ordering: Vec<Technique>,
    /// Rates never increase from fixed code to rolling code to passive CR
    /// to the table protocol.
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixReport {
    pub config: MatrixConfig,
    pub cells: Vec<Cell>,
    pub rows: Vec<RowSummary>,
}

fn wilson(successes: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.96_f64;
    let n = n as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub fn run_matrix(config: &MatrixConfig) -> MatrixReport {
    let jobs: Vec<(AttackKind, Technique)> = MATRIX_ATTACKS
        .iter()
        .flat_map(|&a| Technique::ALL.iter().map(move |&t| (a, t)))
        .collect();
    let threads = match config.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len());

    // Cells are independent; results land by index so scheduling cannot
    // change the report.
    let mut measured = vec![(0u64, 0u64); jobs.len()];
    std::thread::scope(|s| {
        let chunks: Vec<Vec<usize>> = (0..threads)
            .map(|w| (w..jobs.len()).step_by(threads).collect())
            .collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|idx| {
                let jobs = &jobs;
                s.spawn(move || {
                    idx.into_iter()
                        .map(|i| (i, config.measure(jobs[i].0, jobs[i].1)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, m) in h.join().expect("matrix worker panicked") {
                measured[i] = m;
            }
        }
    });

    let mut cells: Vec<Cell> = jobs
        .iter()
        .zip(&measured)
        .map(|(&(attack, technique), &(attempts, successes))| {
            let (ci_low, ci_high) = wilson(successes, attempts);
            Cell {
                attack,
                technique,
                attempts,
                successes,
                rate: if attempts == 0 {
                    0.0
                } else {
                    successes as f64 / attempts as f64
                },
                ci_low,
                ci_high,
                rank: 0,
            }
        })
        .collect();

    let mut rows = Vec::new();
    for attack in MATRIX_ATTACKS {
        let row: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].attack == attack).collect();
        let mut rates: Vec<f64> = row.iter().map(|&i| cells[i].rate).collect();
        rates.sort_by(|a, b| b.total_cmp(a));
        rates.dedup();
        for &i in &row {
            cells[i].rank = rates.iter().position(|r| *r == cells[i].rate).unwrap_or(0);
        }
        let mut ordering: Vec<&Cell> = row.iter().map(|&i| &cells[i]).collect();
        // Stable sort keeps the technique order for ties.
        ordering.sort_by(|a, b| b.rate.total_cmp(&a.rate));
        let in_technique_order: Vec<f64> = Technique::ALL
            .iter()
            .map(|t| row.iter().map(|&i| &cells[i]).find(|c| c.technique == *t).unwrap().rate)
            .collect();
        rows.push(RowSummary {
            attack,
            ordering: ordering.iter().map(|c| c.technique).collect(),
            monotone: in_technique_order.windows(2).all(|w| w[0] >= w[1]),
        });
    }

    MatrixReport {
        config: config.clone(),
        cells,
        rows,
    }
}

impl MatrixReport {
    pub fn is_monotone(&self) -> bool {
        self.rows.iter().all(|r| r.monotone)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "attack", "technique", "attempts", "successes", "rate", "ci_low", "ci_high", "rank",
        ])
        .expect("in-memory write");
        for c in &self.cells {
            w.write_record([
                c.attack.name().to_string(),
                c.technique.name().to_string(),
                c.attempts.to_string(),
                c.successes.to_string(),
                format!("{:.6}", c.rate),
                format!("{:.6}", c.ci_low),
                format!("{:.6}", c.ci_high),
                c.rank.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("ascii")
    }
}
