//! State recovery for the linear congruential challenge generator.
//!
//! Every draw from [`WeakSource`] is `(state * bound) >> 32` of the freshly
//! stepped state, so one observed value pins the state to an interval of
//! about `2^32 / bound` candidates. Stepping each candidate forward and
//! comparing against the following draws leaves the true state.

use thiserror::Error;

use crate::authcrypt::{generate_challenge, Challenge, ProtocolParams, MAX_SUMS};
use crate::baselines::draw_bits;
use crate::keystore::WeakSource;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PredictorFailed {
    #[error("no observations")]
    Empty,
    #[error("observed values are inconsistent with the LCG model")]
    Inconsistent,
    #[error("{0} generator states fit the observations")]
    Ambiguous(usize),
}

/// One observed draw: the value and the bound it was drawn under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Draw {
    pub value: u32,
    pub bound: u32,
}

/// Returns a generator positioned right after the last observed draw.
pub fn recover(draws: &[Draw]) -> Result<WeakSource, PredictorFailed> {
    let (first, rest) = draws.split_first().ok_or(PredictorFailed::Empty)?;
    let b = first.bound as u64;
    let v = first.value as u64;
    if b == 0 || v >= b {
        return Err(PredictorFailed::Inconsistent);
    }
    // States s with (s * b) >> 32 == v.
    let lo = ((v << 32) + b - 1) / b;
    let hi = (((v + 1) << 32) + b - 1) / b;
    let mut found: Option<u32> = None;
    let mut count = 0usize;
    for s in lo..hi {
        let mut state = s as u32;
        let fits = rest.iter().all(|d| {
            state = WeakSource::step(state);
            WeakSource::project(state, d.bound) == d.value
        });
        if fits {
            count += 1;
            found.get_or_insert(state);
        }
    }
    match (count, found) {
        (1, Some(state)) => Ok(WeakSource::from_state(state)),
        (0, _) => Err(PredictorFailed::Inconsistent),
        (n, _) => Err(PredictorFailed::Ambiguous(n)),
    }
}

/// The draws a challenge generator made, in generation order.
pub fn challenge_draws(challenge: &Challenge, params: &ProtocolParams) -> Vec<Draw> {
    let bound = params.index_space as u32;
    [0, MAX_SUMS]
        .into_iter()
        .flat_map(|half| (0..params.sums).map(move |j| half + j))
        .map(|i| Draw {
            value: challenge.indices()[i] as u32,
            bound,
        })
        .collect()
}

/// Forecasts the challenge that follows `observed` (consecutive challenges).
pub fn predict_next_challenge(
    observed: &[Challenge],
    params: &ProtocolParams,
) -> Result<Challenge, PredictorFailed> {
    let draws: Vec<Draw> = observed
        .iter()
        .flat_map(|c| challenge_draws(c, params))
        .collect();
    let mut source = recover(&draws)?;
    Ok(generate_challenge(&mut source, params))
}

/// The draws behind a `bits`-wide baseline challenge.
pub fn wide_draws(value: u32, bits: u32) -> Vec<Draw> {
    if bits <= 16 {
        vec![Draw {
            value,
            bound: 1 << bits,
        }]
    } else {
        vec![
            Draw {
                value: value >> 16,
                bound: 1 << (bits - 16),
            },
            Draw {
                value: value & 0xFFFF,
                bound: 1 << 16,
            },
        ]
    }
}

/// Forecasts the next `bits`-wide challenge after the observed ones.
pub fn predict_next_wide(observed: &[u32], bits: u32) -> Result<u32, PredictorFailed> {
    let draws: Vec<Draw> = observed.iter().flat_map(|&v| wide_draws(v, bits)).collect();
    let mut source = recover(&draws)?;
    Ok(draw_bits(&mut source, bits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keystore::{EntropySource, StrongSource};

    #[test]
    fn one_challenge_is_enough_at_full_scale() {
        let p = ProtocolParams::FULL;
        for seed in 0..20u32 {
            let mut weak = WeakSource::from_state(seed.wrapping_mul(0x9E37_79B9));
            let seen = generate_challenge(&mut weak, &p);
            let next = generate_challenge(&mut weak, &p);
            assert_eq!(predict_next_challenge(&[seen], &p), Ok(next));
        }
    }

    #[test]
    fn wide_prediction_after_two_observations() {
        let mut weak = WeakSource::from_state(12345);
        let a = draw_bits(&mut weak, 32);
        let b = draw_bits(&mut weak, 32);
        let c = draw_bits(&mut weak, 32);
        assert_eq!(predict_next_wide(&[a, b], 32), Ok(c));
    }

    #[test]
    fn strong_source_is_rejected() {
        let p = ProtocolParams::FULL;
        let mut strong = StrongSource::from_seed(9);
        let seen: Vec<_> = (0..2).map(|_| generate_challenge(&mut strong, &p)).collect();
        assert_eq!(
            predict_next_challenge(&seen, &p),
            Err(PredictorFailed::Inconsistent)
        );
    }

    #[test]
    fn recover_checks_input() {
        assert_eq!(recover(&[]), Err(PredictorFailed::Empty));
        assert_eq!(
            recover(&[Draw { value: 5, bound: 5 }]),
            Err(PredictorFailed::Inconsistent)
        );
        let mut w = WeakSource::from_state(1);
        let v = w.next_uniform(1 << 16);
        assert!(matches!(
            recover(&[Draw { value: v, bound: 1 << 16 }]),
            Err(PredictorFailed::Ambiguous(65536))
        ));
    }
}
