//! Challenge generation and the additive lightweight cipher.
//!
//! A challenge names ten table slots. The first five are "key" slots and the
//! last five are "encryption" slots; sum `j` adds key slot `j` to encryption
//! slot `j` modulo `2^width`. Reduced-parameter runs (smaller width, fewer
//! sums, smaller index space) use the same code path: unused challenge
//! positions and unused sums are zero.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::keystore::{EntropySource, KeyTable, TABLE_LEN};

/// Number of index slots carried by every challenge.
pub const CHALLENGE_LEN: usize = 10;
/// Number of sums carried by every authentication message.
pub const MAX_SUMS: usize = 5;

/// Cipher dimensions. `ProtocolParams::FULL` is the deployed configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Bits per sum, 1..=16.
    pub width: u32,
    /// Sums per message, 1..=5.
    pub sums: usize,
    /// Challenge indices are drawn from `[0, index_space)`, at most 2000.
    pub index_space: u16,
}

impl ProtocolParams {
    pub const FULL: ProtocolParams = ProtocolParams {
        width: 16,
        sums: MAX_SUMS,
        index_space: TABLE_LEN as u16,
    };

    pub fn new(width: u32, sums: usize, index_space: u16) -> Result<Self, Error> {
        let p = ProtocolParams {
            width,
            sums,
            index_space,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(1..=16).contains(&self.width) {
            return Err(Error::Params(format!("width {} not in 1..=16", self.width)));
        }
        if !(1..=MAX_SUMS).contains(&self.sums) {
            return Err(Error::Params(format!("sums {} not in 1..=5", self.sums)));
        }
        if self.index_space == 0 || self.index_space as usize > TABLE_LEN {
            return Err(Error::Params(format!(
                "index space {} not in 1..=2000",
                self.index_space
            )));
        }
        Ok(())
    }

    pub fn mask(&self) -> u16 {
        ((1u32 << self.width) - 1) as u16
    }

    /// Total secret bits in one authentication message.
    pub fn message_bits(&self) -> u32 {
        self.width * self.sums as u32
    }
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams::FULL
    }
}

/// Ten slot indices: positions `0..5` are key slots, `5..10` encryption slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Challenge {
    indices: [u16; CHALLENGE_LEN],
}

impl Challenge {
    /// Builds a full-scale challenge; every index must address the table.
    pub fn new(indices: [u16; CHALLENGE_LEN]) -> Result<Self, Error> {
        let c = Challenge { indices };
        c.check(&ProtocolParams::FULL)?;
        Ok(c)
    }

    /// Wraps raw indices without validation, as received off the air.
    pub const fn from_raw(indices: [u16; CHALLENGE_LEN]) -> Self {
        Challenge { indices }
    }

    pub fn indices(&self) -> &[u16; CHALLENGE_LEN] {
        &self.indices
    }

    pub fn key_index(&self, j: usize) -> u16 {
        self.indices[j]
    }

    pub fn encryption_index(&self, j: usize) -> u16 {
        self.indices[MAX_SUMS + j]
    }

    /// Checks that used positions fall inside the index space and unused
    /// positions are zero.
    pub fn check(&self, params: &ProtocolParams) -> Result<(), Error> {
        for (pos, &idx) in self.indices.iter().enumerate() {
            let used = (pos % MAX_SUMS) < params.sums;
            if used && idx >= params.index_space {
                return Err(Error::ChallengeShape(format!(
                    "index {idx} at position {pos} outside [0,{})",
                    params.index_space
                )));
            }
            if !used && idx != 0 {
                return Err(Error::ChallengeShape(format!(
                    "position {pos} unused with {} sums but holds {idx}",
                    params.sums
                )));
            }
        }
        Ok(())
    }
}

/// Five sums, 80 bits at full width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AuthMessage {
    sums: [u16; MAX_SUMS],
}

impl AuthMessage {
    pub const fn new(sums: [u16; MAX_SUMS]) -> Self {
        AuthMessage { sums }
    }

    pub fn sums(&self) -> &[u16; MAX_SUMS] {
        &self.sums
    }

    /// Uniform random guess over the message space of `params`.
    pub fn random(entropy: &mut dyn EntropySource, params: &ProtocolParams) -> Self {
        let mut sums = [0u16; MAX_SUMS];
        for s in sums.iter_mut().take(params.sums) {
            *s = entropy.next_uniform(1 << params.width) as u16;
        }
        AuthMessage { sums }
    }
}

/// Draws `2 * sums` indices: key positions first, then encryption positions.
pub fn generate_challenge(entropy: &mut dyn EntropySource, params: &ProtocolParams) -> Challenge {
    let mut indices = [0u16; CHALLENGE_LEN];
    for half in [0, MAX_SUMS] {
        for j in 0..params.sums {
            indices[half + j] = entropy.next_uniform(params.index_space as u32) as u16;
        }
    }
    Challenge { indices }
}

/// Cipher over an arbitrary slot array, so toy tables share the code path.
pub fn combine(
    slots: &[u16],
    challenge: &Challenge,
    params: &ProtocolParams,
) -> Result<AuthMessage, Error> {
    let read = |i: u16| {
        slots
            .get(i as usize)
            .copied()
            .ok_or(Error::IndexOutOfRange(i as usize))
    };
    let mask = params.mask();
    let mut sums = [0u16; MAX_SUMS];
    for (j, sum) in sums.iter_mut().enumerate().take(params.sums) {
        let key = read(challenge.key_index(j))?;
        let enc = read(challenge.encryption_index(j))?;
        *sum = key.wrapping_add(enc) & mask;
    }
    Ok(AuthMessage { sums })
}

pub fn build_auth_message(
    table: &KeyTable,
    challenge: &Challenge,
    params: &ProtocolParams,
) -> Result<AuthMessage, Error> {
    combine(table.values(), challenge, params)
}

/// True iff the locally built message equals `received` element-wise.
/// A challenge that cannot be evaluated never verifies.
pub fn verify_auth_message(
    table: &KeyTable,
    challenge: &Challenge,
    received: &AuthMessage,
    params: &ProtocolParams,
) -> bool {
    match build_auth_message(table, challenge, params) {
        Ok(own) => own == *received,
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keystore::StrongSource;
    use proptest::prelude::*;

    fn table_with(entries: &[(usize, u16)]) -> KeyTable {
        let mut values = [0u16; TABLE_LEN];
        for &(i, v) in entries {
            values[i] = v;
        }
        KeyTable::from_values(values, 0)
    }

    // Written straight from the slot-addition rule, independent of `combine`.
    fn oracle(values: &[u16], idx: &[u16; 10]) -> [u16; 5] {
        let mut out = [0u16; 5];
        for j in 0..5 {
            let a = values[idx[j] as usize] as u32;
            let b = values[idx[j + 5] as usize] as u32;
            out[j] = ((a + b) % 65536) as u16;
        }
        out
    }

    #[test]
    fn zero_table_gives_zero_sums() {
        let table = KeyTable::zeroed();
        let c = generate_challenge(&mut StrongSource::from_seed(3), &ProtocolParams::FULL);
        let m = build_auth_message(&table, &c, &ProtocolParams::FULL).unwrap();
        assert_eq!(m.sums(), &[0; 5]);
    }

    #[test]
    fn sums_wrap_modulo_two_to_the_sixteen() {
        let table = table_with(&[
            (0, 1),
            (1, 2),
            (2, 3),
            (3, 4),
            (4, 5),
            (5, 65535),
            (6, 65534),
            (7, 65533),
            (8, 65532),
            (9, 65531),
        ]);
        let c = Challenge::new([0, 1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
        let m = build_auth_message(&table, &c, &ProtocolParams::FULL).unwrap();
        assert_eq!(m.sums(), &[0, 0, 0, 0, 0]);
    }

    #[test]
    fn hand_computed_message_matches_oracle() {
        let table = table_with(&[
            (10, 100),
            (11, 200),
            (12, 300),
            (13, 400),
            (14, 500),
            (20, 7),
            (21, 8),
            (22, 9),
            (23, 10),
            (24, 11),
        ]);
        let idx = [10, 11, 12, 13, 14, 20, 21, 22, 23, 24];
        let expected = oracle(table.values(), &idx);
        assert_eq!(expected, [107, 208, 309, 410, 511]);
        let m = build_auth_message(&table, &Challenge::new(idx).unwrap(), &ProtocolParams::FULL)
            .unwrap();
        assert_eq!(m.sums(), &expected);
    }

    #[test]
    fn duplicate_index_in_both_halves_doubles_the_slot() {
        let table = table_with(&[(42, 40000)]);
        let c = Challenge::new([42, 0, 0, 0, 0, 42, 0, 0, 0, 0]).unwrap();
        let m = build_auth_message(&table, &c, &ProtocolParams::FULL).unwrap();
        assert_eq!(m.sums()[0], ((2 * 40000u32) % 65536) as u16);
    }

    #[test]
    fn out_of_range_index_propagates() {
        let c = Challenge::from_raw([2000, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert!(Challenge::new(*c.indices()).is_err());
        assert_eq!(
            build_auth_message(&KeyTable::zeroed(), &c, &ProtocolParams::FULL),
            Err(Error::IndexOutOfRange(2000))
        );
        assert!(!verify_auth_message(
            &KeyTable::zeroed(),
            &c,
            &AuthMessage::default(),
            &ProtocolParams::FULL
        ));
    }

    #[test]
    fn perturbed_sum_fails_verification() {
        let table = KeyTable::generate(&mut StrongSource::from_seed(5));
        let c = generate_challenge(&mut StrongSource::from_seed(6), &ProtocolParams::FULL);
        let good = build_auth_message(&table, &c, &ProtocolParams::FULL).unwrap();
        for j in 0..5 {
            let mut sums = *good.sums();
            sums[j] = sums[j].wrapping_add(1);
            assert!(!verify_auth_message(
                &table,
                &c,
                &AuthMessage::new(sums),
                &ProtocolParams::FULL
            ));
        }
    }

    #[test]
    fn toy_params_leave_unused_positions_zero() {
        let params = ProtocolParams::new(4, 2, 8).unwrap();
        let mut src = StrongSource::from_seed(11);
        for _ in 0..1000 {
            let c = generate_challenge(&mut src, &params);
            c.check(&params).unwrap();
            for pos in [2, 3, 4, 7, 8, 9] {
                assert_eq!(c.indices()[pos], 0);
            }
            let guess = AuthMessage::random(&mut src, &params);
            assert!(guess.sums()[..2].iter().all(|&s| s < 16));
            assert_eq!(&guess.sums()[2..], &[0, 0, 0]);
        }
    }

    #[test]
    fn params_validation() {
        assert!(ProtocolParams::new(0, 5, 2000).is_err());
        assert!(ProtocolParams::new(17, 5, 2000).is_err());
        assert!(ProtocolParams::new(16, 0, 2000).is_err());
        assert!(ProtocolParams::new(16, 6, 2000).is_err());
        assert!(ProtocolParams::new(16, 5, 2001).is_err());
        assert_eq!(ProtocolParams::FULL.message_bits(), 80);
        assert_eq!(ProtocolParams::FULL.mask(), 0xFFFF);
    }

    #[test]
    fn same_seed_same_challenge() {
        let a = generate_challenge(&mut StrongSource::from_seed(7), &ProtocolParams::FULL);
        let b = generate_challenge(&mut StrongSource::from_seed(7), &ProtocolParams::FULL);
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn build_then_verify_round_trips(table_seed in any::<u64>(), ch_seed in any::<u64>()) {
            let table = KeyTable::generate(&mut StrongSource::from_seed(table_seed));
            let c = generate_challenge(&mut StrongSource::from_seed(ch_seed), &ProtocolParams::FULL);
            let m = build_auth_message(&table, &c, &ProtocolParams::FULL).unwrap();
            prop_assert!(verify_auth_message(&table, &c, &m, &ProtocolParams::FULL));
            prop_assert_eq!(m.sums(), &oracle(table.values(), c.indices()));
        }

        #[test]
        fn single_slot_change_touches_only_referencing_sums(
            table_seed in any::<u64>(),
            ch_seed in any::<u64>(),
            pick in 0usize..10,
            delta in 1u16..=u16::MAX,
        ) {
            let table = KeyTable::generate(&mut StrongSource::from_seed(table_seed));
            let c = generate_challenge(&mut StrongSource::from_seed(ch_seed), &ProtocolParams::FULL);
            let slot = c.indices()[pick] as usize;
            let mut values = *table.values();
            values[slot] = values[slot].wrapping_add(delta);
            let changed = KeyTable::from_values(values, 0);

            let before = build_auth_message(&table, &c, &ProtocolParams::FULL).unwrap();
            let after = build_auth_message(&changed, &c, &ProtocolParams::FULL).unwrap();
            for j in 0..5 {
                let refs = (c.key_index(j) as usize == slot) as u32
                    + (c.encryption_index(j) as usize == slot) as u32;
                let expected = before.sums()[j].wrapping_add((delta as u32 * refs) as u16);
                prop_assert_eq!(after.sums()[j], expected);
                if refs == 0 {
                    prop_assert_eq!(after.sums()[j], before.sums()[j]);
                }
            }
        }
    }
}
