//! Shared secret material: the car key identity, the 2000-slot key table and
//! the entropy sources every random draw goes through.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Number of 16-bit values held in a key table.
pub const TABLE_LEN: usize = 2000;

/// Identity burned into the ROM of the fob and the car transceiver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CarKeyId(u32);

impl CarKeyId {
    pub const fn new(value: u32) -> Self {
        CarKeyId(value)
    }

    pub const fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for CarKeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.0)
    }
}

/// The shared secret: exactly [`TABLE_LEN`] unsigned 16-bit values.
///
/// `generation` counts successful re-provisionings so that callers can tell
/// which version of the table a device holds after a rollback.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyTable {
    values: Box<[u16; TABLE_LEN]>,
    generation: u32,
}

impl KeyTable {
    /// Draws every slot with `next_uniform(65536)`.
    pub fn generate(entropy: &mut dyn EntropySource) -> Self {
        let mut values = Box::new([0u16; TABLE_LEN]);
        for slot in values.iter_mut() {
            *slot = entropy.next_uniform(1 << 16) as u16;
        }
        KeyTable {
            values,
            generation: 0,
        }
    }

    pub fn from_values(values: [u16; TABLE_LEN], generation: u32) -> Self {
        KeyTable {
            values: Box::new(values),
            generation,
        }
    }

    /// Builds a table from a slice, which must hold exactly [`TABLE_LEN`] values.
    pub fn from_slice(values: &[u16], generation: u32) -> Result<Self, Error> {
        let values: Box<[u16; TABLE_LEN]> = values
            .to_vec()
            .into_boxed_slice()
            .try_into()
            .map_err(|v: Box<[u16]>| Error::TableLength(v.len()))?;
        Ok(KeyTable { values, generation })
    }

    pub fn zeroed() -> Self {
        KeyTable::from_values([0; TABLE_LEN], 0)
    }

    /// Reads one slot. An index past the end means the challenge was malformed.
    pub fn read_slot(&self, index: usize) -> Result<u16, Error> {
        self.values
            .get(index)
            .copied()
            .ok_or(Error::IndexOutOfRange(index))
    }

    pub fn values(&self) -> &[u16; TABLE_LEN] {
        &self.values
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub(crate) fn set_generation(&mut self, generation: u32) {
        self.generation = generation;
    }
}

impl fmt::Debug for KeyTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyTable")
            .field("generation", &self.generation)
            .field("head", &&self.values[..4])
            .finish_non_exhaustive()
    }
}

/// Source of uniform draws. `next_uniform(bound)` must return a value strictly
/// below `bound`, and a seeded source must replay the same sequence.
pub trait EntropySource {
    fn next_uniform(&mut self, bound: u32) -> u32;
}

impl<E: EntropySource + ?Sized> EntropySource for &mut E {
    fn next_uniform(&mut self, bound: u32) -> u32 {
        (**self).next_uniform(bound)
    }
}

impl<E: EntropySource + ?Sized> EntropySource for Box<E> {
    fn next_uniform(&mut self, bound: u32) -> u32 {
        (**self).next_uniform(bound)
    }
}

/// Cryptographic-quality stand-in (ChaCha20), seedable for reproducible runs.
#[derive(Clone, Debug)]
pub struct StrongSource {
    rng: ChaCha20Rng,
}

impl StrongSource {
    pub fn from_seed(seed: u64) -> Self {
        StrongSource {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }
}

impl EntropySource for StrongSource {
    fn next_uniform(&mut self, bound: u32) -> u32 {
        assert!(bound > 0, "next_uniform bound must be positive");
        self.rng.random_range(0..bound)
    }
}

/// Deliberately predictable 32-bit linear congruential generator.
///
/// Uses the Numerical Recipes constants; each draw advances the state once and
/// maps it to `[0, bound)` by multiply-shift on the full 32-bit state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeakSource {
    state: u32,
}

impl WeakSource {
    pub const MULTIPLIER: u32 = 1_664_525;
    pub const INCREMENT: u32 = 1_013_904_223;

    pub const fn from_state(state: u32) -> Self {
        WeakSource { state }
    }

    pub fn from_seed(seed: u64) -> Self {
        WeakSource {
            state: (seed ^ (seed >> 32)) as u32,
        }
    }

    pub const fn state(&self) -> u32 {
        self.state
    }

    pub const fn step(state: u32) -> u32 {
        state
            .wrapping_mul(Self::MULTIPLIER)
            .wrapping_add(Self::INCREMENT)
    }

    pub const fn project(state: u32, bound: u32) -> u32 {
        ((state as u64 * bound as u64) >> 32) as u32
    }
}

impl EntropySource for WeakSource {
    fn next_uniform(&mut self, bound: u32) -> u32 {
        assert!(bound > 0, "next_uniform bound must be positive");
        self.state = Self::step(self.state);
        Self::project(self.state, bound)
    }
}

/// Which entropy family a device was configured with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyKind {
    Strong,
    Weak,
}

impl EntropyKind {
    pub fn source(self, seed: u64) -> Box<dyn EntropySource> {
        match self {
            EntropyKind::Strong => Box::new(StrongSource::from_seed(seed)),
            EntropyKind::Weak => Box::new(WeakSource::from_seed(seed)),
        }
    }
}

impl std::str::FromStr for EntropyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strong" => Ok(EntropyKind::Strong),
            "weak" => Ok(EntropyKind::Weak),
            other => Err(format!("unknown entropy kind `{other}` (expected strong|weak)")),
        }
    }
}
