//! Counter-based random streams.
//!
//! Every draw in the crate comes from a generator whose seed is a hash of
//! `(seed, purpose, round, replicate, client, step)`. A replicate's output
//! therefore depends only on its coordinates, never on which thread ran it or
//! in what order.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = Xoshiro256PlusPlus;

/// Domain separation between the different consumers of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Trajectory = 0x7472_616a,
    ServerUpdate = 0x7365_7276,
    PathNoise = 0x7061_7468,
    MomentRollout = 0x6d6f_6d74,
    TimeSample = 0x7469_6d65,
    Calibration = 0x6361_6c69,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Coordinates of one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub round: u64,
    pub replicate: u64,
    pub client: u64,
    pub step: u64,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self { seed, purpose, round: 0, replicate: 0, client: 0, step: 0 }
    }

    pub fn round(self, round: u64) -> Self {
        Self { round, ..self }
    }

    pub fn replicate(self, replicate: u64) -> Self {
        Self { replicate, ..self }
    }

    pub fn client(self, client: u64) -> Self {
        Self { client, ..self }
    }

    pub fn step(self, step: u64) -> Self {
        Self { step, ..self }
    }

    pub fn hash(&self) -> u64 {
        [self.purpose as u64, self.round, self.replicate, self.client, self.step]
            .iter()
            .fold(splitmix(self.seed), |h, &x| splitmix(h ^ splitmix(x)))
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng::seed_from_u64(self.hash())
    }
}

/// Round key for a continuous time point, so draws taken "at time t" are
/// reproducible without an integer round index.
pub fn time_key(t: f64) -> u64 {
    t.to_bits()
}
