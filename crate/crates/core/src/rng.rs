//! Named, independently seeded random substreams.
//!
//! Every stream is a ChaCha8 generator keyed by the study seed and
//! positioned on its own 64-bit stream id, built from the path index and the
//! substream kind. Path `p` of a study can therefore be regenerated in
//! isolation, independent of scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Substream {
    InitialCondition = 1,
    Signal = 2,
    Observation = 3,
    Jumps = 4,
    Particles = 5,
    Resampling = 6,
}

/// Identifies one path's family of substreams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub path: u64,
}

impl SeedRecord {
    pub fn new(seed: u64, path: u64) -> Self {
        Self { seed, path }
    }

    pub fn stream(&self, kind: Substream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.path << 8 | kind as u64);
        rng
    }
}
