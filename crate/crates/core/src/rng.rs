//! Seeded random streams.
//!
//! Every source of randomness is a ChaCha8 generator keyed by a 64-bit seed
//! and a fixed stream id, so different consumers of the same seed never
//! share draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum Stream {
    Truth = 1,
    Sample = 2,
    Split = 3,
    Oracle = 4,
}

pub(crate) fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Seed for replication `rep` of a run seeded with `seed`.
pub fn rep_seed(seed: u64, rep: u64) -> u64 {
    seed ^ rep
}
