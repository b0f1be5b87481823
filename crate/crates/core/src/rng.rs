//! Seeded random streams. Every consumer of randomness draws from its own
//! stream of one seed so that runs are reproducible and independent of
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type SimRng = ChaCha12Rng;

/// Recorded next to the seed in reports.
pub const RNG_ALGORITHM: &str = "ChaCha12";

pub fn stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
