//! Counter-based seed derivation: every random stream is a pure function of
//! a root seed and a tuple of counters, so results never depend on the order
//! in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, counters: &[u64]) -> u64 {
    counters.iter().fold(splitmix(seed), |acc, &c| splitmix(acc ^ splitmix(c.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn stream(seed: u64, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, counters))
}
