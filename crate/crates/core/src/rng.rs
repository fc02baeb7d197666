//! Seeded random streams. Every consumer derives its own named sub-stream
//! from the run seed, so adding a new consumer never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Independent stream for `(seed, name)`.
pub fn substream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(splitmix64(seed ^ splitmix64(fnv1a(name))))
}

/// Independent stream for `(seed, name, index)`, e.g. one per sample.
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix64(
        seed ^ splitmix64(fnv1a(name) ^ splitmix64(index.wrapping_add(1))),
    ))
}
