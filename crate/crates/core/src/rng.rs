//! Named random sub-streams derived from a single run seed.
//!
//! Each component (data, init, shuffle, search, ...) draws from its own ChaCha
//! stream so that changing how much randomness one component consumes never
//! shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const SEARCH: &str = "search";
pub const SPLIT: &str = "split";
pub const DROPOUT: &str = "dropout";

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}
