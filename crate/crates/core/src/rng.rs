//! Named, indexable random substreams derived from one top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for substream `name` at position `path` under `seed`.
///
/// Streams never depend on how many values another stream consumed, so
/// parallel consumers stay reproducible.
pub fn derive_seed(seed: u64, name: &str, path: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for b in name.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &p in path {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn substream(seed: u64, name: &str, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, path))
}
