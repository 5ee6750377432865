//! Seed derivation. Every random stream in a run is derived from one root seed:
//! stream `i` gets `root ^ splitmix64(i)`, so parties and components never share
//! a generator and nothing depends on execution order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used as the stream hash.
pub const fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `root ^ hash(stream)`.
pub const fn derive(root: u64, stream: u64) -> u64 {
    root ^ splitmix64(stream)
}

/// Two-level derivation, e.g. `(party, component)`.
pub const fn derive2(root: u64, a: u64, b: u64) -> u64 {
    derive(derive(root, a), b.wrapping_add(0x5EED))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named component streams so call sites read as intent rather than magic numbers.
pub mod stream {
    pub const PARTITION: u64 = 1;
    pub const AUTOENCODER: u64 = 2;
    pub const SUBSTITUTE: u64 = 3;
    pub const EXTRACTOR: u64 = 4;
    pub const MASK: u64 = 5;
    pub const CLASSIFIER: u64 = 6;
    pub const ATTACKER: u64 = 7;
    pub const UNIFORM_NOISE: u64 = 8;
    pub const MASK_SEARCH: u64 = 9;
    pub const SHUFFLE: u64 = 10;
    pub const PARTY_BASE: u64 = 1 << 32;
}
