//! Named, counter-based random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed and a stable stream name, so adding a new consumer never shifts the
//! draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const NAP_INIT: &str = "nap-init";
pub const NAP_BATCH: &str = "nap-batch";
pub const NAP_DROPOUT: &str = "nap-dropout";
pub const DQT_INIT: &str = "dqt-init";
pub const DQT_BATCH: &str = "dqt-batch";
pub const MASK: &str = "mask";
pub const RANDOM_PATCH: &str = "random-patch";
pub const GRAD_CHECK: &str = "grad-check";
pub const NODE_EMBED: &str = "node-embed";

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Returns the ChaCha stream `name` of the run seeded with `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Like [`stream`], with an extra index folded into the stream id (e.g. a
/// molecule or tensor index).
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng
}
