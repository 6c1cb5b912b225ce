//! Named sub-seeds derived from one root seed.
//!
//! Every random stream in a run (initialization, shuffling, mask sampling,
//! validation masks, synthesis) gets its own generator, derived from the root
//! seed and a stable name. The derivation is a fixed hash, so results do not
//! depend on the standard library's hasher or on the order streams are opened.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01B3))
}

pub fn sub_seed(root: u64, name: &str) -> u64 {
    splitmix64(root ^ splitmix64(fnv1a(name.as_bytes())))
}

pub fn rng(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(sub_seed(root, name))
}
