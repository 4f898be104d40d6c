//! Deterministic random-number plumbing.
//!
//! All randomness in a run flows from a single 64-bit master seed. Independent
//! streams are derived as
//!
//! ```text
//! subseed(master, tag, index) = splitmix64(master ^ fnv1a64(tag) ^ index * GOLDEN)
//! ```
//!
//! where `tag` names the consumer and `index` distinguishes repeated uses
//! (run index, iteration index, ...). Tags in use:
//!
//! | tag                 | index          | consumer                                  |
//! |---------------------|----------------|-------------------------------------------|
//! | `synth.sig`         | signature no.  | synthetic class signatures                |
//! | `synth.noise`       | domain no.     | synthetic per-pixel noise                 |
//! | `split`             | run index      | train/test split sampling                 |
//! | `init`              | run index      | parameter initialization                  |
//! | `transfer`          | run index      | fresh encoder/head init after transfer    |
//! | `pretrain.regions`  | iteration      | contrastive region sampling + augmentation|
//! | `joint.batch`       | iter * D + d   | balanced joint-training batch selection   |
//!
//! The derivation is a pure function of its inputs, so any component can be
//! re-executed in isolation and reproduce its stream exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive an independent 64-bit seed for `(tag, index)` under `master`.
pub fn subseed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(master ^ fnv1a64(tag.as_bytes()) ^ index.wrapping_mul(GOLDEN))
}

/// Seed a ChaCha8 stream for `(tag, index)` under `master`.
pub fn rng_from(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(master, tag, index))
}
