//! Seeded random streams.
//!
//! Every random draw in the toolkit comes from `xoshiro256**` seeded through
//! SplitMix64, so results are reproducible across platforms. Independent
//! consumers (model init, corpus splits, batch shuffles) get their own stream
//! derived from a base seed and a tag, which keeps them decoupled: adding a
//! draw in one place never shifts the numbers seen elsewhere.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

/// SplitMix64 finalizer, used to mix seeds and tags.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stream for `tags` under `seed`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    let mut s = mix(seed);
    for &t in tags {
        s = mix(s ^ t);
    }
    Rng::seed_from_u64(s)
}

/// Stable 64-bit tag for a string label.
pub fn tag(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
