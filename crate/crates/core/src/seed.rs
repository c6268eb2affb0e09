// SPDX-License-Identifier: Apache-2.0

//! Counter-based seed splitting: one root seed feeds every subsystem through
//! independent, reproducible streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for item `index` of the named `stream` under `root`.
pub fn derive_seed(root: u64, stream: &str, index: u64) -> u64 {
    let z = splitmix64(root ^ splitmix64(fnv1a(stream)));
    splitmix64(z ^ splitmix64(index))
}

pub fn stream_rng(root: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, index))
}
