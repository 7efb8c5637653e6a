//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness gets its own stream keyed by `(seed, name,
//! index)`. Streams are independent by construction, so adding or removing
//! draws in one consumer never perturbs another — ablation rows stay paired
//! comparisons under a shared seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic stream keyed by a run seed plus a textual name.
///
/// The name may encode indices, e.g. `"dropout/12/3"` for batch step 12,
/// instance 3.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ fnv1a(name.as_bytes()));
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream with two numeric indices, avoiding string formatting in hot loops.
pub fn stream2(seed: u64, name: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mixed = splitmix64(seed ^ fnv1a(name.as_bytes()))
        ^ splitmix64(a.wrapping_mul(0x9e37_79b9).wrapping_add(1))
        ^ splitmix64(b.wrapping_mul(0x85eb_ca6b).wrapping_add(2));
    let mut state = mixed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_deterministic() {
        let mut a = stream(7, "corpus/0");
        let mut b = stream(7, "corpus/0");
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn streams_differ_by_name_and_seed() {
        let x: u64 = stream(7, "corpus/0").random();
        let y: u64 = stream(7, "corpus/1").random();
        let z: u64 = stream(8, "corpus/0").random();
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn indexed_streams_match_named() {
        // stream2 is a distinct keying scheme; just check independence.
        let x: u64 = stream2(7, "dropout", 0, 1).random();
        let y: u64 = stream2(7, "dropout", 1, 0).random();
        assert_ne!(x, y);
    }
}
