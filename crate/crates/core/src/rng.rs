//! Seeded random streams.
//!
//! Every random draw in the toolkit comes from a [`Xoshiro256PlusPlus`]
//! generator whose 256-bit state is expanded from a 64-bit seed with
//! SplitMix64 (the expansion `rand_xoshiro` documents for `seed_from_u64`).
//! Sub-streams are derived from a root seed and a namespace string, and
//! optionally an index, so one root seed reproduces a whole run:
//!
//! ```text
//! stream_seed = splitmix64(root ^ fnv1a64(namespace)) ^ splitmix64(index + 1)
//! ```
//!
//! [`uniform_index`] and [`uniform_f64`] use fixed, documented bit
//! manipulations on `next_u64` so they can be ported to other languages
//! bit-for-bit.

use rand::{RngCore, SeedableRng};
pub use rand_xoshiro::Xoshiro256PlusPlus as StreamRng;

pub const NS_DATA: &str = "data";
pub const NS_SPLIT: &str = "split";
pub const NS_INIT: &str = "init";
pub const NS_TRAIN: &str = "train";
pub const NS_BOOTSTRAP: &str = "bootstrap";

/// One step of the SplitMix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(text: &str) -> u64 {
    text.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed for the sub-stream `namespace` of `root`.
pub fn derive_seed(root: u64, namespace: &str) -> u64 {
    splitmix64(root ^ fnv1a64(namespace))
}

/// Seed for the `index`-th member of a family of independent streams.
pub fn derive_indexed_seed(root: u64, namespace: &str, index: u64) -> u64 {
    derive_seed(root, namespace) ^ splitmix64(index.wrapping_add(1))
}

pub fn stream(root: u64, namespace: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, namespace))
}

pub fn indexed_stream(root: u64, namespace: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_indexed_seed(root, namespace, index))
}

/// Uniform integer in `0..n` by multiply-high (no rejection step; the bias is
/// below 2^-40 for every `n` used here).
pub fn uniform_index<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> usize {
    debug_assert!(n > 0);
    ((u128::from(rng.next_u64()) * n as u128) >> 64) as usize
}

/// Uniform real in `[0, 1)` from the top 53 bits.
pub fn uniform_f64<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fisher-Yates shuffle driven by [`uniform_index`].
pub fn shuffle<T, R: RngCore + ?Sized>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference SplitMix64 generator seeded with 0.
        let mut state = 0u64;
        let mut next = || {
            let out = splitmix64(state);
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            out
        };
        assert_eq!(next(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(next(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn streams_are_namespaced() {
        assert_ne!(derive_seed(7, NS_DATA), derive_seed(7, NS_TRAIN));
        assert_ne!(
            derive_indexed_seed(7, NS_BOOTSTRAP, 0),
            derive_indexed_seed(7, NS_BOOTSTRAP, 1)
        );
        let mut a = stream(3, NS_DATA);
        let mut b = stream(3, NS_DATA);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_helpers_stay_in_range() {
        let mut rng = stream(1, "t");
        for n in 1..50 {
            assert!(uniform_index(&mut rng, n) < n);
            let u = uniform_f64(&mut rng);
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = stream(9, "t");
        let mut v: Vec<usize> = (0..100).collect();
        shuffle(&mut rng, &mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
