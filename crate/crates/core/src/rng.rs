//! Seeded randomness shared by every stochastic component.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, salt: u64) -> u64 {
    splitmix(base ^ splitmix(salt))
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike the std hasher.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Draws `b` indices from `0..n`. Without replacement the result is sorted so
/// that float accumulation order does not depend on the draw order.
pub fn sample_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, b: usize, replacement: bool) -> Vec<usize> {
    if replacement {
        (0..b).map(|_| rng.random_range(0..n)).collect()
    } else {
        let mut v = index::sample(rng, n, b.min(n)).into_vec();
        v.sort_unstable();
        v
    }
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}
