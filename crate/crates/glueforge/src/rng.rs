//! Counter-based random values for reproducible, order-independent
//! stochastic kernels.
//!
//! DARE-style sparsification draws one uniform per scalar entry. Keying the
//! draw on `(seed, tensor name, flat index)` instead of consuming a
//! sequential stream makes the result independent of iteration order and of
//! how work is split across threads.

/// 64-bit avalanche mix (splitmix64 finalizer).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of a byte string; stable across platforms and builds.
#[inline]
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Uniform value in `[0, 1)` keyed on `(seed, tensor name, flat index)`.
#[inline]
pub fn keyed_unit(seed: u64, name_hash: u64, index: u64) -> f64 {
    let word = mix64(mix64(seed ^ name_hash) ^ index);
    // 53 high-quality bits into the unit interval.
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
