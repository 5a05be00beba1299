//! Counter-based uniforms keyed on `(seed, stream, record index)`.
//!
//! Inclusion decisions never depend on how the data is blocked, sharded or
//! threaded, only on the global record index.

/// Stream tags separating independent experiments drawn from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Pilot = 0x5049_4c4f_5400_0001,
    Second = 0x5345_434f_4e44_0002,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in `[0, 1)` with 53 random bits.
#[inline]
pub fn uniform(seed: u64, stream: Stream, index: u64) -> f64 {
    let key = splitmix64(seed ^ splitmix64(stream as u64));
    let bits = splitmix64(key ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Bernoulli(p) inclusion of record `index`.
#[inline]
pub fn include(seed: u64, stream: Stream, index: u64, p: f64) -> bool {
    uniform(seed, stream, index) < p
}

/// Derives an independent seed, e.g. per replication.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
}
