//! Deterministic fan-out of the single user-facing seed.
//!
//! Every random consumer in the toolkit derives its own stream seed as
//! `splitmix64(root ^ fnv1a64(tag))` where `tag` names the consumer. Tags in
//! use: `"synthetic"` (data generator), `"model-init"` (weight
//! initialization), `"train-shuffle"` (epoch sample order), `"verify-ranks"`
//! (rank-histogram tie breaking). Changing the root seed changes every
//! stream; two consumers never share a stream.

use rand::Rng;

/// Derive the seed for one named consumer from the root seed.
pub fn derive(root: u64, consumer: &str) -> u64 {
    splitmix64(root ^ fnv1a64(consumer.as_bytes()))
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// One standard-normal draw via Box-Muller; consumes exactly two uniforms.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
