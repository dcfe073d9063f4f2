//! Deterministic RNG substream derivation.
//!
//! Every stochastic stage derives its generator from (master seed, stream id,
//! substream id), so parallel scheduling and worker counts cannot change
//! results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for the given (stream, substream) pair under a master seed.
pub fn substream_rng(master: u64, stream: u64, substream: u64) -> ChaCha8Rng {
    let inner = mix(stream.wrapping_mul(0x0100_0000_01b3).wrapping_add(substream));
    ChaCha8Rng::seed_from_u64(mix(master ^ inner))
}
