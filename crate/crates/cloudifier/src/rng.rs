//! Counter-based deterministic RNG streams.
//!
//! Every randomized pipeline stage (scene generation, augmentation, training
//! shuffles) derives an independent ChaCha stream from (seed, index) so the
//! result is a pure function of its arguments and never depends on execution
//! or thread order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream for item `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    substream(seed, index, 0)
}

/// Stream for item `index`, lane `lane` (e.g. augmentation variant j of
/// observation i) under `seed`.
pub fn substream(seed: u64, index: u64, lane: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&lane.to_le_bytes());
    // Fixed domain tag so (seed, 0, 0) differs from an all-zero key.
    key[24..32].copy_from_slice(b"cfstream");
    ChaCha8Rng::from_seed(key)
}
