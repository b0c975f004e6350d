//! Counter-based random streams.
//!
//! Every random draw in a simulation comes from a stream keyed by
//! `(master seed, domain, worker, index)`. The key is mixed with SplitMix64
//! into a 256-bit ChaCha8 seed, so a worker's draws at an iteration do not
//! depend on how many draws other workers made or in which order workers ran.
//! The derivation uses only integer arithmetic and is identical on every
//! platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator type used for every stream.
pub type StreamRng = ChaCha8Rng;

/// Separates independent uses of the same `(master, worker, index)` triple.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    /// Gradient sampling and quantization inside a training round.
    Round = 1,
    /// Oracle variance calibration before training.
    Calibration = 2,
    /// Synthetic dataset generation.
    Data = 3,
    /// Monte Carlo verification draws.
    MonteCarlo = 4,
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the 32-byte seed for a stream key.
pub fn derive_seed(master: u64, domain: Domain, worker: u64, index: u64) -> [u8; 32] {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ domain as u64);
    h = splitmix64(h ^ worker);
    h = splitmix64(h ^ index);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    seed
}

/// Opens the stream for `(master, domain, worker, index)`.
pub fn stream(master: u64, domain: Domain, worker: u64, index: u64) -> StreamRng {
    StreamRng::from_seed(derive_seed(master, domain, worker, index))
}
