//! Counter-based deterministic random streams.
//!
//! Every stochastic component of the crate draws from a ChaCha stream whose
//! seed is derived from a master seed plus a tuple of integer tags (e.g.
//! `(iteration, rollout, step)`). A stream is therefore reproducible in
//! isolation, independent of thread scheduling or evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step; good avalanche behaviour for seed derivation.
#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a ChaCha8 stream from a master seed and a tag tuple.
///
/// Identical `(master, tags)` always yields an identical stream; distinct
/// tags yield statistically independent streams.
pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = master ^ 0xD1B5_4A32_D192_ED03;
    // fold every tag into the state before expanding to 256 bits
    for &t in tags {
        state = splitmix64(&mut state) ^ t.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
