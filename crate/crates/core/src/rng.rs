//! Counter-based deterministic random streams.
//!
//! Every random draw in the toolkit comes from a stream keyed by
//! `(master_seed, purpose tag, ids...)`. Streams for different keys are
//! independent, and a stream's output depends only on its key, never on
//! scheduling order. This is what makes parallel runs byte-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a ChaCha8 stream from a master seed, a purpose tag, and key ids.
///
/// The tag separates uses (e.g. `"impute"` vs `"sample"`) so that streams
/// for the same unit in different stages never collide.
pub fn stream(master_seed: u64, tag: &str, ids: &[u64]) -> ChaCha8Rng {
    let mut state = master_seed ^ 0x6a09e667f3bcc908;
    let _ = splitmix64(&mut state);
    for chunk in tag.as_bytes().chunks(8) {
        let mut buf = [0u8; 8];
        buf[..chunk.len()].copy_from_slice(chunk);
        state ^= u64::from_le_bytes(buf);
        let _ = splitmix64(&mut state);
    }
    for &id in ids {
        state ^= id;
        let _ = splitmix64(&mut state);
    }
    let mut seed = [0u8; 32];
    for word in seed.chunks_exact_mut(8) {
        word.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
