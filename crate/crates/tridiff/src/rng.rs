//! Deterministic counter-based random streams.
//!
//! Every stochastic operation in this crate takes an explicit seed and
//! derives independent substreams by mixing `(seed, stream)` pairs. A value
//! drawn for, say, coordinate `i` of face `j` at training step `s` never
//! depends on evaluation order or thread count, so parallel and sequential
//! runs produce bit-identical results.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a new seed from a parent seed and a stream identifier.
///
/// Chains compose: `derive(derive(seed, a), b)` yields independent streams
/// for every `(a, b)` pair.
#[inline]
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix(seed.wrapping_add(GOLDEN).wrapping_add(mix(stream.wrapping_add(GOLDEN))))
}

/// Small deterministic generator (SplitMix64).
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Generator for the substream `stream` of `seed`.
    pub fn from_stream(seed: u64, stream: u64) -> Self {
        Rng::new(derive(seed, stream))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53-bit resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` via multiply-shift.
    #[inline]
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
