//! Deterministic random number generation.
//!
//! Two flavors are provided, both built on the SplitMix64 finalizer:
//!
//! * [`SplitMix64`] — a sequential stream used for weight initialization
//!   and batch sampling within a training run.
//! * [`keyed`] — a counter-based construction that hashes an arbitrary key
//!   tuple into an independent stream. Dataset generation uses this so
//!   that a sequence's content depends only on `(seed, id, seq, frame)`,
//!   not on generation order.

/// SplitMix64 sequential generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        mix64(self.state)
    }

    /// Uniform double in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). n must be positive.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.below(i + 1);
            slice.swap(i, j);
        }
    }
}

/// Derive an independent generator from a key tuple. Order-independent:
/// the stream depends only on the key values, never on call order.
pub fn keyed(parts: &[u64]) -> SplitMix64 {
    let mut acc = 0x51_7c_c1_b7_27_22_0a_95u64;
    for &p in parts {
        acc = mix64(acc ^ p).wrapping_mul(0x2545f4914f6cdd1d);
    }
    SplitMix64::new(mix64(acc))
}
