//! Deterministic pseudo-random number generation.
//!
//! Every stochastic operation in this workspace draws from [`Rng64`], a
//! SplitMix64 generator. Independent streams are derived from a base seed
//! plus a stream index via [`Rng64::stream`], which is what makes photon
//! transport bit-reproducible for any worker count: photon `i` always sees
//! the stream `(base_seed, i)` no matter which thread runs it.

/// SplitMix64 state. Cheap to construct, one multiply-xor-shift per draw.
#[derive(Debug, Clone)]
pub struct Rng64 {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng64 {
    /// Generator seeded directly from a user-facing seed.
    pub fn new(seed: u64) -> Self {
        Rng64 {
            state: mix64(seed.wrapping_add(GOLDEN_GAMMA)),
        }
    }

    /// Derive the `index`-th independent stream of `base_seed`.
    ///
    /// The initial state is a hash of (base_seed, index), so streams with
    /// different indices start at well-separated points of the sequence.
    pub fn stream(base_seed: u64, index: u64) -> Self {
        let a = mix64(base_seed ^ 0x5851_F42D_4C95_7F2D);
        let b = mix64(index.wrapping_add(GOLDEN_GAMMA));
        Rng64 {
            state: mix64(a ^ b.rotate_left(17)),
        }
    }

    /// Derive a stream from a string label, for naming sub-seeds in
    /// pipelines (e.g. `stream_named(seed, "noise")`).
    pub fn stream_named(base_seed: u64, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in label.as_bytes() {
            h ^= u64::from(*byte);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        Self::stream(base_seed, h)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi). Degenerate ranges (lo == hi) return lo.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.f64() * (hi - lo)
    }

    /// Uniform integer in [0, n). Panics if n == 0.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Multiply-shift rejection-free mapping; bias is < 2^-53 for the
        // small n used here.
        ((self.f64() * n as f64) as usize).min(n - 1)
    }

    /// Uniform integer in [lo, hi] inclusive.
    #[inline]
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as usize) as i64
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.f64(); // (0, 1]
        let u2 = self.f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Bernoulli draw.
    #[inline]
    pub fn chance(&mut self, p: f64) -> bool {
        self.f64() < p
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
