//! Deterministic pseudo-randomness for the whole crate.
//!
//! Every stochastic choice (pixel permutations, data shuffles, weight
//! initialization) flows through [`SplitMix64`] so that a given seed produces
//! the same result on every platform. SplitMix64 is a Weyl-sequence counter
//! with a 64-bit finalizer (Steele, Lea & Flood, "Fast splittable pseudorandom
//! number generators", OOPSLA 2014); the exact constants are part of this
//! crate's compatibility contract and must not change:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! output = z ^ (z >> 31)
//! ```
//!
//! Bounded integers use Lemire's multiply-shift rejection method, and shuffles
//! are descending Fisher-Yates; both are pure integer arithmetic, so
//! permutations are bit-reproducible everywhere. Gaussian draws use Box-Muller
//! on 53-bit uniforms (deterministic for a fixed platform libm, which is all
//! weight initialization requires).

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 generator. Cheap to create, copy and fork.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    spare_normal: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed, spare_normal: None }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased uniform integer in `[0, bound)` (Lemire's method).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below() requires a positive bound");
        let mut x = self.next_u64();
        let mut m = (x as u128) * (bound as u128);
        let mut low = m as u64;
        if low < bound {
            let threshold = bound.wrapping_neg() % bound;
            while low < threshold {
                x = self.next_u64();
                m = (x as u128) * (bound as u128);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }

    /// In-place descending Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// Standard normal draw via Box-Muller (caches the paired value).
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Derives an independent stream seed from a base seed and a stream tag.
///
/// Defined as one SplitMix64 output of `base ^ (GAMMA * (tag + 1))`; fixed
/// for reproducibility, like the generator itself.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    SplitMix64::new(base ^ GAMMA.wrapping_mul(tag.wrapping_add(1))).next_u64()
}
