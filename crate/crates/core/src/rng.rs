//! `splitmix64-ctr`: a seedable counter-based generator.
//!
//! Draw `i` (zero-based) of a stream with key `k` is
//! `mix64(k + (i + 1) · 0x9E3779B97F4A7C15)` with the SplitMix64 finalizer
//! `mix64`. For a key equal to the seed this reproduces the reference
//! SplitMix64 sequence, so other implementations can regenerate every stream
//! from `(seed, stream index)` alone.
//!
//! * uniform: `(draw >> 11) · 2⁻⁵³`, in `[0, 1)`
//! * normal: Box–Muller on two consecutive uniforms `u₁, u₂`:
//!   `r = √(−2 ln(1 − u₁))`, yielding `r·cos(2πu₂)` then `r·sin(2πu₂)`
//! * stream split: `key(seed, index) = mix64(seed ⊕ mix64(index))`

use crate::math;
use crate::matkit::{Mat, Vector};

/// Algorithm identifier recorded in experiment metadata.
pub const ALGORITHM: &str = "splitmix64-ctr";

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key of sub-stream `index` derived from `seed`.
#[inline]
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index))
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            key: seed,
            counter: 0,
            spare_normal: None,
        }
    }

    /// Independent stream `index` of `seed`.
    pub fn stream(seed: u64, index: u64) -> Self {
        Self::new(derive_seed(seed, index))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Number of 64-bit draws consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = math::sqrt(-2.0 * math::ln(u1));
        let angle = core::f64::consts::TAU * u2;
        self.spare_normal = Some(r * math::sin(angle));
        r * math::cos(angle)
    }

    pub fn standard_normal_vector(&mut self, n: usize) -> Vector {
        Vector::from_fn(n, |_, _| self.normal())
    }

    /// Zero-mean Gaussian sample `C·z` where `factor = C` satisfies `C·Cᵀ = Σ`.
    pub fn gaussian(&mut self, factor: &Mat) -> Vector {
        let z = self.standard_normal_vector(factor.ncols());
        factor * z
    }
}
