//! Deterministic pseudo-random numbers.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood, "Fast splittable
//! pseudorandom number generators", OOPSLA 2014): a 64-bit counter advanced
//! by the golden-ratio increment `0x9E3779B97F4A7C15`, finalized with the
//! `mix` function below. Gaussian samples use the Box–Muller transform.
//! Both are fixed normatively so that noise streams reproduce bit-for-bit
//! across platforms and can be re-implemented in any language:
//!
//! * `next_u64`: `state += 0x9E3779B97F4A7C15; return mix(state)`.
//! * `unit_f64`: `(next_u64() >> 11) * 2^-53`, uniform in `[0, 1)`.
//! * `normal_f32`: one Box–Muller evaluation per call, consuming exactly
//!   two `next_u64` draws (`u1` mapped into `(0, 1]`, `u2` into `[0, 1)`),
//!   returning `sqrt(-2 ln u1) * cos(2 pi u2)` as f32. The sine branch is
//!   discarded; no state is cached between calls.
//! * `below(n)`: `next_u64() % n` (the modulo bias at 64 bits is
//!   negligible for the ranges used here and keeps the mapping trivial).

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; also used as the documented seed-derivation hash.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a stream seed from a master seed and a stream tag:
/// `derive_seed(master, tag) = mix(master ^ mix(tag))`.
#[inline]
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    mix(master ^ mix(tag))
}

/// Small-state deterministic PRNG (SplitMix64 + Box–Muller).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, 1)` as f32.
    #[inline]
    pub fn unit_f32(&mut self) -> f32 {
        self.unit_f64() as f32
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Standard normal sample via Box–Muller (cosine branch only).
    pub fn normal_f32(&mut self) -> f32 {
        // u1 in (0, 1] so ln(u1) is finite; u2 in [0, 1).
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        (r * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// In-place Fisher–Yates shuffle (descending index, `j = below(i + 1)`).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
