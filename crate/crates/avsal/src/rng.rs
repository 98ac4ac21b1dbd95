//! Seedable counter-based random number generator.
//!
//! Every stochastic step in the crate (parameter init, data synthesis,
//! fixation sampling, batch shuffling) draws from this generator so that a
//! `(seed, stream)` pair reproduces the exact same byte stream on any
//! platform and in any language that implements the recipe below.
//!
//! The generator is the SplitMix64 output function applied to a counter:
//!
//! ```text
//! state(i) = seed + (i + 1) * 0x9E3779B97F4A7C15        (wrapping u64)
//! z = state(i)
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! out(i) = z ^ (z >> 31)
//! ```
//!
//! Derived values:
//! - `next_f32`: top 24 bits of `out(i)` scaled by 2^-24, uniform in [0, 1).
//! - `normal_f32`: Box-Muller on two consecutive uniforms,
//!   `sqrt(-2 ln(1-u1)) * cos(2 pi u2)` (the second Box-Muller value is
//!   discarded; `1-u1` avoids ln 0).
//! - `fork(tag)`: child generator with `seed' = mix(seed ^ mix(tag))`,
//!   counter 0, where `mix` is the output function above applied once.
//!   Forked streams are used so that adding draws to one subsystem never
//!   shifts another subsystem's stream.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based SplitMix64 generator. Copy-cheap; cloning forks the
/// exact stream position.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Restore a generator at an explicit counter position (checkpoint resume).
    pub fn from_state(seed: u64, counter: u64) -> Self {
        Rng { seed, counter }
    }

    pub fn state(&self) -> (u64, u64) {
        (self.seed, self.counter)
    }

    /// Child generator with an independent stream labelled by `tag`.
    pub fn fork(&self, tag: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 24 bits of precision.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / 16_777_216.0)
    }

    /// Uniform in [lo, hi).
    pub fn range_f32(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_f32()
    }

    /// Uniform integer in [0, n). `n` must be positive; uses the simple
    /// multiply-shift reduction (bias < 2^-40 for any n that fits desk scale).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller (one value per uniform pair).
    pub fn normal_f32(&mut self) -> f32 {
        let u1 = self.next_f32();
        let u2 = self.next_f32();
        let r = (-2.0 * (1.0 - u1).max(f32::MIN_POSITIVE).ln()).sqrt();
        r * (std::f32::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle with draws from this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn fork_streams_are_independent_of_parent_position() {
        let mut a = Rng::new(7);
        let fork_before = a.fork(3);
        a.next_u64();
        a.next_u64();
        let fork_after = a.fork(3);
        assert_eq!(fork_before.state(), fork_after.state());
    }

    #[test]
    fn known_vector_pins_the_recipe() {
        // Frozen first outputs for seed 0; any refactor that changes the
        // stream is an external-contract break and must fail here.
        let mut r = Rng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn uniform_range() {
        let mut r = Rng::new(42);
        for _ in 0..1000 {
            let x = r.next_f32();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut r = Rng::new(11);
        let n = 20_000;
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for _ in 0..n {
            let x = r.normal_f32() as f64;
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
