//! Deterministic random number generation.
//!
//! The whole crate draws randomness through [`Pcg32`], a self-contained PCG32
//! (XSH RR 64/32) generator, so results are reproducible bit-for-bit across
//! platforms and independent of any external RNG crate's version. Generators
//! for independent units of work (tasks, folds, initializations) are derived
//! with [`Pcg32::keyed`], which gives O(1) random access: task `i` under seed
//! `s` can be regenerated without producing tasks `0..i-1`.

use std::f64::consts::PI;

const PCG_MULT: u64 = 6364136223846793005;

/// SplitMix64 mixing function; used to spread seeds and derive stream keys.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// PCG32 generator (64-bit state, 32-bit output, XSH RR output function).
#[derive(Debug, Clone)]
pub struct Pcg32 {
    state: u64,
    inc: u64,
    spare_normal: Option<f64>,
}

impl Pcg32 {
    /// Seeds the generator with an initial state and a stream selector,
    /// following the reference seeding procedure.
    pub fn new(seed: u64, stream: u64) -> Self {
        let inc = (stream << 1) | 1;
        let mut rng = Pcg32 {
            state: 0,
            inc,
            spare_normal: None,
        };
        rng.next_u32();
        rng.state = rng.state.wrapping_add(seed);
        rng.next_u32();
        rng
    }

    /// Derives an independent generator for work unit `key` under `seed`.
    ///
    /// Distinct `(seed, key)` pairs map to distinct state/stream pairs, so a
    /// unit can be regenerated in isolation.
    pub fn keyed(seed: u64, key: u64) -> Self {
        let state_seed = splitmix64(seed ^ splitmix64(key));
        Pcg32::new(state_seed, splitmix64(state_seed))
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old.wrapping_mul(PCG_MULT).wrapping_add(self.inc);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    pub fn next_u64(&mut self) -> u64 {
        let hi = self.next_u32() as u64;
        let lo = self.next_u32() as u64;
        (hi << 32) | lo
    }

    /// Uniform double in `[0, 1)` built from the top 53 bits of a u64 draw.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` via the multiply-shift reduction.
    ///
    /// The reduction has a bias below 2^-32 for the bounds used here, which is
    /// irrelevant for data generation and keeps the draw count fixed.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn usize_in(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + self.next_below((hi - lo + 1) as u64) as usize
    }

    /// Uniform double in `[lo, hi)`.
    pub fn f64_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Standard normal draw via the Box-Muller transform.
    ///
    /// The second value of each Box-Muller pair is cached, so draws come in
    /// deterministic pairs per generator.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Normal draw with the given mean and standard deviation.
    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below((i + 1) as u64) as usize;
            items.swap(i, j);
        }
    }
}
