//! Seeded pseudorandom stream used for initialisation, data generation and
//! shuffling.
//!
//! The generator is xoshiro256** seeded from a `u64` through SplitMix64 (the
//! `rand_xoshiro` seeding routine). Derived quantities are defined here so
//! that another implementation can reproduce a run from the seed alone:
//!
//! * `uniform()`: `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! * `normal()`: Box-Muller on two uniforms `u1, u2`:
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`; one draw per call.
//! * `below(n)`: `next_u64() % n`.
//! * `shuffle`: Fisher-Yates from the last index down, swapping `i` with
//!   `below(i + 1)`.
//! * `fork()`: a copy of the stream advanced by the xoshiro256 jump
//!   (2^128 steps), giving an independent substream.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Clone, Debug)]
pub struct Rng64 {
    inner: Xoshiro256StarStar,
}

impl Rng64 {
    pub fn new(seed: u64) -> Self {
        Rng64 {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn fork(&self) -> Self {
        let mut inner = self.inner.clone();
        inner.jump();
        Rng64 { inner }
    }
}
