//! Seedable portable random source.
//!
//! ChaCha8 keyed by `seed` (via `rand_core`'s `seed_from_u64`), with the
//! ChaCha stream id selecting an independent substream. Derived draws use
//! fixed transforms so they can be reproduced elsewhere:
//!
//! * `uniform`: top 53 bits of `next_u64`, times 2⁻⁵³, in `[0, 1)`
//! * `normal`: Box–Muller cosine branch, `√(−2 ln(1 − u₁)) · cos(2π u₂)`
//! * `below(n)`: `⌊uniform · n⌋`
//! * `shuffle`: Fisher–Yates from the last index down

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        Self(r)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
