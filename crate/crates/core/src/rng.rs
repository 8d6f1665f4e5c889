//! Seedable, splittable random streams.
//!
//! Every stream is a ChaCha8 keystream. A `(seed, stream)` pair fixes the
//! generator: the 64-bit seed is expanded to a 256-bit key with
//! `rand_core::SeedableRng::seed_from_u64` (PCG32 expansion) and the stream id
//! selects the ChaCha nonce. Child seeds are the first 64-bit word of the
//! child stream, so any implementation of ChaCha8 reproduces them.
//!
//! Bounded integers use Lemire's widening multiply without rejection
//! (`(x * n) >> 64` over the next 64-bit word); the bias is below 2^-40 for
//! every range used here and the rule is trivially portable.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Standard normal via Box-Muller (one draw per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Derives an independent seed for child `index` of `seed`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    Stream::new(seed, index.wrapping_add(1)).next_u64()
}
