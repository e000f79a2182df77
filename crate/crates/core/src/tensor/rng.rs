//! Seedable, stream-separated random source.
//!
//! Each consumer (data generation, diffusion noise, parameter init, ...)
//! derives its own counter stream from the run seed, so adding draws to one
//! consumer never perturbs the others.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a named consumer under the same seed.
    pub fn stream(seed: u64, consumer: &str) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fnv1a64(consumer));
        Rng { inner }
    }

    /// Standard normal draw (ziggurat).
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform diffusion step in [1, k_max].
    pub fn diffusion_step(&mut self, k_max: usize) -> usize {
        self.inner.gen_range(1..=k_max)
    }

    pub fn fill_normal(&mut self, buf: &mut [f64]) {
        for v in buf.iter_mut() {
            *v = self.normal();
        }
    }
}
