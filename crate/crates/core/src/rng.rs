//! Seeded PRNG used everywhere a random draw is needed, so that every
//! generator, initializer, and shuffle is reproducible from a u64 seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct ToolkitRng {
    inner: ChaCha8Rng,
}

impl ToolkitRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent stream for a named stage of a run.
    pub fn for_stage(seed: u64, stage: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in stage.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        Self::new(seed ^ h)
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("valid std");
        (0..n).map(|_| dist.sample(&mut self.inner)).collect()
    }

    pub fn uniform_usize(&mut self, bound: usize) -> usize {
        self.inner.gen_range(0..bound)
    }

    pub fn uniform_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = ToolkitRng::new(7);
        let mut b = ToolkitRng::new(7);
        assert_eq!(a.normal_vec(16, 0.02), b.normal_vec(16, 0.02));
    }

    #[test]
    fn stage_streams_differ() {
        let mut a = ToolkitRng::for_stage(7, "pretrain");
        let mut b = ToolkitRng::for_stage(7, "align");
        assert_ne!(a.normal_vec(4, 1.0), b.normal_vec(4, 1.0));
    }
}
