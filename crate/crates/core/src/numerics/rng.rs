//! Counter-based, splittable random streams.
//!
//! Every stream is a ChaCha12 keystream keyed by the master seed and selected
//! by a 64-bit stream id; the word position acts as the counter. Splitting
//! derives a child stream id by hashing, so parallel work can be handed
//! disjoint streams without sharing mutable state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::error::{Error, Result};

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            inner,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// Independent child stream; the parent is not advanced.
    pub fn split(&self, child: u64) -> RngStream {
        let id = mix64(
            self.stream_id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ mix64(child.wrapping_add(1)),
        );
        RngStream::new(self.master_seed, id)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn gaussian(&mut self, shape: &[usize]) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape(shape.to_vec(), "gaussian draw".into()));
        }
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::new(shape, data)
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape(shape.to_vec(), "uniform draw".into()));
        }
        let n = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * self.uniform()).collect();
        Tensor::new(shape, data)
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.uniform_int(0, i);
            idx.swap(i, j);
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_stream_is_bit_identical() {
        let a = RngStream::new(7, 0).gaussian(&[2, 2]).unwrap();
        let b = RngStream::new(7, 0).gaussian(&[2, 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_streams_differ() {
        let a = RngStream::new(7, 0).gaussian(&[8]).unwrap();
        let b = RngStream::new(7, 1).gaussian(&[8]).unwrap();
        assert_ne!(a, b);
        let root = RngStream::new(7, 0);
        assert_ne!(root.split(0).stream_id(), root.split(1).stream_id());
        assert_ne!(root.split(0).stream_id(), root.stream_id());
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(RngStream::new(1, 0).gaussian(&[3, 0]).is_err());
        assert!(RngStream::new(1, 0).gaussian(&[]).is_err());
    }

    #[test]
    fn counter_advances_deterministically() {
        let mut r = RngStream::new(3, 9);
        assert_eq!(r.counter(), 0);
        r.gaussian(&[10]).unwrap();
        let c = r.counter();
        assert!(c > 0);
        let mut r2 = RngStream::new(3, 9);
        r2.gaussian(&[10]).unwrap();
        assert_eq!(r2.counter(), c);
    }

    #[test]
    fn gaussian_moments() {
        let n = 1_000_000;
        let x = RngStream::new(2024, 5).gaussian(&[n]).unwrap();
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(mean.abs() < 4e-3, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-2, "var {var}");
    }

    #[test]
    fn permutation_is_bijective() {
        let mut p = RngStream::new(1, 1).permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}
