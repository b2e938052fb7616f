use alloc::vec::Vec;

use rand_core::Rng as _;
use rand_pcg::Pcg32;

use super::{Real, Tensor};

/// Seeded PCG-XSH-RR 32 stream.
///
/// Gaussian draws use the cosine branch of Box–Muller, consuming two 53-bit
/// uniforms per sample. Output depends only on `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: Pcg32,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            seed,
            stream,
            inner: Pcg32::new(seed, stream),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh generator on a different stream of the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `(0, 1]`.
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by rejection. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Fisher–Yates.
    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    pub fn normal_tensor<T: Real>(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.normal(mean, std))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }
}

/// `n` Gaussian draws as a vector tensor.
pub fn rng_normal<T: Real>(rng: &mut Rng, n: usize, mean: f64, std: f64) -> Tensor<T> {
    rng.normal_tensor(&[n], mean, std)
}

impl Rng {
    pub fn normal_vector<T: Real>(&mut self, n: usize, mean: f64, std: f64) -> Tensor<T> {
        rng_normal(self, n, mean, std)
    }
}
