//! Seeded, splittable random streams.
//!
//! A stream is a ChaCha8 generator seeded with `seed_from_u64(seed)` whose
//! 64-bit stream id selects an independent sequence. Child streams are keyed
//! by name: the child id is FNV-1a-64 over the parent id (little-endian)
//! followed by the UTF-8 name. Gaussian samples come from
//! `rand_distr::StandardNormal`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Id of the child stream called `name`.
    pub fn child_id(&self, name: &str) -> u64 {
        let mut bytes = self.stream.to_le_bytes().to_vec();
        bytes.extend_from_slice(name.as_bytes());
        fnv1a64(&bytes)
    }

    /// Independent stream keyed by `name`; does not advance `self`.
    pub fn split(&self, name: &str) -> RngStream {
        Self::with_stream(self.seed, self.child_id(name))
    }

    pub fn gaussian(&mut self) -> f32 {
        self.rng.sample(StandardNormal)
    }

    pub fn gaussian_vec(&mut self, n: usize, std: f32) -> Vec<f32> {
        (0..n).map(|_| self.gaussian() * std).collect()
    }

    pub fn gaussian_tensor(&mut self, shape: impl Into<Vec<usize>>, std: f32) -> Tensor {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, self.gaussian_vec(n, std)).expect("length matches shape")
    }

    pub fn uniform_vec(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }
}
