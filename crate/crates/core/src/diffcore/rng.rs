use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::Tensor;

/// Named random streams. Every consumer of randomness draws from its own
/// stream so that adding draws in one place never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Data,
    Init,
    Noise,
    Labels,
    Split,
    Memory,
    Metrics,
    Probe,
    Export,
    Batches,
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Noise => 3,
            Stream::Labels => 4,
            Stream::Split => 5,
            Stream::Memory => 6,
            Stream::Metrics => 7,
            Stream::Probe => 8,
            Stream::Export => 9,
            Stream::Batches => 10,
        }
    }
}

/// Deterministic generator keyed by `(seed, stream)`.
///
/// ChaCha8 with the stream id mapped onto the cipher's stream counter, so
/// identical `(seed, stream, draw index)` triples always produce the same
/// values regardless of platform.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream.id())
    }

    pub fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngState { seed, stream, rng }
    }

    /// Derives a child stream, e.g. one per sub-run or per probe stage.
    pub fn fork(&self, salt: u64) -> Self {
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03))
            ^ self.stream;
        Self::with_stream_id(seed, self.stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        Uniform::new(lo, hi)
            .expect("uniform bounds must be finite and ordered")
            .sample(&mut self.rng)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.uniform(lo, hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }

    /// Uniform categorical labels in `0..classes`.
    pub fn labels(&mut self, n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|_| self.below(classes)).collect()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n` (partial Fisher-Yates).
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_reproduce() {
        let mut a = RngState::new(7, Stream::Noise);
        let mut b = RngState::new(7, Stream::Noise);
        let xa = a.normal_tensor(&[4, 3]);
        let xb = b.normal_tensor(&[4, 3]);
        assert_eq!(xa.data(), xb.data());
    }

    #[test]
    fn streams_are_independent() {
        let mut a = RngState::new(7, Stream::Noise);
        let mut b = RngState::new(7, Stream::Labels);
        assert_ne!(a.normal(), b.normal());
    }

    #[test]
    fn sampling_without_replacement_is_distinct() {
        let mut r = RngState::new(1, Stream::Memory);
        let mut s = r.sample_without_replacement(50, 20);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 20);
        assert!(s.iter().all(|&i| i < 50));
        assert_eq!(r.sample_without_replacement(3, 10).len(), 3);
    }
}
