//! Seeded randomness with named, non-overlapping substreams.
//!
//! One 64-bit seed determines every draw in a run. Consumers pull their
//! own substream by purpose ("data", "noise", "dropout", "init", ...) so
//! adding or removing draws in one consumer never perturbs another.
//! Substreams map to distinct ChaCha streams, which cannot overlap.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;

/// Deterministic random stream derived from (seed, substream path).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    chacha: ChaCha8Rng,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ b.wrapping_mul(0x9e3779b97f4a7c15))
}

impl Rng {
    /// Root stream for a seed.
    pub fn new(seed: u64) -> Rng {
        Rng::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Rng {
        let mut chacha = ChaCha8Rng::seed_from_u64(seed);
        chacha.set_stream(stream);
        Rng {
            seed,
            stream,
            chacha,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Named substream. Independent of draws already made on `self`.
    pub fn substream(&self, name: &str) -> Rng {
        Rng::with_stream(self.seed, mix(self.stream, fnv1a(name.as_bytes())))
    }

    /// Indexed substream, for per-run or per-item streams.
    pub fn substream_indexed(&self, name: &str, index: u64) -> Rng {
        let tag = mix(self.stream, fnv1a(name.as_bytes()));
        Rng::with_stream(self.seed, mix(tag, splitmix64(index.wrapping_add(1))))
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.chacha)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.chacha.gen::<f64>()
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.chacha.gen_range(0..n)
    }

    /// Consumes exactly one uniform draw regardless of `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

/// I.i.d. standard-normal tensor. Zero-size shapes yield empty tensors.
pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.normal()).collect();
    Tensor::from_vec(shape, data)
}
