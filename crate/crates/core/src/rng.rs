//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, stream id, counter)`: the stream id
//! selects a ChaCha20 stream and the counter is its word position. Each
//! purpose (initialization, noise, dropout, ...) owns a disjoint stream id, and
//! per-step streams are derived by keying the lower 56 bits with the global
//! step, so toggling one consumer never shifts another's draws.
//!
//! Normals use the Box–Muller transform on pairs of 53-bit uniforms.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::{Element, Tensor};

/// Consumer of random numbers; each maps to its own stream id range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Noise = 2,
    Sigma = 3,
    Dropout = 4,
    Data = 5,
    CondDropout = 6,
    Sample = 7,
    Test = 8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distribution {
    Uniform01,
    StandardNormal,
}

const KEY_BITS: u32 = 56;
const KEY_MASK: u64 = (1 << KEY_BITS) - 1;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self::with_stream(seed, (purpose as u64) << KEY_BITS)
    }

    /// Stream for `purpose` keyed by `key` (typically the global step).
    pub fn keyed(seed: u64, purpose: Purpose, key: u64) -> Self {
        Self::with_stream(seed, ((purpose as u64) << KEY_BITS) | (key & KEY_MASK))
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng.set_word_pos(0);
        RngStream { seed, stream, rng }
    }

    /// A sibling stream with the same purpose and a different key.
    pub fn substream(&self, key: u64) -> Self {
        let purpose_bits = self.stream & !KEY_MASK;
        let mixed = (self.stream & KEY_MASK).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ key.wrapping_add(1);
        Self::with_stream(self.seed, purpose_bits | (mixed & KEY_MASK))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Two independent standard normals.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    /// Uniform integer in `[0, n)` by rejection (unbiased).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn sample_vec(&mut self, n: usize, dist: Distribution) -> Vec<f64> {
        match dist {
            Distribution::Uniform01 => (0..n).map(|_| self.uniform()).collect(),
            Distribution::StandardNormal => {
                let mut out = Vec::with_capacity(n + 1);
                while out.len() < n {
                    let (a, b) = self.normal_pair();
                    out.push(a);
                    out.push(b);
                }
                out.truncate(n);
                out
            }
        }
    }

    /// Fills a new constant tensor of `shape`.
    pub fn fill<E: Element>(&mut self, shape: &[usize], dist: Distribution) -> Tensor<E> {
        let n = shape.iter().product();
        let data: Vec<E> = match (dist, E::DTYPE) {
            // 24 bits keep binary32 uniforms strictly below one
            (Distribution::Uniform01, crate::tensor::DType::F32) => (0..n)
                .map(|_| E::from_f64((self.next_u32() >> 8) as f64 / (1u32 << 24) as f64))
                .collect(),
            _ => self.sample_vec(n, dist).into_iter().map(E::from_f64).collect(),
        };
        Tensor::from_vec(data, shape).expect("random draws are finite")
    }
}
