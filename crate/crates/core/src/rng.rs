//! Seeded random streams.
//!
//! A stream is a ChaCha8 keystream keyed by the 64-bit seed, with the
//! replica index selecting the ChaCha stream and the block counter acting
//! as the draw counter. Distinct replicas therefore never overlap and can
//! be generated in any order or in parallel.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

/// Source of the primitive draws used throughout the crate.
///
/// Everything random goes through this trait so tests can substitute
/// scripted or degenerate noise.
pub trait RandomSource {
    /// Uniform on `[0, 1)`.
    fn uniform(&mut self) -> f64;

    fn standard_normal(&mut self) -> f64;

    /// Standard exponential (mean one) by inversion.
    fn standard_exponential(&mut self) -> f64 {
        -(-self.uniform()).ln_1p()
    }

    fn poisson(&mut self, mean: f64) -> u64 {
        // Inversion by sequential search; fine for the small means stubs see.
        let mut k = 0u64;
        let mut p = (-mean).exp();
        let mut cdf = p;
        let u = self.uniform();
        while u > cdf && p > 0.0 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        k
    }

    /// Gamma with integer shape and unit scale.
    fn gamma_int(&mut self, shape: u64) -> f64 {
        (0..shape).map(|_| self.standard_exponential()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn draw_counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// A fresh stream for a sub-task, derived from this stream's key.
    pub fn substream(&self, index: u64) -> Self {
        let mixed = self
            .stream_id
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        Self::new(self.seed ^ 0xD6E8_FEB8_6659_FD93, mixed)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

impl RandomSource for RngStream {
    fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    fn standard_exponential(&mut self) -> f64 {
        rand_distr::Exp1.sample(&mut self.inner)
    }

    fn poisson(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        let d = Poisson::new(mean).expect("positive finite mean");
        let k: f64 = d.sample(&mut self.inner);
        k as u64
    }

    fn gamma_int(&mut self, shape: u64) -> f64 {
        match shape {
            0 => 0.0,
            1..=16 => (0..shape).map(|_| self.standard_exponential()).sum(),
            _ => Gamma::new(shape as f64, 1.0)
                .expect("positive shape")
                .sample(&mut self.inner),
        }
    }
}

/// Degenerate source: every Gaussian is zero and every uniform is one half.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl RandomSource for ZeroNoise {
    fn uniform(&mut self) -> f64 {
        0.5
    }

    fn standard_normal(&mut self) -> f64 {
        0.0
    }
}

/// Replays fixed uniforms (cycling) and zero Gaussians.
#[derive(Clone, Debug)]
pub struct ScriptedUniforms {
    values: Vec<f64>,
    next: usize,
}

impl ScriptedUniforms {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(!values.is_empty());
        Self { values, next: 0 }
    }
}

impl RandomSource for ScriptedUniforms {
    fn uniform(&mut self) -> f64 {
        let u = self.values[self.next % self.values.len()];
        self.next += 1;
        u
    }

    fn standard_normal(&mut self) -> f64 {
        0.0
    }
}
