//! Portable pseudo-random draws.
//!
//! The generator is xoshiro256++ seeded through splitmix64, and every
//! derived distribution is written out explicitly (Box–Muller normals,
//! inverse-CDF Poisson) so that a fixed seed yields the same stream in any
//! language that implements the same three recipes.

use nalgebra::DVector;
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Largest Poisson mean drawn in one inverse-CDF pass; `exp(-λ)` must not underflow.
const POISSON_CHUNK: f64 = 500.0;

#[derive(Debug, Clone)]
pub struct PortableRng {
    inner: Xoshiro256PlusPlus,
}

impl PortableRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    pub fn uniform_open(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    /// One standard normal per two uniforms (cosine branch of Box–Muller).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vector(&mut self, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.standard_normal())
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Poisson draw by sequential inverse-CDF search; large means are split
    /// into chunks of at most 500 and the chunk draws summed.
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        if !(lambda > 0.0) {
            return 0;
        }
        let chunks = (lambda / POISSON_CHUNK).ceil().max(1.0);
        let part = lambda / chunks;
        (0..chunks as u64).map(|_| self.poisson_inverse_cdf(part)).sum()
    }

    fn poisson_inverse_cdf(&mut self, lambda: f64) -> u64 {
        let u = self.uniform();
        let mut k = 0u64;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1;
            p *= lambda / k as f64;
            let next = cdf + p;
            // tail mass below machine precision
            if next == cdf {
                break;
            }
            cdf = next;
        }
        k
    }

    /// Cauchy(0, 1) draw via the inverse CDF.
    pub fn standard_cauchy(&mut self) -> f64 {
        (std::f64::consts::PI * (self.uniform() - 0.5)).tan()
    }
}
