//! Step-count sampling for variable-K training and the uniform time partition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("step count must be at least 1, got {0}")]
    InvalidStepCount(usize),
    #[error("invalid sampler: {0}")]
    InvalidSampler(String),
}

/// Draws `K = round(k_min + x·(k_max − k_min))` with `x ~ Beta(α, β)`.
#[derive(Clone, Debug)]
pub struct KSampler {
    alpha: f64,
    beta: f64,
    k_min: usize,
    k_max: usize,
    rng: ChaCha8Rng,
}

impl KSampler {
    pub fn new(alpha: f64, beta: f64, k_min: usize, k_max: usize, seed: u64) -> Result<Self, ScheduleError> {
        if k_min < 1 || k_min > k_max {
            return Err(ScheduleError::InvalidSampler(format!(
                "bounds [{k_min}, {k_max}] must satisfy 1 <= k_min <= k_max"
            )));
        }
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(ScheduleError::InvalidSampler(format!(
                "beta shape parameters must be positive, got ({alpha}, {beta})"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            k_min,
            k_max,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Degenerate sampler that always returns `k`.
    pub fn fixed(k: usize, seed: u64) -> Result<Self, ScheduleError> {
        Self::new(1.0, 1.0, k, k, seed)
    }

    pub fn bounds(&self) -> (usize, usize) {
        (self.k_min, self.k_max)
    }

    /// Pre-rounding Beta draw in [0, 1].
    pub fn sample_unit(&mut self) -> f64 {
        if self.beta == 1.0 {
            // inverse CDF of Beta(α, 1): F(x) = x^α
            let u: f64 = self.rng.random();
            u.powf(1.0 / self.alpha)
        } else {
            let ga = Gamma::new(self.alpha, 1.0).expect("validated shape");
            let gb = Gamma::new(self.beta, 1.0).expect("validated shape");
            let a: f64 = ga.sample(&mut self.rng);
            let b: f64 = gb.sample(&mut self.rng);
            a / (a + b)
        }
    }

    pub fn sample_k(&mut self) -> usize {
        if self.k_min == self.k_max {
            return self.k_min;
        }
        let x = self.sample_unit();
        let k = (self.k_min as f64 + x * (self.k_max - self.k_min) as f64).round();
        (k as usize).clamp(self.k_min, self.k_max)
    }
}

/// Uniform partition `t_k = k / K` for `k = 0..=K`.
pub fn partition(k: usize) -> Result<Vec<f64>, ScheduleError> {
    if k < 1 {
        return Err(ScheduleError::InvalidStepCount(k));
    }
    Ok((0..=k).map(|i| i as f64 / k as f64).collect())
}
