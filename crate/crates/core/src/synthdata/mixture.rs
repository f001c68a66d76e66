use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Result};

/// Temperature-scaled sampling probabilities `p_i = N_i^α / Σ_j N_j^α`.
pub fn mixture_probs(counts: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(DataError::Mixture("no datasets".into()));
    }
    if let Some(c) = counts.iter().find(|&&c| !(c > 0.0 && c.is_finite())) {
        return Err(DataError::Mixture(format!("counts must be positive, got {c}")));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(DataError::Mixture(format!("exponent must be nonnegative, got {alpha}")));
    }
    let w: Vec<f64> = counts.iter().map(|&c| c.powf(alpha)).collect();
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|x| x / total).collect())
}

/// Draws dataset indices according to [`mixture_probs`].
#[derive(Clone, Debug)]
pub struct MixtureSampler {
    pub ids: Vec<String>,
    pub counts: Vec<f64>,
    pub alpha: f64,
    pub probs: Vec<f64>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl MixtureSampler {
    pub fn new(ids: Vec<String>, counts: Vec<f64>, alpha: f64, seed: u64) -> Result<Self> {
        if ids.len() != counts.len() {
            return Err(DataError::Mixture(format!("{} ids for {} counts", ids.len(), counts.len())));
        }
        let probs = mixture_probs(&counts, alpha)?;
        let dist = WeightedIndex::new(&probs).map_err(|e| DataError::Mixture(e.to_string()))?;
        Ok(Self {
            ids,
            counts,
            alpha,
            probs,
            dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self) -> usize {
        self.dist.sample(&mut self.rng)
    }
}
