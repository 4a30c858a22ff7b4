//! Posterior recovery from a trained critic: `p(θ | y*, d*) ≈ e^{T(θ, y*) − 1} p(θ)`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::Network;

/// ESS below this fraction of the sample count flags the weights as degenerate.
pub const DEGENERATE_ESS_FRACTION: f64 = 0.01;

/// Unnormalised posterior density at `theta`.
pub fn posterior_density(
    net: &Network,
    theta: &[f64],
    y_star: &[f64],
    prior_density: &dyn Fn(&[f64]) -> f64,
) -> Result<f64> {
    let t = net.forward(theta, y_star)?;
    Ok((t - 1.0).exp() * prior_density(theta))
}

/// Importance weights of prior draws under the critic at a fixed observation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorEstimate {
    y_star: Vec<f64>,
    samples: Vec<Vec<f64>>,
    critic: Vec<f64>,
    /// `exp(T − 1)`; the prior factor cancels when resampling prior draws.
    weights: Vec<f64>,
    normalized: Vec<f64>,
    ess: f64,
}

impl PosteriorEstimate {
    pub fn new(net: &Network, prior_samples: Vec<Vec<f64>>, y_star: &[f64]) -> Result<Self> {
        if prior_samples.is_empty() {
            return Err(Error::Input("posterior needs at least one prior sample".into()));
        }
        check_len("observation", net.config().data_dim, y_star.len())?;
        let critic = prior_samples
            .par_iter()
            .map(|theta| net.forward(theta, y_star))
            .collect::<Result<Vec<f64>>>()?;
        Self::from_critic(prior_samples, critic, y_star.to_vec())
    }

    /// Builds the weights from precomputed critic values.
    pub fn from_critic(samples: Vec<Vec<f64>>, critic: Vec<f64>, y_star: Vec<f64>) -> Result<Self> {
        check_len("critic values", samples.len(), critic.len())?;
        let finite_max = critic.iter().copied().filter(|t| t.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        if finite_max == f64::NEG_INFINITY {
            return Err(Error::Degenerate(format!(
                "no finite critic value among {} prior samples",
                samples.len()
            )));
        }
        // Normalise through exp(T − max T) so large critics do not overflow.
        let shifted: Vec<f64> = critic
            .iter()
            .map(|&t| if t.is_finite() { (t - finite_max).exp() } else { 0.0 })
            .collect();
        let total = neumaier_sum(&shifted);
        let normalized: Vec<f64> = shifted.iter().map(|w| w / total).collect();
        let ess = 1.0 / neumaier_sum(&normalized.iter().map(|w| w * w).collect::<Vec<_>>());
        let weights = critic.iter().map(|t| (t - 1.0).exp()).collect();
        let est = Self {
            y_star,
            samples,
            critic,
            weights,
            normalized,
            ess,
        };
        if est.is_degenerate() {
            log::warn!(
                "posterior weights are degenerate: ESS {:.1} of {} samples (max critic {finite_max:.3})",
                est.ess,
                est.samples.len()
            );
        }
        Ok(est)
    }

    pub fn y_star(&self) -> &[f64] {
        &self.y_star
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn critic_values(&self) -> &[f64] {
        &self.critic
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn normalized_weights(&self) -> &[f64] {
        &self.normalized
    }

    /// Mean of the raw weights; near 1 when the bound is tight.
    pub fn weight_mean(&self) -> f64 {
        neumaier_sum(&self.weights) / self.weights.len() as f64
    }

    /// `1 / Σ w̄_i²`.
    pub fn effective_sample_size(&self) -> f64 {
        self.ess
    }

    pub fn is_degenerate(&self) -> bool {
        self.ess < DEGENERATE_ESS_FRACTION * self.samples.len() as f64
    }

    /// Density divided by the weight mean, so it integrates to about one even
    /// when the bound is loose.
    pub fn self_normalized_density(
        &self,
        net: &Network,
        theta: &[f64],
        prior_density: &dyn Fn(&[f64]) -> f64,
    ) -> Result<f64> {
        Ok(posterior_density(net, theta, &self.y_star, prior_density)? / self.weight_mean())
    }

    /// `n` categorical draws with replacement, proportional to the weights.
    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<f64>>> {
        let index = WeightedIndex::new(&self.normalized)
            .map_err(|e| Error::Degenerate(format!("cannot resample: {e}")))?;
        Ok((0..n).map(|_| self.samples[index.sample(rng)].clone()).collect())
    }
}

/// Resamples `prior_samples` by the critic weights at `y_star`.
pub fn posterior_sample(
    net: &Network,
    prior_samples: Vec<Vec<f64>>,
    y_star: &[f64],
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<f64>>> {
    PosteriorEstimate::new(net, prior_samples, y_star)?.sample(n, rng)
}

fn neumaier_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &x in xs {
        let t = sum + x;
        c += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimSummary {
    pub mean: f64,
    pub std: f64,
    /// 16th percentile.
    pub lower: f64,
    /// 84th percentile.
    pub upper: f64,
}

/// Per-dimension mean, sample std and central 68% interval.
pub fn summarize(samples: &[Vec<f64>]) -> Result<Vec<DimSummary>> {
    if samples.len() < 2 {
        return Err(Error::Input(format!("summary needs at least 2 samples, got {}", samples.len())));
    }
    let dim = samples[0].len();
    (0..dim)
        .map(|j| {
            let mut column = samples
                .iter()
                .map(|row| {
                    check_len("sample row", dim, row.len())?;
                    Ok(row[j])
                })
                .collect::<Result<Vec<f64>>>()?;
            let n = column.len() as f64;
            let mean = column.iter().sum::<f64>() / n;
            let var = column.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            column.sort_by(f64::total_cmp);
            Ok(DimSummary {
                mean,
                std: var.sqrt(),
                lower: percentile(&column, 0.16),
                upper: percentile(&column, 0.84),
            })
        })
        .collect()
}

/// Linear interpolation between order statistics of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
