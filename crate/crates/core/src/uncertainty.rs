//! Posterior predictive samples per detection, their mean, and highest
//! density intervals over order statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrators::{build_features, forward, CalibratorSpec, WeightVector};
use crate::data::MatchedSample;
use crate::error::{Error, Result};
use crate::inference::{sample_weights, VariationalPosterior};

pub const DEFAULT_DRAWS: usize = 1000;
pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub values: Vec<f64>,
    pub index: usize,
}

/// Closed interval `[lower, upper]` holding mass `1 - tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lower: f64,
    pub upper: f64,
    pub tau: f64,
}

/// Point estimate plus interval for one detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionEstimate {
    pub index: usize,
    pub q_mean: f64,
    pub interval: PredictionInterval,
}

/// A fixed set of weight draws shared by every detection of one run.
#[derive(Debug, Clone)]
pub struct PredictiveSampler {
    spec: CalibratorSpec,
    draws: Vec<WeightVector>,
}

impl PredictiveSampler {
    pub fn new(spec: CalibratorSpec, posterior: &VariationalPosterior, t: usize, seed: u64) -> Result<Self> {
        if t < 2 {
            return Err(Error::invalid(format!("need at least 2 predictive draws, got {t}")));
        }
        if posterior.dim() != spec.n_features() + 1 {
            return Err(Error::DimensionMismatch {
                expected: spec.n_features() + 1,
                found: posterior.dim(),
            });
        }
        Ok(Self {
            spec,
            draws: sample_weights(posterior, t, seed)?,
        })
    }

    pub fn draws(&self) -> &[WeightVector] {
        &self.draws
    }

    pub fn predict(&self, sample: &MatchedSample, index: usize) -> PredictiveDistribution {
        let phi = build_features(sample, &self.spec);
        let values = self
            .draws
            .iter()
            .map(|theta| forward(&phi, theta).expect("draw length matches spec"))
            .collect();
        PredictiveDistribution { values, index }
    }

    /// Mean and HDI for every sample, in input order.
    pub fn estimate_all(&self, samples: &[MatchedSample], tau: f64) -> Result<Vec<DetectionEstimate>> {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let d = self.predict(s, i);
                Ok(DetectionEstimate {
                    index: i,
                    q_mean: mean_estimate(&d)?,
                    interval: hdi(&d, tau)?,
                })
            })
            .collect()
    }
}

pub fn predict_distribution(
    sample: &MatchedSample,
    spec: &CalibratorSpec,
    posterior: &VariationalPosterior,
    t: usize,
    seed: u64,
) -> Result<PredictiveDistribution> {
    Ok(PredictiveSampler::new(*spec, posterior, t, seed)?.predict(sample, 0))
}

pub fn mean_estimate(d: &PredictiveDistribution) -> Result<f64> {
    if d.values.is_empty() {
        return Err(Error::invalid("empty predictive distribution"));
    }
    Ok(d.values.iter().sum::<f64>() / d.values.len() as f64)
}

/// Narrowest window of `ceil((1 - tau) T)` order statistics; the lowest
/// window wins ties.
pub fn hdi(d: &PredictiveDistribution, tau: f64) -> Result<PredictionInterval> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
    }
    let t = d.values.len();
    let k = (((1.0 - tau) * t as f64) - 1e-9).ceil() as usize;
    if k < 2 || k > t {
        return Err(Error::invalid(format!(
            "HDI needs (1 - tau) * T >= 2, got T = {t}, tau = {tau}"
        )));
    }
    let mut x = d.values.clone();
    x.sort_by(f64::total_cmp);
    let mut best = 0;
    let mut best_width = f64::INFINITY;
    for i in 0..=t - k {
        let w = x[i + k - 1] - x[i];
        if w < best_width {
            best_width = w;
            best = i;
        }
    }
    Ok(PredictionInterval {
        lower: x[best],
        upper: x[best + k - 1],
        tau,
    })
}

pub fn interval_width(c: &PredictionInterval) -> f64 {
    c.upper - c.lower
}
