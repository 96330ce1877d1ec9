//! Fitted calibration models and their JSON form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrators::{
    build_features, fit_histogram_binning, forward, CalibratorSpec, HistogramBinningModel, Method, WeightVector,
};
use crate::data::{FeatureSubset, MatchedSample, SampleSet};
use crate::error::{Error, Result};
use crate::inference::{fit_ml, fit_svi, MlConfig, PriorSpec, SviConfig, VariationalPosterior};
use crate::metrics::{evaluate, BinningScheme, EvaluationReport};
use crate::uncertainty::{DetectionEstimate, PredictiveSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Ml,
    Svi,
    /// Histogram binning has no likelihood; its table is the estimate.
    Binning,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ml => "ml",
            Estimator::Svi => "svi",
            Estimator::Binning => "binning",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub prior: PriorSpec,
    /// Seed of the predictive weight draws.
    pub seed: u64,
}

impl PosteriorRecord {
    pub fn posterior(&self) -> Result<VariationalPosterior> {
        VariationalPosterior::new(self.mu.clone(), self.log_sigma.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationModel {
    pub method: Method,
    pub subset: FeatureSubset,
    pub epsilon: f64,
    pub estimator: Estimator,
    /// Parametric weights; for SVI models these are the posterior means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<f64>,
    pub scheme: BinningScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior: Option<PosteriorRecord>,
}

impl CalibrationModel {
    pub fn from_weights(spec: &CalibratorSpec, theta: &WeightVector, scheme: BinningScheme) -> Self {
        Self {
            method: spec.method,
            subset: spec.subset,
            epsilon: spec.epsilon,
            estimator: Estimator::Ml,
            weights: Some(theta.weights.clone()),
            bias: Some(theta.bias),
            bins: None,
            fallback: None,
            scheme,
            posterior: None,
        }
    }

    pub fn from_posterior(
        spec: &CalibratorSpec,
        q: &VariationalPosterior,
        prior: PriorSpec,
        seed: u64,
        scheme: BinningScheme,
    ) -> Self {
        let mean = q.mean_weights();
        Self {
            estimator: Estimator::Svi,
            posterior: Some(PosteriorRecord {
                mu: q.mu.clone(),
                log_sigma: q.log_sigma.clone(),
                prior,
                seed,
            }),
            ..Self::from_weights(spec, &mean, scheme)
        }
    }

    pub fn from_histogram(spec: &CalibratorSpec, hb: HistogramBinningModel) -> Self {
        Self {
            method: spec.method,
            subset: spec.subset,
            epsilon: spec.epsilon,
            estimator: Estimator::Binning,
            weights: None,
            bias: None,
            bins: Some(hb.bins),
            fallback: Some(hb.fallback),
            scheme: hb.scheme,
            posterior: None,
        }
    }

    /// Fits one model. Histogram binning ignores `estimator`.
    pub fn fit(
        train: &SampleSet,
        spec: &CalibratorSpec,
        estimator: Estimator,
        scheme: &BinningScheme,
        ml: &MlConfig,
        svi: &SviConfig,
    ) -> Result<Self> {
        scheme.check_subset(spec.subset)?;
        if spec.method == Method::Histogram {
            return Ok(Self::from_histogram(spec, fit_histogram_binning(train, spec, scheme)?));
        }
        match estimator {
            Estimator::Ml | Estimator::Binning => {
                Ok(Self::from_weights(spec, &fit_ml(train, spec, ml)?, scheme.clone()))
            }
            Estimator::Svi => {
                let q = fit_svi(train, spec, svi)?;
                Ok(Self::from_posterior(spec, &q, svi.prior, svi.seed, scheme.clone()))
            }
        }
    }

    pub fn spec(&self) -> Result<CalibratorSpec> {
        CalibratorSpec::new(self.method, self.subset).with_epsilon(self.epsilon)
    }

    /// Checks the internal consistency of a (possibly hand-edited) model.
    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        self.scheme.check_subset(self.subset)?;
        if self.method == Method::Histogram {
            let bins = self.bins.as_ref().ok_or_else(|| Error::invalid("histogram model without bins"))?;
            if bins.len() != self.scheme.n_bins() {
                return Err(Error::DimensionMismatch {
                    expected: self.scheme.n_bins(),
                    found: bins.len(),
                });
            }
            if bins.iter().chain(&self.fallback).any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("histogram bin values must lie in [0, 1]"));
            }
            return Ok(());
        }
        let weights = self.weights.as_ref().ok_or_else(|| Error::invalid("parametric model without weights"))?;
        if weights.len() != spec.n_features() {
            return Err(Error::DimensionMismatch {
                expected: spec.n_features(),
                found: weights.len(),
            });
        }
        if self.bias.is_none() {
            return Err(Error::invalid("parametric model without bias"));
        }
        if let Some(p) = &self.posterior {
            let q = p.posterior()?;
            if q.dim() != spec.n_features() + 1 {
                return Err(Error::DimensionMismatch {
                    expected: spec.n_features() + 1,
                    found: q.dim(),
                });
            }
        } else if self.estimator == Estimator::Svi {
            return Err(Error::invalid("svi model without posterior"));
        }
        Ok(())
    }

    pub fn weight_vector(&self) -> Option<WeightVector> {
        Some(WeightVector {
            weights: self.weights.clone()?,
            bias: self.bias?,
        })
    }

    pub fn is_bayesian(&self) -> bool {
        self.posterior.is_some()
    }

    /// Deterministic point prediction: the fitted map for ML, the bin table
    /// for histogram binning, the map at the posterior mean for SVI.
    pub fn predict_point(&self, samples: &[MatchedSample]) -> Result<Vec<f64>> {
        self.validate()?;
        if let Some(bins) = &self.bins {
            return Ok(samples
                .iter()
                .map(|s| bins[self.scheme.bin_of(&self.scheme.point(s, s.score()))])
                .collect());
        }
        let spec = self.spec()?;
        let theta = self.weight_vector().expect("validated");
        samples.iter().map(|s| forward(&build_features(s, &spec), &theta)).collect()
    }

    /// Predictive mean and HDI per sample from `t` posterior draws.
    pub fn estimate(&self, samples: &[MatchedSample], t: usize, tau: f64) -> Result<Vec<DetectionEstimate>> {
        self.validate()?;
        let record = self
            .posterior
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{} model has no posterior", self.estimator.name())))?;
        PredictiveSampler::new(self.spec()?, &record.posterior()?, t, record.seed)?.estimate_all(samples, tau)
    }

    /// D-ECE on `samples`; Bayesian models add PICP and MPIW and score their
    /// predictive means.
    pub fn evaluate(&self, samples: &[MatchedSample], t: usize, tau: f64) -> Result<EvaluationReport> {
        if self.is_bayesian() {
            let est = self.estimate(samples, t, tau)?;
            let q: Vec<f64> = est.iter().map(|e| e.q_mean).collect();
            let ci: Vec<_> = est.iter().map(|e| e.interval).collect();
            evaluate(samples, &q, Some((&ci, tau)), &self.scheme)
        } else {
            evaluate(samples, &self.predict_point(samples)?, None, &self.scheme)
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// File stem such as `LC_conf_only_svi`.
    pub fn file_stem(&self) -> String {
        format!("{}_{}_{}", self.method.short(), self.subset.name(), self.estimator.name())
    }
}

/// D-ECE of the uncalibrated scores.
pub fn baseline_report(samples: &[MatchedSample], scheme: &BinningScheme) -> Result<EvaluationReport> {
    let raw: Vec<f64> = samples.iter().map(|s| s.score()).collect();
    evaluate(samples, &raw, None, scheme)
}
