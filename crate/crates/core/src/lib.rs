//! Confidence calibration for object detectors with posterior uncertainty.
//!
//! Detections are matched against ground truth, a parametric map from
//! `(score, box)` features to precision is fitted either by maximum
//! likelihood or by stochastic variational inference, and the resulting
//! predictive distribution yields per-detection credible intervals.

pub mod calibrators;
pub mod data;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod uncertainty;

pub use calibrators::{CalibratorSpec, FeatureVector, Method, WeightVector};
pub use data::{
    BoxCoords, DetectionRecord, Feature, FeatureSubset, GroundTruthBox, MatchedSample, SampleSet,
};
pub use error::{Error, ErrorKind, Result};
pub use inference::{MlConfig, PriorSpec, SviConfig, VariationalPosterior};
pub use experiment::{EstimatorChoice, ExperimentConfig, ExperimentOutcome};
pub use metrics::{BinningScheme, EvaluationReport};
pub use model::{CalibrationModel, Estimator};
pub use synthetic::{SyntheticSpec, TrueMap};
pub use uncertainty::{DetectionEstimate, PredictionInterval, PredictiveDistribution};
