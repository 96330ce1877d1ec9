//! Calibration maps: feature construction for logistic and beta calibration,
//! the sigmoid forward map with its NLL and analytic gradient, and
//! multidimensional histogram binning.
//!
//! Logistic features are `logit(clip(x))` for the confidence and every
//! selected box coordinate. Beta features are the pair
//! `[ln(clip(x)), -ln(clip(1 - x))]` for each of those inputs. Weights are
//! unconstrained in both cases and a single bias is shared.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSubset, MatchedSample, SampleSet};
use crate::error::{Error, Result};
use crate::metrics::BinningScheme;

pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(alias = "LC")]
    Logistic,
    #[serde(alias = "BC")]
    Beta,
    #[serde(alias = "HB")]
    Histogram,
}

impl Method {
    pub fn short(self) -> &'static str {
        match self {
            Method::Logistic => "LC",
            Method::Beta => "BC",
            Method::Histogram => "HB",
        }
    }

    pub fn is_parametric(self) -> bool {
        !matches!(self, Method::Histogram)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lc" | "logistic" | "platt" => Ok(Method::Logistic),
            "bc" | "beta" => Ok(Method::Beta),
            "hb" | "histogram" => Ok(Method::Histogram),
            other => Err(Error::invalid(format!("unknown calibration method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratorSpec {
    pub method: Method,
    pub subset: FeatureSubset,
    pub epsilon: f64,
}

impl CalibratorSpec {
    pub fn new(method: Method, subset: FeatureSubset) -> Self {
        Self {
            method,
            subset,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1e-3) {
            return Err(Error::invalid(format!("epsilon must lie in (0, 1e-3], got {epsilon}")));
        }
        self.epsilon = epsilon;
        Ok(self)
    }

    /// Length of the feature vector (excluding the bias).
    pub fn n_features(&self) -> usize {
        match self.method {
            Method::Beta => 2 * self.subset.dim(),
            _ => self.subset.dim(),
        }
    }

    fn clip(&self, x: f64) -> f64 {
        x.clamp(self.epsilon, 1.0 - self.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl WeightVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            weights: vec![0.0; n],
            bias: 0.0,
        }
    }

    /// The weights that reproduce the raw confidence.
    pub fn identity(spec: &CalibratorSpec) -> Self {
        let mut w = Self::zeros(spec.n_features());
        w.weights[0] = 1.0;
        if spec.method == Method::Beta {
            w.weights[1] = 1.0;
        }
        w
    }

    /// `[weights..., bias]`
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.push(self.bias);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let (w, b) = flat.split_at(flat.len() - 1);
        Self {
            weights: w.to_vec(),
            bias: b[0],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `(softplus(z), sigmoid(z))` sharing one exponential.
pub(crate) fn softplus_sigmoid(z: f64) -> (f64, f64) {
    let e = (-z.abs()).exp();
    let sp = z.max(0.0) + e.ln_1p();
    let sg = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, sg)
}

const Q_MIN: f64 = f64::MIN_POSITIVE;
const Q_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn build_features(sample: &MatchedSample, spec: &CalibratorSpec) -> FeatureVector {
    let mut out = Vec::with_capacity(spec.n_features());
    for &f in spec.subset.features() {
        let x = sample.feature(f);
        match spec.method {
            Method::Beta => {
                out.push(spec.clip(x).ln());
                out.push(-spec.clip(1.0 - x).ln());
            }
            _ => out.push(logit(spec.clip(x))),
        }
    }
    FeatureVector(out)
}

#[inline]
pub(crate) fn linear(phi: &[f64], theta: &WeightVector) -> f64 {
    phi.iter().zip(&theta.weights).map(|(a, b)| a * b).sum::<f64>() + theta.bias
}

/// `sigmoid(theta . phi + bias)`, kept strictly inside (0, 1).
pub fn forward(phi: &FeatureVector, theta: &WeightVector) -> Result<f64> {
    if phi.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            found: phi.len(),
        });
    }
    Ok(sigmoid(linear(&phi.0, theta)).clamp(Q_MIN, Q_MAX))
}

/// Row-major feature matrix with labels, the working form for fitting.
#[derive(Debug, Clone)]
pub struct Design {
    dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Design {
    pub fn new(set: &SampleSet, spec: &CalibratorSpec) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::NoSamples);
        }
        let dim = spec.n_features();
        let mut x = Vec::with_capacity(dim * set.len());
        let mut y = Vec::with_capacity(set.len());
        for s in &set.samples {
            x.extend(build_features(s, spec).0);
            y.push(s.label());
        }
        Ok(Self { dim, x, y })
    }

    pub fn from_pairs(pairs: &[(FeatureVector, bool)]) -> Result<Self> {
        let first = pairs.first().ok_or(Error::NoSamples)?;
        let dim = first.0.len();
        let mut x = Vec::with_capacity(dim * pairs.len());
        let mut y = Vec::with_capacity(pairs.len());
        for (phi, m) in pairs {
            if phi.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: phi.len(),
                });
            }
            x.extend_from_slice(&phi.0);
            y.push(if *m { 1.0 } else { 0.0 });
        }
        Ok(Self { dim, x, y })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.x.chunks_exact(self.dim).zip(self.y.iter().copied())
    }

    /// Consecutive blocks of at most `block` rows as (features, labels).
    pub fn row_blocks(&self, block: usize) -> impl IndexedParallelIterator<Item = (&[f64], &[f64])> + '_ {
        self.x.par_chunks(block * self.dim).zip(self.y.par_chunks(block))
    }

    pub fn n_positive(&self) -> usize {
        self.y.iter().filter(|&&m| m > 0.5).count()
    }

    fn check(&self, theta: &WeightVector) -> Result<()> {
        if theta.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: theta.len(),
            });
        }
        Ok(())
    }

    pub fn nll(&self, theta: &WeightVector) -> Result<f64> {
        self.check(theta)?;
        Ok(self
            .rows()
            .map(|(phi, m)| {
                let z = linear(phi, theta);
                softplus(z) - m * z
            })
            .sum())
    }

    /// NLL and its gradient in one pass; gradient layout `[weights..., bias]`.
    pub fn nll_and_gradient(&self, theta: &WeightVector) -> Result<(f64, Vec<f64>)> {
        self.check(theta)?;
        let mut grad = vec![0.0; self.dim + 1];
        let mut total = 0.0;
        for (phi, m) in self.rows() {
            let z = linear(phi, theta);
            total += softplus(z) - m * z;
            let r = sigmoid(z) - m;
            for (g, x) in grad.iter_mut().zip(phi) {
                *g += r * x;
            }
            grad[self.dim] += r;
        }
        Ok((total, grad))
    }
}

/// Negative log-likelihood of the labels under `forward(phi, theta)`.
pub fn nll(samples: &[(FeatureVector, bool)], theta: &WeightVector) -> Result<f64> {
    Design::from_pairs(samples)?.nll(theta)
}

/// `(sum (q - m) phi, sum (q - m))`
pub fn nll_gradient(samples: &[(FeatureVector, bool)], theta: &WeightVector) -> Result<(Vec<f64>, f64)> {
    let (_, mut g) = Design::from_pairs(samples)?.nll_and_gradient(theta)?;
    let bias = g.pop().unwrap_or(0.0);
    Ok((g, bias))
}

// ---------------------------------------------------------------------------
// histogram binning

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBinningModel {
    pub scheme: BinningScheme,
    /// Calibrated value per flat bin of `scheme`.
    pub bins: Vec<f64>,
    pub fallback: f64,
}

impl HistogramBinningModel {
    pub fn predict(&self, sample: &MatchedSample) -> f64 {
        let b = self.scheme.bin_of(&self.scheme.point(sample, sample.score()));
        self.bins[b]
    }
}

/// Per-bin training precision over the raw inputs; empty bins fall back to
/// the global training precision.
pub fn fit_histogram_binning(
    train: &SampleSet,
    spec: &CalibratorSpec,
    scheme: &BinningScheme,
) -> Result<HistogramBinningModel> {
    if train.is_empty() {
        return Err(Error::NoSamples);
    }
    scheme.check_subset(spec.subset)?;
    let n_bins = scheme.n_bins();
    let mut counts = vec![0usize; n_bins];
    let mut hits = vec![0usize; n_bins];
    for s in &train.samples {
        let b = scheme.bin_of(&scheme.point(s, s.score()));
        counts[b] += 1;
        hits[b] += s.matched() as usize;
    }
    let fallback = train.precision();
    let bins = counts
        .iter()
        .zip(&hits)
        .map(|(&c, &h)| if c > 0 { h as f64 / c as f64 } else { fallback })
        .collect();
    Ok(HistogramBinningModel {
        scheme: scheme.clone(),
        bins,
        fallback,
    })
}

pub fn predict_histogram_binning(model: &HistogramBinningModel, sample: &MatchedSample) -> f64 {
    model.predict(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BoxCoords, Feature};
    use proptest::prelude::*;

    fn sample(p: f64, cx: f64, cy: f64, w: f64, h: f64, m: bool) -> MatchedSample {
        MatchedSample::new(p, BoxCoords::new(cx, cy, w, h).unwrap(), m).unwrap()
    }

    fn spec(method: Method, subset: FeatureSubset) -> CalibratorSpec {
        CalibratorSpec::new(method, subset)
    }

    #[test]
    fn feature_lengths_and_values() {
        let s = sample(0.5, 0.5, 0.5, 0.5, 0.5, true);
        let lc = build_features(&s, &spec(Method::Logistic, FeatureSubset::ConfOnly));
        assert_eq!(lc.0, vec![0.0]);
        let bc = build_features(&s, &spec(Method::Beta, FeatureSubset::ConfOnly));
        assert!((bc.0[0] + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bc.0[1] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bc.0[0] - (-0.693147)).abs() < 1e-6);
        let full = build_features(&s, &spec(Method::Logistic, FeatureSubset::Full));
        assert_eq!(full.0, vec![0.0; 5]);
        for subset in FeatureSubset::ALL {
            let l = spec(Method::Logistic, subset);
            let b = spec(Method::Beta, subset);
            assert_eq!(build_features(&s, &l).len(), l.n_features());
            assert_eq!(build_features(&s, &b).len(), 2 * l.n_features());
        }
        assert_eq!(spec(Method::Logistic, FeatureSubset::ConfPos).n_features(), 3);
    }

    #[test]
    fn saturated_inputs_stay_finite() {
        let s = sample(1.0, 0.0, 1.0, 1.0, 1.0, true);
        for m in [Method::Logistic, Method::Beta] {
            let phi = build_features(&s, &spec(m, FeatureSubset::Full));
            assert!(phi.0.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn epsilon_bounds() {
        let s = spec(Method::Logistic, FeatureSubset::ConfOnly);
        assert!(s.with_epsilon(0.0).is_err());
        assert!(s.with_epsilon(1e-2).is_err());
        assert!(s.with_epsilon(1e-3).is_ok());
    }

    #[test]
    fn forward_examples() {
        let sp = spec(Method::Logistic, FeatureSubset::ConfOnly);
        let phi = build_features(&sample(0.8, 0.5, 0.5, 0.1, 0.1, true), &sp);
        let id = WeightVector::identity(&sp);
        assert!((forward(&phi, &id).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(forward(&phi, &WeightVector::zeros(1)).unwrap(), 0.5);
        let half = FeatureVector(vec![0.0]);
        let w = WeightVector { weights: vec![1.0], bias: 3f64.ln() };
        assert!((forward(&half, &w).unwrap() - 0.75).abs() < 1e-15);
        assert!(forward(&half, &WeightVector::zeros(2)).is_err());
        // saturation never reaches the closed bounds
        let big = WeightVector { weights: vec![0.0], bias: 800.0 };
        let q = forward(&half, &big).unwrap();
        assert!(q < 1.0 && q > 0.0);
        let q = forward(&half, &WeightVector { weights: vec![0.0], bias: -800.0 }).unwrap();
        assert!(q > 0.0);
    }

    #[test]
    fn nll_examples() {
        let one = vec![(FeatureVector(vec![0.0]), true)];
        let v = nll(&one, &WeightVector::zeros(1)).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let two = vec![one[0].clone(), one[0].clone()];
        assert_eq!(nll(&two, &WeightVector::zeros(1)).unwrap(), 2.0 * v);
        assert!(nll(&[], &WeightVector::zeros(1)).is_err());

        // identity calibrator on a positive sample: NLL falls as p -> 1
        let sp = spec(Method::Logistic, FeatureSubset::ConfOnly);
        let id = WeightVector::identity(&sp);
        let mut last = f64::INFINITY;
        for p in [0.6, 0.9, 0.99, 0.999, 0.99999] {
            let phi = build_features(&sample(p, 0.5, 0.5, 0.1, 0.1, true), &sp);
            let v = nll(&[(phi, true)], &id).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-4);
    }

    #[test]
    fn gradient_examples() {
        let data = vec![(FeatureVector(vec![1.0]), true)];
        // q = sigmoid(1 * 1 + b) = 0.75  =>  b = ln 3 - 1
        let theta = WeightVector { weights: vec![1.0], bias: 3f64.ln() - 1.0 };
        let (gw, gb) = nll_gradient(&data, &theta).unwrap();
        assert!((gw[0] + 0.25).abs() < 1e-15 && (gb + 0.25).abs() < 1e-15);

        // q_i = m_i is only reachable in the limit; a saturated fit gives ~0
        let data = vec![(FeatureVector(vec![1.0]), true), (FeatureVector(vec![-1.0]), false)];
        let theta = WeightVector { weights: vec![60.0], bias: 0.0 };
        let (gw, gb) = nll_gradient(&data, &theta).unwrap();
        assert!(gw[0].abs() < 1e-20 && gb.abs() < 1e-20);
    }

    fn central_diff(data: &[(FeatureVector, bool)], theta: &WeightVector, h: f64) -> Vec<f64> {
        let flat = theta.to_flat();
        (0..flat.len())
            .map(|j| {
                let mut up = flat.clone();
                let mut dn = flat.clone();
                up[j] += h;
                dn[j] -= h;
                (nll(data, &WeightVector::from_flat(&up)).unwrap()
                    - nll(data, &WeightVector::from_flat(&dn)).unwrap())
                    / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gradient_matches_finite_differences(
            rows in prop::collection::vec((prop::collection::vec(-3.0f64..3.0, 3), any::<bool>()), 1..20),
            flat in prop::collection::vec(-2.0f64..2.0, 4),
        ) {
            let data: Vec<_> = rows.into_iter().map(|(x, m)| (FeatureVector(x), m)).collect();
            let theta = WeightVector::from_flat(&flat);
            let (gw, gb) = nll_gradient(&data, &theta).unwrap();
            let fd = central_diff(&data, &theta, 1e-6);
            let analytic: Vec<f64> = gw.into_iter().chain([gb]).collect();
            for (a, f) in analytic.iter().zip(&fd) {
                let scale = a.abs().max(f.abs()).max(1e-2);
                prop_assert!((a - f).abs() / scale <= 1e-5, "{a} vs {f}");
            }
        }

        #[test]
        fn forward_increasing_in_confidence(p1 in 0.01f64..0.99, dp in 0.001f64..0.5, w in 0.1f64..5.0, b in -3.0f64..3.0) {
            let p2 = (p1 + dp).min(0.999);
            prop_assume!(p2 > p1);
            let sp = spec(Method::Logistic, FeatureSubset::ConfOnly);
            let th = WeightVector { weights: vec![w], bias: b };
            let q1 = forward(&build_features(&sample(p1, 0.5, 0.5, 0.1, 0.1, true), &sp), &th).unwrap();
            let q2 = forward(&build_features(&sample(p2, 0.5, 0.5, 0.1, 0.1, true), &sp), &th).unwrap();
            prop_assert!(q2 > q1);
        }

        #[test]
        fn identity_weights_reproduce_confidence(p in 0.0f64..=1.0, cx in 0.0f64..=1.0, w in 0.01f64..=1.0) {
            let s = sample(p, cx, 0.3, w, 0.2, true);
            for m in [Method::Logistic, Method::Beta] {
                let sp = spec(m, FeatureSubset::Full);
                let q = forward(&build_features(&s, &sp), &WeightVector::identity(&sp)).unwrap();
                prop_assert!((q - p).abs() <= 2.0 * sp.epsilon, "{q} vs {p}");
            }
        }
    }

    #[test]
    fn histogram_binning_examples() {
        let sp = spec(Method::Histogram, FeatureSubset::ConfOnly);
        let one_bin = BinningScheme::new(vec![Feature::Confidence], vec![1], 8).unwrap();
        let set = SampleSet::new(vec![
            sample(0.1, 0.5, 0.5, 0.1, 0.1, true),
            sample(0.4, 0.5, 0.5, 0.1, 0.1, true),
            sample(0.7, 0.5, 0.5, 0.1, 0.1, true),
            sample(0.9, 0.5, 0.5, 0.1, 0.1, false),
        ]);
        let model = fit_histogram_binning(&set, &sp, &one_bin).unwrap();
        assert_eq!(model.bins, vec![0.75]);
        assert_eq!(predict_histogram_binning(&model, &set.samples[3]), 0.75);

        let twenty = BinningScheme::for_subset(FeatureSubset::ConfOnly);
        let all = SampleSet::new(vec![
            sample(0.12, 0.5, 0.5, 0.1, 0.1, true),
            sample(0.13, 0.5, 0.5, 0.1, 0.1, true),
            sample(0.52, 0.5, 0.5, 0.1, 0.1, false),
            sample(0.53, 0.5, 0.5, 0.1, 0.1, true),
        ]);
        let model = fit_histogram_binning(&all, &sp, &twenty).unwrap();
        assert_eq!(model.predict(&all.samples[0]), 1.0);
        assert_eq!(model.predict(&all.samples[2]), 0.5);
        // empty bin answers with the global training precision
        assert_eq!(model.predict(&sample(0.95, 0.5, 0.5, 0.1, 0.1, true)), 0.75);
        assert_eq!(model.fallback, 0.75);

        let full = BinningScheme::for_subset(FeatureSubset::Full);
        assert!(fit_histogram_binning(&all, &sp, &full).is_err());
    }

    #[test]
    fn histogram_binning_zero_gap_on_training_set() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let set = SampleSet::new(
            (0..2000)
                .map(|_| {
                    let p: f64 = rng.random();
                    let cx: f64 = rng.random();
                    sample(p, cx, rng.random(), 0.2, 0.3, rng.random::<f64>() < p)
                })
                .collect(),
        );
        let sp = spec(Method::Histogram, FeatureSubset::ConfPos);
        let scheme = BinningScheme::for_subset(FeatureSubset::ConfPos);
        let model = fit_histogram_binning(&set, &sp, &scheme).unwrap();
        let mut sum_q = vec![0.0; scheme.n_bins()];
        let mut hits = vec![0.0; scheme.n_bins()];
        let mut n = vec![0usize; scheme.n_bins()];
        for s in &set.samples {
            let b = scheme.bin_of(&scheme.point(s, s.score()));
            sum_q[b] += model.predict(s);
            hits[b] += s.label();
            n[b] += 1;
        }
        for b in 0..scheme.n_bins() {
            if n[b] > 0 {
                assert!((sum_q[b] / n[b] as f64 - hits[b] / n[b] as f64).abs() < 1e-12);
            }
        }
    }
}
