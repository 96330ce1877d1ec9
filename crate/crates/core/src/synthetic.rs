//! Synthetic detector outputs with a known precision map.
//!
//! Scores follow a Beta distribution, box coordinates are uniform over a
//! configurable region, and each label is a Bernoulli draw from the true
//! precision `pi_true(score, box)`. The true map is either logistic in the
//! logit features (the well-specified case for logistic calibration) or a
//! piecewise-linear curve (a misspecified case).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::calibrators::{logit, sigmoid, DEFAULT_EPSILON};
use crate::data::{BoxCoords, Feature, MatchedSample, SampleSet};
use crate::error::{Error, Result};
use crate::metrics::BinningScheme;

const BOX_FEATURES: [Feature; 4] = [Feature::Cx, Feature::Cy, Feature::W, Feature::H];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn len(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Sampling region of the box coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub cx: Interval,
    pub cy: Interval,
    pub w: Interval,
    pub h: Interval,
}

impl Default for Region {
    fn default() -> Self {
        Self {
            cx: Interval::new(0.0, 1.0),
            cy: Interval::new(0.0, 1.0),
            w: Interval::new(0.05, 0.5),
            h: Interval::new(0.05, 0.5),
        }
    }
}

impl Region {
    pub fn get(&self, f: Feature) -> Interval {
        match f {
            Feature::Cx => self.cx,
            Feature::Cy => self.cy,
            Feature::W => self.w,
            Feature::H => self.h,
            Feature::Confidence => Interval::new(0.0, 1.0),
        }
    }

    pub fn set(&mut self, f: Feature, iv: Interval) -> Result<()> {
        match f {
            Feature::Cx => self.cx = iv,
            Feature::Cy => self.cy = iv,
            Feature::W => self.w = iv,
            Feature::H => self.h = iv,
            Feature::Confidence => return Err(Error::invalid("the score has no box region")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        for f in BOX_FEATURES {
            let iv = self.get(f);
            if !(0.0 <= iv.lo && iv.lo < iv.hi && iv.hi <= 1.0) {
                return Err(Error::invalid(format!(
                    "region for {} must be a non-empty sub-interval of [0, 1], got [{}, {}]",
                    f.name(),
                    iv.lo,
                    iv.hi
                )));
            }
        }
        for f in [Feature::W, Feature::H] {
            if self.get(f).hi <= 0.0 {
                return Err(Error::invalid("box extent region must include positive values"));
            }
        }
        Ok(())
    }

    /// Parses `cx=0:0.5,w=0.1:0.3`; unnamed dimensions keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut region = Region::default();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, range) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad region entry `{part}`")))?;
            let (lo, hi) = range
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("bad region range `{range}`")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad region bound `{s}`")))
            };
            region.set(name.parse()?, Interval::new(parse(lo)?, parse(hi)?))?;
        }
        region.validate()?;
        Ok(region)
    }
}

/// Knots `(x, y)` sorted by `x`; linear in between, flat outside.
fn interpolate(knots: &[(f64, f64)], x: f64) -> f64 {
    match knots {
        [] => 0.0,
        [(_, y)] => *y,
        _ => {
            if x <= knots[0].0 {
                return knots[0].1;
            }
            for pair in knots.windows(2) {
                let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
                if x <= x1 {
                    let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 1.0 };
                    return y0 + t * (y1 - y0);
                }
            }
            knots[knots.len() - 1].1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrueMap {
    /// `sigmoid(sum_j w_j logit(x_j) + bias)` over `(score, cx, cy, w, h)`;
    /// missing trailing weights are zero.
    Logistic { weights: Vec<f64>, bias: f64 },
    /// `clamp(interp(score_knots, score) + interp(offset_knots, feature), 0, 1)`.
    PiecewiseLinear {
        score_knots: Vec<(f64, f64)>,
        offset: Option<(Feature, Vec<(f64, f64)>)>,
    },
}

impl TrueMap {
    pub fn identity() -> Self {
        TrueMap::Logistic {
            weights: vec![1.0],
            bias: 0.0,
        }
    }

    pub fn logistic(weights: Vec<f64>, bias: f64) -> Self {
        TrueMap::Logistic { weights, bias }
    }

    fn validate(&self) -> Result<()> {
        match self {
            TrueMap::Logistic { weights, bias } => {
                if weights.is_empty() || weights.len() > 5 {
                    return Err(Error::invalid("true map needs 1 to 5 weights"));
                }
                if weights.iter().chain([bias]).any(|x| !x.is_finite()) {
                    return Err(Error::invalid("true map parameters must be finite"));
                }
            }
            TrueMap::PiecewiseLinear { score_knots, offset } => {
                let sorted = |k: &[(f64, f64)]| k.windows(2).all(|w| w[0].0 <= w[1].0);
                if score_knots.is_empty() || !sorted(score_knots) {
                    return Err(Error::invalid("score knots must be non-empty and sorted"));
                }
                if let Some((_, k)) = offset {
                    if !sorted(k) {
                        return Err(Error::invalid("offset knots must be sorted"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether the map varies with box coordinate `f`.
    fn depends_on(&self, f: Feature) -> bool {
        match self {
            TrueMap::Logistic { weights, .. } => {
                let j = match f {
                    Feature::Confidence => 0,
                    Feature::Cx => 1,
                    Feature::Cy => 2,
                    Feature::W => 3,
                    Feature::H => 4,
                };
                weights.get(j).is_some_and(|w| *w != 0.0)
            }
            TrueMap::PiecewiseLinear { offset, .. } => {
                f == Feature::Confidence || offset.as_ref().is_some_and(|(g, _)| *g == f)
            }
        }
    }

    /// True precision at `x = (score, cx, cy, w, h)`.
    pub fn precision(&self, x: &[f64; 5]) -> f64 {
        match self {
            TrueMap::Logistic { weights, bias } => {
                let clip = |v: f64| v.clamp(DEFAULT_EPSILON, 1.0 - DEFAULT_EPSILON);
                let z: f64 = weights.iter().zip(x).map(|(w, v)| w * logit(clip(*v))).sum::<f64>() + bias;
                sigmoid(z)
            }
            TrueMap::PiecewiseLinear { score_knots, offset } => {
                let mut p = interpolate(score_knots, x[0]);
                if let Some((f, knots)) = offset {
                    p += interpolate(knots, x[feature_slot(*f)]);
                }
                p.clamp(0.0, 1.0)
            }
        }
    }
}

fn feature_slot(f: Feature) -> usize {
    match f {
        Feature::Confidence => 0,
        Feature::Cx => 1,
        Feature::Cy => 2,
        Feature::W => 3,
        Feature::H => 4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub seed: u64,
    pub score_alpha: f64,
    pub score_beta: f64,
    pub true_map: TrueMap,
    pub region: Region,
}

impl SyntheticSpec {
    /// Beta(5, 2) scores over the default region.
    pub fn new(n: usize, seed: u64, true_map: TrueMap) -> Self {
        Self {
            n,
            seed,
            score_alpha: 5.0,
            score_beta: 2.0,
            true_map,
            region: Region::default(),
        }
    }

    pub fn with_region(mut self, region: Region) -> Self {
        self.region = region;
        self
    }

    pub fn with_score_shape(mut self, alpha: f64, beta: f64) -> Self {
        self.score_alpha = alpha;
        self.score_beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("synthetic sample count must be at least 1"));
        }
        if !(self.score_alpha > 0.0 && self.score_beta > 0.0) {
            return Err(Error::invalid("score Beta shape parameters must be positive"));
        }
        self.region.validate()?;
        self.true_map.validate()
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SampleSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let score_dist = Beta::new(spec.score_alpha, spec.score_beta)
        .map_err(|e| Error::invalid(format!("score distribution: {e}")))?;
    let r = &spec.region;
    let mut samples = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let score: f64 = score_dist.sample(&mut rng).clamp(0.0, 1.0);
        let mut uni = |iv: Interval| iv.lo + rng.random::<f64>() * iv.len();
        let (cx, cy, w, h) = (uni(r.cx), uni(r.cy), uni(r.w), uni(r.h));
        // w, h can only be 0 if the region starts at 0 and the draw is exactly 0
        let bbox = BoxCoords::new(cx, cy, w.max(f64::MIN_POSITIVE), h.max(f64::MIN_POSITIVE))?;
        let pi = spec.true_map.precision(&[score, cx, cy, bbox.w, bbox.h]);
        let matched = rng.random::<f64>() < pi;
        samples.push(MatchedSample::new(score, bbox, matched)?.with_image_id(format!("synth-{i}")));
    }
    Ok(SampleSet::new(samples).with_provenance(format!("synthetic n={} seed={}", spec.n, spec.seed)))
}

/// Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp;
        loop {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
            }
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / dp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        out[i] = (-z, w);
        out[n - 1 - i] = (z, w);
    }
    out
}

/// Nodes and weights mapped onto `[lo, hi]`.
fn nodes_on(gl: &[(f64, f64)], lo: f64, hi: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    gl.iter().map(move |&(x, w)| (mid + half * x, half * w))
}

/// Population D-ECE of the raw scores against the true precision map.
///
/// Each bin contributes `|E[(score - pi_true) 1{bin}]|`, integrated with
/// Gauss-Legendre quadrature over the Beta score density and the uniform box
/// density (box coordinates the map ignores are integrated exactly with a
/// single node). The minimum-count rule does not apply to a population.
pub fn true_gap(spec: &SyntheticSpec, scheme: &BinningScheme) -> Result<f64> {
    spec.validate()?;
    const SCORE_NODES: usize = 48;
    const BOX_NODES: usize = 6;
    let gl_score = gauss_legendre(SCORE_NODES);
    let gl_box = gauss_legendre(BOX_NODES);
    let ln_norm = ln_beta(spec.score_alpha, spec.score_beta);
    let (a, b) = (spec.score_alpha, spec.score_beta);
    let density = |p: f64| ((a - 1.0) * p.ln() + (b - 1.0) * (1.0 - p).ln() - ln_norm).exp();

    // Per dimension of the scheme: the list of (bin, node, weight). Box
    // coordinates outside the scheme get a single "bin" spanning the region.
    let bins_of = |f: Feature| -> usize {
        scheme
            .dims
            .iter()
            .position(|&d| d == f)
            .map_or(1, |k| scheme.bins_per_dim[k])
    };
    let mut axes: Vec<(Feature, Vec<(usize, f64, f64)>)> = Vec::new();
    for f in [Feature::Confidence, Feature::Cx, Feature::Cy, Feature::W, Feature::H] {
        let m = bins_of(f);
        let support = spec.region.get(f);
        let mut pts = Vec::new();
        for bin in 0..m {
            let (lo, hi) = (
                (bin as f64 / m as f64).max(support.lo),
                ((bin + 1) as f64 / m as f64).min(support.hi),
            );
            if hi <= lo {
                continue;
            }
            if f == Feature::Confidence {
                for (x, w) in nodes_on(&gl_score, lo, hi) {
                    pts.push((bin, x, w * density(x)));
                }
            } else if spec.true_map.depends_on(f) {
                for (x, w) in nodes_on(&gl_box, lo, hi) {
                    pts.push((bin, x, w / support.len()));
                }
            } else {
                pts.push((bin, 0.5 * (lo + hi), (hi - lo) / support.len()));
            }
        }
        axes.push((f, pts));
    }

    // accumulate signed mass of (score - pi) per flat bin of the scheme
    let mut acc = vec![0.0; scheme.n_bins()];
    let mut x = [0.0; 5];
    let mut idx = [0usize; 5];
    fn recurse(
        axes: &[(Feature, Vec<(usize, f64, f64)>)],
        depth: usize,
        weight: f64,
        x: &mut [f64; 5],
        idx: &mut [usize; 5],
        f: &mut dyn FnMut(&[f64; 5], &[usize; 5], f64),
    ) {
        if depth == axes.len() {
            f(x, idx, weight);
            return;
        }
        for &(bin, node, w) in &axes[depth].1 {
            x[depth] = node;
            idx[depth] = bin;
            recurse(axes, depth + 1, weight * w, x, idx, f);
        }
    }
    let slots: Vec<usize> = scheme.dims.iter().map(|&d| feature_slot(d)).collect();
    let map = &spec.true_map;
    recurse(&axes, 0, 1.0, &mut x, &mut idx, &mut |x, idx, w| {
        let flat = slots
            .iter()
            .zip(&scheme.bins_per_dim)
            .fold(0, |acc, (&s, &m)| acc * m + idx[s]);
        acc[flat] += w * (x[0] - map.precision(x));
    });
    Ok(acc.iter().map(|v| v.abs()).sum())
}
