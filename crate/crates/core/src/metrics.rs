//! Multidimensional binning and the evaluation metrics built on it:
//! D-ECE, per-sample binned precision, PICP, MPIW, reliability tables and the
//! covariate-shift report.
//!
//! Bins are equal-width over `[0, 1]` in every dimension, half-open `[a, b)`
//! except the last bin of each dimension which is closed. Bins holding fewer
//! than `min_samples_per_bin` samples are *invalid*: they are left out of
//! D-ECE and their samples are excluded from PICP and gap statistics.

use serde::{Deserialize, Serialize};

use crate::data::{Feature, FeatureSubset, MatchedSample};
use crate::error::{Error, Result};
use crate::uncertainty::{interval_width, DetectionEstimate, PredictionInterval};

pub const DEFAULT_MIN_SAMPLES_PER_BIN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningScheme {
    pub dims: Vec<Feature>,
    pub bins_per_dim: Vec<usize>,
    pub min_samples_per_bin: usize,
}

impl BinningScheme {
    pub fn new(dims: Vec<Feature>, bins_per_dim: Vec<usize>, min_samples_per_bin: usize) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::invalid("binning scheme needs at least one dimension"));
        }
        if dims.len() != bins_per_dim.len() {
            return Err(Error::DimensionMismatch {
                expected: dims.len(),
                found: bins_per_dim.len(),
            });
        }
        if bins_per_dim.iter().any(|&b| b == 0) {
            return Err(Error::invalid("every dimension needs at least one bin"));
        }
        Ok(Self {
            dims,
            bins_per_dim,
            min_samples_per_bin,
        })
    }

    /// 20 confidence bins; 8 per direction for 3-D subsets; 5 per direction for the full set.
    pub fn for_subset(subset: FeatureSubset) -> Self {
        let per_dim = match subset {
            FeatureSubset::ConfOnly => 20,
            FeatureSubset::ConfPos | FeatureSubset::ConfShape => 8,
            FeatureSubset::Full => 5,
        };
        Self {
            dims: subset.features().to_vec(),
            bins_per_dim: vec![per_dim; subset.dim()],
            min_samples_per_bin: DEFAULT_MIN_SAMPLES_PER_BIN,
        }
    }

    pub fn n_dims(&self) -> usize {
        self.dims.len()
    }

    pub fn n_bins(&self) -> usize {
        self.bins_per_dim.iter().product()
    }

    pub fn check_subset(&self, subset: FeatureSubset) -> Result<()> {
        if self.dims != subset.features() {
            return Err(Error::DimensionMismatch {
                expected: subset.dim(),
                found: self.n_dims(),
            });
        }
        Ok(())
    }

    fn axis_bin(value: f64, bins: usize) -> usize {
        ((value * bins as f64).floor() as usize).min(bins - 1)
    }

    /// Flat (row-major, first dimension slowest) bin of a point in `[0, 1]^d`.
    pub fn bin_of(&self, point: &[f64]) -> usize {
        debug_assert_eq!(point.len(), self.n_dims());
        point
            .iter()
            .zip(&self.bins_per_dim)
            .fold(0, |acc, (&x, &m)| acc * m + Self::axis_bin(x, m))
    }

    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.n_dims()];
        for (slot, &m) in idx.iter_mut().zip(&self.bins_per_dim).rev() {
            *slot = flat % m;
            flat /= m;
        }
        idx
    }

    /// Binning coordinates of one sample, with `confidence` replacing the raw score.
    pub fn point(&self, sample: &MatchedSample, confidence: f64) -> Vec<f64> {
        self.dims
            .iter()
            .map(|&f| match f {
                Feature::Confidence => confidence,
                other => sample.feature(other),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub index: Vec<usize>,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub precision: Option<f64>,
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub struct Binning {
    pub stats: Vec<BinStats>,
    /// Flat bin of every input sample, aligned with the input.
    pub sample_bins: Vec<usize>,
}

impl Binning {
    pub fn n_valid_bins(&self) -> usize {
        self.stats.iter().filter(|b| b.valid).count()
    }
}

/// Bins `samples` by the scheme, using `confidences` (e.g. calibrated
/// estimates) in place of the raw score for the confidence dimension.
pub fn assign_bins(
    samples: &[MatchedSample],
    confidences: &[f64],
    scheme: &BinningScheme,
) -> Result<Binning> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    if samples.len() != confidences.len() {
        return Err(Error::DimensionMismatch {
            expected: samples.len(),
            found: confidences.len(),
        });
    }
    let n_bins = scheme.n_bins();
    let mut counts = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut sample_bins = Vec::with_capacity(samples.len());
    for (s, &c) in samples.iter().zip(confidences) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::OutOfRange {
                line: None,
                field: "confidence".into(),
                value: c,
            });
        }
        let b = scheme.bin_of(&scheme.point(s, c));
        counts[b] += 1;
        conf_sum[b] += c;
        hits[b] += s.matched() as usize;
        sample_bins.push(b);
    }
    let stats = (0..n_bins)
        .map(|b| {
            let count = counts[b];
            let (mean_confidence, precision) = if count > 0 {
                (
                    Some(conf_sum[b] / count as f64),
                    Some(hits[b] as f64 / count as f64),
                )
            } else {
                (None, None)
            };
            BinStats {
                index: scheme.unravel(b),
                count,
                mean_confidence,
                precision,
                valid: count > 0 && count >= scheme.min_samples_per_bin,
            }
        })
        .collect();
    Ok(Binning { stats, sample_bins })
}

/// Count-weighted mean |confidence - precision| over valid bins, normalized by
/// the number of samples in valid bins.
pub fn d_ece(stats: &[BinStats]) -> Result<f64> {
    let n_valid: usize = stats.iter().filter(|b| b.valid).map(|b| b.count).sum();
    if n_valid == 0 {
        return Err(Error::InsufficientSamples);
    }
    let total: f64 = stats
        .iter()
        .filter(|b| b.valid)
        .map(|b| {
            let gap = b.mean_confidence.unwrap_or(0.0) - b.precision.unwrap_or(0.0);
            b.count as f64 * gap.abs()
        })
        .sum();
    Ok(total / n_valid as f64)
}

/// Binned precision per sample; `None` marks samples in invalid bins.
pub fn estimate_precision_per_sample(
    samples: &[MatchedSample],
    confidences: &[f64],
    scheme: &BinningScheme,
) -> Result<Vec<Option<f64>>> {
    let binning = assign_bins(samples, confidences, scheme)?;
    precision_lookup(&binning)
}

fn precision_lookup(binning: &Binning) -> Result<Vec<Option<f64>>> {
    if binning.n_valid_bins() == 0 {
        return Err(Error::InsufficientSamples);
    }
    Ok(binning
        .sample_bins
        .iter()
        .map(|&b| {
            let st = &binning.stats[b];
            if st.valid {
                st.precision
            } else {
                None
            }
        })
        .collect())
}

/// Fraction of included samples whose binned precision lies inside their interval.
pub fn picp(intervals: &[PredictionInterval], precisions: &[Option<f64>]) -> Result<f64> {
    if intervals.len() != precisions.len() {
        return Err(Error::DimensionMismatch {
            expected: intervals.len(),
            found: precisions.len(),
        });
    }
    let mut included = 0usize;
    let mut covered = 0usize;
    for (ci, p) in intervals.iter().zip(precisions) {
        if let Some(p) = p {
            included += 1;
            covered += (ci.lower <= *p && *p <= ci.upper) as usize;
        }
    }
    if included == 0 {
        return Err(Error::InsufficientSamples);
    }
    Ok(covered as f64 / included as f64)
}

pub fn mpiw(intervals: &[PredictionInterval]) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::NoSamples);
    }
    let sum: f64 = intervals.iter().map(interval_width).sum();
    Ok(sum / intervals.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub index: Vec<usize>,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub precision: Option<f64>,
    pub gap: Option<f64>,
    pub valid: bool,
}

/// One row per bin of the scheme, empty and invalid bins included.
pub fn reliability_table(stats: &[BinStats]) -> Vec<ReliabilityRow> {
    stats
        .iter()
        .map(|b| ReliabilityRow {
            index: b.index.clone(),
            count: b.count,
            mean_confidence: b.mean_confidence,
            precision: b.precision,
            gap: b.mean_confidence.zip(b.precision).map(|(c, p)| c - p),
            valid: b.valid,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub d_ece: f64,
    pub picp: Option<f64>,
    pub mpiw: Option<f64>,
    pub tau: Option<f64>,
    pub n_samples: usize,
    pub n_valid_bins: usize,
    pub scheme: BinningScheme,
    pub reliability: Vec<ReliabilityRow>,
}

/// Scores calibrated estimates against the labels of `samples`.
///
/// `q_means` are the point estimates used for D-ECE and for binning; when
/// `intervals` is given, PICP and MPIW are added.
pub fn evaluate(
    samples: &[MatchedSample],
    q_means: &[f64],
    intervals: Option<(&[PredictionInterval], f64)>,
    scheme: &BinningScheme,
) -> Result<EvaluationReport> {
    let binning = assign_bins(samples, q_means, scheme)?;
    let d_ece = d_ece(&binning.stats)?;
    let (picp, mpiw, tau) = match intervals {
        Some((ci, tau)) => {
            let precisions = precision_lookup(&binning)?;
            (Some(picp(ci, &precisions)?), Some(mpiw(ci)?), Some(tau))
        }
        None => (None, None, None),
    };
    Ok(EvaluationReport {
        d_ece,
        picp,
        mpiw,
        tau,
        n_samples: samples.len(),
        n_valid_bins: binning.n_valid_bins(),
        scheme: scheme.clone(),
        reliability: reliability_table(&binning.stats),
    })
}

// ---------------------------------------------------------------------------
// covariate shift

/// Nearest-rank percentile (`p` in (0, 100]) of an unsorted slice.
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::NoSamples);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::invalid(format!("percentile must lie in (0, 100], got {p}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or fewer than two pairs are given.
pub fn rank_correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub index: usize,
    pub q_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_width: f64,
    pub est_precision: Option<f64>,
    pub abs_gap: Option<f64>,
    /// `ci_width <= threshold` for each width percentile, in percentile order.
    pub within_percentile: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub n_rows: usize,
    pub n_included: usize,
    pub percentiles: Vec<f64>,
    pub width_thresholds: Vec<f64>,
    pub median_width: f64,
    pub rank_correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub rows: Vec<ShiftRow>,
    pub summary: ShiftSummary,
}

/// Per-detection interval width against the binned calibration gap.
///
/// `estimates` must be aligned with `samples`. Width percentiles use the
/// nearest-rank rule; the rank correlation is taken over included rows.
pub fn shift_report(
    estimates: &[DetectionEstimate],
    samples: &[MatchedSample],
    scheme: &BinningScheme,
    percentiles: &[f64],
) -> Result<ShiftReport> {
    if estimates.len() != samples.len() {
        return Err(Error::DimensionMismatch {
            expected: samples.len(),
            found: estimates.len(),
        });
    }
    let q: Vec<f64> = estimates.iter().map(|e| e.q_mean).collect();
    let precisions = estimate_precision_per_sample(samples, &q, scheme)?;
    let widths: Vec<f64> = estimates.iter().map(|e| interval_width(&e.interval)).collect();
    let thresholds = percentiles
        .iter()
        .map(|&p| percentile_nearest_rank(&widths, p))
        .collect::<Result<Vec<_>>>()?;

    let rows: Vec<ShiftRow> = estimates
        .iter()
        .zip(&precisions)
        .zip(&widths)
        .map(|((e, p), &w)| ShiftRow {
            index: e.index,
            q_mean: e.q_mean,
            ci_low: e.interval.lower,
            ci_high: e.interval.upper,
            ci_width: w,
            est_precision: *p,
            abs_gap: p.map(|p| (e.q_mean - p).abs()),
            within_percentile: thresholds.iter().map(|&t| w <= t).collect(),
        })
        .collect();

    let (inc_w, inc_g): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| r.abs_gap.map(|g| (r.ci_width, g)))
        .unzip();
    let summary = ShiftSummary {
        n_rows: rows.len(),
        n_included: inc_w.len(),
        percentiles: percentiles.to_vec(),
        width_thresholds: thresholds,
        median_width: percentile_nearest_rank(&widths, 50.0)?,
        rank_correlation: rank_correlation(&inc_w, &inc_g),
    };
    Ok(ShiftReport { rows, summary })
}

pub const SHIFT_CSV_HEADER: &str = "index,q_mean,ci_low,ci_high,ci_width,est_precision,abs_gap";

pub fn shift_csv(rows: &[ShiftRow]) -> String {
    let mut out = String::from(SHIFT_CSV_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.index,
            r.q_mean,
            r.ci_low,
            r.ci_high,
            r.ci_width,
            opt(r.est_precision),
            opt(r.abs_gap)
        ));
    }
    out
}
