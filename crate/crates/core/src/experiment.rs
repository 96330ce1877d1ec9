//! Repeated split/fit/evaluate protocol and covariate-shift comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrators::{CalibratorSpec, Method};
use crate::data::{split_train_test, FeatureSubset, SampleSet};
use crate::error::{Error, Result};
use crate::inference::{MlConfig, SviConfig};
use crate::metrics::{rank_correlation, shift_report, BinningScheme, EvaluationReport, ShiftReport};
use crate::model::{baseline_report, CalibrationModel, Estimator};
use crate::uncertainty::{DEFAULT_DRAWS, DEFAULT_TAU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorChoice {
    Ml,
    Svi,
    Both,
}

impl EstimatorChoice {
    pub fn estimators(self) -> &'static [Estimator] {
        match self {
            EstimatorChoice::Ml => &[Estimator::Ml],
            EstimatorChoice::Svi => &[Estimator::Svi],
            EstimatorChoice::Both => &[Estimator::Ml, Estimator::Svi],
        }
    }
}

/// Per-subset bin counts and a shared minimum bin population.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeOverrides {
    pub min_samples_per_bin: Option<usize>,
    pub bins: BTreeMap<FeatureSubset, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Labelled samples for `fit` and `experiment`.
    pub samples: Option<PathBuf>,
    /// Held-out samples for `eval`.
    pub test_samples: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub subsets: Vec<FeatureSubset>,
    pub estimator: EstimatorChoice,
    pub repeats: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub tau: f64,
    pub samples_t: usize,
    pub category_id: Option<i64>,
    pub ml: MlConfig,
    pub svi: SviConfig,
    pub scheme: SchemeOverrides,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            samples: None,
            test_samples: None,
            methods: vec![Method::Histogram, Method::Logistic, Method::Beta],
            subsets: FeatureSubset::ALL.to_vec(),
            estimator: EstimatorChoice::Both,
            repeats: 20,
            train_fraction: 0.7,
            seed: 0,
            tau: DEFAULT_TAU,
            samples_t: DEFAULT_DRAWS,
            category_id: None,
            ml: MlConfig::default(),
            svi: SviConfig::default(),
            scheme: SchemeOverrides::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be at least 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction must lie in (0, 1)"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid("tau must lie in (0, 1)"));
        }
        if self.samples_t < 2 {
            return Err(Error::invalid("samples_t must be at least 2"));
        }
        if self.methods.is_empty() || self.subsets.is_empty() {
            return Err(Error::invalid("methods and subsets must be non-empty"));
        }
        for s in &self.subsets {
            self.scheme_for(*s)?;
        }
        Ok(())
    }

    pub fn scheme_for(&self, subset: FeatureSubset) -> Result<BinningScheme> {
        let default = BinningScheme::for_subset(subset);
        let bins = self.scheme.bins.get(&subset).cloned().unwrap_or(default.bins_per_dim);
        let min = self.scheme.min_samples_per_bin.unwrap_or(default.min_samples_per_bin);
        BinningScheme::new(default.dims, bins, min)
    }

    /// Every (method, subset, estimator) triple in output order. Histogram
    /// binning appears once per subset.
    pub fn triples(&self) -> Vec<(Method, FeatureSubset, Estimator)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            for &s in &self.subsets {
                if m == Method::Histogram {
                    out.push((m, s, Estimator::Binning));
                } else {
                    out.extend(self.estimator.estimators().iter().map(|&e| (m, s, e)));
                }
            }
        }
        out
    }

    /// Copy with the fitting seeds tied to `seed`.
    fn seeded(&self, seed: u64) -> (MlConfig, SviConfig) {
        (
            MlConfig { seed, ..self.ml },
            SviConfig { seed, ..self.svi },
        )
    }
}

/// Fits every configured model on `train`, in `triples()` order.
pub fn fit_all(cfg: &ExperimentConfig, train: &SampleSet, seed: u64) -> Result<Vec<CalibrationModel>> {
    cfg.validate()?;
    let (ml, svi) = cfg.seeded(seed);
    cfg.triples()
        .into_par_iter()
        .map(|(m, s, e)| {
            let spec = CalibratorSpec::new(m, s);
            CalibrationModel::fit(train, &spec, e, &cfg.scheme_for(s)?, &ml, &svi)
        })
        .collect()
}

/// Headline numbers of one evaluation, without the reliability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub d_ece: f64,
    pub picp: Option<f64>,
    pub mpiw: Option<f64>,
    pub tau: Option<f64>,
    pub n_samples: usize,
    pub n_valid_bins: usize,
}

impl From<&EvaluationReport> for ReportSummary {
    fn from(r: &EvaluationReport) -> Self {
        Self {
            d_ece: r.d_ece,
            picp: r.picp,
            mpiw: r.mpiw,
            tau: r.tau,
            n_samples: r.n_samples,
            n_valid_bins: r.n_valid_bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub repeat: usize,
    pub seed: u64,
    /// `baseline` or the calibrator short name.
    pub method: String,
    pub subset: FeatureSubset,
    pub estimator: Option<Estimator>,
    pub report: ReportSummary,
}

impl ReportRow {
    fn key(&self) -> (String, FeatureSubset, Option<Estimator>) {
        (self.method.clone(), self.subset, self.estimator)
    }
}

pub const BASELINE: &str = "baseline";

/// Full evaluation of one model, or of the raw scores (no estimator).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluated {
    pub method: String,
    pub subset: FeatureSubset,
    pub estimator: Option<Estimator>,
    pub report: EvaluationReport,
}

impl Evaluated {
    /// File stem such as `baseline_full` or `LC_conf_only_svi`.
    pub fn file_stem(&self) -> String {
        match self.estimator {
            Some(e) => format!("{}_{}_{}", self.method, self.subset.name(), e.name()),
            None => format!("{}_{}", self.method, self.subset.name()),
        }
    }
}

/// Baseline reports (one per subset of `cfg`) followed by one per model.
pub fn evaluate_reports(
    cfg: &ExperimentConfig,
    models: &[CalibrationModel],
    test: &SampleSet,
) -> Result<Vec<Evaluated>> {
    let mut out = Vec::new();
    for &s in &cfg.subsets {
        out.push(Evaluated {
            method: BASELINE.into(),
            subset: s,
            estimator: None,
            report: baseline_report(&test.samples, &cfg.scheme_for(s)?)?,
        });
    }
    let reports: Vec<EvaluationReport> = models
        .par_iter()
        .map(|m| m.evaluate(&test.samples, cfg.samples_t, cfg.tau))
        .collect::<Result<_>>()?;
    for (m, report) in models.iter().zip(reports) {
        out.push(Evaluated {
            method: m.method.short().into(),
            subset: m.subset,
            estimator: Some(m.estimator),
            report,
        });
    }
    Ok(out)
}

/// Summary rows of [`evaluate_reports`] tagged with the repeat.
pub fn evaluate_all(
    cfg: &ExperimentConfig,
    models: &[CalibrationModel],
    test: &SampleSet,
    repeat: usize,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    Ok(evaluate_reports(cfg, models, test)?
        .into_iter()
        .map(|e| ReportRow {
            repeat,
            seed,
            report: (&e.report).into(),
            method: e.method,
            subset: e.subset,
            estimator: e.estimator,
        })
        .collect())
}

/// One split, fit and evaluation with seed `cfg.seed + repeat`.
pub fn run_repeat(cfg: &ExperimentConfig, set: &SampleSet, repeat: usize) -> Result<Vec<ReportRow>> {
    let seed = cfg.seed.wrapping_add(repeat as u64);
    let (train, test) = split_train_test(set, cfg.train_fraction, seed)?;
    let models = fit_all(cfg, &train, seed)?;
    evaluate_all(cfg, &models, &test, repeat, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single repeat.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub subset: FeatureSubset,
    pub estimator: Option<Estimator>,
    pub n_repeats: usize,
    pub d_ece: MeanStd,
    pub picp: Option<MeanStd>,
    pub mpiw: Option<MeanStd>,
}

/// Mean D-ECE of the ML fit minus that of the SVI fit for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorDelta {
    pub method: String,
    pub subset: FeatureSubset,
    pub d_ece_ml: f64,
    pub d_ece_svi: f64,
    pub ml_minus_svi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub n_samples: usize,
    pub rows: Vec<ReportRow>,
    pub aggregate: Vec<AggregateRow>,
    pub deltas: Vec<EstimatorDelta>,
}

pub fn run_experiment(cfg: &ExperimentConfig, set: &SampleSet) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let set = match cfg.category_id {
        Some(c) => set.filter_category(c),
        None => set.clone(),
    };
    if set.is_empty() {
        return Err(Error::NoSamples);
    }
    let per_repeat: Vec<Vec<ReportRow>> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| run_repeat(cfg, &set, r))
        .collect::<Result<_>>()?;
    let rows: Vec<ReportRow> = per_repeat.into_iter().flatten().collect();
    Ok(ExperimentOutcome::from_rows(cfg.clone(), set.len(), rows))
}

impl ExperimentOutcome {
    pub fn from_rows(config: ExperimentConfig, n_samples: usize, rows: Vec<ReportRow>) -> Self {
        let aggregate = aggregate(&rows);
        let deltas = deltas(&aggregate);
        Self {
            config,
            n_samples,
            rows,
            aggregate,
            deltas,
        }
    }
}

/// Mean and standard deviation over repeats, in first-appearance order.
pub fn aggregate(rows: &[ReportRow]) -> Vec<AggregateRow> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<_, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        let k = r.key();
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let g = &groups[&k];
            let collect = |f: fn(&ReportSummary) -> Option<f64>| {
                let v: Vec<f64> = g.iter().filter_map(|r| f(&r.report)).collect();
                MeanStd::of(&v)
            };
            AggregateRow {
                method: k.0,
                subset: k.1,
                estimator: k.2,
                n_repeats: g.len(),
                d_ece: collect(|r| Some(r.d_ece)).expect("non-empty group"),
                picp: collect(|r| r.picp),
                mpiw: collect(|r| r.mpiw),
            }
        })
        .collect()
}

fn deltas(agg: &[AggregateRow]) -> Vec<EstimatorDelta> {
    let find = |m: &str, s, e| {
        agg.iter()
            .find(|a| a.method == m && a.subset == s && a.estimator == Some(e))
            .map(|a| a.d_ece.mean)
    };
    agg.iter()
        .filter(|a| a.estimator == Some(Estimator::Ml))
        .filter_map(|a| {
            let svi = find(&a.method, a.subset, Estimator::Svi)?;
            Some(EstimatorDelta {
                method: a.method.clone(),
                subset: a.subset,
                d_ece_ml: a.d_ece.mean,
                d_ece_svi: svi,
                ml_minus_svi: a.d_ece.mean - svi,
            })
        })
        .collect()
}

fn pct(x: f64) -> String {
    format!("{:.3}", 100.0 * x)
}

/// D-ECE table in percent: one row per subset, one column group per model,
/// with the signed ML-minus-SVI difference where both were fitted.
pub fn d_ece_table_csv(outcome: &ExperimentOutcome) -> String {
    let mut out = String::from("subset,method,estimator,d_ece_pct_mean,d_ece_pct_std,ml_minus_svi_pct\n");
    for a in &outcome.aggregate {
        let delta = outcome
            .deltas
            .iter()
            .find(|d| a.estimator == Some(Estimator::Ml) && d.method == a.method && d.subset == a.subset)
            .map(|d| format!("{:+.3}", 100.0 * d.ml_minus_svi))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            a.subset.name(),
            a.method,
            a.estimator.map_or("", |e| e.name()),
            pct(a.d_ece.mean),
            pct(a.d_ece.std),
            delta
        );
    }
    out
}

/// PICP (percent) and MPIW for the Bayesian models.
pub fn interval_table_csv(outcome: &ExperimentOutcome) -> String {
    let mut out = String::from("subset,method,picp_pct_mean,picp_pct_std,mpiw_mean,mpiw_std\n");
    for a in &outcome.aggregate {
        if let (Some(p), Some(w)) = (&a.picp, &a.mpiw) {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.5},{:.5}",
                a.subset.name(),
                a.method,
                pct(p.mean),
                pct(p.std),
                w.mean,
                w.std
            );
        }
    }
    out
}

/// Per-repeat rows as CSV.
pub fn rows_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("repeat,seed,subset,method,estimator,d_ece,picp,mpiw,n_samples,n_valid_bins\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{},{},{},{}",
            r.repeat,
            r.seed,
            r.subset.name(),
            r.method,
            r.estimator.map_or("", |e| e.name()),
            r.report.d_ece,
            opt(r.report.picp),
            opt(r.report.mpiw),
            r.report.n_samples,
            r.report.n_valid_bins
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub median_width_in: f64,
    pub median_width_out: f64,
    /// `median_width_out / median_width_in`; `None` when the inner median is 0.
    pub median_ratio: Option<f64>,
    /// Rank correlation of width and absolute gap over both sets.
    pub rank_correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftOutcome {
    pub in_distribution: ShiftReport,
    pub out_of_distribution: ShiftReport,
    pub summary: ShiftSummary,
}

pub const SHIFT_PERCENTILES: [f64; 3] = [25.0, 50.0, 75.0];

/// Applies a Bayesian model to an in-distribution and a shifted set.
pub fn run_shift(
    model: &CalibrationModel,
    in_set: &SampleSet,
    out_set: &SampleSet,
    t: usize,
    tau: f64,
) -> Result<ShiftOutcome> {
    let report = |set: &SampleSet| -> Result<ShiftReport> {
        if set.is_empty() {
            return Err(Error::NoSamples);
        }
        let est = model.estimate(&set.samples, t, tau)?;
        shift_report(&est, &set.samples, &model.scheme, &SHIFT_PERCENTILES)
    };
    let inside = report(in_set)?;
    let outside = report(out_set)?;
    let (w, g): (Vec<f64>, Vec<f64>) = inside
        .rows
        .iter()
        .chain(&outside.rows)
        .filter_map(|r| r.abs_gap.map(|g| (r.ci_width, g)))
        .unzip();
    let (mi, mo) = (inside.summary.median_width, outside.summary.median_width);
    Ok(ShiftOutcome {
        summary: ShiftSummary {
            median_width_in: mi,
            median_width_out: mo,
            median_ratio: (mi > 0.0).then(|| mo / mi),
            rank_correlation: rank_correlation(&w, &g),
        },
        in_distribution: inside,
        out_of_distribution: outside,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticSpec, TrueMap};

    fn quick() -> ExperimentConfig {
        ExperimentConfig {
            repeats: 3,
            subsets: vec![FeatureSubset::ConfOnly, FeatureSubset::ConfPos],
            svi: SviConfig {
                max_steps: 300,
                ..SviConfig::default()
            },
            samples_t: 200,
            ..ExperimentConfig::default()
        }
    }

    fn data() -> SampleSet {
        generate(&SyntheticSpec::new(3000, 5, TrueMap::logistic(vec![1.5], -0.5))).unwrap()
    }

    #[test]
    fn triples_enumerate_estimators() {
        let cfg = quick();
        let t = cfg.triples();
        // HB once per subset, LC and BC twice per subset
        assert_eq!(t.len(), 2 + 2 * 2 * 2);
        let ml_only = ExperimentConfig {
            estimator: EstimatorChoice::Ml,
            ..quick()
        };
        assert_eq!(ml_only.triples().len(), 2 + 2 * 2);
    }

    #[test]
    fn experiment_rows_and_aggregates() {
        let cfg = quick();
        let out = run_experiment(&cfg, &data()).unwrap();
        let per_repeat = 2 + cfg.triples().len();
        assert_eq!(out.rows.len(), cfg.repeats * per_repeat);
        assert_eq!(out.aggregate.len(), per_repeat);
        assert!(out.aggregate.iter().all(|a| a.n_repeats == cfg.repeats));
        // recompute one aggregate from the rows
        for a in &out.aggregate {
            let v: Vec<f64> = out
                .rows
                .iter()
                .filter(|r| r.method == a.method && r.subset == a.subset && r.estimator == a.estimator)
                .map(|r| r.report.d_ece)
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            assert!((a.d_ece.mean - mean).abs() < 1e-15);
            assert!((a.d_ece.std - var.sqrt()).abs() < 1e-15);
        }
        assert_eq!(out.deltas.len(), 2 * 2);
        let svi = out.aggregate.iter().filter(|a| a.estimator == Some(Estimator::Svi));
        assert!(svi.clone().all(|a| a.picp.is_some() && a.mpiw.is_some()));
        assert!(d_ece_table_csv(&out).lines().count() == 1 + out.aggregate.len());
        assert_eq!(interval_table_csv(&out).lines().count(), 1 + svi.count());
    }

    #[test]
    fn experiment_is_deterministic() {
        let cfg = ExperimentConfig {
            repeats: 2,
            ..quick()
        };
        let a = serde_json::to_string(&run_experiment(&cfg, &data()).unwrap()).unwrap();
        let b = serde_json::to_string(&run_experiment(&cfg, &data()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_repeat_matches_manual_pipeline() {
        let cfg = ExperimentConfig {
            repeats: 1,
            seed: 42,
            ..quick()
        };
        let set = data();
        let out = run_experiment(&cfg, &set).unwrap();
        let (train, test) = split_train_test(&set, 0.7, 42).unwrap();
        let spec = CalibratorSpec::new(Method::Logistic, FeatureSubset::ConfOnly);
        let scheme = cfg.scheme_for(FeatureSubset::ConfOnly).unwrap();
        let ml = MlConfig { seed: 42, ..cfg.ml };
        let svi = SviConfig { seed: 42, ..cfg.svi };
        let m = CalibrationModel::fit(&train, &spec, Estimator::Svi, &scheme, &ml, &svi).unwrap();
        let manual = m.evaluate(&test.samples, cfg.samples_t, cfg.tau).unwrap();
        let row = out
            .rows
            .iter()
            .find(|r| r.method == "LC" && r.subset == FeatureSubset::ConfOnly && r.estimator == Some(Estimator::Svi))
            .unwrap();
        assert_eq!(row.report, ReportSummary::from(&manual));
    }

    #[test]
    fn identical_sets_give_equal_shift_medians() {
        let set = data();
        let spec = CalibratorSpec::new(Method::Logistic, FeatureSubset::ConfPos);
        let svi = SviConfig {
            max_steps: 300,
            ..SviConfig::default()
        };
        let m = CalibrationModel::fit(
            &set,
            &spec,
            Estimator::Svi,
            &BinningScheme::for_subset(spec.subset),
            &MlConfig::default(),
            &svi,
        )
        .unwrap();
        let out = run_shift(&m, &set, &set, 200, 0.05).unwrap();
        assert_eq!(out.summary.median_width_in, out.summary.median_width_out);
        assert_eq!(out.summary.median_ratio, Some(1.0));
        assert_eq!(out.in_distribution.summary.percentiles, vec![25.0, 50.0, 75.0]);
    }

    #[test]
    fn config_validation_and_overrides() {
        assert!(ExperimentConfig { repeats: 0, ..quick() }.validate().is_err());
        assert!(ExperimentConfig { train_fraction: 1.0, ..quick() }.validate().is_err());
        let mut cfg = quick();
        cfg.scheme.bins.insert(FeatureSubset::ConfOnly, vec![10]);
        cfg.scheme.min_samples_per_bin = Some(4);
        let s = cfg.scheme_for(FeatureSubset::ConfOnly).unwrap();
        assert_eq!((s.bins_per_dim.clone(), s.min_samples_per_bin), (vec![10], 4));
        cfg.scheme.bins.insert(FeatureSubset::Full, vec![5, 5]);
        cfg.subsets.push(FeatureSubset::Full);
        assert!(cfg.validate().is_err());
    }
}
