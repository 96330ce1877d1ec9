//! Subcommand implementations.

use std::collections::BTreeSet;
use std::io;
use std::path::{Path, PathBuf};

use bayescal_core::data::{load_detections, load_ground_truth, load_samples, match_detections, write_samples};
use bayescal_core::experiment::{
    d_ece_table_csv, evaluate_reports, fit_all, interval_table_csv, rows_csv, run_experiment, run_shift,
    ExperimentOutcome, ReportRow,
};
use bayescal_core::metrics::shift_csv;
use bayescal_core::synthetic::{generate, Region, SyntheticSpec, TrueMap};
use bayescal_core::{
    CalibrationModel, EstimatorChoice, ErrorKind, ExperimentConfig, FeatureSubset, Method, SampleSet,
};
use serde::Serialize;
use thiserror::Error;

use crate::output::{write_atomic, write_json};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] bayescal_core::Error),
    #[error("{context}: {source}")]
    Context {
        context: String,
        source: bayescal_core::Error,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) | CliError::Context { source: e, .. } => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            },
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

trait WithContext<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> WithContext<T> for bayescal_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|source| CliError::Context {
            context: what(),
            source,
        })
    }
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Command-line values that take precedence over the configuration file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub samples: Option<PathBuf>,
    pub test_samples: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub subsets: Vec<FeatureSubset>,
    pub estimator: Option<EstimatorChoice>,
    pub repeats: Option<usize>,
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub samples_t: Option<usize>,
}

impl Overrides {
    pub fn apply(self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig, CliError> {
        cfg.samples = self.samples.or(cfg.samples);
        cfg.test_samples = self.test_samples.or(cfg.test_samples);
        if !self.methods.is_empty() {
            cfg.methods = dedup(self.methods);
        }
        if !self.subsets.is_empty() {
            cfg.subsets = dedup(self.subsets);
        }
        cfg.estimator = self.estimator.unwrap_or(cfg.estimator);
        cfg.repeats = self.repeats.unwrap_or(cfg.repeats);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.tau = self.tau.unwrap_or(cfg.tau);
        cfg.samples_t = self.samples_t.unwrap_or(cfg.samples_t);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dedup<T: Ord + Copy>(items: Vec<T>) -> Vec<T> {
    let mut seen = BTreeSet::new();
    items.into_iter().filter(|x| seen.insert(*x)).collect()
}

fn write_resolved_config(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), CliError> {
    let text = toml::to_string_pretty(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    write_atomic(&out_dir.join("config.toml"), text.as_bytes())
}

fn read_samples(path: &Path, cfg: Option<&ExperimentConfig>) -> Result<SampleSet, CliError> {
    let set = load_samples(path).context(|| path.display().to_string())?;
    Ok(match cfg.and_then(|c| c.category_id) {
        Some(c) => set.filter_category(c),
        None => set,
    })
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Config(format!("no {what} given (flag or config file)")))
}

fn save_set(set: &SampleSet, out: &Path) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_samples(set, &mut buf)?;
    write_atomic(out, &buf)
}

pub fn cmd_match(dets: &Path, gts: &Path, iou: f64, out: &Path) -> Result<(), CliError> {
    let d = load_detections(dets).context(|| dets.display().to_string())?;
    let g = load_ground_truth(gts).context(|| gts.display().to_string())?;
    let set = match_detections(&d, &g, iou)?;
    save_set(&set, out)?;
    println!(
        "{} detections, {} matched at IoU {iou} -> {}",
        set.len(),
        set.n_matched(),
        out.display()
    );
    Ok(())
}

pub fn cmd_synth(
    n: usize,
    seed: u64,
    weights: Vec<f64>,
    bias: f64,
    shape: &[f64],
    region: &str,
    out: &Path,
) -> Result<(), CliError> {
    let [alpha, beta] = shape else {
        return Err(CliError::Config("--score-shape takes two values".into()));
    };
    let spec = SyntheticSpec::new(n, seed, TrueMap::logistic(weights, bias))
        .with_score_shape(*alpha, *beta)
        .with_region(Region::parse(region)?);
    let set = generate(&spec)?;
    save_set(&set, out)?;
    println!("{} samples ({} matched) -> {}", set.len(), set.n_matched(), out.display());
    Ok(())
}

pub fn cmd_fit(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), CliError> {
    let path = required(&cfg.samples, "training samples")?;
    let train = read_samples(path, Some(cfg))?;
    let models = fit_all(cfg, &train, cfg.seed)?;
    let dir = out_dir.join("models");
    for m in &models {
        let file = dir.join(format!("{}.json", m.file_stem()));
        write_json(&file, m)?;
        println!("{}", file.display());
    }
    write_resolved_config(cfg, out_dir)
}

pub fn cmd_eval(cfg: &ExperimentConfig, model_paths: &[PathBuf], out_dir: &Path) -> Result<(), CliError> {
    let path = required(&cfg.test_samples, "test samples")?;
    let test = read_samples(path, Some(cfg))?;
    let models = model_paths
        .iter()
        .map(|p| CalibrationModel::load(p).context(|| p.display().to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    // baselines for exactly the subsets the models use
    let mut cfg = cfg.clone();
    cfg.subsets = dedup(models.iter().map(|m| m.subset).collect());
    let evaluated = evaluate_reports(&cfg, &models, &test)?;
    let dir = out_dir.join("reports");
    for e in &evaluated {
        write_json(&dir.join(format!("{}.json", e.file_stem())), &e.report)?;
    }
    let rows: Vec<ReportRow> = evaluated
        .into_iter()
        .map(|e| ReportRow {
            repeat: 0,
            seed: cfg.seed,
            report: (&e.report).into(),
            method: e.method,
            subset: e.subset,
            estimator: e.estimator,
        })
        .collect();
    let outcome = ExperimentOutcome::from_rows(cfg.clone(), test.len(), rows);
    write_tables(&outcome, out_dir, "eval")?;
    print!("{}", d_ece_table_csv(&outcome));
    write_resolved_config(&cfg, out_dir)
}

fn write_tables(outcome: &ExperimentOutcome, out_dir: &Path, name: &str) -> Result<(), CliError> {
    write_json(&out_dir.join(format!("{name}.json")), outcome)?;
    write_atomic(&out_dir.join(format!("{name}_rows.csv")), rows_csv(&outcome.rows).as_bytes())?;
    write_atomic(&out_dir.join(format!("{name}_d_ece.csv")), d_ece_table_csv(outcome).as_bytes())?;
    write_atomic(
        &out_dir.join(format!("{name}_intervals.csv")),
        interval_table_csv(outcome).as_bytes(),
    )
}

pub fn cmd_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), CliError> {
    let path = required(&cfg.samples, "samples")?;
    let set = read_samples(path, None)?;
    let outcome = run_experiment(cfg, &set)?;
    write_tables(&outcome, out_dir, "experiment")?;
    print!("{}", d_ece_table_csv(&outcome));
    write_resolved_config(cfg, out_dir)
}

#[derive(Serialize)]
struct ShiftFile<'a> {
    model: String,
    tau: f64,
    samples_t: usize,
    comparison: &'a bayescal_core::experiment::ShiftSummary,
    in_distribution: &'a bayescal_core::metrics::ShiftSummary,
    out_of_distribution: &'a bayescal_core::metrics::ShiftSummary,
}

pub fn cmd_shift(
    cfg: &ExperimentConfig,
    model_path: &Path,
    in_path: &Path,
    out_path: &Path,
    out_dir: &Path,
) -> Result<(), CliError> {
    let model = CalibrationModel::load(model_path).context(|| model_path.display().to_string())?;
    let inside = read_samples(in_path, Some(cfg))?;
    let outside = read_samples(out_path, Some(cfg))?;
    let out = run_shift(&model, &inside, &outside, cfg.samples_t, cfg.tau)?;
    write_atomic(&out_dir.join("shift_in.csv"), shift_csv(&out.in_distribution.rows).as_bytes())?;
    write_atomic(
        &out_dir.join("shift_out.csv"),
        shift_csv(&out.out_of_distribution.rows).as_bytes(),
    )?;
    write_json(
        &out_dir.join("shift_summary.json"),
        &ShiftFile {
            model: model_path.display().to_string(),
            tau: cfg.tau,
            samples_t: cfg.samples_t,
            comparison: &out.summary,
            in_distribution: &out.in_distribution.summary,
            out_of_distribution: &out.out_of_distribution.summary,
        },
    )?;
    let s = &out.summary;
    println!(
        "median width in {:.5}, out {:.5}, ratio {}, rank correlation {}",
        s.median_width_in,
        s.median_width_out,
        s.median_ratio.map_or("n/a".into(), |r| format!("{r:.3}")),
        s.rank_correlation.map_or("n/a".into(), |r| format!("{r:.3}"))
    );
    write_resolved_config(cfg, out_dir)
}
