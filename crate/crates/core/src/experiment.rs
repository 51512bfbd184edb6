//! Cross-validated experiment protocols and result tables.
//!
//! Every run is identified by `(seed, fold, model, noise_k)` and seeded from
//! those alone, so any cell can be re-run in isolation. Runs execute in
//! parallel and are collected in a fixed order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CoxCalibrator, IsotonicCalibrator};
use crate::data::{inject_noise, stratified_kfold, NoiseDist, SurvivalDataset};
use crate::error::{GraftError, Result};
use crate::gates::GateVariant;
use crate::metrics::{c_index, ibs, CensoringKm, EvalGrid};
use crate::rng;
use crate::trainer::{train, ModelVariant, TrainConfig};

pub const IBS_GRID_POINTS: usize = 100;
pub const ISOTONIC_GRID_POINTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used in the `dataset` column.
    pub dataset: String,
    pub data: Option<PathBuf>,
    pub time_col: String,
    pub event_col: String,
    pub folds: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub noise_multipliers: Vec<usize>,
    pub noise_dist: NoiseDist,
    pub variants: Vec<ModelVariant>,
    pub gate_variants: Vec<GateVariant>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            data: None,
            time_col: "time".into(),
            event_col: "event".into(),
            folds: 3,
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            noise_multipliers: vec![0, 3, 5, 7, 10],
            noise_dist: NoiseDist::Gaussian,
            variants: vec![ModelVariant::Full, ModelVariant::NoStg, ModelVariant::LinearOnly],
            gate_variants: vec![GateVariant::Stg],
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(GraftError::Config("seeds must be nonempty".into()));
        }
        if self.folds < 2 {
            return Err(GraftError::Config("folds must be >= 2".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(GraftError::Config("seeds must be distinct".into()));
        }
        self.train.validate()
    }
}

/// One trained-and-evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCell {
    pub dataset: String,
    pub model: String,
    pub noise_k: usize,
    pub seed: u64,
    pub fold: usize,
    pub run_seed: u64,
    pub c_index: f64,
    /// IBS of the Cox-calibrated curves.
    pub ibs: f64,
    pub ibs_isotonic: f64,
    pub epochs: usize,
}

pub const METRICS: [&str; 3] = ["c_index", "ibs", "ibs_isotonic"];

impl RunCell {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "c_index" => Some(self.c_index),
            "ibs" => Some(self.ibs),
            "ibs_isotonic" => Some(self.ibs_isotonic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub model: String,
    pub noise_k: usize,
    pub metric: String,
    pub mean: f64,
    /// Std across seeds of the fold-averaged values.
    pub fold_std: f64,
    /// Std across folds of the seed-averaged values.
    pub seed_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub cells: Vec<RunCell>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
fn pop_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

impl ResultsTable {
    /// Aggregates raw cells. Rows keep the order in which their
    /// `(dataset, model, noise_k)` group first appears; every group must
    /// hold a full seeds × folds grid.
    pub fn from_cells(cells: Vec<RunCell>) -> Result<Self> {
        let mut groups: Vec<(String, String, usize)> = Vec::new();
        for c in &cells {
            let key = (c.dataset.clone(), c.model.clone(), c.noise_k);
            if !groups.contains(&key) {
                groups.push(key);
            }
        }
        let mut rows = Vec::new();
        for (dataset, model, k) in groups {
            let members: Vec<&RunCell> = cells
                .iter()
                .filter(|c| c.dataset == dataset && c.model == model && c.noise_k == k)
                .collect();
            let mut seeds: Vec<u64> = members.iter().map(|c| c.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            let mut folds: Vec<usize> = members.iter().map(|c| c.fold).collect();
            folds.sort_unstable();
            folds.dedup();
            if members.len() != seeds.len() * folds.len() {
                return Err(GraftError::Shape(format!(
                    "group ({dataset}, {model}, {k}) is not a complete seeds x folds grid"
                )));
            }
            for metric in METRICS {
                let at = |s: u64, f: usize| {
                    members
                        .iter()
                        .find(|c| c.seed == s && c.fold == f)
                        .and_then(|c| c.metric(metric))
                        .expect("complete grid")
                };
                let all: Vec<f64> = members.iter().map(|c| c.metric(metric).expect("known metric")).collect();
                let per_seed: Vec<f64> = seeds
                    .iter()
                    .map(|&s| mean(&folds.iter().map(|&f| at(s, f)).collect::<Vec<_>>()))
                    .collect();
                let per_fold: Vec<f64> = folds
                    .iter()
                    .map(|&f| mean(&seeds.iter().map(|&s| at(s, f)).collect::<Vec<_>>()))
                    .collect();
                rows.push(ResultRow {
                    dataset: dataset.clone(),
                    model: model.clone(),
                    noise_k: k,
                    metric: metric.to_string(),
                    mean: mean(&all),
                    fold_std: pop_std(&per_seed),
                    seed_std: pop_std(&per_fold),
                });
            }
        }
        Ok(Self { rows, cells })
    }

    pub fn row(&self, model: &str, noise_k: usize, metric: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.noise_k == noise_k && r.metric == metric)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["dataset", "model", "noise_k", "metric", "mean", "fold_std", "seed_std"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.dataset.clone(),
                r.model.clone(),
                r.noise_k.to_string(),
                r.metric.clone(),
                r.mean.to_string(),
                r.fold_std.to_string(),
                r.seed_std.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| GraftError::Numeric(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writes UTF-8"))
    }

    /// Raw cells plus the configuration that produced them.
    pub fn to_json(&self, config: &ExperimentConfig) -> Result<String> {
        #[derive(Serialize)]
        struct Report<'a> {
            config: &'a ExperimentConfig,
            rows: &'a [ResultRow],
            cells: &'a [RunCell],
        }
        serde_json::to_string_pretty(&Report {
            config,
            rows: &self.rows,
            cells: &self.cells,
        })
        .map_err(|e| GraftError::Numeric(e.to_string()))
    }

    /// Aligned text table, one line per (dataset, model, noise_k) with
    /// `mean (fold_std, seed_std)` per metric.
    pub fn render_text(&self) -> String {
        let mut lines: Vec<[String; 6]> = vec![[
            "dataset".into(),
            "model".into(),
            "k".into(),
            "C-index".into(),
            "IBS".into(),
            "IBS (isotonic)".into(),
        ]];
        let mut seen: Vec<(String, String, usize)> = Vec::new();
        for r in &self.rows {
            let key = (r.dataset.clone(), r.model.clone(), r.noise_k);
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            let cell = |m: &str| {
                self.rows
                    .iter()
                    .find(|x| x.dataset == r.dataset && x.model == r.model && x.noise_k == r.noise_k && x.metric == m)
                    .map(|x| format!("{:.4} ({:.4}, {:.4})", x.mean, x.fold_std, x.seed_std))
                    .unwrap_or_default()
            };
            lines.push([
                r.dataset.clone(),
                r.model.clone(),
                r.noise_k.to_string(),
                cell("c_index"),
                cell("ibs"),
                cell("ibs_isotonic"),
            ]);
        }
        let mut widths = [0usize; 6];
        for l in &lines {
            for (w, c) in widths.iter_mut().zip(l) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        for l in &lines {
            let cols: Vec<String> = l
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", cols.join("  ").trim_end());
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write_outputs(&self, config: &ExperimentConfig, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| GraftError::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| GraftError::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.to_json(config)?).map_err(|e| GraftError::io(&json_path, e))?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> GraftError {
    GraftError::Numeric(format!("csv output: {e}"))
}

/// Table label of a model configuration.
pub fn model_label(variant: ModelVariant, gate: GateVariant) -> String {
    match (variant, gate) {
        (ModelVariant::Full, GateVariant::Stg) => "full".into(),
        (ModelVariant::Full, g) => format!("full-{}", g.name()),
        (v, _) => v.name().into(),
    }
}

/// Seed of a single run.
pub fn run_seed(seed: u64, fold: usize, label: &str, noise_k: usize) -> u64 {
    rng::mix_seed(seed, &[fold as u64, rng::tag(label), noise_k as u64])
}

/// Dataset with `k * p` noise columns appended; `k = 0` is the original.
pub fn noisy_dataset(ds: &SurvivalDataset, k: usize, dist: NoiseDist, seed: u64) -> Result<SurvivalDataset> {
    if k == 0 {
        return Ok(ds.clone());
    }
    inject_noise(ds, k, dist, rng::mix_seed(seed, &[k as u64, rng::tag("noise")]))
}

struct RunSpec {
    seed: u64,
    fold: usize,
    variant: ModelVariant,
    gate: GateVariant,
    noise_k: usize,
}

/// Trains on the training folds and scores the held-out fold: C-index on
/// raw scores, IBS on Cox- and isotonic-calibrated curves. Scaler,
/// imputation, calibration and the censoring estimate only see training
/// data.
pub fn evaluate_fold(
    train_ds: &SurvivalDataset,
    test_ds: &SurvivalDataset,
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64, usize)> {
    let model = train(train_ds, cfg)?;
    let train_scores = model.predict_scores(&train_ds.features)?;
    let test_scores = model.predict_scores(&test_ds.features)?;
    let c = c_index(&test_scores, &test_ds.times, &test_ds.events)?;
    let cens = CensoringKm::fit(&train_ds.times, &train_ds.events)?;
    let grid = EvalGrid::standard(&test_ds.times, &cens, IBS_GRID_POINTS)?;
    let cox = CoxCalibrator::fit(&train_scores, &train_ds.times, &train_ds.events)?;
    let ibs_cox = ibs(
        |i, t| cox.survival(test_scores[i], t),
        &test_ds.times,
        &test_ds.events,
        &grid,
        &cens,
    )?;
    let iso = IsotonicCalibrator::fit(&train_scores, &train_ds.times, &train_ds.events, ISOTONIC_GRID_POINTS)?;
    let ibs_iso = ibs(
        |i, t| iso.survival(test_scores[i], t),
        &test_ds.times,
        &test_ds.events,
        &grid,
        &cens,
    )?;
    Ok((c, ibs_cox, ibs_iso, model.meta.epochs_run))
}

fn run_grid(ds: &SurvivalDataset, cfg: &ExperimentConfig, models: &[(ModelVariant, GateVariant)], ks: &[usize], dist: NoiseDist) -> Result<ResultsTable> {
    cfg.validate()?;
    let mut specs = Vec::new();
    for &(variant, gate) in models {
        for &k in ks {
            for &seed in &cfg.seeds {
                for fold in 0..cfg.folds {
                    specs.push(RunSpec {
                        seed,
                        fold,
                        variant,
                        gate,
                        noise_k: k,
                    });
                }
            }
        }
    }
    // datasets and splits shared by all models
    let mut prepared = Vec::new();
    for &k in ks {
        for &seed in &cfg.seeds {
            let noisy = noisy_dataset(ds, k, dist, seed)?;
            let split = stratified_kfold(&noisy, cfg.folds, seed)?;
            prepared.push(((k, seed), noisy, split));
        }
    }
    let cells: Vec<RunCell> = specs
        .par_iter()
        .map(|spec| {
            let (_, data, split) = prepared
                .iter()
                .find(|(key, _, _)| *key == (spec.noise_k, spec.seed))
                .expect("prepared dataset");
            let label = model_label(spec.variant, spec.gate);
            let rs = run_seed(spec.seed, spec.fold, &label, spec.noise_k);
            let tcfg = TrainConfig {
                seed: rs,
                variant: spec.variant,
                gate_variant: match spec.variant {
                    ModelVariant::Full => spec.gate,
                    _ => cfg.train.gate_variant,
                },
                ..cfg.train.clone()
            };
            let train_ds = data.subset(&split.train_indices(spec.fold));
            let test_ds = data.subset(&split.test_indices(spec.fold));
            let (c, ibs_cox, ibs_iso, epochs) = evaluate_fold(&train_ds, &test_ds, &tcfg)?;
            Ok(RunCell {
                dataset: cfg.dataset.clone(),
                model: label,
                noise_k: spec.noise_k,
                seed: spec.seed,
                fold: spec.fold,
                run_seed: rs,
                c_index: c,
                ibs: ibs_cox,
                ibs_isotonic: ibs_iso,
                epochs,
            })
        })
        .collect::<Result<_>>()?;
    ResultsTable::from_cells(cells)
}

/// The configured training setup on the clean data, every seed and fold.
pub fn run_benchmark(ds: &SurvivalDataset, cfg: &ExperimentConfig) -> Result<ResultsTable> {
    run_grid(ds, cfg, &[(cfg.train.variant, cfg.train.gate_variant)], &[0], cfg.noise_dist)
}

/// Model variants crossed with Gaussian noise multipliers.
pub fn run_ablation(ds: &SurvivalDataset, cfg: &ExperimentConfig) -> Result<ResultsTable> {
    let models: Vec<_> = cfg.variants.iter().map(|&v| (v, GateVariant::Stg)).collect();
    run_grid(ds, cfg, &models, &cfg.noise_multipliers, NoiseDist::Gaussian)
}

/// Full model with each requested gate mechanism across Student-t(2) noise
/// multipliers.
pub fn run_noise_sweep(ds: &SurvivalDataset, cfg: &ExperimentConfig) -> Result<ResultsTable> {
    let models: Vec<_> = cfg.gate_variants.iter().map(|&g| (ModelVariant::Full, g)).collect();
    run_grid(ds, cfg, &models, &cfg.noise_multipliers, NoiseDist::StudentTDf2)
}
