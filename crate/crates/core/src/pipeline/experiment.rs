use ndarray::{concatenate, s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::AmoModel;
use crate::prep::{smote_tomek, SMOTE_K};
use crate::rng::derive_seed;
use crate::survival::{encode_mtlr_target, make_bins, risk_score, BinGrid, LANDMARK_MONTHS};

use super::config::{RunConfig, Task};
use super::cv::{stratified_kfold, Split};
use super::data::Dataset;
use super::report::{evaluate_report, primary_metric, FoldReport, PatientPrediction};
use super::train::{predict, train, FoldData, Targets};
use super::transform::FoldTransform;

/// A model with everything needed to score new patients.
#[derive(Clone, Debug)]
pub struct FittedModel {
    pub model: AmoModel,
    pub transform: FoldTransform,
    pub grid: Option<BinGrid>,
    pub loss_trace: Vec<f64>,
    pub best_epoch: usize,
}

/// Checkpoint metadata stored next to the weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: RunConfig,
    pub transform: FoldTransform,
    pub grid: Option<BinGrid>,
}

impl FittedModel {
    /// Scores of `rows`: positive-class probability or MTLR risk.
    pub fn score(&self, data: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        let inputs = self.transform.apply(data, rows)?;
        scores_from_outputs(&predict(&self.model, &inputs)?, self.grid.as_ref(), rows.len())
    }

    pub fn meta(&self, config: &RunConfig) -> ModelMeta {
        ModelMeta { config: config.clone(), transform: self.transform.clone(), grid: self.grid.clone() }
    }
}

pub fn scores_from_outputs(out: &[f64], grid: Option<&BinGrid>, n: usize) -> Result<Vec<f64>> {
    match grid {
        None => Ok(out.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect()),
        Some(g) => {
            let t = g.num_bins();
            if out.len() != n * t {
                return Err(Error::shape(format!("{} outputs for {n} patients x {t} bins", out.len())));
            }
            out.chunks(t).map(|row| risk_score(row, g)).collect()
        }
    }
}

/// Target for the elastic-net screen: the task label, or the landmark event
/// for survival.
fn screening_target(config: &RunConfig, data: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    let all: Vec<u8> = match config.task {
        Task::MtlrSurvival => data.records(config.outcome)?.iter().map(|r| r.landmark_label(LANDMARK_MONTHS)).collect(),
        _ => data.binary_labels(config)?,
    };
    Ok(rows.iter().map(|&i| f64::from(all[i])).collect())
}

/// Oversample the minority class of the transformed training rows. The
/// modalities are resampled jointly.
fn resample(inputs: Vec<Array2<f64>>, labels: Vec<u8>, seed: u64) -> Result<(Vec<Array2<f64>>, Vec<u8>)> {
    let views: Vec<_> = inputs.iter().map(|x| x.view()).collect();
    let joint = concatenate(Axis(1), &views).map_err(|e| Error::shape(e.to_string()))?;
    let r = smote_tomek(&joint, &labels, SMOTE_K, seed)?;
    let mut out = Vec::with_capacity(inputs.len());
    let mut c = 0;
    for x in &inputs {
        out.push(r.x.slice(s![.., c..c + x.ncols()]).to_owned());
        c += x.ncols();
    }
    Ok((out, r.y))
}

/// Fit preprocessing and a model on `rows` only.
pub fn fit_rows(config: &RunConfig, data: &Dataset, rows: &[usize], seed: u64) -> Result<FittedModel> {
    let transform = FoldTransform::fit(data, rows, &screening_target(config, data, rows)?, config)?;
    let mut inputs = transform.apply(data, rows)?;
    let (targets, grid) = match config.task {
        Task::MtlrSurvival => {
            let recs = data.records(config.outcome)?;
            let sub: Vec<_> = rows.iter().map(|&i| recs[i]).collect();
            let grid = make_bins(&sub.iter().map(|r| r.time).collect::<Vec<_>>())?;
            let t = sub.iter().map(|r| encode_mtlr_target(r, &grid)).collect::<Result<Vec<_>>>()?;
            (Targets::Mtlr { targets: t, grid: grid.clone() }, Some(grid))
        }
        _ => {
            let all = data.binary_labels(config)?;
            let mut y: Vec<u8> = rows.iter().map(|&i| all[i]).collect();
            if config.smote_tomek {
                let (x, yy) = resample(inputs, y, derive_seed(seed, &[0x5307]))?;
                inputs = x;
                y = yy;
            }
            (Targets::Binary(y), None)
        }
    };
    let names = transform.modalities.iter().map(|m| m.name.clone()).collect();
    let outcome = train(config, &FoldData { names, inputs, targets }, seed)?;
    Ok(FittedModel { model: outcome.model, transform, grid, loss_trace: outcome.loss_trace, best_epoch: outcome.best_epoch })
}

pub struct FoldRun {
    pub split: Split,
    pub fitted: FittedModel,
}

pub struct CvRun {
    pub report: FoldReport,
    pub folds: Vec<FoldRun>,
}

/// Stratified k-fold cross-validation; folds train in parallel and results
/// are independent of the worker count.
pub fn cross_validate(config: &RunConfig, data: &Dataset) -> Result<CvRun> {
    config.validate()?;
    let splits = stratified_kfold(&data.strata(config)?, config.folds, config.seed)?;
    let folds: Vec<FoldRun> = splits
        .into_par_iter()
        .enumerate()
        .map(|(f, split)| {
            let fitted = fit_rows(config, data, &split.0, derive_seed(config.seed, &[0xF0, f as u64]))?;
            Ok(FoldRun { split, fitted })
        })
        .collect::<Result<_>>()?;
    let ids = data.ids();
    let mut predictions = Vec::with_capacity(data.len());
    for (f, run) in folds.iter().enumerate() {
        let scores = run.fitted.score(data, &run.split.1)?;
        for (&i, score) in run.split.1.iter().zip(scores) {
            predictions.push(PatientPrediction { patient_id: ids[i].clone(), fold: f, score });
        }
    }
    let report = evaluate_report(config, data, &predictions)?;
    Ok(CvRun { report, folds })
}

/// Model fitted on every patient, for export.
pub fn fit_final(config: &RunConfig, data: &Dataset) -> Result<FittedModel> {
    let all: Vec<usize> = (0..data.len()).collect();
    fit_rows(config, data, &all, derive_seed(config.seed, &[0xF1A1]))
}

/// One hyperparameter and the values to try, as TOML literals.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for GridAxis {
    type Err = Error;

    /// `key=v1,v2,...`
    fn from_str(s: &str) -> Result<Self> {
        let (key, vals) = s.split_once('=').ok_or_else(|| Error::Config(format!("grid axis {s:?} is not key=v1,v2")))?;
        let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(Error::Config(format!("grid axis {s:?} has no values")));
        }
        Ok(GridAxis { key: key.trim().to_string(), values })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub settings: Vec<(String, String)>,
    pub mean: f64,
    pub sd: f64,
    pub per_fold: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub metric: String,
    pub cells: Vec<GridCell>,
    pub best: usize,
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// `base` with `settings` applied, validated.
pub fn apply_settings(base: &RunConfig, settings: &[(String, String)]) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(&base.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in settings {
        if !table.contains_key(k) {
            return Err(Error::Config(format!("unknown grid key {k:?}")));
        }
        table.insert(k.clone(), parse_value(v));
    }
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    let mut cfg: RunConfig = text.parse()?;
    cfg.data_dir.clone_from(&base.data_dir);
    cfg.output_dir.clone_from(&base.output_dir);
    Ok(cfg)
}

/// Cells of the Cartesian product in lexicographic order, first axis slowest.
pub fn grid_cells(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|prefix: Vec<(String, String)>| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

/// Cross-validate every cell and pick the highest mean of the task's primary
/// metric; ties go to the earliest cell.
pub fn grid_search(base: &RunConfig, data: &Dataset, axes: &[GridAxis]) -> Result<GridResult> {
    if axes.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let cells = grid_cells(axes);
    let configs = cells.iter().map(|c| apply_settings(base, c)).collect::<Result<Vec<_>>>()?;
    let metric = primary_metric(base.task);
    if configs.iter().any(|c| primary_metric(c.task) != metric) {
        return Err(Error::Config("grid cells must share the task".into()));
    }
    let results: Vec<GridCell> = configs
        .par_iter()
        .zip(cells)
        .map(|(cfg, settings)| {
            let report = cross_validate(cfg, data)?.report;
            let per_fold = report.per_fold.get(metric).cloned().ok_or_else(|| Error::degenerate(format!("{metric} undefined for cell {settings:?}")))?;
            Ok(GridCell { settings, mean: report.mean[metric], sd: report.sd[metric], per_fold })
        })
        .collect::<Result<_>>()?;
    let best = results.iter().enumerate().fold(0, |b, (i, c)| if c.mean > results[b].mean { i } else { b });
    Ok(GridResult { metric: metric.to_string(), cells: results, best })
}
