use std::fs::{self, File};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fusion::{load_checkpoint, save_checkpoint};
use crate::metrics::youden_threshold;
use crate::survival::{OutcomeKind, LANDMARK_MONTHS};
use crate::synth::{read_clinical_csv, CLINICAL_CSV};

use super::config::RunConfig;
use super::data::{featurize_dir, save_feature_csv, Dataset, FeatureOptions, FEATURES_CSV};
use super::experiment::{cross_validate, fit_final, grid_search, FittedModel, GridAxis, GridResult, ModelMeta};
use super::report::{evaluate_report, km_export, read_predictions_csv, write_km_csv, FoldReport, KmExport, PatientPrediction};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const GRID_FILE: &str = "grid.json";
pub const WORKERS_ENV: &str = "AMO_WORKERS";

/// Worker count from `AMO_WORKERS`, if set.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Size the global rayon pool from `AMO_WORKERS`. Results never depend on it.
pub fn init_workers() -> Result<()> {
    if let Some(n) = workers_from_env()? {
        // a pool built earlier in the process wins; only the first call counts
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Extract features from the images under `data_dir` into a CSV.
pub fn run_features(data_dir: &Path, out: &Path, opts: &FeatureOptions) -> Result<usize> {
    let clinical = read_clinical_csv(&data_dir.join(CLINICAL_CSV))?;
    let rows = featurize_dir(data_dir, &clinical, opts)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_feature_csv(out, &rows)?;
    Ok(rows.len())
}

pub fn default_features_path(data_dir: &Path) -> PathBuf {
    data_dir.join(FEATURES_CSV)
}

pub struct TrainSummary {
    pub config: RunConfig,
    pub report: FoldReport,
    pub grid: Option<GridResult>,
    pub checkpoint: PathBuf,
}

/// Grid search (if any axes are given), cross-validation of the chosen
/// configuration, a final fit on every patient, and all artifacts under
/// `config.output_dir`.
pub fn run_train(config: &RunConfig, axes: &[GridAxis]) -> Result<TrainSummary> {
    config.validate_paths()?;
    let data = Dataset::load(&config.data_dir, &FeatureOptions::from_config(config)?)?;
    fs::create_dir_all(&config.output_dir)?;
    let (chosen, grid) = if axes.is_empty() {
        (config.clone(), None)
    } else {
        let g = grid_search(config, &data, axes)?;
        let best = super::experiment::apply_settings(config, &g.cells[g.best].settings)?;
        serde_json::to_writer_pretty(File::create(config.output_dir.join(GRID_FILE))?, &g)?;
        (best, Some(g))
    };
    chosen.save(&config.output_dir.join(CONFIG_FILE))?;
    let cv = cross_validate(&chosen, &data)?;
    cv.report.write(&config.output_dir)?;
    let fitted = fit_final(&chosen, &data)?;
    let checkpoint = config.output_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &fitted.model, &serde_json::to_value(fitted.meta(&chosen))?)?;
    Ok(TrainSummary { config: chosen, report: cv.report, grid, checkpoint })
}

pub fn load_fitted(path: &Path) -> Result<(FittedModel, RunConfig)> {
    let ckpt = load_checkpoint(path)?;
    let meta: ModelMeta = serde_json::from_value(ckpt.extra).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let fitted = FittedModel { model: ckpt.model, transform: meta.transform, grid: meta.grid, loss_trace: Vec::new(), best_epoch: 0 };
    Ok((fitted, meta.config))
}

/// Score every patient under `data_dir` with a saved model and report the
/// task metrics as a single fold.
pub fn run_evaluate(checkpoint: &Path, data_dir: &Path, out_dir: &Path) -> Result<FoldReport> {
    let (fitted, config) = load_fitted(checkpoint)?;
    let data = Dataset::load(data_dir, &FeatureOptions::from_config(&config)?)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let scores = fitted.score(&data, &rows)?;
    let predictions: Vec<PatientPrediction> =
        data.ids().into_iter().zip(scores).map(|(patient_id, score)| PatientPrediction { patient_id, fold: 0, score }).collect();
    let report = evaluate_report(&config, &data, &predictions)?;
    report.write(out_dir)?;
    Ok(report)
}

/// KM curves of patients split by their predicted score. Without an
/// explicit threshold the Youden point against the landmark event is used.
pub fn run_km_export(predictions: &Path, data_dir: &Path, outcome: OutcomeKind, threshold: Option<f64>, out: &Path) -> Result<KmExport> {
    let preds = read_predictions_csv(predictions)?;
    let clinical = read_clinical_csv(&data_dir.join(CLINICAL_CSV))?;
    let by_id: std::collections::HashMap<&str, usize> = clinical.iter().enumerate().map(|(i, r)| (r.patient_id.as_str(), i)).collect();
    let mut records = Vec::with_capacity(preds.len());
    for p in &preds {
        let &i = by_id.get(p.patient_id.as_str()).ok_or_else(|| Error::InvalidArgument(format!("no clinical row for {}", p.patient_id)))?;
        records.push(clinical[i].record(outcome)?);
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let threshold = match threshold {
        Some(t) => t,
        None => youden_threshold(&scores, &records.iter().map(|r| r.landmark_label(LANDMARK_MONTHS)).collect::<Vec<_>>())?,
    };
    let km = km_export(&records, &scores, threshold)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_km_csv(File::create(out)?, &km)?;
    Ok(km)
}

/// Cohort generator settings from a TOML file; missing keys keep defaults.
pub fn load_cohort_config(path: &Path) -> Result<crate::synth::CohortConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: crate::synth::CohortConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg)
}
