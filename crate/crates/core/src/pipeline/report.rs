use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{binary_metrics, c_index, km_fit, logrank_split, roc_auc, youden_threshold, KmCurve, LogRankResult};
use crate::prep::{dichotomize, Dichotomy};
use crate::survival::{SurvivalRecord, LANDMARK_MONTHS};

use super::config::{RunConfig, Task};
use super::data::Dataset;

/// Out-of-fold prediction of one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub fold: usize,
    /// Positive-class probability, or MTLR risk score.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmGroup {
    pub name: String,
    pub curve: KmCurve,
}

/// Kaplan-Meier stratification of pooled predictions at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmExport {
    pub threshold: f64,
    pub logrank: LogRankResult,
    pub groups: Vec<KmGroup>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub task: Task,
    /// Metric name -> one value per fold.
    pub per_fold: BTreeMap<String, Vec<f64>>,
    pub mean: BTreeMap<String, f64>,
    /// Population standard deviation over folds.
    pub sd: BTreeMap<String, f64>,
    pub predictions: Vec<PatientPrediction>,
    pub km: Option<KmExport>,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Name of the metric that ranks configurations for a task.
pub fn primary_metric(task: Task) -> &'static str {
    match task {
        Task::MtlrSurvival => "c_index",
        _ => "auc",
    }
}

/// Labels the Youden threshold is tuned against: the task label for the
/// binary tasks, the landmark event for survival.
fn threshold_labels(config: &RunConfig, data: &Dataset, rows: &[usize]) -> Result<Vec<u8>> {
    let all = match config.task {
        Task::MtlrSurvival => data.records(config.outcome)?.iter().map(|r| r.landmark_label(LANDMARK_MONTHS)).collect(),
        _ => data.binary_labels(config)?,
    };
    Ok(rows.iter().map(|&i| all[i]).collect())
}

/// Metrics of one fold's test predictions; `rows` index into `data`.
pub fn fold_metrics(config: &RunConfig, data: &Dataset, rows: &[usize], scores: &[f64]) -> Result<BTreeMap<String, f64>> {
    if rows.len() != scores.len() {
        return Err(Error::shape(format!("{} predictions for {} patients", scores.len(), rows.len())));
    }
    let mut out = BTreeMap::new();
    match config.task {
        Task::MtlrSurvival => {
            let recs = data.records(config.outcome)?;
            let sub: Vec<SurvivalRecord> = rows.iter().map(|&i| recs[i]).collect();
            out.insert("c_index".into(), c_index(scores, &sub)?);
        }
        Task::Binary2y | Task::GradeClassification => {
            let labels = threshold_labels(config, data, rows)?;
            let m = binary_metrics(scores, &labels, 0.5)?;
            out.insert("auc".into(), m.auc);
            out.insert("recall".into(), m.recall);
            out.insert("specificity".into(), m.specificity);
            if config.task == Task::GradeClassification {
                let grades = data.grades();
                for scheme in Dichotomy::ALL {
                    let y: Vec<u8> = rows.iter().map(|&i| dichotomize(grades[i], scheme)).collect::<Result<_>>()?;
                    if let Ok(auc) = roc_auc(scores, &y) {
                        out.insert(format!("auc_{}", scheme.as_str()), auc);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Assemble per-fold metrics, mean and SD from out-of-fold predictions, and
/// stratify all patients at the Youden-optimal threshold of the pooled
/// predictions.
pub fn evaluate_report(config: &RunConfig, data: &Dataset, predictions: &[PatientPrediction]) -> Result<FoldReport> {
    let index: BTreeMap<&str, usize> = data.clinical.iter().enumerate().map(|(i, r)| (r.patient_id.as_str(), i)).collect();
    let mut by_fold: BTreeMap<usize, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for p in predictions {
        let &i = index.get(p.patient_id.as_str()).ok_or_else(|| Error::invalid(format!("prediction for unknown patient {}", p.patient_id)))?;
        let e = by_fold.entry(p.fold).or_default();
        e.0.push(i);
        e.1.push(p.score);
    }
    if by_fold.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    let mut per_fold: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (rows, scores) in by_fold.values() {
        for (k, v) in fold_metrics(config, data, rows, scores)? {
            per_fold.entry(k).or_default().push(v);
        }
    }
    // a metric missing from some fold (degenerate labels) is dropped
    per_fold.retain(|_, v| v.len() == by_fold.len());
    let mut mean = BTreeMap::new();
    let mut sd = BTreeMap::new();
    for (k, v) in &per_fold {
        let (m, s) = mean_sd(v);
        mean.insert(k.clone(), m);
        sd.insert(k.clone(), s);
    }
    let km = km_stratify(config, data, predictions, &index).ok();
    Ok(FoldReport { task: config.task, per_fold, mean, sd, predictions: predictions.to_vec(), km })
}

fn km_stratify(
    config: &RunConfig,
    data: &Dataset,
    predictions: &[PatientPrediction],
    index: &BTreeMap<&str, usize>,
) -> Result<KmExport> {
    let rows: Vec<usize> = predictions.iter().map(|p| index[p.patient_id.as_str()]).collect();
    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    let labels = threshold_labels(config, data, &rows)?;
    let threshold = youden_threshold(&scores, &labels)?;
    let recs = data.records(config.outcome)?;
    let sub: Vec<SurvivalRecord> = rows.iter().map(|&i| recs[i]).collect();
    km_export(&sub, &scores, threshold)
}

/// KM curves of the `score >= threshold` and `score < threshold` groups and
/// their log-rank test.
pub fn km_export(records: &[SurvivalRecord], scores: &[f64], threshold: f64) -> Result<KmExport> {
    if records.len() != scores.len() {
        return Err(Error::shape("scores misaligned with records"));
    }
    let high: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let logrank = logrank_split(records, &high)?;
    let pick = |want: bool| -> Vec<SurvivalRecord> { records.iter().zip(&high).filter(|(_, &h)| h == want).map(|(r, _)| *r).collect() };
    let groups = vec![
        KmGroup { name: "high".into(), curve: km_fit(&pick(true))? },
        KmGroup { name: "low".into(), curve: km_fit(&pick(false))? },
    ];
    Ok(KmExport { threshold, logrank, groups })
}

pub fn write_km_csv<W: Write>(w: W, km: &KmExport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["group", "time", "survival", "at_risk", "events", "censored"])?;
    for g in &km.groups {
        let c = &g.curve;
        for i in 0..c.times.len() {
            out.write_record([
                g.name.clone(),
                c.times[i].to_string(),
                c.survival[i].to_string(),
                c.at_risk[i].to_string(),
                c.events[i].to_string(),
                c.censored[i].to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

impl FoldReport {
    /// `report.json`, `report.csv` (one row per fold), `predictions.csv` and,
    /// when available, `km.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        serde_json::to_writer_pretty(File::create(dir.join("report.json"))?, self)?;
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        let names: Vec<&String> = self.per_fold.keys().collect();
        let mut header = vec!["fold".to_string()];
        header.extend(names.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        let folds = self.per_fold.values().next().map_or(0, Vec::len);
        for f in 0..folds {
            let mut row = vec![f.to_string()];
            row.extend(names.iter().map(|k| self.per_fold[*k][f].to_string()));
            w.write_record(&row)?;
        }
        for (label, map) in [("mean", &self.mean), ("sd", &self.sd)] {
            let mut row = vec![label.to_string()];
            row.extend(names.iter().map(|k| map[*k].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        let mut p = csv::Writer::from_path(dir.join("predictions.csv"))?;
        for pred in &self.predictions {
            p.serialize(pred)?;
        }
        p.flush()?;
        if let Some(km) = &self.km {
            write_km_csv(File::create(dir.join("km.csv"))?, km)?;
        }
        Ok(())
    }
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PatientPrediction>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
