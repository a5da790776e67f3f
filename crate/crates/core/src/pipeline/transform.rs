use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prep::{lasso_select, Pca, Scaler};

use super::config::{FeatureSelection, RunConfig};
use super::data::Dataset;

/// Fitted preprocessing of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityTransform {
    pub name: String,
    pub scaler: Option<Scaler>,
    pub pca: Option<Pca>,
    /// Columns kept by the elastic-net screen.
    pub selected: Option<Vec<usize>>,
}

impl ModalityTransform {
    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut z = match &self.scaler {
            Some(s) => s.apply(x)?,
            None => x.clone(),
        };
        if let Some(p) = &self.pca {
            z = p.apply(&z)?;
        }
        if let Some(cols) = &self.selected {
            z = z.select(Axis(1), cols);
        }
        Ok(z)
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        match (&self.pca, &self.selected) {
            (Some(p), _) => p.components.len(),
            (None, Some(cols)) => cols.len(),
            _ => input_dim,
        }
    }
}

/// Preprocessing fitted on one training fold, applied unchanged to that
/// fold's test rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldTransform {
    pub modalities: Vec<ModalityTransform>,
}

fn is_radiomic(name: &str) -> bool {
    name != "clinical"
}

impl FoldTransform {
    /// Fit on the rows `train` only. `target` is aligned with `train` and
    /// drives the elastic-net screen.
    pub fn fit(data: &Dataset, train: &[usize], target: &[f64], config: &RunConfig) -> Result<Self> {
        if train.len() != target.len() {
            return Err(Error::shape("screening target misaligned with training rows"));
        }
        let mut modalities = Vec::with_capacity(config.modalities.len());
        for name in &config.modalities {
            let m = data.modality(name)?;
            let x = m.x.select(Axis(0), train);
            let scaler = if config.scaler { Some(Scaler::fit(&x)?) } else { None };
            let z = match &scaler {
                Some(s) => s.apply(&x)?,
                None => x,
            };
            let (mut pca, mut selected) = (None, None);
            if is_radiomic(name) {
                match config.selection {
                    FeatureSelection::None => {}
                    FeatureSelection::Pca => {
                        let k = config.pca_components.min(z.nrows() - 1).min(z.ncols());
                        pca = Some(Pca::fit(&z, k)?);
                    }
                    FeatureSelection::Lasso => {
                        let fit = lasso_select(&z, target, config.lasso_lambda, config.lasso_l1_ratio)?;
                        selected = Some(if fit.selected.is_empty() { vec![strongest_column(&z, target)] } else { fit.selected });
                    }
                }
            }
            modalities.push(ModalityTransform { name: name.clone(), scaler, pca, selected });
        }
        Ok(FoldTransform { modalities })
    }

    /// Transformed matrices of `rows`, one per configured modality.
    pub fn apply(&self, data: &Dataset, rows: &[usize]) -> Result<Vec<Array2<f64>>> {
        self.modalities.iter().map(|t| t.apply(&data.modality(&t.name)?.x.select(Axis(0), rows))).collect()
    }

    pub fn output_dims(&self, data: &Dataset) -> Result<Vec<usize>> {
        self.modalities.iter().map(|t| Ok(t.output_dim(data.modality(&t.name)?.x.ncols()))).collect()
    }
}

/// Column with the largest absolute covariance with the target (lowest
/// index on ties).
fn strongest_column(x: &Array2<f64>, y: &[f64]) -> usize {
    let n = y.len() as f64;
    let ym = y.iter().sum::<f64>() / n;
    let score = |j: usize| {
        let col = x.column(j);
        let xm = col.sum() / n;
        col.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum::<f64>().abs()
    };
    (0..x.ncols()).fold(0, |best, j| if score(j) > score(best) { j } else { best })
}
