use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::prep::Dichotomy;
use crate::survival::OutcomeKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GradeClassification,
    #[serde(rename = "binary_2y")]
    Binary2y,
    MtlrSurvival,
}

impl Task {
    pub fn is_binary(self) -> bool {
        self != Task::MtlrSurvival
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSelection {
    None,
    Pca,
    Lasso,
}

pub const MODALITIES: [&str; 3] = ["clinical", "primary", "nodal"];

/// Everything a `train` run needs, read from a flat TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Endpoint for the survival tasks.
    pub outcome: OutcomeKind,
    /// Label scheme for grade classification.
    pub dichotomy: Dichotomy,
    pub modalities: Vec<String>,
    pub fusion: FusionKind,
    pub latent_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stratified share of each training fold held out for epoch selection.
    pub val_fraction: f64,
    pub scaler: bool,
    pub selection: FeatureSelection,
    pub pca_components: usize,
    pub lasso_lambda: f64,
    pub lasso_l1_ratio: f64,
    pub smote_tomek: bool,
    pub folds: usize,
    pub seed: u64,
    pub rho: f64,
    pub bin_width: f64,
    pub connectivity: u32,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::MtlrSurvival,
            outcome: OutcomeKind::Dfs,
            dichotomy: Dichotomy::LowVsHigh,
            modalities: MODALITIES.iter().map(|s| s.to_string()).collect(),
            fusion: FusionKind::Attention,
            latent_dim: 256,
            heads: 2,
            dropout: 0.3,
            lr: 1e-3,
            batch_size: 32,
            epochs: 200,
            val_fraction: 0.1,
            scaler: true,
            selection: FeatureSelection::None,
            pca_components: 10,
            lasso_lambda: 0.01,
            lasso_l1_ratio: 1.0,
            smote_tomek: false,
            folds: 5,
            seed: 0,
            rho: crate::volume::DEFAULT_RHO,
            bin_width: crate::volume::DEFAULT_BIN_WIDTH,
            connectivity: 26,
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    /// Checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(config_err(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.modalities.is_empty() {
            return Err(config_err("at least one modality is required"));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if !MODALITIES.contains(&m.as_str()) {
                return Err(config_err(format!("unknown modality {m:?}; expected one of {MODALITIES:?}")));
            }
            if self.modalities[..i].contains(m) {
                return Err(config_err(format!("modality {m:?} listed twice")));
            }
        }
        if self.latent_dim == 0 || self.heads == 0 || !self.latent_dim.is_multiple_of(self.heads) {
            return Err(config_err(format!("latent_dim {} must be a positive multiple of heads {}", self.latent_dim, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(config_err("batch_size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(config_err("epochs must be positive"));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(config_err(format!("val_fraction {} outside [0, 0.5)", self.val_fraction)));
        }
        if self.selection == FeatureSelection::Pca && self.pca_components == 0 {
            return Err(config_err("pca_components must be positive"));
        }
        if !(self.lasso_lambda >= 0.0 && self.lasso_lambda.is_finite()) || !(0.0..=1.0).contains(&self.lasso_l1_ratio) {
            return Err(config_err("lasso_lambda must be >= 0 and lasso_l1_ratio in [0, 1]"));
        }
        if self.smote_tomek && !self.task.is_binary() {
            return Err(config_err("smote_tomek needs a binary task"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(config_err(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) {
            return Err(config_err("bin_width must be positive"));
        }
        if ![6, 18, 26].contains(&self.connectivity) {
            return Err(config_err(format!("connectivity {} not in 6/18/26", self.connectivity)));
        }
        Ok(())
    }

    /// Full validation including the input paths.
    pub fn validate_paths(&self) -> Result<()> {
        self.validate()?;
        if !self.data_dir.is_dir() {
            return Err(config_err(format!("data_dir {} does not exist", self.data_dir.display())));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = text.parse()?;
        // relative paths resolve against the config file's directory
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data_dir, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
