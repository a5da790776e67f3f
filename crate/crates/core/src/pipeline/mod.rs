//! Cross-validated training and evaluation of the fusion model.

pub mod config;
pub mod cv;
pub mod data;
pub mod experiment;
pub mod report;
pub mod run;
pub mod train;
pub mod transform;

pub use config::{FeatureSelection, RunConfig, Task, MODALITIES};
pub use cv::{stratified_holdout, stratified_kfold, Split};
pub use data::{Dataset, FeatureOptions, Modality, FEATURES_CSV};
pub use experiment::{cross_validate, fit_final, fit_rows, grid_search, CvRun, FittedModel, GridAxis, GridResult, ModelMeta};
pub use report::{evaluate_report, FoldReport, KmExport, PatientPrediction};
pub use train::{predict, train, FoldData, Targets, TrainOutcome};
pub use transform::{FoldTransform, ModalityTransform};
pub use run::{init_workers, load_cohort_config, run_evaluate, run_features, run_km_export, run_train, TrainSummary};
