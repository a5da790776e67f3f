use ndarray::Array2;
use rayon::prelude::*;
use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::prep::dichotomize;
use crate::survival::{OutcomeKind, SurvivalRecord, LANDMARK_MONTHS};
use crate::synth::{image_paths, read_clinical_csv, ClinicalRow, Cohort, PatientImages, CLINICAL_CSV, CLINICAL_FEATURES};
use crate::volume::{
    connected_components, extract_all, read_mask, read_volume, resample_isotropic, resample_mask, resample_volume,
    select_primary_node, write_feature_csv, Connectivity, FeatureVector, Selection as NodeSelection,
};

use super::config::{RunConfig, Task};

pub const FEATURES_CSV: &str = "features.csv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureOptions {
    pub rho: f64,
    pub bin_width: f64,
    pub connectivity: Connectivity,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            rho: crate::volume::DEFAULT_RHO,
            bin_width: crate::volume::DEFAULT_BIN_WIDTH,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl FeatureOptions {
    pub fn from_config(c: &RunConfig) -> Result<Self> {
        Ok(FeatureOptions { rho: c.rho, bin_width: c.bin_width, connectivity: Connectivity::from_count(c.connectivity)? })
    }
}

/// Radiomics of one patient: the primary tumor, the selected node and the
/// selection that picked it.
pub struct PatientFeatures {
    pub primary: FeatureVector,
    pub nodal: FeatureVector,
    pub selection: NodeSelection,
}

/// Resample to 1 mm, take the largest GTV component and the selected nodal
/// component, and extract the full feature set from each.
pub fn patient_features(images: &PatientImages, opts: &FeatureOptions) -> Result<PatientFeatures> {
    let (ct, nodes) = resample_isotropic(&images.ct, &images.nodal_mask)?;
    let gtv = resample_mask(&images.gtv_mask)?;
    let unc = resample_volume(&images.uncertainty)?;
    let primary = connected_components(&gtv, opts.connectivity)
        .into_iter()
        .next()
        .ok_or_else(|| Error::degenerate("empty GTV mask"))?;
    let comps = connected_components(&nodes, opts.connectivity);
    if comps.is_empty() {
        return Err(Error::degenerate("empty nodal mask"));
    }
    let selection = select_primary_node(&comps, opts.rho, Some(&unc))?;
    Ok(PatientFeatures {
        primary: extract_all(&ct, &primary, opts.bin_width)?.prefixed("primary_"),
        nodal: extract_all(&ct, &comps[selection.index], opts.bin_width)?.prefixed("nodal_"),
        selection,
    })
}

/// One modality's feature matrix, rows aligned with the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Modality {
    pub name: String,
    pub feature_names: Vec<String>,
    pub x: Array2<f64>,
}

/// Per-patient clinical rows plus the three feature modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clinical: Vec<ClinicalRow>,
    pub modalities: Vec<Modality>,
}

fn matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), p), rows.concat()).map_err(|e| Error::shape(e.to_string()))
}

impl Dataset {
    /// Assemble from clinical rows and `(patient_id, primary + nodal)` rows.
    pub fn from_parts(clinical: Vec<ClinicalRow>, radiomics: &[(String, FeatureVector)]) -> Result<Self> {
        if clinical.len() != radiomics.len() {
            return Err(Error::shape(format!("{} clinical rows, {} feature rows", clinical.len(), radiomics.len())));
        }
        let mut modalities = vec![Modality {
            name: "clinical".into(),
            feature_names: CLINICAL_FEATURES.iter().map(|s| s.to_string()).collect(),
            x: matrix(&clinical.iter().map(ClinicalRow::features).collect::<Vec<_>>())?,
        }];
        for name in ["primary", "nodal"] {
            let prefix = format!("{name}_");
            let mut names: Option<Vec<String>> = None;
            let mut rows = Vec::with_capacity(clinical.len());
            for (row, (id, fv)) in clinical.iter().zip(radiomics) {
                if &row.patient_id != id {
                    return Err(Error::invalid(format!("feature row {id} does not match clinical row {}", row.patient_id)));
                }
                let part: Vec<_> = fv.0.iter().filter(|f| f.name.starts_with(&prefix)).collect();
                let these: Vec<String> = part.iter().map(|f| f.name.clone()).collect();
                match &names {
                    None => names = Some(these),
                    Some(n) if *n != these => return Err(Error::invalid(format!("patient {id} has a different {name} feature layout"))),
                    _ => {}
                }
                rows.push(part.iter().map(|f| f.value).collect());
            }
            let feature_names = names.unwrap_or_default();
            if feature_names.is_empty() {
                return Err(Error::invalid(format!("no {name} features")));
            }
            modalities.push(Modality { name: name.into(), feature_names, x: matrix(&rows)? });
        }
        for m in &modalities {
            if m.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("{} features", m.name)));
            }
        }
        Ok(Dataset { clinical, modalities })
    }

    /// Render and featurize every patient of an in-memory cohort.
    pub fn from_cohort(cohort: &Cohort, opts: &FeatureOptions) -> Result<Self> {
        let rows = featurize_cohort(cohort, opts)?;
        Dataset::from_parts(cohort.clinical_rows(), &rows)
    }

    /// Load `clinical.csv` and `features.csv` from `dir`; without a feature
    /// table, features are extracted from the images under `dir`.
    pub fn load(dir: &Path, opts: &FeatureOptions) -> Result<Self> {
        let clinical = read_clinical_csv(&dir.join(CLINICAL_CSV))?;
        let features_path = dir.join(FEATURES_CSV);
        let rows = if features_path.is_file() {
            read_feature_csv(&features_path)?
        } else {
            featurize_dir(dir, &clinical, opts)?
        };
        Dataset::from_parts(clinical, &rows)
    }

    pub fn len(&self) -> usize {
        self.clinical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clinical.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.clinical.iter().map(|r| r.patient_id.clone()).collect()
    }

    pub fn modality(&self, name: &str) -> Result<&Modality> {
        self.modalities.iter().find(|m| m.name == name).ok_or_else(|| Error::invalid(format!("no modality {name:?}")))
    }

    pub fn records(&self, kind: OutcomeKind) -> Result<Vec<SurvivalRecord>> {
        self.clinical.iter().map(|r| r.record(kind)).collect()
    }

    pub fn grades(&self) -> Vec<u8> {
        self.clinical.iter().map(|r| r.grade).collect()
    }

    /// Binary labels of the binary tasks.
    pub fn binary_labels(&self, config: &RunConfig) -> Result<Vec<u8>> {
        match config.task {
            Task::Binary2y => Ok(self.records(config.outcome)?.iter().map(|r| r.landmark_label(LANDMARK_MONTHS)).collect()),
            Task::GradeClassification => self.grades().into_iter().map(|g| dichotomize(g, config.dichotomy)).collect(),
            Task::MtlrSurvival => Err(Error::invalid("survival task has no binary label")),
        }
    }

    /// Labels used to stratify the folds: the task label, or the event
    /// indicator for survival.
    pub fn strata(&self, config: &RunConfig) -> Result<Vec<usize>> {
        match config.task {
            Task::MtlrSurvival => Ok(self.records(config.outcome)?.iter().map(|r| usize::from(r.event)).collect()),
            _ => Ok(self.binary_labels(config)?.into_iter().map(usize::from).collect()),
        }
    }
}

fn featurize_cohort(cohort: &Cohort, opts: &FeatureOptions) -> Result<Vec<(String, FeatureVector)>> {
    (0..cohort.len())
        .into_par_iter()
        .map(|i| {
            let f = patient_features(&cohort.render(i)?, opts)?;
            let mut fv = f.primary;
            fv.extend(f.nodal);
            Ok((cohort.patients[i].clinical.patient_id.clone(), fv))
        })
        .collect()
}

/// Read the four image files of one patient written by the cohort writer.
pub fn read_patient_images(dir: &Path, patient_id: &str) -> Result<PatientImages> {
    let [ct, nodes, gtv, unc] = image_paths(dir, patient_id);
    Ok(PatientImages {
        ct: read_volume(&ct)?,
        nodal_mask: read_mask(&nodes)?,
        gtv_mask: read_mask(&gtv)?,
        uncertainty: read_volume(&unc)?,
    })
}

pub fn featurize_dir(dir: &Path, clinical: &[ClinicalRow], opts: &FeatureOptions) -> Result<Vec<(String, FeatureVector)>> {
    clinical
        .par_iter()
        .map(|row| {
            let f = patient_features(&read_patient_images(dir, &row.patient_id)?, opts)?;
            let mut fv = f.primary;
            fv.extend(f.nodal);
            Ok((row.patient_id.clone(), fv))
        })
        .collect()
}

pub fn save_feature_csv(path: &Path, rows: &[(String, FeatureVector)]) -> Result<()> {
    write_feature_csv(File::create(path)?, rows)
}

pub fn read_feature_csv(path: &Path) -> Result<Vec<(String, FeatureVector)>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("patient_id") {
        return Err(Error::Format(format!("{}: first column must be patient_id", path.display())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut fv = FeatureVector(Vec::with_capacity(header.len() - 1));
        for (name, cell) in header.iter().zip(rec.iter()).skip(1) {
            let value: f64 = cell.trim().parse().map_err(|_| Error::Format(format!("bad value {cell:?} in column {name}")))?;
            fv.0.push(crate::volume::Feature { name: name.clone(), family: family_of(name), value });
        }
        out.push((rec[0].to_string(), fv));
    }
    Ok(out)
}

fn family_of(name: &str) -> crate::volume::FeatureFamily {
    use crate::volume::FeatureFamily;
    let bare = name.split_once('_').map_or(name, |(_, rest)| rest);
    if bare.starts_with("shape_") {
        FeatureFamily::Shape
    } else if bare.starts_with("firstorder_") {
        FeatureFamily::FirstOrder
    } else {
        FeatureFamily::Texture
    }
}
