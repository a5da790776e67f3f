//! Synthetic cohorts with a planted, known-strength survival signal.
//!
//! Each patient is described by a small [`PatientSpec`] (clinical row,
//! latent covariates and blob geometry). Images are rendered on demand from
//! the spec, so a cohort of hundreds of patients stays cheap in memory.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_2, PI};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::survival::{OutcomeKind, SurvivalRecord};
use crate::volume::{write_mask, write_volume, Grid, Mask, Volume};

/// Latent covariates entering the hazard, in column order.
pub const COVARIATES: [&str; 6] = ["age", "t_stage", "n_stage", "primary_size", "nodal_size", "grade"];
pub const PRIMARY_COVARIATE: usize = 3;
pub const NODAL_COVARIATE: usize = 4;

pub const DEFAULT_GRADE_PROPORTIONS: [f64; 4] = [0.694, 0.059, 0.188, 0.059];
const T_STAGE_PROPORTIONS: [f64; 4] = [0.256, 0.38, 0.24, 0.124];
const N_STAGE_COUNTS: [f64; 3] = [311.0, 67.0, 19.0];
const MALE_FRACTION: f64 = 317.0 / 397.0;
const CHEMO_FRACTION: f64 = 333.0 / 397.0;
const LATENT_CLAMP: f64 = 2.5;

const STREAM_QUOTA: u64 = 0xC0;
const STREAM_PATIENT: u64 = 0xC1;
const STREAM_RENDER: u64 = 0x1AA;
const STREAM_EVENT: u64 = 0xE7;
const STREAM_CENSOR: u64 = 0xCE;

/// Fraction of patients censored, per endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensoringRates {
    pub os: f64,
    pub dm: f64,
    pub dfs: f64,
}

impl Default for CensoringRates {
    fn default() -> Self {
        CensoringRates { os: 359.0 / 397.0, dm: 362.0 / 397.0, dfs: 329.0 / 397.0 }
    }
}

impl CensoringRates {
    pub fn uniform(rate: f64) -> Self {
        CensoringRates { os: rate, dm: rate, dfs: rate }
    }

    pub fn get(&self, kind: OutcomeKind) -> f64 {
        match kind {
            OutcomeKind::Os => self.os,
            OutcomeKind::Dm => self.dm,
            OutcomeKind::Dfs => self.dfs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub grade_proportions: [f64; 4],
    pub censoring: CensoringRates,
    /// Log-hazard coefficients, one per entry of [`COVARIATES`].
    pub beta: Vec<f64>,
    /// Coefficient of the nodal-size x primary-size interaction.
    pub gamma: f64,
    /// Standard deviation of the background image noise in HU.
    pub noise: f64,
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_patients: 397,
            grade_proportions: DEFAULT_GRADE_PROPORTIONS,
            censoring: CensoringRates::default(),
            beta: vec![0.25, 0.2, 0.3, 0.5, 0.6, 0.4],
            gamma: 0.0,
            noise: 10.0,
            seed: 0,
            dims: [64, 48, 40],
            spacing: [1.0, 1.0, 1.0],
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::invalid("n_patients must be positive"));
        }
        let total: f64 = self.grade_proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.grade_proportions.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("grade proportions {:?} must be in [0,1] and sum to 1", self.grade_proportions)));
        }
        for kind in OutcomeKind::ALL {
            let r = self.censoring.get(kind);
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("censoring rate {r} for {kind} outside [0,1]")));
            }
        }
        if self.beta.len() != COVARIATES.len() {
            return Err(Error::shape(format!("beta has {} entries, expected {}", self.beta.len(), COVARIATES.len())));
        }
        if self.beta.iter().chain([&self.gamma]).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("hazard coefficients"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be a finite non-negative number"));
        }
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::invalid(format!("grid {:?} too small, need at least 16 voxels per axis", self.dims)));
        }
        Grid::new(self.dims, self.spacing)?;
        Ok(())
    }

    fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing[a])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
}

/// One row of the clinical table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRow {
    pub patient_id: String,
    pub age: f64,
    pub sex: Sex,
    pub pack_years: f64,
    pub t_stage: u8,
    pub n_stage: u8,
    pub chemo: u8,
    pub chemo_type: String,
    pub grade: u8,
    pub os_time: f64,
    pub os_event: u8,
    pub dm_time: f64,
    pub dm_event: u8,
    pub dfs_time: f64,
    pub dfs_event: u8,
}

pub const CLINICAL_FEATURES: [&str; 6] = ["age", "sex_male", "pack_years", "t_stage", "n_stage", "chemo"];

impl ClinicalRow {
    pub fn record(&self, kind: OutcomeKind) -> Result<SurvivalRecord> {
        let (t, e) = match kind {
            OutcomeKind::Os => (self.os_time, self.os_event),
            OutcomeKind::Dm => (self.dm_time, self.dm_event),
            OutcomeKind::Dfs => (self.dfs_time, self.dfs_event),
        };
        SurvivalRecord::new(t, e == 1, kind)
    }

    /// Numeric clinical modality, in [`CLINICAL_FEATURES`] order.
    pub fn features(&self) -> Vec<f64> {
        vec![
            self.age,
            f64::from(u8::from(self.sex == Sex::Male)),
            self.pack_years,
            f64::from(self.t_stage),
            f64::from(self.n_stage),
            f64::from(self.chemo),
        ]
    }
}

/// A star-shaped blob: an ellipsoid whose boundary radius is modulated by
/// `1 + irregularity * sin(4 phi + phase0) * sin(3 theta + phase1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub irregularity: f64,
    pub phase: [f64; 2],
}

impl Blob {
    fn reach(&self) -> f64 {
        self.radii.iter().cloned().fold(0.0, f64::max) * (1.0 + self.irregularity)
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let v = [0, 1, 2].map(|a| (p[a] - self.center[a]) / self.radii[a]);
        let d = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if d == 0.0 {
            return true;
        }
        let phi = v[1].atan2(v[0]);
        let theta = (v[2] / d).clamp(-1.0, 1.0).acos();
        d <= 1.0 + self.irregularity * (4.0 * phi + self.phase[0]).sin() * (3.0 * theta + self.phase[1]).sin()
    }

    /// Nominal ellipsoid volume in mm^3.
    pub fn nominal_volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.radii.iter().product::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientSpec {
    pub index: usize,
    pub clinical: ClinicalRow,
    /// Standardized latent covariates in [`COVARIATES`] order.
    pub covariates: Vec<f64>,
    pub gtv: Blob,
    /// Nodal blobs; the first is the true primary node.
    pub nodes: Vec<Blob>,
    /// Per-voxel intensity SD inside nodes, grows with grade.
    pub roughness: f64,
}

pub struct PatientImages {
    pub ct: Volume,
    pub nodal_mask: Mask,
    pub gtv_mask: Mask,
    pub uncertainty: Volume,
}

/// Planted outcome for one endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeDraw {
    pub kind: OutcomeKind,
    pub records: Vec<SurvivalRecord>,
    pub event_times: Vec<f64>,
    /// `f64::INFINITY` when the endpoint is uncensored.
    pub censoring_times: Vec<f64>,
    /// Upper end of the uniform censoring distribution.
    pub horizon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedSurvival {
    /// Bayes-optimal risk: the true log-hazard of each patient.
    pub linear_predictor: Vec<f64>,
    pub outcomes: Vec<OutcomeDraw>,
}

impl PlantedSurvival {
    pub fn outcome(&self, kind: OutcomeKind) -> &OutcomeDraw {
        self.outcomes.iter().find(|o| o.kind == kind).expect("every kind is drawn")
    }
}

pub struct Cohort {
    pub config: CohortConfig,
    pub patients: Vec<PatientSpec>,
    pub survival: PlantedSurvival,
}

fn categorical_moments(values: &[f64], probs: &[f64]) -> (f64, f64) {
    let total: f64 = probs.iter().sum();
    let m = values.iter().zip(probs).map(|(v, p)| v * p).sum::<f64>() / total;
    let var = values.iter().zip(probs).map(|(v, p)| (v - m) * (v - m) * p).sum::<f64>() / total;
    (m, var.sqrt().max(1e-12))
}

/// Exactly `n` category labels with counts by largest remainder, shuffled.
fn quota_labels(n: usize, weights: &[f64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
    labels.shuffle(rng);
    labels
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn aspect(rng: &mut ChaCha8Rng, spread: f64) -> [f64; 3] {
    let a = rng.random_range(1.0 / spread..spread);
    let b = rng.random_range(1.0 / spread..spread);
    [a, b, 1.0 / (a * b)]
}

fn radii_for(volume: f64, aspect: [f64; 3]) -> [f64; 3] {
    let r = (volume * 3.0 / (4.0 * PI)).cbrt();
    aspect.map(|s| r * s)
}

fn shrink_to(radii: [f64; 3], irregularity: f64, max_reach: f64) -> [f64; 3] {
    let reach = radii.iter().cloned().fold(0.0, f64::max) * (1.0 + irregularity);
    if reach <= max_reach {
        radii
    } else {
        radii.map(|r| r * max_reach / reach)
    }
}

struct Draws {
    grade: usize,
    t_stage: usize,
    n_stage: usize,
    male: bool,
    chemo: bool,
}

fn patient_spec(config: &CohortConfig, index: usize, draws: &Draws) -> PatientSpec {
    let mut rng = rng_for(config.seed, &[STREAM_PATIENT, index as u64]);
    let ext = config.extent();
    let (gm, gs) = categorical_moments(&[0.0, 1.0, 2.0, 3.0], &config.grade_proportions);
    let (tm, ts) = categorical_moments(&[1.0, 2.0, 3.0, 4.0], &T_STAGE_PROPORTIONS);
    let (nm, ns) = categorical_moments(&[1.0, 2.0, 3.0], &N_STAGE_COUNTS);

    let age = (62.0 + 9.0 * normal(&mut rng)).clamp(39.0, 84.0).round();
    let grade = draws.grade as u8;
    let t_stage = draws.t_stage as u8 + 1;
    let n_stage = draws.n_stage as u8 + 1;
    let grade_z = (f64::from(grade) - gm) / gs;
    let t_z = (f64::from(t_stage) - tm) / ts;
    let n_z = (f64::from(n_stage) - nm) / ns;
    let primary_z = (0.6 * t_z + 0.8 * normal(&mut rng)).clamp(-LATENT_CLAMP, LATENT_CLAMP);
    let nodal_z = (0.5 * grade_z + 0.3 * n_z + 0.66f64.sqrt() * normal(&mut rng)).clamp(-LATENT_CLAMP, LATENT_CLAMP);
    let pack_years = if rng.random::<f64>() < 0.33 { 0.0 } else { (20.0 * (0.8 * normal(&mut rng)).exp()).min(100.0).round() };
    let chemo_type = if draws.chemo {
        let u: f64 = rng.random();
        if u < 0.8 { "cisplatin" } else if u < 0.92 { "carboplatin" } else { "cetuximab" }
    } else {
        "none"
    };

    // primary tumor in the low-x half, nodes in the high-x half
    let half = [ext[0] / 2.0, ext[1], ext[2]];
    let gtv_irr = 0.05;
    let gtv_room = (half[0].min(half[1]).min(half[2]) / 2.0 - 1.0).max(1.0);
    let gtv_radii = shrink_to(radii_for(2500.0 * (0.45 * primary_z).exp(), aspect(&mut rng, 1.1)), gtv_irr, gtv_room);
    let gtv_reach = gtv_radii.iter().cloned().fold(0.0, f64::max) * (1.0 + gtv_irr);
    let jitter = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { (lo + hi) / 2.0 };
    let gtv_center = [
        jitter(&mut rng, gtv_reach + 1.0, half[0] - gtv_reach - 1.0),
        jitter(&mut rng, gtv_reach + 1.0, half[1] - gtv_reach - 1.0),
        jitter(&mut rng, gtv_reach + 1.0, half[2] - gtv_reach - 1.0),
    ];
    let gtv = Blob { center: gtv_center, radii: gtv_radii, irregularity: gtv_irr, phase: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)] };

    let node_irr = 0.04 + 0.06 * f64::from(grade);
    let node_room = (half[0].min(half[1]).min(half[2]) / 2.0 - 1.0).max(1.0);
    let primary_volume = 1200.0 * (0.45 * nodal_z).exp();
    let n_blobs = match n_stage {
        1 => rng.random_range(1..=2),
        2 => rng.random_range(2..=4),
        _ => rng.random_range(3..=5),
    };
    let lo = [ext[0] / 2.0, 0.0, 0.0];
    let mut nodes: Vec<Blob> = Vec::with_capacity(n_blobs);
    for b in 0..n_blobs {
        let volume = if b == 0 { primary_volume } else { primary_volume * rng.random_range(0.08..0.8) };
        let radii = shrink_to(radii_for(volume, aspect(&mut rng, 1.25)), node_irr, node_room);
        let phase = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
        let mut blob = Blob { center: [0.0; 3], radii, irregularity: node_irr, phase };
        let reach = blob.reach();
        for attempt in 0..200 {
            let c = [0, 1, 2].map(|a| jitter(&mut rng, lo[a] + reach + 1.0, ext[a] - reach - 1.0));
            let clear = nodes.iter().all(|o| {
                let d = (0..3).map(|a| (o.center[a] - c[a]).powi(2)).sum::<f64>().sqrt();
                d > o.reach() + reach + 2.0
            });
            if clear {
                blob.center = c;
                nodes.push(blob);
                break;
            }
            if b == 0 && attempt == 199 {
                blob.center = c;
                nodes.push(blob);
            }
        }
    }

    let covariates = vec![(age - 62.0) / 9.0, t_z, n_z, primary_z, nodal_z, grade_z];
    PatientSpec {
        index,
        clinical: ClinicalRow {
            patient_id: format!("P{:04}", index + 1),
            age,
            sex: if draws.male { Sex::Male } else { Sex::Female },
            pack_years,
            t_stage,
            n_stage,
            chemo: u8::from(draws.chemo),
            chemo_type: chemo_type.into(),
            grade,
            os_time: 0.0,
            os_event: 0,
            dm_time: 0.0,
            dm_event: 0,
            dfs_time: 0.0,
            dfs_event: 0,
        },
        covariates,
        gtv,
        nodes,
        roughness: 6.0 + 8.0 * f64::from(grade),
    }
}

/// Draw a cohort. Deterministic in `config.seed`; patients are generated in
/// parallel, each from its own derived stream.
pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;
    let n = config.n_patients;
    let mut rng = rng_for(config.seed, &[STREAM_QUOTA]);
    let grades = quota_labels(n, &config.grade_proportions, &mut rng);
    let t_stages = quota_labels(n, &T_STAGE_PROPORTIONS, &mut rng);
    let n_stages = quota_labels(n, &N_STAGE_COUNTS, &mut rng);
    let sexes = quota_labels(n, &[MALE_FRACTION, 1.0 - MALE_FRACTION], &mut rng);
    let chemos = quota_labels(n, &[CHEMO_FRACTION, 1.0 - CHEMO_FRACTION], &mut rng);
    let mut patients: Vec<PatientSpec> = (0..n)
        .into_par_iter()
        .map(|i| {
            let draws = Draws { grade: grades[i], t_stage: t_stages[i], n_stage: n_stages[i], male: sexes[i] == 0, chemo: chemos[i] == 0 };
            patient_spec(config, i, &draws)
        })
        .collect();
    let z: Vec<Vec<f64>> = patients.iter().map(|p| p.covariates.clone()).collect();
    let survival = plant_survival(&z, config)?;
    for (i, p) in patients.iter_mut().enumerate() {
        for draw in &survival.outcomes {
            let r = draw.records[i];
            let (t, e) = (r.time, u8::from(r.event));
            match draw.kind {
                OutcomeKind::Os => (p.clinical.os_time, p.clinical.os_event) = (t, e),
                OutcomeKind::Dm => (p.clinical.dm_time, p.clinical.dm_event) = (t, e),
                OutcomeKind::Dfs => (p.clinical.dfs_time, p.clinical.dfs_event) = (t, e),
            }
        }
    }
    Ok(Cohort { config: config.clone(), patients, survival })
}

/// Baseline monthly hazard per endpoint (median event-free time ln2/rate).
pub fn baseline_hazard(kind: OutcomeKind) -> f64 {
    match kind {
        OutcomeKind::Os => LN_2 / 120.0,
        OutcomeKind::Dm => LN_2 / 150.0,
        OutcomeKind::Dfs => LN_2 / 80.0,
    }
}

/// Expected censored fraction for uniform(0, c) censoring against
/// exponential event times with the given rates.
fn expected_censoring(rates: &[f64], c: f64) -> f64 {
    rates
        .iter()
        .map(|&r| {
            let x = r * c;
            if x < 1e-8 { 1.0 - x / 2.0 } else { -(-x).exp_m1() / x }
        })
        .sum::<f64>()
        / rates.len() as f64
}

/// Horizon `c` of uniform(0, c) censoring whose expected censored fraction is
/// `target`, by bisection in log space.
fn calibrate_horizon(rates: &[f64], target: f64) -> f64 {
    if target <= 0.0 {
        return f64::INFINITY;
    }
    let (mut lo, mut hi) = (1e-9f64.ln(), 1e12f64.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_censoring(rates, mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Exponential event times with log-hazard `beta . z + gamma z_nodal z_primary`
/// on top of the endpoint baseline, censored independently by uniform(0, c)
/// with `c` calibrated to the configured rate.
pub fn plant_survival(features: &[Vec<f64>], config: &CohortConfig) -> Result<PlantedSurvival> {
    if config.beta.len() != COVARIATES.len() {
        return Err(Error::shape(format!("beta has {} entries, expected {}", config.beta.len(), COVARIATES.len())));
    }
    let lp: Vec<f64> = features
        .iter()
        .map(|z| {
            if z.len() != config.beta.len() {
                return Err(Error::shape(format!("{} covariates for {} coefficients", z.len(), config.beta.len())));
            }
            let v = z.iter().zip(&config.beta).map(|(a, b)| a * b).sum::<f64>()
                + config.gamma * z[NODAL_COVARIATE] * z[PRIMARY_COVARIATE];
            if v.is_finite() { Ok(v) } else { Err(Error::non_finite("linear predictor")) }
        })
        .collect::<Result<_>>()?;
    let mut outcomes = Vec::with_capacity(3);
    for (k, kind) in OutcomeKind::ALL.into_iter().enumerate() {
        let rates: Vec<f64> = lp.iter().map(|v| baseline_hazard(kind) * v.exp()).collect();
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::non_finite("hazard rate"));
        }
        let horizon = calibrate_horizon(&rates, config.censoring.get(kind));
        let mut ev_rng = rng_for(config.seed, &[STREAM_EVENT, k as u64]);
        let mut ce_rng = rng_for(config.seed, &[STREAM_CENSOR, k as u64]);
        let mut records = Vec::with_capacity(lp.len());
        let mut event_times = Vec::with_capacity(lp.len());
        let mut censoring_times = Vec::with_capacity(lp.len());
        for &r in &rates {
            let t: f64 = Exp::new(r).map_err(|e| Error::invalid(e.to_string()))?.sample(&mut ev_rng);
            let u: f64 = ce_rng.random();
            let c = if horizon.is_finite() { horizon * (1.0 - u) } else { f64::INFINITY };
            let rec = if c < t { SurvivalRecord::new(c, false, kind)? } else { SurvivalRecord::new(t, true, kind)? };
            records.push(rec);
            event_times.push(t);
            censoring_times.push(c);
        }
        outcomes.push(OutcomeDraw { kind, records, event_times, censoring_times, horizon });
    }
    Ok(PlantedSurvival { linear_predictor: lp, outcomes })
}

fn voxel_box(blob: &Blob, grid: &Grid) -> [std::ops::Range<usize>; 3] {
    let reach = blob.reach();
    [0, 1, 2].map(|a| {
        let lo = ((blob.center[a] - reach) / grid.spacing[a] - 0.5).floor().max(0.0) as usize;
        let hi = (((blob.center[a] + reach) / grid.spacing[a] - 0.5).ceil() + 1.0).max(0.0) as usize;
        lo.min(grid.dims[a])..hi.min(grid.dims[a])
    })
}

fn paint(blob: &Blob, grid: &Grid, mut f: impl FnMut(usize)) {
    let [rx, ry, rz] = voxel_box(blob, grid);
    for x in rx {
        for y in ry.clone() {
            for z in rz.clone() {
                let p = [
                    (x as f64 + 0.5) * grid.spacing[0],
                    (y as f64 + 0.5) * grid.spacing[1],
                    (z as f64 + 0.5) * grid.spacing[2],
                ];
                if blob.contains(p) {
                    f(grid.index(x, y, z));
                }
            }
        }
    }
}

fn quantize(v: f64) -> f64 {
    f64::from(v as f32)
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.config.dims, self.config.spacing).expect("validated")
    }

    pub fn records(&self, kind: OutcomeKind) -> &[SurvivalRecord] {
        &self.survival.outcome(kind).records
    }

    pub fn true_risk(&self) -> &[f64] {
        &self.survival.linear_predictor
    }

    pub fn clinical_rows(&self) -> Vec<ClinicalRow> {
        self.patients.iter().map(|p| p.clinical.clone()).collect()
    }

    /// Render CT intensities, nodal and GTV masks and the voxel uncertainty
    /// map of patient `i`. Values are quantized to `f32`.
    pub fn render(&self, i: usize) -> Result<PatientImages> {
        let p = self.patients.get(i).ok_or_else(|| Error::invalid(format!("no patient {i}")))?;
        let grid = self.grid();
        let mut rng = rng_for(self.config.seed, &[STREAM_RENDER, i as u64]);
        let mut ct: Vec<f64> = (0..grid.len()).map(|_| 20.0 + self.config.noise * normal(&mut rng)).collect();
        let mut gtv = vec![false; grid.len()];
        paint(&p.gtv, &grid, |v| gtv[v] = true);
        for (v, &inside) in gtv.iter().enumerate() {
            if inside {
                ct[v] += 40.0 + 10.0 * normal(&mut rng);
            }
        }
        let mut nodes = vec![false; grid.len()];
        let mut unc = vec![0.0; grid.len()];
        for (b, blob) in p.nodes.iter().enumerate() {
            let level = if b == 0 { rng.random_range(0.05..0.25) } else { rng.random_range(0.35..0.8) };
            let mut voxels = Vec::new();
            paint(blob, &grid, |v| voxels.push(v));
            for v in voxels {
                nodes[v] = true;
                unc[v] = (level + 0.02 * normal(&mut rng)).clamp(0.0, 1.0);
                ct[v] += 20.0 + p.roughness * normal(&mut rng);
            }
        }
        Ok(PatientImages {
            ct: Volume::new(grid, ct.into_iter().map(quantize).collect())?,
            nodal_mask: Mask::new(grid, nodes)?,
            gtv_mask: Mask::new(grid, gtv)?,
            uncertainty: Volume::new(grid, unc.into_iter().map(quantize).collect())?,
        })
    }
}

pub const CLINICAL_CSV: &str = "clinical.csv";
pub const ORACLE_CSV: &str = "oracle.csv";
pub const IMAGES_DIR: &str = "images";

/// Image sidecar paths of one patient: CT, nodal mask, GTV mask, uncertainty.
pub fn image_paths(dir: &Path, patient_id: &str) -> [std::path::PathBuf; 4] {
    let d = dir.join(IMAGES_DIR);
    ["ct", "nodes", "gtv", "uncertainty"].map(|s| d.join(format!("{patient_id}_{s}.json")))
}

pub fn write_clinical_csv(path: &Path, rows: &[ClinicalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_clinical_csv(path: &Path) -> Result<Vec<ClinicalRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub patient_id: String,
    pub true_risk: f64,
    pub age: f64,
    pub t_stage: f64,
    pub n_stage: f64,
    pub primary_size: f64,
    pub nodal_size: f64,
    pub grade: f64,
}

pub fn read_oracle_csv(path: &Path) -> Result<Vec<OracleRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Write the clinical table, the oracle table and, if `images` is set, every
/// patient's volumes under `dir/images`.
pub fn write_cohort(cohort: &Cohort, dir: &Path, images: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_clinical_csv(&dir.join(CLINICAL_CSV), &cohort.clinical_rows())?;
    let mut w = csv::Writer::from_path(dir.join(ORACLE_CSV))?;
    for (p, &risk) in cohort.patients.iter().zip(cohort.true_risk()) {
        let z = &p.covariates;
        w.serialize(OracleRow {
            patient_id: p.clinical.patient_id.clone(),
            true_risk: risk,
            age: z[0],
            t_stage: z[1],
            n_stage: z[2],
            primary_size: z[3],
            nodal_size: z[4],
            grade: z[5],
        })?;
    }
    w.flush()?;
    if images {
        fs::create_dir_all(dir.join(IMAGES_DIR))?;
        (0..cohort.len()).into_par_iter().try_for_each(|i| -> Result<()> {
            let img = cohort.render(i)?;
            let [ct, nodes, gtv, unc] = image_paths(dir, &cohort.patients[i].clinical.patient_id);
            write_volume(&ct, &img.ct)?;
            write_mask(&nodes, &img.nodal_mask)?;
            write_mask(&gtv, &img.gtv_mask)?;
            write_volume(&unc, &img.uncertainty)
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> CohortConfig {
        CohortConfig { n_patients: n, dims: [32, 24, 20], ..CohortConfig::default() }
    }

    #[test]
    fn quotas_hit_counts() {
        let mut rng = rng_for(1, &[]);
        let labels = quota_labels(397, &N_STAGE_COUNTS, &mut rng);
        let c: Vec<usize> = (0..3).map(|k| labels.iter().filter(|&&l| l == k).count()).collect();
        assert_eq!(c, vec![311, 67, 19]);
    }

    #[test]
    fn horizon_calibration() {
        let rates = vec![0.01, 0.02, 0.05, 0.1];
        for target in [0.1, 0.5, 0.9] {
            let c = calibrate_horizon(&rates, target);
            assert!((expected_censoring(&rates, c) - target).abs() < 1e-10);
        }
        assert!(calibrate_horizon(&rates, 0.0).is_infinite());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small(10);
        c.grade_proportions = [0.5, 0.5, 0.1, 0.0];
        assert!(generate_cohort(&c).is_err());
        let mut c = small(10);
        c.beta.pop();
        assert!(generate_cohort(&c).is_err());
        let mut c = small(10);
        c.censoring.dm = 1.5;
        assert!(generate_cohort(&c).is_err());
        let mut c = small(10);
        c.beta[0] = 1e308;
        c.beta[1] = 1e308;
        assert!(generate_cohort(&c).is_err());
    }

    #[test]
    fn every_patient_has_a_node() {
        let cohort = generate_cohort(&small(12)).unwrap();
        for i in 0..cohort.len() {
            let img = cohort.render(i).unwrap();
            assert!(img.nodal_mask.count() > 0 && img.gtv_mask.count() > 0);
            assert!(img.uncertainty.data.iter().all(|&u| (0.0..=1.0).contains(&u)));
            assert!(!img.nodal_mask.data.iter().zip(&img.gtv_mask.data).any(|(a, b)| *a && *b));
        }
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = generate_cohort(&small(5)).unwrap();
        write_cohort(&cohort, dir.path(), true).unwrap();
        let rows = read_clinical_csv(&dir.path().join(CLINICAL_CSV)).unwrap();
        assert_eq!(rows, cohort.clinical_rows());
        let oracle = read_oracle_csv(&dir.path().join(ORACLE_CSV)).unwrap();
        assert_eq!(oracle[3].true_risk, cohort.true_risk()[3]);
        let [ct, nodes, ..] = image_paths(dir.path(), "P0002");
        let img = cohort.render(1).unwrap();
        assert_eq!(crate::volume::read_volume(&ct).unwrap(), img.ct);
        assert_eq!(crate::volume::read_mask(&nodes).unwrap(), img.nodal_mask);
    }
}
