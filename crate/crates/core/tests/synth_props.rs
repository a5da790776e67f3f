use amo_core::metrics::c_index;
use amo_core::survival::OutcomeKind;
use amo_core::synth::{generate_cohort, plant_survival, CensoringRates, Cohort, CohortConfig, NODAL_COVARIATE, PRIMARY_COVARIATE};
use amo_core::volume::{connected_components, Connectivity};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

fn config(n: usize, seed: u64) -> CohortConfig {
    CohortConfig { n_patients: n, seed, ..CohortConfig::default() }
}

fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let (mut s, mut ta, mut tb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let x = (a[i] - a[j]).signum() * f64::from(a[i] != a[j]);
            let y = (b[i] - b[j]).signum() * f64::from(b[i] != b[j]);
            s += x * y;
            ta += x * x;
            tb += y * y;
        }
    }
    s / (ta * tb).sqrt()
}

fn uncensored(mut c: CohortConfig) -> CohortConfig {
    c.censoring = CensoringRates::uniform(0.0);
    c
}

#[test]
fn same_seed_same_cohort() {
    let a = generate_cohort(&config(20, 9)).unwrap();
    let b = generate_cohort(&config(20, 9)).unwrap();
    assert_eq!(a.patients, b.patients);
    assert_eq!(a.survival, b.survival);
    for i in [0, 7, 19] {
        let (x, y) = (a.render(i).unwrap(), b.render(i).unwrap());
        assert_eq!(x.ct, y.ct);
        assert_eq!(x.nodal_mask, y.nodal_mask);
        assert_eq!(x.uncertainty, y.uncertainty);
    }
    let c = generate_cohort(&config(20, 10)).unwrap();
    assert_ne!(a.patients, c.patients);
}

#[test]
fn grade_marginals_at_n_1000() {
    let cohort = generate_cohort(&config(1000, 3)).unwrap();
    for (g, &p) in cohort.config.grade_proportions.iter().enumerate() {
        let frac = cohort.patients.iter().filter(|q| usize::from(q.clinical.grade) == g).count() as f64 / 1000.0;
        assert!((frac - p).abs() <= 0.03, "grade {g}: {frac} vs {p}");
    }
}

#[test]
fn censoring_rates_are_hit_on_large_n() {
    let cohort = generate_cohort(&config(4000, 4)).unwrap();
    for kind in OutcomeKind::ALL {
        let rate = cohort.records(kind).iter().filter(|r| !r.event).count() as f64 / 4000.0;
        let want = cohort.config.censoring.get(kind);
        assert!((rate - want).abs() <= 0.02, "{kind}: {rate} vs {want}");
    }
}

fn largest_blob_volume(cohort: &Cohort, i: usize) -> f64 {
    let img = cohort.render(i).unwrap();
    connected_components(&img.nodal_mask, Connectivity::TwentySix)[0].volume_mm3
}

#[test]
fn grade_three_nodes_are_larger() {
    let cohort = generate_cohort(&config(500, 5)).unwrap();
    let vols: Vec<(u8, f64)> = (0..cohort.len())
        .into_par_iter()
        .filter(|&i| matches!(cohort.patients[i].clinical.grade, 0 | 3))
        .map(|i| (cohort.patients[i].clinical.grade, largest_blob_volume(&cohort, i)))
        .collect();
    let mean = |g: u8| {
        let v: Vec<f64> = vols.iter().filter(|x| x.0 == g).map(|x| x.1).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(3) > mean(0), "{} vs {}", mean(3), mean(0));
}

#[test]
fn masks_are_valid_with_at_least_one_component() {
    let cohort = generate_cohort(&config(60, 6)).unwrap();
    (0..cohort.len()).into_par_iter().for_each(|i| {
        let img = cohort.render(i).unwrap();
        assert_eq!(img.nodal_mask.data.len(), img.nodal_mask.grid.len());
        assert!(!connected_components(&img.nodal_mask, Connectivity::TwentySix).is_empty());
        assert!(!connected_components(&img.gtv_mask, Connectivity::TwentySix).is_empty());
    });
}

#[test]
fn no_signal_gives_chance_concordance() {
    let mut c = uncensored(config(1000, 7));
    c.beta = vec![0.0; 6];
    let cohort = generate_cohort(&c).unwrap();
    let recs = cohort.records(OutcomeKind::Os);
    assert!(cohort.true_risk().iter().all(|&v| v == 0.0));
    for j in 0..6 {
        let model: Vec<f64> = cohort.patients.iter().map(|p| p.covariates[j]).collect();
        let ci = c_index(&model, recs).unwrap();
        assert!((ci - 0.5).abs() <= 0.03, "covariate {j}: {ci}");
    }
}

#[test]
fn strong_signal_is_recoverable_by_the_oracle() {
    let mut c = uncensored(config(1000, 8));
    c.beta = c.beta.iter().map(|b| b * 4.0).collect();
    let cohort = generate_cohort(&c).unwrap();
    let ci = c_index(cohort.true_risk(), cohort.records(OutcomeKind::Os)).unwrap();
    assert!(ci > 0.9, "{ci}");
}

#[test]
fn doubling_gamma_widens_the_interaction_gap() {
    let gap = |gamma: f64| {
        let mut c = uncensored(config(2000, 11));
        c.gamma = gamma;
        let cohort = generate_cohort(&c).unwrap();
        let recs = cohort.records(OutcomeKind::Os);
        let additive: Vec<f64> = cohort
            .patients
            .iter()
            .map(|p| p.covariates.iter().zip(&c.beta).map(|(z, b)| z * b).sum())
            .collect();
        c_index(cohort.true_risk(), recs).unwrap() - c_index(&additive, recs).unwrap()
    };
    let (g1, g2) = (gap(0.5), gap(1.0));
    assert!(g2 > g1 && g1 > 0.0, "{g1} then {g2}");
}

#[test]
fn censoring_is_independent_of_covariates() {
    let cohort = generate_cohort(&config(2000, 12)).unwrap();
    for kind in OutcomeKind::ALL {
        let ct = &cohort.survival.outcome(kind).censoring_times;
        for j in 0..6 {
            let z: Vec<f64> = cohort.patients.iter().map(|p| p.covariates[j]).collect();
            let tau = kendall_tau(ct, &z);
            assert!(tau.abs() <= 0.05, "{kind} covariate {j}: tau {tau}");
        }
    }
    // without signal the censoring indicator itself carries no covariate information
    let mut c = config(2000, 13);
    c.beta = vec![0.0; 6];
    let cohort = generate_cohort(&c).unwrap();
    let ind: Vec<f64> = cohort.records(OutcomeKind::Dfs).iter().map(|r| f64::from(u8::from(!r.event))).collect();
    for j in 0..6 {
        let z: Vec<f64> = cohort.patients.iter().map(|p| p.covariates[j]).collect();
        assert!(kendall_tau(&ind, &z).abs() <= 0.05);
    }
}

#[test]
fn true_risk_beats_its_noised_versions() {
    for seed in 0..10 {
        let mut c = config(1000, 100 + seed);
        c.censoring = CensoringRates::uniform(0.5);
        c.gamma = 0.3;
        let cohort = generate_cohort(&c).unwrap();
        let recs = cohort.records(OutcomeKind::Dfs);
        let truth = c_index(cohort.true_risk(), recs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for sigma in [0.5, 1.0, 2.0] {
            let noised: Vec<f64> = cohort.true_risk().iter().map(|v| { let e: f64 = StandardNormal.sample(&mut rng); v + sigma * e }).collect();
            assert!(truth > c_index(&noised, recs).unwrap(), "seed {seed} sigma {sigma}");
        }
    }
}

#[test]
fn plant_survival_checks_inputs() {
    let c = config(3, 0);
    assert!(plant_survival(&[vec![0.0; 5]], &c).is_err());
    let mut bad = c.clone();
    bad.gamma = 1e308;
    let mut z = vec![0.0; 6];
    z[NODAL_COVARIATE] = 1e10;
    z[PRIMARY_COVARIATE] = 1e10;
    assert!(plant_survival(&[z], &bad).is_err());
}
