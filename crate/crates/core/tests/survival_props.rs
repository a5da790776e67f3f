use amo_core::survival::{
    class_weights, encode_mtlr_target, make_bins, mtlr_nll, mtlr_nll_graph, risk_score,
    soft_dice_loss, survival_curve, weighted_censored_bce, BinGrid, MtlrTarget, OutcomeKind,
    SurvivalRecord,
};
use amo_core::tensor::{grad_check_fn, Reduction, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Probability of the admissible set by enumerating every event-bin
/// assignment and summing the softmax mass of the compatible ones.
fn enumerated_nll(z: &[f64], y: &[u8]) -> f64 {
    let denom: f64 = z.iter().map(|v| v.exp()).sum();
    let mut prob = 0.0;
    for (bin, &zb) in z.iter().enumerate() {
        if y[bin] == 1 {
            prob += zb.exp() / denom;
        }
    }
    -prob.ln()
}

fn grid(t: usize) -> BinGrid {
    BinGrid::new((1..t).map(|j| j as f64 * 10.0).collect()).unwrap()
}

proptest! {
    #[test]
    fn nll_matches_enumeration(
        t in 2usize..=6,
        z in prop::collection::vec(-5.0f64..5.0, 6),
        time in 0.5f64..70.0,
        event: bool,
    ) {
        let g = grid(t);
        let rec = SurvivalRecord::new(time, event, OutcomeKind::Dm).unwrap();
        let target = encode_mtlr_target(&rec, &g).unwrap();
        let z = &z[..t];
        let got = mtlr_nll(z, std::slice::from_ref(&target), Reduction::Mean).unwrap();
        let want = enumerated_nll(z, &target.y);
        prop_assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn target_shape_invariants(t in 2usize..=8, time in 0.5f64..100.0, event: bool) {
        let g = grid(t);
        let rec = SurvivalRecord::new(time, event, OutcomeKind::Os).unwrap();
        let target = encode_mtlr_target(&rec, &g).unwrap();
        let ones: usize = target.y.iter().map(|&v| v as usize).sum();
        if event {
            prop_assert_eq!(ones, 1);
        } else {
            let first = target.y.iter().position(|&v| v == 1).unwrap();
            prop_assert!(target.y[first..].iter().all(|&v| v == 1));
            prop_assert!(target.y[..first].iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn curve_is_a_survival_function(z in prop::collection::vec(-20.0f64..20.0, 2..12)) {
        let g = grid(z.len());
        let s = survival_curve(&z, &g).unwrap();
        prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(*s.last().unwrap(), 0.0);
    }

    #[test]
    fn moving_mass_earlier_raises_risk(z in prop::collection::vec(-3.0f64..3.0, 3..8), pick in 0usize..64) {
        let t = z.len();
        let g = grid(t);
        let j = 1 + pick % (t - 1);
        // exchange a slice of probability from bin j into bin j-1
        let mut p: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        let delta = p[j] * 0.5;
        let mut q = p.clone();
        q[j] -= delta;
        q[j - 1] += delta;
        let lp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let lq: Vec<f64> = q.iter().map(|v| v.ln()).collect();
        prop_assert!(risk_score(&lq, &g).unwrap() > risk_score(&lp, &g).unwrap());
    }

    #[test]
    fn dice_in_unit_interval(pred in prop::collection::vec(0.0f64..=1.0, 1..40), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<f64> = pred.iter().map(|_| f64::from(rng.random::<bool>() as u8)).collect();
        let l = soft_dice_loss(&pred, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn dice_symmetric_for_binary_masks(a in prop::collection::vec(any::<bool>(), 1..40), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = a.iter().map(|&v| f64::from(v as u8)).collect();
        let y: Vec<f64> = a.iter().map(|_| f64::from(rng.random::<bool>() as u8)).collect();
        prop_assert_eq!(soft_dice_loss(&x, &y).unwrap(), soft_dice_loss(&y, &x).unwrap());
    }

    #[test]
    fn class_weights_balance_mass(labels in prop::collection::vec(0u8..=1, 2..200)) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let (w0, w1) = class_weights(&labels).unwrap();
        let c1 = labels.iter().filter(|&&l| l == 1).count() as f64;
        let c0 = labels.len() as f64 - c1;
        prop_assert!((w0 * c0 - w1 * c1).abs() < 1e-9);
    }

    #[test]
    fn bins_are_strictly_increasing(times in prop::collection::vec(0.1f64..120.0, 4..300)) {
        prop_assume!(times.iter().any(|&t| t != times[0]));
        let g = make_bins(&times).unwrap();
        prop_assert!(g.num_bins() >= 2);
        prop_assert!(g.num_bins() <= ((times.len() as f64).sqrt() + 0.5).floor() as usize);
        prop_assert!(g.boundaries().windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn shifting_single_bin_mass_orders_risk() {
    let g = grid(5);
    let mut risks = Vec::new();
    for bin in 0..5 {
        let mut z = vec![-700.0; 5];
        z[bin] = 0.0;
        risks.push(risk_score(&z, &g).unwrap());
    }
    assert!(risks.windows(2).all(|w| w[0] > w[1]), "{risks:?}");
}

#[test]
fn mtlr_gradient_matches_finite_differences() {
    let g = grid(4);
    let recs = [(3.0, true), (25.0, false), (31.0, true)];
    let targets: Vec<MtlrTarget> = recs
        .iter()
        .map(|&(t, e)| encode_mtlr_target(&SurvivalRecord::new(t, e, OutcomeKind::Os).unwrap(), &g).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for reduction in [Reduction::Mean, Reduction::Sum] {
        let z = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let err = grad_check_fn(&[z], 1e-5, |gr, v| mtlr_nll_graph(gr, v[0], &targets, reduction)).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let labels = [1.0, 0.0, 1.0, 0.0, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = Tensor::vector((0..5).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
    let err = grad_check_fn(std::slice::from_ref(&p), 1e-6, |gr, v| gr.weighted_bce(v[0], &labels, (0.7, 1.9), Reduction::Mean)).unwrap();
    assert!(err < 1e-4, "{err}");

    // the graph loss agrees with the scalar definition
    let mut gr = amo_core::tensor::Graph::new();
    let v = gr.input(p.clone()).unwrap();
    let l = gr.weighted_bce(v, &labels, (0.7, 1.9), Reduction::Sum).unwrap();
    let direct: f64 = p
        .data()
        .iter()
        .zip(labels)
        .map(|(&pi, y)| weighted_censored_bce(pi, y as u8, (0.7, 1.9)).unwrap())
        .sum();
    assert!((gr.data(l)[0] - direct).abs() < 1e-12);

    // sigmoid followed by bce, the path used by the binary head
    let z = Tensor::vector(vec![-1.2, 0.3, 2.0, -0.1, 0.9]).unwrap();
    let err = grad_check_fn(&[z], 1e-5, |gr, v| {
        let p = gr.sigmoid(v[0])?;
        gr.weighted_bce(p, &labels, (1.0, 3.0), Reduction::Mean)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
