//! Discrete-time survival objectives.
//!
//! MTLR splits follow-up into `T` quantile bins. An uncensored patient is
//! compatible only with the bin holding its event; a censored patient with
//! its censoring bin and every later bin. The likelihood of a patient is the
//! softmax mass of its compatible bins.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{ensure_finite, Error, Result};
use crate::tensor::{Graph, Reduction, Var};

/// Month at which the binary landmark label is taken.
pub const LANDMARK_MONTHS: f64 = 24.0;

/// Floor applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Stability term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Os,
    Dm,
    Dfs,
}

impl OutcomeKind {
    pub const ALL: [OutcomeKind; 3] = [OutcomeKind::Os, OutcomeKind::Dm, OutcomeKind::Dfs];

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Os => "os",
            OutcomeKind::Dm => "dm",
            OutcomeKind::Dfs => "dfs",
        }
    }
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutcomeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "os" => Ok(OutcomeKind::Os),
            "dm" => Ok(OutcomeKind::Dm),
            "dfs" => Ok(OutcomeKind::Dfs),
            other => Err(Error::invalid(format!("unknown outcome kind {other:?}"))),
        }
    }
}

/// Follow-up of one patient for one endpoint. `event == false` means the
/// patient was censored at `time`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    pub event: bool,
    pub kind: OutcomeKind,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool, kind: OutcomeKind) -> Result<Self> {
        if !(time > 0.0) || !time.is_finite() {
            return Err(Error::invalid(format!("survival time must be positive, got {time}")));
        }
        Ok(SurvivalRecord { time, event, kind })
    }

    /// Binary landmark label: 1 iff the event was observed by `months`.
    /// Patients censored before the landmark count as 0.
    pub fn landmark_label(&self, months: f64) -> u8 {
        u8::from(self.event && self.time <= months)
    }
}

/// Interior bin boundaries `t_1 < ... < t_{T-1}`. Bins are left-closed and
/// the last one is open-ended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    boundaries: Vec<f64>,
}

impl BinGrid {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(Error::invalid("a bin grid needs at least one boundary (T >= 2)"));
        }
        ensure_finite(&boundaries, "bin boundaries")?;
        if boundaries[0] <= 0.0 || boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("bin boundaries must be positive and strictly increasing"));
        }
        Ok(BinGrid { boundaries })
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn num_bins(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Index of the bin containing `time`.
    pub fn bin_of(&self, time: f64) -> usize {
        self.boundaries.partition_point(|&b| b <= time)
    }
}

/// Linear-interpolation empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantile bins over all observed times, censored or not.
///
/// `T = round(sqrt(N))` (halves round up) and the boundaries are the `j/T`
/// quantiles. Coinciding boundaries are merged, which lowers `T`.
pub fn make_bins(times: &[f64]) -> Result<BinGrid> {
    if times.len() < 4 {
        return Err(Error::invalid(format!(
            "binning needs at least 4 observations, got {}",
            times.len()
        )));
    }
    ensure_finite(times, "survival times")?;
    if times.iter().any(|&t| t <= 0.0) {
        return Err(Error::invalid("survival times must be positive"));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::degenerate("all survival times are equal"));
    }
    let t = ((times.len() as f64).sqrt() + 0.5).floor() as usize;
    let mut boundaries: Vec<f64> = Vec::with_capacity(t - 1);
    for j in 1..t {
        let b = quantile_sorted(&sorted, j as f64 / t as f64);
        if boundaries.last().is_none_or(|&last| b > last) {
            boundaries.push(b);
        }
    }
    if boundaries.is_empty() {
        return Err(Error::degenerate("quantile boundaries collapsed to a single bin"));
    }
    BinGrid::new(boundaries)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MtlrTarget {
    pub y: Vec<u8>,
    pub censored: bool,
}

impl MtlrTarget {
    pub fn admissible(&self) -> impl Iterator<Item = bool> + '_ {
        self.y.iter().map(|&v| v == 1)
    }
}

pub fn encode_mtlr_target(record: &SurvivalRecord, grid: &BinGrid) -> Result<MtlrTarget> {
    if !(record.time > 0.0) {
        return Err(Error::invalid(format!("non-positive survival time {}", record.time)));
    }
    let t = grid.num_bins();
    let bin = grid.bin_of(record.time);
    let y = (0..t)
        .map(|j| u8::from(if record.event { j == bin } else { j >= bin }))
        .collect();
    Ok(MtlrTarget { y, censored: !record.event })
}

fn admissible_mask(targets: &[MtlrTarget], t: usize) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(targets.len() * t);
    for tg in targets {
        if tg.y.len() != t {
            return Err(Error::shape(format!("target with {} bins for {t} logits", tg.y.len())));
        }
        mask.extend(tg.admissible());
    }
    Ok(mask)
}

/// MTLR negative log-likelihood on `[N, T]` logits, recorded on `graph`.
pub fn mtlr_nll_graph(
    graph: &mut Graph,
    logits: Var,
    targets: &[MtlrTarget],
    reduction: Reduction,
) -> Result<Var> {
    let shape = graph.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape(format!("logits {shape:?} for {} targets", targets.len())));
    }
    let mask = admissible_mask(targets, shape[1])?;
    graph.mtlr_nll(logits, &mask, reduction)
}

/// MTLR negative log-likelihood of row-major `[N, T]` logits.
pub fn mtlr_nll(logits: &[f64], targets: &[MtlrTarget], reduction: Reduction) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n = targets.len();
    if !logits.len().is_multiple_of(n) {
        return Err(Error::shape(format!("{} logits for {n} patients", logits.len())));
    }
    ensure_finite(logits, "mtlr logits")?;
    let mut g = Graph::new();
    let z = g.input(crate::tensor::Tensor::matrix(n, logits.len() / n, logits.to_vec())?)?;
    let loss = mtlr_nll_graph(&mut g, z, targets, reduction)?;
    Ok(g.data(loss)[0])
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Survival probability at the end of each bin: `S_j = sum_{t > j} p_t`.
pub fn survival_curve(logits: &[f64], grid: &BinGrid) -> Result<Vec<f64>> {
    if logits.len() != grid.num_bins() {
        return Err(Error::shape(format!(
            "{} logits for a {}-bin grid",
            logits.len(),
            grid.num_bins()
        )));
    }
    ensure_finite(logits, "survival logits")?;
    let p = softmax(logits);
    let t = p.len();
    let mut s = vec![0.0; t];
    for j in (0..t - 1).rev() {
        s[j] = (s[j + 1] + p[j + 1]).min(1.0);
    }
    Ok(s)
}

/// Negative area under the discrete survival curve; larger means earlier
/// expected events.
pub fn risk_score(logits: &[f64], grid: &BinGrid) -> Result<f64> {
    Ok(-survival_curve(logits, grid)?.iter().sum::<f64>())
}

/// Class-weighted binary cross entropy of a single probability.
pub fn weighted_censored_bce(p: f64, label: u8, weights: (f64, f64)) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("probability {p} outside (0, 1)")));
    }
    if label > 1 {
        return Err(Error::invalid(format!("label {label} is not binary")));
    }
    let (w0, w1) = weights;
    if !(w0 > 0.0 && w1 > 0.0) {
        return Err(Error::invalid("class weights must be positive"));
    }
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let y = f64::from(label);
    Ok(-(y * w1 * pc.ln() + (1.0 - y) * w0 * (1.0 - pc).ln()))
}

/// Inverse class-frequency weights `w_c = N / (2 n_c)`.
pub fn class_weights(labels: &[u8]) -> Result<(f64, f64)> {
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let zeros = labels.iter().filter(|&&l| l == 0).count();
    if zeros + ones != labels.len() {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if ones == 0 || zeros == 0 {
        return Err(Error::degenerate("class weights need both classes in the split"));
    }
    let n = labels.len() as f64;
    Ok((n / (2.0 * zeros as f64), n / (2.0 * ones as f64)))
}

/// Soft Dice loss `1 - 2 sum(Y P) / (sum Y + sum P + eps)`.
pub fn soft_dice_loss(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let (inter, denom) = dice_terms(pred, truth)?;
    Ok(1.0 - 2.0 * inter / (denom + DICE_EPS))
}

/// Gradient of [`soft_dice_loss`] with respect to `pred`.
pub fn soft_dice_grad(pred: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    let (inter, denom) = dice_terms(pred, truth)?;
    let d = denom + DICE_EPS;
    Ok(truth
        .iter()
        .map(|&y| -(2.0 * y * d - 2.0 * inter) / (d * d))
        .collect())
}

fn dice_terms(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "prediction has {} voxels, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("soft prediction outside [0, 1]"));
    }
    let inter = pred.iter().zip(truth).map(|(p, y)| p * y).sum::<f64>();
    let denom = pred.iter().sum::<f64>() + truth.iter().sum::<f64>();
    Ok((inter, denom))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(time: f64, event: bool) -> SurvivalRecord {
        SurvivalRecord::new(time, event, OutcomeKind::Os).unwrap()
    }

    #[test]
    fn bins_for_sixteen_distinct_times() {
        let times: Vec<f64> = (1..=16).map(f64::from).collect();
        let grid = make_bins(&times).unwrap();
        assert_eq!(grid.num_bins(), 4);
        let b = grid.boundaries();
        assert!((b[0] - 4.75).abs() < 1e-12);
        assert!((b[1] - 8.5).abs() < 1e-12);
        assert!((b[2] - 12.25).abs() < 1e-12);
    }

    #[test]
    fn bins_reject_degenerate_input() {
        assert!(matches!(make_bins(&[1.0; 4]), Err(Error::Degenerate(_))));
        assert!(make_bins(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn hundred_times_give_ten_balanced_bins() {
        let times: Vec<f64> = (1..=100).map(|i| f64::from(i) * 0.7).collect();
        let grid = make_bins(&times).unwrap();
        assert_eq!(grid.num_bins(), 10);
        let mut counts = vec![0; 10];
        for &t in &times {
            counts[grid.bin_of(t)] += 1;
        }
        assert!(counts.iter().all(|&c| (9..=11).contains(&c)), "{counts:?}");
    }

    #[test]
    fn duplicate_quantiles_merge() {
        let times = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 3.0];
        let grid = make_bins(&times).unwrap();
        assert!(grid.num_bins() >= 2 && grid.num_bins() < 3 + 1);
        assert!(grid.boundaries().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn target_encoding() {
        let grid = BinGrid::new(vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(encode_mtlr_target(&rec(1.0, true), &grid).unwrap().y, vec![1, 0, 0, 0]);
        assert_eq!(encode_mtlr_target(&rec(4.5, false), &grid).unwrap().y, vec![0, 0, 1, 1]);
        assert_eq!(encode_mtlr_target(&rec(60.0, false), &grid).unwrap().y, vec![0, 0, 0, 1]);
        // left-closed bins
        assert_eq!(encode_mtlr_target(&rec(2.0, true), &grid).unwrap().y, vec![0, 1, 0, 0]);
    }

    #[test]
    fn nll_plugged_values() {
        let grid = BinGrid::new(vec![2.0, 4.0, 6.0]).unwrap();
        let unc = encode_mtlr_target(&rec(1.0, true), &grid).unwrap();
        let l = mtlr_nll(&[0.0; 4], std::slice::from_ref(&unc), Reduction::Mean).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);

        let cen = encode_mtlr_target(&rec(4.5, false), &grid).unwrap();
        let l = mtlr_nll(&[0.0; 4], &[cen], Reduction::Mean).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        let l = mtlr_nll(&[30.0, 0.0, 0.0, 0.0], &[unc], Reduction::Mean).unwrap();
        assert!(l.abs() < 1e-9, "{l}");
    }

    #[test]
    fn nll_errors() {
        assert!(mtlr_nll(&[], &[], Reduction::Mean).is_err());
        let t = MtlrTarget { y: vec![1, 0], censored: false };
        assert!(mtlr_nll(&[f64::NAN, 0.0], &[t], Reduction::Mean).is_err());
    }

    #[test]
    fn nll_sum_vs_mean() {
        let grid = BinGrid::new(vec![2.0]).unwrap();
        let ts = vec![
            encode_mtlr_target(&rec(1.0, true), &grid).unwrap(),
            encode_mtlr_target(&rec(3.0, true), &grid).unwrap(),
        ];
        let z = [0.3, -0.2, 1.0, 0.5];
        let s = mtlr_nll(&z, &ts, Reduction::Sum).unwrap();
        let m = mtlr_nll(&z, &ts, Reduction::Mean).unwrap();
        assert!((s - 2.0 * m).abs() < 1e-14);
    }

    #[test]
    fn survival_curve_examples() {
        let grid = BinGrid::new(vec![2.0, 4.0, 6.0]).unwrap();
        let s = survival_curve(&[0.0; 4], &grid).unwrap();
        for (a, b) in s.iter().zip([0.75, 0.5, 0.25, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let s = survival_curve(&[-800.0, -800.0, -800.0, 0.0], &grid).unwrap();
        assert_eq!(s, vec![1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn risk_extremes() {
        let grid = BinGrid::new(vec![2.0, 4.0, 6.0]).unwrap();
        let first = risk_score(&[0.0, -800.0, -800.0, -800.0], &grid).unwrap();
        let last = risk_score(&[-800.0, -800.0, -800.0, 0.0], &grid).unwrap();
        assert_eq!(first, 0.0);
        assert_eq!(last, -3.0);
    }

    #[test]
    fn bce_values() {
        assert!((weighted_censored_bce(0.5, 0, (1.0, 1.0)).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((weighted_censored_bce(0.5, 1, (1.0, 1.0)).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(weighted_censored_bce(1.0 - 1e-15, 1, (1.0, 1.0)).unwrap() < 1e-12);
        let v = weighted_censored_bce(0.25, 1, (1.0, 2.0)).unwrap();
        assert!((v - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((v - 2.772589).abs() < 1e-6);
        assert!(weighted_censored_bce(0.0, 1, (1.0, 1.0)).is_err());
        assert!(weighted_censored_bce(1.0, 1, (1.0, 1.0)).is_err());
    }

    #[test]
    fn bce_unit_weights_equal_log_loss() {
        for &p in &[0.01, 0.2, 0.5, 0.77, 0.999] {
            for y in [0u8, 1] {
                let yf = f64::from(y);
                let plain = -(yf * f64::ln(p) + (1.0 - yf) * f64::ln(1.0 - p));
                assert_eq!(weighted_censored_bce(p, y, (1.0, 1.0)).unwrap(), plain);
            }
        }
    }

    #[test]
    fn class_weight_values() {
        let balanced = [0u8, 1, 0, 1];
        assert_eq!(class_weights(&balanced).unwrap(), (1.0, 1.0));
        let mut skewed = vec![0u8; 90];
        skewed.extend(vec![1u8; 10]);
        let (w0, w1) = class_weights(&skewed).unwrap();
        assert!((w0 - 100.0 / 180.0).abs() < 1e-15);
        assert_eq!(w1, 5.0);
        assert!((w0 * 90.0 - w1 * 10.0).abs() < 1e-12);
        assert!(class_weights(&[1, 1, 1]).is_err());
    }

    #[test]
    fn dice_examples() {
        let truth = [1.0, 1.0, 0.0, 0.0];
        assert!(soft_dice_loss(&truth, &truth).unwrap().abs() < 1e-8);
        assert!((soft_dice_loss(&[0.0, 0.0, 1.0, 1.0], &truth).unwrap() - 1.0).abs() < 1e-12);
        let ones = [1.0; 10];
        let half = [0.5; 10];
        assert!((soft_dice_loss(&half, &ones).unwrap() - 1.0 / 3.0).abs() < 1e-9);
        assert!(soft_dice_loss(&[0.5], &ones).is_err());
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let pred = [0.2, 0.7, 0.4, 0.9, 0.1];
        let truth = [1.0, 1.0, 0.0, 1.0, 0.0];
        let g = soft_dice_grad(&pred, &truth).unwrap();
        let h = 1e-6;
        for i in 0..pred.len() {
            let mut p = pred;
            p[i] += h;
            let up = soft_dice_loss(&p, &truth).unwrap();
            p[i] -= 2.0 * h;
            let dn = soft_dice_loss(&p, &truth).unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7 * g[i].abs().max(1.0));
        }
    }

    #[test]
    fn landmark_label_rule() {
        assert_eq!(rec(12.0, true).landmark_label(LANDMARK_MONTHS), 1);
        assert_eq!(rec(24.0, true).landmark_label(LANDMARK_MONTHS), 1);
        assert_eq!(rec(30.0, true).landmark_label(LANDMARK_MONTHS), 0);
        assert_eq!(rec(12.0, false).landmark_label(LANDMARK_MONTHS), 0);
    }
}
