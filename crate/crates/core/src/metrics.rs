//! Evaluation metrics: segmentation overlap, ROC-AUC, concordance,
//! Kaplan-Meier, log-rank and the simulated-reader bootstrap.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::rng_for;
use crate::survival::{quantile_sorted, SurvivalRecord};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
}

/// Overlap between two binary masks. Two empty masks agree perfectly; a
/// ratio with an empty denominator is otherwise 0.
pub fn seg_metrics(pred: &[bool], truth: &[bool]) -> Result<SegMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("masks of {} and {} voxels", pred.len(), truth.len())));
    }
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    if tp + fp + fnn == 0 {
        return Ok(SegMetrics { dice: 1.0, precision: 1.0, recall: 1.0, iou: 1.0 });
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(SegMetrics {
        dice: ratio(2 * tp, 2 * tp + fp + fnn),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fnn),
        iou: ratio(tp, tp + fp + fnn),
    })
}

/// Midranks (1-based) of `values`, ties sharing their average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve via the Mann-Whitney statistic; tied scores
/// count one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    ensure_finite(scores, "scores")?;
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::degenerate("ROC-AUC needs both classes"));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Points of the ROC curve, `(false positive rate, true positive rate,
/// threshold)`, thresholds descending; a sample is positive when its score
/// is `>= threshold`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    roc_auc(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / neg, tp / pos, thr));
    }
    Ok(points)
}

/// Threshold maximising sensitivity + specificity - 1.
pub fn youden_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let curve = roc_curve(scores, labels)?;
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for &(fpr, tpr, thr) in &curve[1..] {
        let j = tpr - fpr;
        if j > best.0 {
            best = (j, thr);
        }
    }
    Ok(best.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub auc: f64,
    pub recall: f64,
    pub specificity: f64,
}

/// AUC plus recall/specificity at `threshold` (positive when `score >= threshold`).
pub fn binary_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<BinaryMetrics> {
    let auc = roc_auc(scores, labels)?;
    let (mut tp, mut tn, mut p, mut n) = (0.0, 0.0, 0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        if l == 1 {
            p += 1.0;
            if s >= threshold {
                tp += 1.0;
            }
        } else {
            n += 1.0;
            if s < threshold {
                tn += 1.0;
            }
        }
    }
    Ok(BinaryMetrics { auc, recall: tp / p, specificity: tn / n })
}

/// Harrell's concordance index. A pair is comparable when `T_i > T_j` and
/// `j` had the event; it is concordant when `r_i < r_j`, and a risk tie
/// scores one half.
pub fn c_index(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if risks.len() != records.len() {
        return Err(Error::shape(format!("{} risks for {} records", risks.len(), records.len())));
    }
    ensure_finite(risks, "risks")?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].time.total_cmp(&records[b].time));
    let (mut comparable, mut score) = (0u64, 0.0f64);
    for (pos, &j) in order.iter().enumerate() {
        if !records[j].event {
            continue;
        }
        let tj = records[j].time;
        for &i in order[pos + 1..].iter().filter(|&&i| records[i].time > tj) {
            comparable += 1;
            if risks[i] < risks[j] {
                score += 1.0;
            } else if risks[i] == risks[j] {
                score += 0.5;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::degenerate("no comparable pairs"));
    }
    Ok(score / comparable as f64)
}

/// Product-limit estimate evaluated at every distinct observed time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub censored: Vec<usize>,
}

impl KmCurve {
    /// Survival just after `t` (right-continuous step function).
    pub fn survival_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 1.0,
            k => self.survival[k - 1],
        }
    }
}

/// Distinct times with (at risk, events, censored), ascending.
fn risk_table(records: &[&SurvivalRecord]) -> Vec<(f64, usize, usize, usize)> {
    let mut sorted: Vec<&SurvivalRecord> = records.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut at_risk = sorted.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let (mut d, mut c) = (0, 0);
        while i < sorted.len() && sorted[i].time == t {
            if sorted[i].event {
                d += 1;
            } else {
                c += 1;
            }
            i += 1;
        }
        out.push((t, at_risk, d, c));
        at_risk -= d + c;
    }
    out
}

pub fn km_fit(records: &[SurvivalRecord]) -> Result<KmCurve> {
    if records.is_empty() {
        return Err(Error::invalid("Kaplan-Meier fit of an empty group"));
    }
    let refs: Vec<&SurvivalRecord> = records.iter().collect();
    let mut curve = KmCurve { times: vec![], survival: vec![], at_risk: vec![], events: vec![], censored: vec![] };
    let mut s = 1.0;
    for (t, n, d, c) in risk_table(&refs) {
        s *= 1.0 - d as f64 / n as f64;
        curve.times.push(t);
        curve.survival.push(s);
        curve.at_risk.push(n);
        curve.events.push(d);
        curve.censored.push(c);
    }
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub chi_square: f64,
    pub p_value: f64,
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_sf_1(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        libm::erfc((x / 2.0).sqrt())
    }
}

/// Two-group log-rank test.
pub fn logrank(group_a: &[SurvivalRecord], group_b: &[SurvivalRecord]) -> Result<LogRankResult> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::invalid("log-rank test needs two non-empty groups"));
    }
    let tagged: Vec<(&SurvivalRecord, bool)> = group_a
        .iter()
        .map(|r| (r, true))
        .chain(group_b.iter().map(|r| (r, false)))
        .collect();
    let mut order: Vec<usize> = (0..tagged.len()).collect();
    order.sort_by(|&x, &y| tagged[x].0.time.total_cmp(&tagged[y].0.time));
    let (mut n_a, mut n) = (group_a.len() as f64, tagged.len() as f64);
    let (mut o_minus_e, mut var) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = tagged[order[i]].0.time;
        let (mut d, mut d_a, mut leave, mut leave_a) = (0.0, 0.0, 0.0, 0.0);
        while i < order.len() && tagged[order[i]].0.time == t {
            let (r, in_a) = tagged[order[i]];
            leave += 1.0;
            if in_a {
                leave_a += 1.0;
            }
            if r.event {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            i += 1;
        }
        if d > 0.0 {
            o_minus_e += d_a - d * n_a / n;
            if n > 1.0 {
                var += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
            }
        }
        n -= leave;
        n_a -= leave_a;
    }
    if var <= 0.0 {
        return Ok(LogRankResult { chi_square: 0.0, p_value: 1.0 });
    }
    let chi_square = o_minus_e * o_minus_e / var;
    Ok(LogRankResult { chi_square, p_value: chi2_sf_1(chi_square) })
}

/// Log-rank test between records flagged positive and negative. A split
/// with an empty side yields `chi_square = 0, p = 1`.
pub fn logrank_split(records: &[SurvivalRecord], positive: &[bool]) -> Result<LogRankResult> {
    if records.len() != positive.len() {
        return Err(Error::shape("group flags misaligned with records"));
    }
    let (a, b): (Vec<_>, Vec<_>) = records.iter().zip(positive).partition(|(_, &p)| p);
    if a.is_empty() || b.is_empty() {
        return Ok(LogRankResult { chi_square: 0.0, p_value: 1.0 });
    }
    let a: Vec<SurvivalRecord> = a.into_iter().map(|(r, _)| *r).collect();
    let b: Vec<SurvivalRecord> = b.into_iter().map(|(r, _)| *r).collect();
    logrank(&a, &b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderSummary {
    pub mean_p: f64,
    pub median_p: f64,
    pub q025: f64,
    pub q975: f64,
    pub p_values: Vec<f64>,
}

/// Bootstrap a "simulated reader" from three raters: every round each
/// patient takes the call of one rater drawn uniformly, and the log-rank
/// p-value between called-positive and called-negative patients is kept.
/// Rounds use seeds derived from `(seed, round)` and run in parallel.
pub fn simulated_reader(
    annotations: &[[bool; 3]],
    records: &[SurvivalRecord],
    n_boot: usize,
    seed: u64,
) -> Result<ReaderSummary> {
    if records.is_empty() {
        return Err(Error::invalid("simulated reader needs records"));
    }
    if annotations.len() != records.len() {
        return Err(Error::shape("annotations misaligned with records"));
    }
    if n_boot == 0 {
        return Err(Error::invalid("n_boot must be at least 1"));
    }
    let p_values = (0..n_boot)
        .into_par_iter()
        .map(|round| {
            let mut rng = rng_for(seed, &[round as u64]);
            let calls: Vec<bool> = annotations.iter().map(|a| a[rng.random_range(0..3)]).collect();
            logrank_split(records, &calls).map(|r| r.p_value)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut sorted = p_values.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(ReaderSummary {
        mean_p: p_values.iter().sum::<f64>() / n_boot as f64,
        median_p: quantile_sorted(&sorted, 0.5),
        q025: quantile_sorted(&sorted, 0.025),
        q975: quantile_sorted(&sorted, 0.975),
        p_values,
    })
}
