use rand::seq::SliceRandom;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::rng_for;

pub type Split = (Vec<usize>, Vec<usize>);

fn by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    classes
}

/// Stratified `k`-fold splits as `(train, test)` index lists, both ascending.
///
/// Each class is shuffled and dealt round-robin, continuing the fold
/// counter across classes so fold sizes stay balanced too.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    let classes = by_class(labels);
    if let Some((c, members)) = classes.iter().find(|(_, m)| m.len() < k) {
        return Err(Error::invalid(format!("class {c} has {} members, fewer than k = {k}", members.len())));
    }
    let mut fold_of = vec![0usize; labels.len()];
    let mut pos = 0usize;
    for (&c, members) in &classes {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng_for(seed, &[0xF01D, c as u64]));
        for i in shuffled {
            fold_of[i] = pos % k;
            pos += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| fold_of[i] == f);
            (train, test)
        })
        .collect())
}

/// Stratified holdout: `round(fraction * n_c)` members of every class go to
/// the second list. Positions refer to `labels`.
pub fn stratified_holdout(labels: &[usize], fraction: f64, seed: u64) -> Split {
    let mut held = vec![false; labels.len()];
    for (&c, members) in &by_class(labels) {
        let take = (fraction * members.len() as f64).round() as usize;
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng_for(seed, &[0x4A1D, c as u64]));
        for &i in shuffled.iter().take(take.min(members.len().saturating_sub(1))) {
            held[i] = true;
        }
    }
    (0..labels.len()).partition(|&i| !held[i])
}
