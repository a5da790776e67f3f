//! Connected-component labeling and primary-node selection.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use super::{Grid, Mask, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::invalid(format!("connectivity must be 6, 18 or 26, got {n}"))),
        }
    }

    /// Neighbor offsets: face (6), face+edge (18) or all (26).
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let max_nonzero = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                for dz in -1..=1i64 {
                    let nz = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if nz > 0 && nz <= max_nonzero {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// 1-based, in order of decreasing volume.
    pub label: usize,
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
    pub volume_mm3: f64,
    /// Mean of the uncertainty map over the component, when one is known.
    pub mean_uncertainty: Option<f64>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Attach the mean of `map` over this component's voxels.
    pub fn with_uncertainty(mut self, map: &Volume) -> Result<Self> {
        if self.voxels.iter().any(|&v| v >= map.data.len()) {
            return Err(Error::shape("uncertainty map smaller than the component grid"));
        }
        let mean = self.voxels.iter().map(|&v| map.data[v]).sum::<f64>() / self.voxels.len() as f64;
        if !(mean >= 0.0) {
            return Err(Error::invalid("uncertainty must be non-negative"));
        }
        self.mean_uncertainty = Some(mean);
        Ok(self)
    }
}

/// Label the foreground of `mask`. Components come back sorted by volume
/// (ties: lowest first voxel index first) and labeled 1, 2, ... in that order.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> Vec<Component> {
    let g: &Grid = &mask.grid;
    let offsets = connectivity.offsets();
    let mut seen = vec![false; g.len()];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..g.len() {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        while let Some(v) = queue.pop_front() {
            voxels.push(v);
            let c = g.coords(v);
            for d in &offsets {
                if let Some(n) = g.offset(c, *d) {
                    if mask.data[n] && !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        voxels.sort_unstable();
        comps.push(voxels);
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    let vv = g.voxel_volume();
    comps
        .into_iter()
        .enumerate()
        .map(|(i, voxels)| Component {
            label: i + 1,
            volume_mm3: voxels.len() as f64 * vv,
            voxels,
            mean_uncertainty: None,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Only one component was found.
    Single,
    /// The largest component is clearly bigger than the runner-up.
    Largest,
    /// Ambiguous volumes; the least uncertain candidate won.
    LowestUncertainty,
    /// Ambiguous volumes but no uncertainty available; fell back to the largest.
    AmbiguousLargest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Position in the input list.
    pub index: usize,
    pub rule: SelectionRule,
    /// Positions of the components in the ±2 SD log-volume band (ambiguous
    /// branch only).
    pub candidates: Vec<usize>,
}

impl Selection {
    pub fn ambiguous(&self) -> bool {
        self.rule == SelectionRule::AmbiguousLargest
    }
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Pick the primary metastatic node.
///
/// When the relative gap `(v1 - v2) / v1` between the two largest volumes
/// exceeds `rho`, the largest wins. Otherwise every component whose
/// log-volume lies within two sample standard deviations (over all
/// components) of the largest's log-volume is a candidate, and the one with
/// the lowest mean uncertainty wins. Uncertainties are read from
/// `uncertainty` when given, else from each component's own
/// `mean_uncertainty`; if neither is available the largest is returned and
/// flagged ambiguous.
pub fn select_primary_node(components: &[Component], rho: f64, uncertainty: Option<&Volume>) -> Result<Selection> {
    if components.is_empty() {
        return Err(Error::invalid("no components to select from"));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("rho {rho} outside [0, 1]")));
    }
    let largest = (0..components.len())
        .max_by(|&a, &b| {
            components[a]
                .volume_mm3
                .total_cmp(&components[b].volume_mm3)
                .then(b.cmp(&a))
        })
        .expect("non-empty");
    if components.len() == 1 {
        return Ok(Selection { index: 0, rule: SelectionRule::Single, candidates: vec![] });
    }
    let v1 = components[largest].volume_mm3;
    let v2 = components
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != largest)
        .map(|(_, c)| c.volume_mm3)
        .fold(f64::NEG_INFINITY, f64::max);
    if (v1 - v2) / v1 > rho {
        return Ok(Selection { index: largest, rule: SelectionRule::Largest, candidates: vec![] });
    }
    let logs: Vec<f64> = components.iter().map(|c| c.volume_mm3.ln()).collect();
    let band = 2.0 * sample_sd(&logs);
    let candidates: Vec<usize> = (0..components.len())
        .filter(|&i| i == largest || (logs[i] - logs[largest]).abs() <= band)
        .collect();
    let scores: Option<Vec<f64>> = match uncertainty {
        Some(map) => Some(
            candidates
                .iter()
                .map(|&i| {
                    let c = components[i].clone().with_uncertainty(map)?;
                    Ok(c.mean_uncertainty.unwrap_or_default())
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => candidates.iter().map(|&i| components[i].mean_uncertainty).collect(),
    };
    match scores {
        Some(scores) => {
            // lowest uncertainty, then larger volume, then list order
            let best = (0..candidates.len())
                .min_by(|&a, &b| {
                    scores[a]
                        .total_cmp(&scores[b])
                        .then(components[candidates[b]].volume_mm3.total_cmp(&components[candidates[a]].volume_mm3))
                        .then(candidates[a].cmp(&candidates[b]))
                })
                .expect("candidates include the largest");
            Ok(Selection { index: candidates[best], rule: SelectionRule::LowestUncertainty, candidates })
        }
        None => Ok(Selection { index: largest, rule: SelectionRule::AmbiguousLargest, candidates }),
    }
}
