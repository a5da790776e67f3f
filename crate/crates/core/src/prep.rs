//! Tabular preprocessing: scaling, PCA, elastic-net selection, SMOTE-Tomek
//! rebalancing and grade dichotomization. Every transform is fit on one
//! matrix and applied to others; nothing is fit implicitly on apply.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::rng_for;

fn check_finite(x: &Array2<f64>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(what))
    }
}

fn check_cols(x: &Array2<f64>, cols: usize) -> Result<()> {
    if x.ncols() == cols {
        Ok(())
    } else {
        Err(Error::shape(format!("expected {cols} columns, got {}", x.ncols())))
    }
}

/// Per-column standardization with population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    /// Constant columns store 1 so they pass through centered only.
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: &Array2<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::invalid("cannot fit a scaler on an empty matrix"));
        }
        check_finite(x, "scaler input")?;
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for col in x.columns() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let is_const = col.iter().all(|&v| v == col[0]);
            mean.push(m);
            std.push(if is_const || var == 0.0 { 1.0 } else { var.sqrt() });
        }
        Ok(Scaler { mean, std })
    }

    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        check_cols(x, self.mean.len())?;
        let mut out = x.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        Ok(out)
    }
}

/// Principal component projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One loading vector per component, decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

impl Pca {
    /// Eigendecomposition of the sample covariance. Each loading vector is
    /// signed so its largest-magnitude entry is positive.
    pub fn fit(x: &Array2<f64>, n_components: usize) -> Result<Self> {
        let (n, p) = x.dim();
        if n < 2 || n_components == 0 || n_components > (n - 1).min(p) {
            return Err(Error::invalid(format!(
                "{n_components} components requested for a {n}x{p} matrix"
            )));
        }
        check_finite(x, "PCA input")?;
        let mean: Vec<f64> = x.mean_axis(Axis(0)).expect("rows > 0").to_vec();
        let mut cov = DMatrix::<f64>::zeros(p, p);
        for row in x.rows() {
            for a in 0..p {
                let da = row[a] - mean[a];
                for b in a..p {
                    cov[(a, b)] += da * (row[b] - mean[b]);
                }
            }
        }
        for a in 0..p {
            for b in a..p {
                let v = cov[(a, b)] / (n - 1) as f64;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let total: f64 = (0..p).map(|a| cov[(a, a)]).sum();
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Vec::with_capacity(n_components);
        let mut explained_variance = Vec::with_capacity(n_components);
        for &k in order.iter().take(n_components) {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("p > 0");
            if v[pivot] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            explained_variance.push(eig.eigenvalues[k].max(0.0));
        }
        let explained_variance_ratio = explained_variance
            .iter()
            .map(|&v| if total > 0.0 { v / total } else { 0.0 })
            .collect();
        Ok(Pca { mean, components, explained_variance, explained_variance_ratio })
    }

    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        check_cols(x, self.mean.len())?;
        let k = self.components.len();
        let mut out = Array2::zeros((x.nrows(), k));
        for (i, row) in x.rows().into_iter().enumerate() {
            for (c, comp) in self.components.iter().enumerate() {
                out[(i, c)] = row
                    .iter()
                    .zip(&self.mean)
                    .zip(comp)
                    .map(|((v, m), w)| (v - m) * w)
                    .sum();
            }
        }
        Ok(out)
    }
}

pub const LASSO_TOL: f64 = 1e-8;
pub const LASSO_MAX_SWEEPS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub coef: Vec<f64>,
    pub intercept: f64,
    /// Columns with a non-zero coefficient, ascending.
    pub selected: Vec<usize>,
    pub sweeps: usize,
}

pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Elastic-net by cyclic coordinate descent on
/// `1/(2N) |y - Xb|^2 + lambda (l1_ratio |b|_1 + (1 - l1_ratio)/2 |b|^2)`.
/// The intercept is absorbed by centering `y` and the columns of `X`.
pub fn lasso_select(x: &Array2<f64>, y: &[f64], lambda: f64, l1_ratio: f64) -> Result<LassoFit> {
    let (n, p) = x.dim();
    if n == 0 || p == 0 || y.len() != n {
        return Err(Error::shape(format!("design {n}x{p} with {} targets", y.len())));
    }
    check_finite(x, "lasso design")?;
    if y.iter().any(|v| !v.is_finite()) || !lambda.is_finite() {
        return Err(Error::non_finite("lasso targets"));
    }
    if lambda < 0.0 || !(0.0..=1.0).contains(&l1_ratio) {
        return Err(Error::invalid("lambda must be >= 0 and l1_ratio in [0, 1]"));
    }
    let nf = n as f64;
    let xm: Vec<f64> = x.mean_axis(Axis(0)).expect("rows > 0").to_vec();
    let ym = y.iter().sum::<f64>() / nf;
    let xc = {
        let mut c = x.clone();
        for (j, mut col) in c.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v - xm[j]);
        }
        c
    };
    let norms: Vec<f64> = xc.columns().into_iter().map(|c| c.dot(&c) / nf).collect();
    let mut r: Vec<f64> = y.iter().map(|v| v - ym).collect();
    let mut b = vec![0.0; p];
    let (l1, l2) = (lambda * l1_ratio, lambda * (1.0 - l1_ratio));
    for sweep in 1..=LASSO_MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let denom = norms[j] + l2;
            if denom == 0.0 {
                continue;
            }
            let col: ArrayView1<f64> = xc.column(j);
            let rho = col.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / nf + norms[j] * b[j];
            let new = soft_threshold(rho, l1) / denom;
            let delta = new - b[j];
            if delta != 0.0 {
                for (ri, &xi) in r.iter_mut().zip(col.iter()) {
                    *ri -= delta * xi;
                }
                b[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < LASSO_TOL {
            let intercept = ym - b.iter().zip(&xm).map(|(c, m)| c * m).sum::<f64>();
            let selected = (0..p).filter(|&j| b[j] != 0.0).collect();
            return Ok(LassoFit { coef: b, intercept, selected, sweeps: sweep });
        }
    }
    Err(Error::NoConvergence(format!("coordinate descent did not converge in {LASSO_MAX_SWEEPS} sweeps")))
}

pub const SMOTE_K: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Resampled {
    pub x: Array2<f64>,
    pub y: Vec<u8>,
    /// For each synthetic row (in order of creation, before Tomek removal):
    /// the two minority rows of the input it interpolates and `t`.
    pub synthetic: Vec<(usize, usize, f64)>,
    /// Rows of the oversampled set dropped as Tomek links.
    pub removed: Vec<usize>,
}

fn dist2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest other row (ties: lowest index).
fn nearest(x: &Array2<f64>, i: usize) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for j in 0..x.nrows() {
        if j == i {
            continue;
        }
        let d = dist2(x.row(i), x.row(j));
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, j));
        }
    }
    best.map(|(_, j)| j)
}

/// SMOTE oversampling of the minority class up to the majority count,
/// followed by removal of both members of every Tomek link.
pub fn smote_tomek(x: &Array2<f64>, y: &[u8], k_neighbors: usize, seed: u64) -> Result<Resampled> {
    if x.nrows() != y.len() {
        return Err(Error::shape("labels misaligned with rows"));
    }
    if y.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if k_neighbors == 0 {
        return Err(Error::invalid("k_neighbors must be at least 1"));
    }
    check_finite(x, "SMOTE input")?;
    let ones: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 1).collect();
    let zeros: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 0).collect();
    let (minority, majority, min_label) = if ones.len() <= zeros.len() { (ones, zeros, 1u8) } else { (zeros, ones, 0u8) };
    if minority.len() < 2 {
        return Err(Error::degenerate(format!("minority class has {} samples", minority.len())));
    }
    let k = k_neighbors.min(minority.len() - 1);
    let need = majority.len() - minority.len();
    let mut rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut labels = y.to_vec();
    let mut synthetic = Vec::with_capacity(need);
    if need > 0 {
        let neighbors: Vec<Vec<usize>> = minority
            .iter()
            .map(|&i| {
                let mut d: Vec<(f64, usize)> = minority
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| (dist2(x.row(i), x.row(j)), j))
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect();
        let mut rng = rng_for(seed, &[0x5A07E]);
        for _ in 0..need {
            let a = rng.random_range(0..minority.len());
            let b = neighbors[a][rng.random_range(0..k)];
            let t: f64 = rng.random();
            let (pa, pb) = (x.row(minority[a]), x.row(b));
            rows.push(pa.iter().zip(pb.iter()).map(|(u, v)| u + t * (v - u)).collect());
            labels.push(min_label);
            synthetic.push((minority[a], b, t));
        }
    }
    let p = x.ncols();
    let over = Array2::from_shape_vec((rows.len(), p), rows.concat()).map_err(|e| Error::shape(e.to_string()))?;
    let nn: Vec<Option<usize>> = (0..over.nrows()).map(|i| nearest(&over, i)).collect();
    let mut drop = vec![false; over.nrows()];
    for i in 0..over.nrows() {
        if let Some(j) = nn[i] {
            if nn[j] == Some(i) && labels[i] != labels[j] {
                drop[i] = true;
                drop[j] = true;
            }
        }
    }
    let removed: Vec<usize> = (0..drop.len()).filter(|&i| drop[i]).collect();
    let keep: Vec<usize> = (0..drop.len()).filter(|&i| !drop[i]).collect();
    let x_out = over.select(Axis(0), &keep);
    let y_out = keep.iter().map(|&i| labels[i]).collect();
    Ok(Resampled { x: x_out, y: y_out, synthetic, removed })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dichotomy {
    /// 0 vs 1-3.
    PosVsNeg,
    /// 0-1 vs 2-3.
    LowVsHigh,
    /// 0-2 vs 3.
    Grade3,
}

impl Dichotomy {
    pub const ALL: [Dichotomy; 3] = [Dichotomy::PosVsNeg, Dichotomy::LowVsHigh, Dichotomy::Grade3];

    pub fn as_str(self) -> &'static str {
        match self {
            Dichotomy::PosVsNeg => "pos_vs_neg",
            Dichotomy::LowVsHigh => "low_vs_high",
            Dichotomy::Grade3 => "grade3",
        }
    }
}

impl FromStr for Dichotomy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dichotomy::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown dichotomization {s:?}")))
    }
}

pub fn dichotomize(grade: u8, scheme: Dichotomy) -> Result<u8> {
    if grade > 3 {
        return Err(Error::invalid(format!("grade {grade} outside 0..=3")));
    }
    Ok(u8::from(match scheme {
        Dichotomy::PosVsNeg => grade >= 1,
        Dichotomy::LowVsHigh => grade >= 2,
        Dichotomy::Grade3 => grade == 3,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn scaler_examples() {
        let x = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let s = Scaler::fit(&x).unwrap();
        let t = s.apply(&x).unwrap();
        let want = 1.5f64.sqrt();
        assert!((t[(0, 0)] + want).abs() < 1e-12 && t[(1, 0)].abs() < 1e-15 && (t[(2, 0)] - want).abs() < 1e-12);
        assert!((t[(0, 0)] + 1.2247).abs() < 1e-4);
        assert_eq!(s.std[1], 1.0);
        assert!(s.apply(&array![[1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn pca_rank_one() {
        let x = array![[0.0, 0.0], [1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let p = Pca::fit(&x, 1).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert!(Pca::fit(&x, 3).is_err());
        let p = Pca::fit(&x, 2).unwrap();
        assert!(p.explained_variance_ratio[1].abs() < 1e-12);
    }

    #[test]
    fn lasso_kkt_threshold() {
        let x = array![[1.0, 0.3], [-0.5, 1.0], [0.2, -1.1], [-0.7, -0.2]];
        let y = [1.0, 0.5, -0.8, -0.7];
        let n = 4.0;
        let ym = y.iter().sum::<f64>() / n;
        let xm = x.mean_axis(Axis(0)).unwrap();
        let lmax = (0..2)
            .map(|j| ((0..4).map(|i| (x[(i, j)] - xm[j]) * (y[i] - ym)).sum::<f64>() / n).abs())
            .fold(0.0, f64::max);
        let fit = lasso_select(&x, &y, lmax, 1.0).unwrap();
        assert!(fit.selected.is_empty());
        let fit = lasso_select(&x, &y, lmax * 0.5, 1.0).unwrap();
        assert!(!fit.selected.is_empty());
    }

    #[test]
    fn dichotomize_table() {
        for s in Dichotomy::ALL {
            assert_eq!(dichotomize(0, s).unwrap(), 0);
            assert_eq!(dichotomize(3, s).unwrap(), 1);
        }
        let g2: Vec<u8> = Dichotomy::ALL.iter().map(|&s| dichotomize(2, s).unwrap()).collect();
        assert_eq!(g2, vec![1, 1, 0]);
        assert!(dichotomize(4, Dichotomy::Grade3).is_err());
        assert_eq!("low_vs_high".parse::<Dichotomy>().unwrap(), Dichotomy::LowVsHigh);
    }

    #[test]
    fn smote_examples() {
        let x = array![[0.0], [0.1], [1.0], [2.0]];
        let r = smote_tomek(&x, &[0, 0, 1, 1], 5, 1).unwrap();
        assert_eq!(r.x, x);
        assert!(r.removed.is_empty() && r.synthetic.is_empty());

        let x = array![[0.0, 0.0], [0.1, 0.0], [0.2, 0.1], [0.0, 0.3], [5.0, 5.0], [5.0, 5.0]];
        let r = smote_tomek(&x, &[0, 0, 0, 0, 1, 1], 5, 3).unwrap();
        assert_eq!(r.synthetic.len(), 2);
        for i in 6..r.x.nrows() {
            assert_eq!(r.x.row(i).to_vec(), vec![5.0, 5.0]);
        }
        assert!(smote_tomek(&array![[0.0], [1.0], [2.0]], &[0, 0, 1], 5, 0).is_err());
    }
}
