//! Shape, first-order and texture descriptors of a labeled region.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

use super::{Component, Connectivity, Grid, Volume};
use crate::error::{Error, Result};

/// Gray-level bin width in HU.
pub const DEFAULT_BIN_WIDTH: f64 = 10.0;

/// One representative of each of the 13 opposite-direction pairs of the
/// 26-neighborhood.
pub const GLCM_DIRECTIONS: [[i64; 3]; 13] = [
    [0, 0, 1],
    [0, 1, -1],
    [0, 1, 0],
    [0, 1, 1],
    [1, -1, -1],
    [1, -1, 0],
    [1, -1, 1],
    [1, 0, -1],
    [1, 0, 0],
    [1, 0, 1],
    [1, 1, -1],
    [1, 1, 0],
    [1, 1, 1],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    Shape,
    FirstOrder,
    Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub family: FeatureFamily,
    pub value: f64,
}

/// Ordered named features.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<Feature>);

impl FeatureVector {
    fn push(&mut self, name: &str, family: FeatureFamily, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::non_finite(format!("feature {name}")));
        }
        self.0.push(Feature { name: name.to_string(), family, value });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|f| f.name == name).map(|f| f.value)
    }

    pub fn names(&self) -> Vec<&str> {
        self.0.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.iter().map(|f| f.value).collect()
    }

    pub fn extend(&mut self, other: FeatureVector) {
        self.0.extend(other.0);
    }

    /// Same features with `prefix` prepended to every name.
    pub fn prefixed(mut self, prefix: &str) -> Self {
        for f in &mut self.0 {
            f.name = format!("{prefix}{}", f.name);
        }
        self
    }
}

fn require_voxels(comp: &Component) -> Result<()> {
    if comp.voxels.is_empty() {
        Err(Error::invalid("empty component"))
    } else {
        Ok(())
    }
}

fn membership(grid: &Grid, comp: &Component) -> Result<Vec<bool>> {
    let mut inside = vec![false; grid.len()];
    for &v in &comp.voxels {
        *inside
            .get_mut(v)
            .ok_or_else(|| Error::shape("component voxel outside the grid"))? = true;
    }
    Ok(inside)
}

fn physical(grid: &Grid, idx: usize) -> [f64; 3] {
    let c = grid.coords(idx);
    [c[0] as f64 * grid.spacing[0], c[1] as f64 * grid.spacing[1], c[2] as f64 * grid.spacing[2]]
}

pub fn extract_shape(comp: &Component, grid: &Grid) -> Result<FeatureVector> {
    require_voxels(comp)?;
    let inside = membership(grid, comp)?;
    let s = grid.spacing;
    let face = [s[1] * s[2], s[0] * s[2], s[0] * s[1]];
    let mut area = 0.0;
    let mut boundary = Vec::new();
    for &v in &comp.voxels {
        let c = grid.coords(v);
        let mut exposed = false;
        for axis in 0..3 {
            for step in [-1i64, 1] {
                let mut d = [0i64; 3];
                d[axis] = step;
                if !grid.offset(c, d).is_some_and(|n| inside[n]) {
                    area += face[axis];
                    exposed = true;
                }
            }
        }
        if exposed {
            boundary.push(physical(grid, v));
        }
    }
    let volume = comp.voxels.len() as f64 * grid.voxel_volume();
    let sphericity = (36.0 * std::f64::consts::PI * volume * volume).cbrt() / area;

    let n = comp.voxels.len() as f64;
    let pts: Vec<[f64; 3]> = comp.voxels.iter().map(|&v| physical(grid, v)).collect();
    let mut mean = [0.0; 3];
    for p in &pts {
        (0..3).for_each(|a| mean[a] += p[a] / n);
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in &pts {
        for a in 0..3 {
            for b in 0..3 {
                cov[(a, b)] += (p[a] - mean[a]) * (p[b] - mean[b]) / n;
            }
        }
    }
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let (elongation, flatness) = if eig[0] > 0.0 {
        ((eig[1] / eig[0]).sqrt(), (eig[2] / eig[0]).sqrt())
    } else {
        (1.0, 1.0)
    };

    let mut diam2: f64 = 0.0;
    for (i, a) in boundary.iter().enumerate() {
        for b in &boundary[i + 1..] {
            diam2 = diam2.max((0..3).map(|k| (a[k] - b[k]).powi(2)).sum());
        }
    }

    let mut fv = FeatureVector::default();
    let f = FeatureFamily::Shape;
    fv.push("shape_volume_mm3", f, volume)?;
    fv.push("shape_surface_area_mm2", f, area)?;
    fv.push("shape_sphericity", f, sphericity)?;
    fv.push("shape_elongation", f, elongation)?;
    fv.push("shape_flatness", f, flatness)?;
    fv.push("shape_max_3d_diameter_mm", f, diam2.sqrt())?;
    Ok(fv)
}

fn check_bin_width(bin_width: f64) -> Result<()> {
    if bin_width > 0.0 && bin_width.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("bin width must be positive, got {bin_width}")))
    }
}

fn region_values(vol: &Volume, comp: &Component) -> Result<Vec<f64>> {
    require_voxels(comp)?;
    comp.voxels
        .iter()
        .map(|&v| vol.data.get(v).copied().ok_or_else(|| Error::shape("component voxel outside the volume")))
        .collect()
}

fn entropy_bits<I: IntoIterator<Item = f64>>(probs: I) -> f64 {
    -probs.into_iter().filter(|&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>()
}

pub fn extract_first_order(vol: &Volume, comp: &Component, bin_width: f64) -> Result<FeatureVector> {
    check_bin_width(bin_width)?;
    let x = region_values(vol, comp)?;
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let (skew, kurt) = if m2 > 0.0 { (m3 / m2.powf(1.5), m4 / (m2 * m2)) } else { (0.0, 0.0) };
    let mut hist: BTreeMap<i64, usize> = BTreeMap::new();
    for v in &x {
        *hist.entry((v / bin_width).floor() as i64).or_default() += 1;
    }
    let entropy = entropy_bits(hist.values().map(|&c| c as f64 / n));

    let mut fv = FeatureVector::default();
    let f = FeatureFamily::FirstOrder;
    fv.push("firstorder_mean", f, mean)?;
    fv.push("firstorder_std", f, m2.sqrt())?;
    fv.push("firstorder_skewness", f, skew)?;
    fv.push("firstorder_kurtosis", f, kurt)?;
    fv.push("firstorder_min", f, x.iter().cloned().fold(f64::INFINITY, f64::min))?;
    fv.push("firstorder_max", f, x.iter().cloned().fold(f64::NEG_INFINITY, f64::max))?;
    fv.push("firstorder_energy", f, x.iter().map(|v| v * v).sum())?;
    fv.push("firstorder_entropy", f, entropy)?;
    Ok(fv)
}

/// 0-based gray level of every grid voxel in the component (others `None`)
/// and the number of levels.
fn discretize(vol: &Volume, comp: &Component, bin_width: f64) -> Result<(Vec<Option<usize>>, usize)> {
    let vals = region_values(vol, comp)?;
    let lo = vals.iter().map(|v| (v / bin_width).floor() as i64).min().expect("non-empty");
    let mut levels = vec![None; vol.grid.len()];
    let mut max = 0;
    for (&idx, v) in comp.voxels.iter().zip(&vals) {
        let l = ((v / bin_width).floor() as i64 - lo) as usize;
        max = max.max(l);
        levels[idx] = Some(l);
    }
    Ok((levels, max + 1))
}

/// Normalized symmetric co-occurrence table for one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Glcm {
    pub levels: usize,
    /// Row-major `levels x levels` probabilities.
    pub p: Vec<f64>,
}

impl Glcm {
    fn features(&self) -> (f64, f64, f64) {
        let ng = self.levels;
        let entropy = entropy_bits(self.p.iter().copied());
        let (mut contrast, mut mu, mut sij) = (0.0, 0.0, 0.0);
        for i in 0..ng {
            for j in 0..ng {
                let p = self.p[i * ng + j];
                let (a, b) = ((i + 1) as f64, (j + 1) as f64);
                contrast += (a - b).powi(2) * p;
                mu += a * p;
                sij += a * b * p;
            }
        }
        // the table is symmetric, so the marginals coincide
        let var: f64 = (0..ng)
            .map(|i| {
                let pi: f64 = self.p[i * ng..(i + 1) * ng].iter().sum();
                ((i + 1) as f64 - mu).powi(2) * pi
            })
            .sum();
        let correlation = if var > 1e-15 { (sij - mu * mu) / var } else { 1.0 };
        (entropy, contrast, correlation)
    }
}

fn glcm_from_levels(grid: &Grid, levels: &[Option<usize>], ng: usize, voxels: &[usize], dir: [i64; 3]) -> Option<Glcm> {
    let mut counts = vec![0.0; ng * ng];
    let mut total = 0.0;
    for &v in voxels {
        let Some(a) = levels[v] else { continue };
        if let Some(b) = grid.offset(grid.coords(v), dir).and_then(|n| levels[n]) {
            counts[a * ng + b] += 1.0;
            counts[b * ng + a] += 1.0;
            total += 2.0;
        }
    }
    (total > 0.0).then(|| Glcm { levels: ng, p: counts.into_iter().map(|c| c / total).collect() })
}

/// Co-occurrence table along `dir`; `None` when no voxel pair exists.
pub fn glcm(vol: &Volume, comp: &Component, bin_width: f64, dir: [i64; 3]) -> Result<Option<Glcm>> {
    check_bin_width(bin_width)?;
    let (levels, ng) = discretize(vol, comp, bin_width)?;
    Ok(glcm_from_levels(&vol.grid, &levels, ng, &comp.voxels, dir))
}

pub fn extract_texture(vol: &Volume, comp: &Component, bin_width: f64) -> Result<FeatureVector> {
    check_bin_width(bin_width)?;
    if comp.voxels.len() < 2 {
        return Err(Error::invalid("texture is undefined for a single-voxel region"));
    }
    let (levels, ng) = discretize(vol, comp, bin_width)?;
    let grid = &vol.grid;
    let tables: Vec<Glcm> = GLCM_DIRECTIONS
        .iter()
        .filter_map(|&d| glcm_from_levels(grid, &levels, ng, &comp.voxels, d))
        .collect();
    if tables.is_empty() {
        return Err(Error::invalid("region has no neighboring voxel pairs"));
    }
    let nd = tables.len() as f64;
    let (mut je, mut con, mut cor) = (0.0, 0.0, 0.0);
    for t in &tables {
        let (a, b, c) = t.features();
        je += a / nd;
        con += b / nd;
        cor += c / nd;
    }

    // size zones: 26-connected runs of equal gray level
    let offsets = Connectivity::TwentySix.offsets();
    let mut seen = vec![false; grid.len()];
    let mut zones: Vec<(usize, usize)> = Vec::new();
    let mut stack = Vec::new();
    for &start in &comp.voxels {
        if seen[start] {
            continue;
        }
        let level = levels[start].expect("component voxel");
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        while let Some(v) = stack.pop() {
            size += 1;
            let c = grid.coords(v);
            for d in &offsets {
                if let Some(n) = grid.offset(c, *d) {
                    if !seen[n] && levels[n] == Some(level) {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        zones.push((level, size));
    }
    let nz = zones.len() as f64;
    let mut by_level: BTreeMap<usize, f64> = BTreeMap::new();
    let mut by_size: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &(l, s) in &zones {
        *by_level.entry(l).or_default() += 1.0;
        *by_size.entry(s).or_default() += 1.0;
        *cells.entry((l, s)).or_default() += 1.0;
    }
    let gln = by_level.values().map(|c| c * c).sum::<f64>() / nz;
    let szn = by_size.values().map(|c| c * c).sum::<f64>() / nz;
    let ze = entropy_bits(cells.values().map(|c| c / nz));

    let mut fv = FeatureVector::default();
    let f = FeatureFamily::Texture;
    fv.push("glcm_joint_entropy", f, je)?;
    fv.push("glcm_contrast", f, con)?;
    fv.push("glcm_correlation", f, cor)?;
    fv.push("glszm_gray_level_non_uniformity", f, gln)?;
    fv.push("glszm_size_zone_non_uniformity", f, szn)?;
    fv.push("glszm_zone_entropy", f, ze)?;
    Ok(fv)
}

/// Shape, first-order and texture features in that order.
pub fn extract_all(vol: &Volume, comp: &Component, bin_width: f64) -> Result<FeatureVector> {
    let mut fv = extract_shape(comp, &vol.grid)?;
    fv.extend(extract_first_order(vol, comp, bin_width)?);
    fv.extend(extract_texture(vol, comp, bin_width)?);
    Ok(fv)
}

/// One row per patient, `patient_id` first; every row must carry the same
/// feature names in the same order.
pub fn write_feature_csv<W: Write>(w: W, rows: &[(String, FeatureVector)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let Some((_, first)) = rows.first() else {
        return Err(Error::invalid("no feature rows to write"));
    };
    let names = first.names();
    let mut header = vec!["patient_id"];
    header.extend(names.iter().copied());
    out.write_record(&header)?;
    for (id, fv) in rows {
        if fv.names() != names {
            return Err(Error::invalid(format!("patient {id} has a different feature layout")));
        }
        let mut rec = vec![id.clone()];
        rec.extend(fv.values().iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{connected_components, Mask};

    fn cube(n: usize, pad: usize) -> (Volume, Component) {
        let d = n + 2 * pad;
        let g = Grid::new([d, d, d], [1.0; 3]).unwrap();
        let mut m = Mask::empty(g);
        for x in pad..pad + n {
            for y in pad..pad + n {
                for z in pad..pad + n {
                    m.set(x, y, z, true);
                }
            }
        }
        let comp = connected_components(&m, Connectivity::TwentySix).remove(0);
        (Volume::filled(g, 40.0), comp)
    }

    #[test]
    fn cube_shape_golden_values() {
        let (vol, comp) = cube(10, 1);
        let fv = extract_shape(&comp, &vol.grid).unwrap();
        assert_eq!(fv.get("shape_volume_mm3"), Some(1000.0));
        assert_eq!(fv.get("shape_surface_area_mm2"), Some(600.0));
        let sph = fv.get("shape_sphericity").unwrap();
        assert!((sph - 0.8060).abs() < 1e-3, "{sph}");
        assert!((fv.get("shape_elongation").unwrap() - 1.0).abs() < 1e-9);
        assert!((fv.get("shape_flatness").unwrap() - 1.0).abs() < 1e-9);
        assert!((fv.get("shape_max_3d_diameter_mm").unwrap() - 243f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rod_diameter() {
        let g = Grid::new([1, 1, 10], [1.0; 3]).unwrap();
        let comp = Component { label: 1, voxels: (0..10).collect(), volume_mm3: 10.0, mean_uncertainty: None };
        let fv = extract_shape(&comp, &g).unwrap();
        assert_eq!(fv.get("shape_max_3d_diameter_mm"), Some(9.0));
        assert_eq!(fv.get("shape_elongation"), Some(0.0));
    }

    #[test]
    fn first_order_examples() {
        let (vol, comp) = cube(3, 0);
        let fv = extract_first_order(&vol, &comp, 10.0).unwrap();
        assert_eq!(fv.get("firstorder_mean"), Some(40.0));
        assert_eq!(fv.get("firstorder_std"), Some(0.0));
        assert_eq!(fv.get("firstorder_entropy"), Some(0.0));

        let g = Grid::new([1, 1, 4], [1.0; 3]).unwrap();
        let comp = Component { label: 1, voxels: (0..4).collect(), volume_mm3: 4.0, mean_uncertainty: None };
        let vol = Volume::new(g, vec![0.0, 10.0, 20.0, 30.0]).unwrap();
        let fv = extract_first_order(&vol, &comp, 10.0).unwrap();
        assert!((fv.get("firstorder_entropy").unwrap() - 2.0).abs() < 1e-15);
        let vol = Volume::new(g, vec![5.0, 5.0, 25.0, 25.0]).unwrap();
        let fv = extract_first_order(&vol, &comp, 10.0).unwrap();
        assert!((fv.get("firstorder_entropy").unwrap() - 1.0).abs() < 1e-15);
        assert!(extract_first_order(&vol, &comp, 0.0).is_err());
    }

    #[test]
    fn constant_region_texture() {
        let (vol, comp) = cube(4, 0);
        let fv = extract_texture(&vol, &comp, 10.0).unwrap();
        assert_eq!(fv.get("glcm_contrast"), Some(0.0));
        assert_eq!(fv.get("glcm_joint_entropy"), Some(0.0));
        assert_eq!(fv.get("glszm_gray_level_non_uniformity"), Some(1.0));
        assert_eq!(fv.get("glszm_size_zone_non_uniformity"), Some(1.0));
    }

    #[test]
    fn single_voxel_texture_is_an_error() {
        let g = Grid::new([2, 2, 2], [1.0; 3]).unwrap();
        let comp = Component { label: 1, voxels: vec![3], volume_mm3: 1.0, mean_uncertainty: None };
        assert!(extract_texture(&Volume::filled(g, 1.0), &comp, 10.0).is_err());
        assert!(extract_shape(&comp, &g).is_ok());
    }

    #[test]
    fn csv_layout() {
        let (vol, comp) = cube(3, 1);
        let fv = extract_all(&vol, &comp, 10.0).unwrap();
        assert_eq!(fv.len(), 20);
        let mut buf = Vec::new();
        write_feature_csv(&mut buf, &[("p1".into(), fv.clone()), ("p2".into(), fv)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("patient_id,shape_volume_mm3,"));
    }
}
