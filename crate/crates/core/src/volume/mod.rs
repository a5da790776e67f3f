//! Volumetric images, masks, connected components, node selection and
//! radiomics-style features.
//!
//! Grids are stored x-major: voxel `(x, y, z)` lives at `(x*ny + y)*nz + z`.

mod components;
mod features;
mod resample;

pub use components::{connected_components, select_primary_node, Component, Connectivity, Selection, SelectionRule};
pub use features::{
    extract_all, extract_first_order, extract_shape, extract_texture, glcm, write_feature_csv, Feature,
    FeatureFamily, FeatureVector, Glcm, DEFAULT_BIN_WIDTH, GLCM_DIRECTIONS,
};
pub use resample::{resample_isotropic, resample_mask, resample_volume};

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{ensure_finite, Error, Result};

/// Default relative volume gap for the largest-node rule.
pub const DEFAULT_RHO: f64 = 0.40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("zero-extent grid {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Grid { dims, spacing })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let z = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let x = idx / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Neighbor of `c` displaced by `d`, if inside the grid.
    pub fn offset(&self, c: [usize; 3], d: [i64; 3]) -> Option<usize> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as i64 + d[a];
            if v < 0 || v >= self.dims[a] as i64 {
                return None;
            }
            out[a] = v as usize;
        }
        Some(self.index(out[0], out[1], out[2]))
    }
}

/// Intensity volume (HU).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::shape(format!("grid {:?} holds {} voxels, got {}", grid.dims, grid.len(), data.len())));
        }
        ensure_finite(&data, "volume")?;
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Volume { data: vec![value; grid.len()], grid }
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }
}

/// Binary mask on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub grid: Grid,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::shape(format!("grid {:?} holds {} voxels, got {}", grid.dims, grid.len(), data.len())));
        }
        Ok(Mask { grid, data })
    }

    pub fn empty(grid: Grid) -> Self {
        Mask { data: vec![false; grid.len()], grid }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.grid.index(x, y, z);
        self.data[i] = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    U8,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: Dtype,
    order: String,
}

const ORDER: &str = "row-major little-endian";

/// Raw payload path belonging to a sidecar `foo.json`: `foo.raw`.
pub fn raw_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("raw")
}

fn write_sidecar(path: &Path, grid: &Grid, dtype: Dtype) -> Result<()> {
    let sc = Sidecar { dims: grid.dims, spacing_mm: grid.spacing, dtype, order: ORDER.into() };
    fs::write(path, serde_json::to_vec_pretty(&sc)?)?;
    Ok(())
}

fn read_sidecar(path: &Path, want: Dtype) -> Result<(Grid, Vec<u8>)> {
    let sc: Sidecar = serde_json::from_slice(&fs::read(path)?)?;
    if sc.order != ORDER {
        return Err(Error::Format(format!("unsupported voxel order {:?}", sc.order)));
    }
    if sc.dtype != want {
        return Err(Error::Format(format!("expected dtype {want:?}, sidecar says {:?}", sc.dtype)));
    }
    let grid = Grid::new(sc.dims, sc.spacing_mm)?;
    let raw = fs::read(raw_path(path))?;
    let width = if want == Dtype::F32 { 4 } else { 1 };
    if raw.len() != grid.len() * width {
        return Err(Error::Format(format!(
            "raw file has {} bytes, grid {:?} needs {}",
            raw.len(),
            grid.dims,
            grid.len() * width
        )));
    }
    Ok((grid, raw))
}

/// Write `path` (JSON sidecar) and its `.raw` payload as `f32`.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    write_sidecar(path, &vol.grid, Dtype::F32)?;
    let bytes: Vec<u8> = vol.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(raw_path(path), bytes)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (grid, raw) = read_sidecar(path, Dtype::F32)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Volume::new(grid, data)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_sidecar(path, &mask.grid, Dtype::U8)?;
    fs::write(raw_path(path), mask.data.iter().map(|&b| u8::from(b)).collect::<Vec<_>>())?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let (grid, raw) = read_sidecar(path, Dtype::U8)?;
    if raw.iter().any(|&b| b > 1) {
        return Err(Error::Format("mask voxels must be 0 or 1".into()));
    }
    Mask::new(grid, raw.into_iter().map(|b| b == 1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let g = Grid::new([3, 4, 5], [1.0; 3]).unwrap();
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
        assert_eq!(g.index(1, 0, 0), 20);
        assert!(Grid::new([0, 1, 1], [1.0; 3]).is_err());
        assert!(Grid::new([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn io_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new([2, 3, 2], [0.5, 1.0, 2.5]).unwrap();
        let vol = Volume::new(g, (0..12).map(|i| f64::from(i) * 1.5 - 4.0).collect()).unwrap();
        let p = dir.path().join("ct.json");
        write_volume(&p, &vol).unwrap();
        assert_eq!(read_volume(&p).unwrap(), vol);
        let mask = Mask::new(g, (0..12).map(|i| i % 3 == 0).collect()).unwrap();
        let p = dir.path().join("mask.json");
        write_mask(&p, &mask).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);
        assert!(read_volume(&p).is_err());
    }
}
