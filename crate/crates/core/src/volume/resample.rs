//! Resampling to a 1 mm isotropic grid. Voxel centers are aligned: output
//! voxel `o` sits at `o + 0.5` mm, which is input index `(o + 0.5)/s - 0.5`
//! for spacing `s`; positions beyond the outermost centers clamp.

use super::{Grid, Mask, Volume};
use crate::error::{Error, Result};

fn target_grid(grid: &Grid) -> Result<Grid> {
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let extent = grid.dims[a] as f64 * grid.spacing[a];
        // guard against 3 * 0.1 * 10 style roundoff
        dims[a] = (extent - 1e-9).ceil().max(1.0) as usize;
        if !(extent > 0.0) {
            return Err(Error::degenerate("zero-extent volume"));
        }
    }
    Grid::new(dims, [1.0; 3])
}

fn source_coord(o: usize, spacing: f64, n: usize) -> f64 {
    ((o as f64 + 0.5) / spacing - 0.5).clamp(0.0, (n - 1) as f64)
}

pub fn resample_volume(vol: &Volume) -> Result<Volume> {
    let g = &vol.grid;
    let out = target_grid(g)?;
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..out.dims[a])
            .map(|o| {
                let c = source_coord(o, g.spacing[a], g.dims[a]);
                let lo = c.floor() as usize;
                let hi = (lo + 1).min(g.dims[a] - 1);
                (lo, hi, c - lo as f64)
            })
            .collect()
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let mut data = Vec::with_capacity(out.len());
    for &(x0, x1, fx) in &ax {
        for &(y0, y1, fy) in &ay {
            for &(z0, z1, fz) in &az {
                let lerp_z = |x: usize, y: usize| {
                    let a = vol.at(x, y, z0);
                    if fz == 0.0 { a } else { a + fz * (vol.at(x, y, z1) - a) }
                };
                let lerp_yz = |x: usize| {
                    let a = lerp_z(x, y0);
                    if fy == 0.0 { a } else { a + fy * (lerp_z(x, y1) - a) }
                };
                let a = lerp_yz(x0);
                data.push(if fx == 0.0 { a } else { a + fx * (lerp_yz(x1) - a) });
            }
        }
    }
    Volume::new(out, data)
}

pub fn resample_mask(mask: &Mask) -> Result<Mask> {
    let g = &mask.grid;
    let out = target_grid(g)?;
    let axis = |a: usize| -> Vec<usize> {
        (0..out.dims[a])
            .map(|o| (source_coord(o, g.spacing[a], g.dims[a]) + 0.5).floor() as usize)
            .map(|i| i.min(g.dims[a] - 1))
            .collect()
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let mut data = Vec::with_capacity(out.len());
    for &x in &ax {
        for &y in &ay {
            for &z in &az {
                data.push(mask.data[g.index(x, y, z)]);
            }
        }
    }
    Mask::new(out, data)
}

/// Resample an image and its mask together; the grids must agree.
pub fn resample_isotropic(vol: &Volume, mask: &Mask) -> Result<(Volume, Mask)> {
    if vol.grid != mask.grid {
        return Err(Error::shape("mask grid differs from volume grid"));
    }
    Ok((resample_volume(vol)?, resample_mask(mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_at_one_millimetre() {
        let g = Grid::new([3, 4, 2], [1.0; 3]).unwrap();
        let vol = Volume::new(g, (0..24).map(|i| f64::from(i).sin() * 100.0).collect()).unwrap();
        let mask = Mask::new(g, (0..24).map(|i| i % 5 == 1).collect()).unwrap();
        let (v, m) = resample_isotropic(&vol, &mask).unwrap();
        assert_eq!(m, mask);
        for (a, b) in v.data.iter().zip(&vol.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn two_millimetre_constant_doubles() {
        let g = Grid::new([2, 3, 4], [2.0; 3]).unwrap();
        let vol = Volume::filled(g, 37.5);
        let v = resample_volume(&vol).unwrap();
        assert_eq!(v.grid.dims, [4, 6, 8]);
        assert!(v.data.iter().all(|&x| x == 37.5));
        let mut mask = Mask::empty(g);
        mask.set(1, 2, 3, true);
        let m = resample_mask(&mask).unwrap();
        assert_eq!(m.count(), 8);
        assert!(m.data[m.grid.index(2, 4, 6)] && m.data[m.grid.index(3, 5, 7)]);
    }

    #[test]
    fn ramp_is_reproduced_away_from_borders() {
        let sp = [2.5, 0.7, 1.6];
        let g = Grid::new([8, 20, 10], sp).unwrap();
        let ramp = |p: [f64; 3]| 3.0 * p[0] - 1.25 * p[1] + 0.5 * p[2] + 7.0;
        let mut data = Vec::new();
        for x in 0..8 {
            for y in 0..20 {
                for z in 0..10 {
                    let p = [(x as f64 + 0.5) * sp[0], (y as f64 + 0.5) * sp[1], (z as f64 + 0.5) * sp[2]];
                    data.push(ramp(p));
                }
            }
        }
        let v = resample_volume(&Volume::new(g, data).unwrap()).unwrap();
        assert_eq!(v.grid.dims, [20, 14, 16]);
        let mut checked = 0;
        for i in 0..v.grid.len() {
            let c = v.grid.coords(i);
            let p = [c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5];
            // inside the hull of input voxel centers
            let inside = (0..3).all(|a| p[a] >= 0.5 * sp[a] && p[a] <= (g.dims[a] as f64 - 0.5) * sp[a]);
            if inside {
                assert!((v.data[i] - ramp(p)).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }
}
