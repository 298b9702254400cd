//! Overlap and surface-distance metrics for binary masks.

use crate::distance::distance_mm;
use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, Vec3};

/// `2|A∩B| / (|A|+|B|)`; two empty masks agree perfectly (1.0).
pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    if a.grid() != b.grid() {
        return Err(Error::GridMismatch);
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += (x != 0) as usize;
        nb += (y != 0) as usize;
        both += (x != 0 && y != 0) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Foreground voxels with at least one face neighbour in the background.
/// The outside of the volume counts as background.
pub fn surface_voxels(lab: &LabelVolume) -> Vec<usize> {
    let g = lab.grid();
    let [nx, ny, nz] = g.dims();
    (0..g.len())
        .filter(|&idx| {
            if !lab.is_set(idx) {
                return false;
            }
            let [i, j, k] = g.coords(idx);
            if i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1 {
                return true;
            }
            lab.get(i - 1, j, k) == 0
                || lab.get(i + 1, j, k) == 0
                || lab.get(i, j - 1, k) == 0
                || lab.get(i, j + 1, k) == 0
                || lab.get(i, j, k - 1) == 0
                || lab.get(i, j, k + 1) == 0
        })
        .collect()
}

/// World coordinates (mm) of the surface voxel centres.
pub fn surface_points(lab: &LabelVolume) -> Vec<Vec3> {
    surface_voxels(lab)
        .into_iter()
        .map(|idx| lab.grid().index_to_world(idx))
        .collect()
}

fn directed_mean_distance(grid: &Grid, from: &[usize], to: &[usize]) -> f64 {
    let mut features = vec![false; grid.len()];
    to.iter().for_each(|&i| features[i] = true);
    let dist = distance_mm(grid, &features);
    from.iter().map(|&i| dist[i]).sum::<f64>() / from.len() as f64
}

/// Symmetric mean surface distance in mm: the mean distance from each
/// surface voxel of one mask to the nearest surface voxel of the other,
/// averaged over both directions.
pub fn apd(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    if a.grid() != b.grid() {
        return Err(Error::GridMismatch);
    }
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::EmptyMask);
    }
    let grid = a.grid();
    let ab = directed_mean_distance(grid, &sa, &sb);
    let ba = directed_mean_distance(grid, &sb, &sa);
    Ok(0.5 * (ab + ba))
}
