//! Exact Euclidean distance transform on anisotropic grids
//! (separable lower-envelope-of-parabolas algorithm).

use rayon::prelude::*;

use crate::volume::Grid;

/// Squared distance in mm² from every voxel centre to the nearest voxel
/// centre flagged in `features`. All entries are `+inf` if nothing is flagged.
pub fn squared_distance_mm(grid: &Grid, features: &[bool]) -> Vec<f64> {
    assert_eq!(features.len(), grid.len());
    let mut d: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    for axis in 0..3 {
        transform_axis(grid, &mut d, axis);
    }
    d
}

/// Euclidean distance in mm to the nearest flagged voxel.
pub fn distance_mm(grid: &Grid, features: &[bool]) -> Vec<f64> {
    let mut d = squared_distance_mm(grid, features);
    d.iter_mut().for_each(|v| *v = v.sqrt());
    d
}

fn transform_axis(grid: &Grid, data: &mut [f64], axis: usize) {
    let dims = grid.dims();
    let n = dims[axis];
    if n == 1 {
        return;
    }
    let spacing = grid.spacing()[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    // Starting index of every line along `axis`.
    let starts: Vec<usize> = (0..grid.len()).filter(|&idx| grid.coords(idx)[axis] == 0).collect();
    let src: &[f64] = data;
    let lines: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let f: Vec<f64> = (0..n).map(|t| src[s + t * stride]).collect();
            lower_envelope(&f, spacing)
        })
        .collect();
    for (&s, line) in starts.iter().zip(&lines) {
        for (t, v) in line.iter().enumerate() {
            data[s + t * stride] = *v;
        }
    }
}

/// 1D squared distance transform: `out[i] = min_q ((i - q) * h)^2 + f[q]`.
fn lower_envelope(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return vec![f64::INFINITY; n];
    }
    let pos = |q: usize| q as f64 * h;
    // v[..=k]: parabola sites of the envelope; z[i]..z[i+1]: range where v[i] wins.
    let mut v = vec![0usize; sites.len()];
    let mut z = vec![0.0f64; sites.len() + 1];
    let mut k = 0;
    v[0] = sites[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in &sites[1..] {
        let mut x;
        loop {
            let p = v[k];
            x = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if x <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = x;
        z[k + 1] = f64::INFINITY;
    }
    let mut out = vec![0.0; n];
    k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = pos(i);
        while z[k + 1] < x {
            k += 1;
        }
        let d = (i as f64 - v[k] as f64) * h;
        *o = d * d + f[v[k]];
    }
    out
}
