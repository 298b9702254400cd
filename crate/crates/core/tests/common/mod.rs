//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use atlasseg::{Grid, LabelVolume, Vec3, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random blob mask: union of a few random boxes, never empty.
pub fn random_mask(rng: &mut ChaCha8Rng, grid: &Grid) -> LabelVolume {
    let d = grid.dims();
    let boxes: Vec<([usize; 3], [usize; 3])> = (0..rng.random_range(1..4))
        .map(|_| {
            let lo = [0, 1, 2].map(|a| rng.random_range(0..d[a]));
            let hi = [0, 1, 2].map(|a| rng.random_range(lo[a] + 1..=d[a]));
            (lo, hi)
        })
        .collect();
    LabelVolume::from_fn(*grid, |v| {
        boxes
            .iter()
            .any(|(lo, hi)| (0..3).all(|a| v[a] >= lo[a] && v[a] < hi[a]))
    })
}

pub fn random_grid(rng: &mut ChaCha8Rng, max_dim: usize) -> Grid {
    let dims = [0; 3].map(|_| rng.random_range(2..=max_dim));
    let spacing = [0; 3].map(|_| rng.random_range(0.5..2.0));
    Grid::new(dims, spacing, [0.0; 3]).unwrap()
}

pub fn oracle_dice(a: &LabelVolume, b: &LabelVolume) -> f64 {
    let ca = a.data().iter().filter(|&&v| v == 1).count();
    let cb = b.data().iter().filter(|&&v| v == 1).count();
    let both = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(&x, &y)| x == 1 && y == 1)
        .count();
    if ca + cb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (ca + cb) as f64
    }
}

/// Foreground voxel centres (mm) with a face neighbour outside the mask or
/// outside the volume.
pub fn oracle_surface(m: &LabelVolume) -> Vec<Vec3> {
    let g = m.grid();
    let d = g.dims().map(|x| x as i64);
    let inside = |i: i64, j: i64, k: i64| {
        i >= 0 && j >= 0 && k >= 0 && i < d[0] && j < d[1] && k < d[2] && m.get(i as usize, j as usize, k as usize) == 1
    };
    let mut out = Vec::new();
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                if !inside(i, j, k) {
                    continue;
                }
                let offs = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
                if offs.iter().any(|&(a, b, c)| !inside(i + a, j + b, k + c)) {
                    let s = g.spacing();
                    let o = g.origin();
                    out.push([o[0] + i as f64 * s[0], o[1] + j as f64 * s[1], o[2] + k as f64 * s[2]]);
                }
            }
        }
    }
    out
}

fn directed(from: &[Vec3], to: &[Vec3]) -> f64 {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / from.len() as f64
}

/// Symmetric mean surface distance by exhaustive pairwise search.
pub fn oracle_apd(a: &LabelVolume, b: &LabelVolume) -> f64 {
    let (sa, sb) = (oracle_surface(a), oracle_surface(b));
    0.5 * (directed(&sa, &sb) + directed(&sb, &sa))
}

pub fn ball(grid: &Grid, center: Vec3, radius: f64) -> LabelVolume {
    LabelVolume::from_fn(*grid, |[i, j, k]| {
        let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
        (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>() <= radius * radius
    })
}

pub fn scaled(lab: &LabelVolume, inside: f64, outside: f64) -> Volume {
    lab.to_volume().map(|v| if v > 0.5 { inside } else { outside }).unwrap()
}
