//! Groupwise registration of an atlas set to a target image by minimizing
//! the voxelwise variance of the group.
//!
//! The target's transform is pinned to the identity, so the common frame is
//! the target frame. For atlas transforms `T_i` the cost at target voxel `x`
//! is
//!
//! ```text
//! (I(x) - m(x))^2 + Σ_i (A_i(T_i x) - m(x))^2,   m = (I + Σ_i A_i∘T_i) / (N + 1)
//! ```
//!
//! averaged over voxels. Its derivative with respect to `A_i(T_i x)` is
//! `2 (A_i(T_i x) - m(x))`; the mean terms cancel.

mod optimize;
pub mod transform;

pub use optimize::{groupwise_register, PyramidLevel, RegParams, Registration};
pub use transform::{AffineTransform, AtlasTransform, BSplineTransform, GroupTransform, Mat3, IDENTITY3};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, Vec3, Volume};
use transform::mat_t_vec;

/// Voxelwise arithmetic mean of images on a common grid.
pub fn group_mean(images: &[Volume]) -> Result<Volume> {
    let first = images.first().ok_or(Error::NoAtlases)?;
    let grid = *first.grid();
    if images.iter().any(|v| *v.grid() != grid) {
        return Err(Error::GridMismatch);
    }
    let n = images.len() as f64;
    let data = (0..grid.len())
        .map(|idx| images.iter().map(|v| v.data()[idx]).sum::<f64>() / n)
        .collect();
    Volume::new(grid, data)
}

/// Resample an atlas image onto `grid` through its transform.
pub fn warp_image(atlas: &Volume, t: &AtlasTransform, grid: &Grid) -> Volume {
    atlas.resample(grid, |p| t.apply(p))
}

/// Nearest-neighbour propagation of an atlas label into target space.
pub fn propagate_label(atlas_label: &LabelVolume, t: &AtlasTransform, target_grid: &Grid) -> LabelVolume {
    atlas_label.resample(target_grid, |p| t.apply(p))
}

/// Group variance cost over every voxel of the target grid.
pub fn groupwise_cost(target: &Volume, atlases: &[Volume], gt: &GroupTransform) -> f64 {
    let all: Vec<usize> = (0..target.grid().len()).collect();
    sample_cost(target, atlases, gt, &all)
}

/// Group variance cost averaged over the given target voxel indices.
pub fn sample_cost(target: &Volume, atlases: &[Volume], gt: &GroupTransform, samples: &[usize]) -> f64 {
    assert_eq!(atlases.len(), gt.n_atlases());
    let grid = target.grid();
    let warped: Vec<Vec<f64>> = atlases
        .par_iter()
        .zip(gt.atlases())
        .map(|(a, t)| {
            samples
                .iter()
                .map(|&s| a.trilinear_sample(a.grid().world_to_voxel(t.apply(grid.index_to_world(s)))))
                .collect()
        })
        .collect();
    let total: f64 = samples
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let v0 = target.data()[s];
            let n = (atlases.len() + 1) as f64;
            let m = (v0 + warped.iter().map(|w| w[j]).sum::<f64>()) / n;
            (v0 - m).powi(2) + warped.iter().map(|w| (w[j] - m).powi(2)).sum::<f64>()
        })
        .sum();
    total / samples.len().max(1) as f64
}

/// Gradient of the sampled cost with respect to one atlas transform.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasGradient {
    /// Row-major derivative with respect to the affine matrix.
    pub matrix: Mat3,
    pub translation: Vec3,
    /// Per control point, present when the transform has a b-spline part
    /// and it was requested.
    pub bspline: Option<Vec<Vec3>>,
}

struct Warped {
    value: f64,
    grad_mm: Vec3,
    pre_affine: Vec3,
}

/// Sampled cost and its analytic gradient with respect to every atlas
/// transform. Derivatives of the trilinear interpolant are exact, so the
/// result agrees with finite differences away from cell faces.
pub fn cost_and_gradient(
    target: &Volume,
    atlases: &[Volume],
    gt: &GroupTransform,
    samples: &[usize],
    with_bspline: bool,
) -> (f64, Vec<AtlasGradient>) {
    assert_eq!(atlases.len(), gt.n_atlases());
    let grid = target.grid();
    let points: Vec<Vec3> = samples.iter().map(|&s| grid.index_to_world(s)).collect();

    let warped: Vec<Vec<Warped>> = atlases
        .par_iter()
        .zip(gt.atlases())
        .map(|(a, t)| {
            let sp = a.grid().spacing();
            points
                .iter()
                .map(|&x| {
                    let y = match &t.bspline {
                        Some(b) => b.apply(x),
                        None => x,
                    };
                    let z = t.affine.apply(y);
                    let (value, g) = a.sample_with_gradient(a.grid().world_to_voxel(z));
                    Warped {
                        value,
                        grad_mm: [g[0] / sp[0], g[1] / sp[1], g[2] / sp[2]],
                        pre_affine: y,
                    }
                })
                .collect()
        })
        .collect();

    let n = (atlases.len() + 1) as f64;
    let mut cost = 0.0;
    let means: Vec<f64> = samples
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let v0 = target.data()[s];
            let m = (v0 + warped.iter().map(|w| w[j].value).sum::<f64>()) / n;
            cost += (v0 - m).powi(2) + warped.iter().map(|w| (w[j].value - m).powi(2)).sum::<f64>();
            m
        })
        .collect();
    let scale = 2.0 / samples.len().max(1) as f64;

    let grads = warped
        .par_iter()
        .zip(gt.atlases())
        .map(|(w, t)| {
            let mut gm = [[0.0; 3]; 3];
            let mut gtr = [0.0; 3];
            let mut gb = match (&t.bspline, with_bspline) {
                (Some(b), true) => Some(vec![[0.0; 3]; b.coefficients().len()]),
                _ => None,
            };
            let c = t.affine.center;
            for (j, wj) in w.iter().enumerate() {
                let r = scale * (wj.value - means[j]);
                if r == 0.0 {
                    continue;
                }
                let g = [r * wj.grad_mm[0], r * wj.grad_mm[1], r * wj.grad_mm[2]];
                let d = [
                    wj.pre_affine[0] - c[0],
                    wj.pre_affine[1] - c[1],
                    wj.pre_affine[2] - c[2],
                ];
                for a in 0..3 {
                    gtr[a] += g[a];
                    for b in 0..3 {
                        gm[a][b] += g[a] * d[b];
                    }
                }
                if let (Some(acc), Some(b)) = (gb.as_mut(), &t.bspline) {
                    let h = mat_t_vec(&t.affine.matrix, g);
                    let support = b.support(points[j]);
                    b.for_each_weight(&support, |k, wk| {
                        acc[k][0] += wk * h[0];
                        acc[k][1] += wk * h[1];
                        acc[k][2] += wk * h[2];
                    });
                }
            }
            AtlasGradient {
                matrix: gm,
                translation: gtr,
                bspline: gb,
            }
        })
        .collect();

    (cost / samples.len().max(1) as f64, grads)
}

/// Mean displacement `T(x) - x` over the voxels of `grid` selected by
/// `mask` (all voxels when `None`).
pub fn mean_displacement(t: &AtlasTransform, grid: &Grid, mask: Option<&LabelVolume>) -> Vec3 {
    let mut acc = [0.0; 3];
    let mut count = 0usize;
    for idx in 0..grid.len() {
        if mask.is_some_and(|m| !m.is_set(idx)) {
            continue;
        }
        let x = grid.index_to_world(idx);
        let y = t.apply(x);
        for a in 0..3 {
            acc[a] += y[a] - x[a];
        }
        count += 1;
    }
    acc.map(|v| v / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Volume {
        let g = Grid::new(dims, [1.0, 1.2, 0.9], [0.5, -1.0, 2.0]).unwrap();
        Volume::new(g, (0..g.len()).map(|_| rng.random_range(0.0..100.0)).collect()).unwrap()
    }

    #[test]
    fn group_mean_examples() {
        let g = Grid::with_dims([2, 2, 2]).unwrap();
        let a = Volume::filled(g, 3.0);
        let b = Volume::filled(g, 7.0);
        assert!(group_mean(&[a.clone(), b]).unwrap().data().iter().all(|&v| v == 5.0));
        assert_eq!(group_mean(&[a.clone(), a.clone()]).unwrap(), a);
        let other = Volume::filled(Grid::with_dims([2, 2, 1]).unwrap(), 0.0);
        assert!(matches!(group_mean(&[a, other]), Err(Error::GridMismatch)));
    }

    #[test]
    fn group_mean_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vols: Vec<Volume> = (0..3).map(|_| random_volume(&mut rng, [2, 2, 2])).collect();
        let m = group_mean(&vols).unwrap();
        for idx in 0..8 {
            let direct = (vols[0].data()[idx] + vols[1].data()[idx] + vols[2].data()[idx]) / 3.0;
            assert_eq!(m.data()[idx], direct);
        }
    }

    #[test]
    fn cost_of_identical_images_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume(&mut rng, [5, 4, 3]);
        let gt = GroupTransform::identity(3, v.grid().center());
        // only rounding in the mean separates this from zero
        assert!(groupwise_cost(&v, &[v.clone(), v.clone(), v.clone()], &gt) < 1e-20);
    }

    #[test]
    fn two_constant_images() {
        let g = Grid::with_dims([3, 3, 3]).unwrap();
        let (a, b) = (2.0, 9.0);
        let gt = GroupTransform::identity(1, g.center());
        let c = groupwise_cost(&Volume::filled(g, a), &[Volume::filled(g, b)], &gt);
        let expected = 2.0 * ((a - b) / 2.0f64).powi(2);
        assert_eq!(c, expected);
    }

    #[test]
    fn cost_matches_voxel_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target = random_volume(&mut rng, [4, 4, 4]);
        let atlas = random_volume(&mut rng, [4, 4, 4]);
        let aff = AffineTransform::new(
            [[1.02, 0.01, 0.0], [-0.02, 0.97, 0.03], [0.0, 0.01, 1.01]],
            [0.3, -0.2, 0.4],
            target.grid().center(),
        )
        .unwrap();
        let gt = GroupTransform::new(vec![AtlasTransform::from_affine(aff)]);
        let mut oracle = 0.0;
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let x = target.grid().voxel_to_world([i as f64, j as f64, k as f64]);
                    let v0 = target.get(i, j, k);
                    let v1 = atlas.trilinear_sample(atlas.grid().world_to_voxel(aff.apply(x)));
                    let m = 0.5 * (v0 + v1);
                    oracle += (v0 - m) * (v0 - m) + (v1 - m) * (v1 - m);
                }
            }
        }
        oracle /= 64.0;
        let c = groupwise_cost(&target, &[atlas], &gt);
        assert!((c - oracle).abs() <= 1e-9 * oracle.max(1.0));
    }

    #[test]
    fn cost_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = random_volume(&mut rng, [4, 3, 3]);
        let a = random_volume(&mut rng, [4, 3, 3]);
        let b = random_volume(&mut rng, [4, 3, 3]);
        let ta = AtlasTransform::from_affine(AffineTransform::translation([0.3, 0.1, 0.0]));
        let tb = AtlasTransform::from_affine(AffineTransform::translation([-0.2, 0.4, 0.1]));
        let c1 = groupwise_cost(
            &target,
            &[a.clone(), b.clone()],
            &GroupTransform::new(vec![ta.clone(), tb.clone()]),
        );
        let c2 = groupwise_cost(&target, &[b, a], &GroupTransform::new(vec![tb, ta]));
        assert!((c1 - c2).abs() <= 1e-12 * c1);
    }

    #[test]
    fn propagate_label_identity_and_shift() {
        let g = Grid::with_dims([6, 5, 4]).unwrap();
        let lab = LabelVolume::from_fn(g, |[i, j, k]| (i + 2 * j + k) % 3 == 0);
        let id = AtlasTransform::identity(g.center());
        assert_eq!(propagate_label(&lab, &id, &g), lab);
        let shift = AtlasTransform::from_affine(AffineTransform::translation([1.0, 0.0, 0.0]));
        let moved = propagate_label(&lab, &shift, &g);
        for k in 0..4 {
            for j in 0..5 {
                for i in 0..5 {
                    assert_eq!(moved.get(i, j, k), lab.get(i + 1, j, k));
                }
            }
        }
        let empty = LabelVolume::empty(g);
        assert_eq!(propagate_label(&empty, &shift, &g).count(), 0);
    }
}
