//! Coarse-to-fine stochastic gradient descent on the group variance cost.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transform::{BSplineTransform, GroupTransform};
use super::{cost_and_gradient, groupwise_cost, AtlasGradient};
use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidLevel {
    /// Gaussian smoothing applied before downsampling, mm.
    pub sigma_mm: f64,
    pub factor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegParams {
    pub levels: Vec<PyramidLevel>,
    pub affine_iterations: usize,
    pub bspline_iterations: usize,
    /// Initial step of the affine stage, in voxels of the current level.
    pub affine_step: f64,
    /// Initial step of the b-spline stage, in voxels of the current level.
    pub bspline_step: f64,
    /// Ratio of the last to the first step within one stage.
    pub step_decay: f64,
    pub control_spacing_mm: f64,
    pub sample_fraction: f64,
    /// Upper bound on the voxels sampled per iteration.
    pub max_samples: usize,
    /// Set from the run-wide seed, not read from config sections.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for RegParams {
    fn default() -> Self {
        RegParams {
            levels: vec![
                PyramidLevel {
                    sigma_mm: 4.0,
                    factor: 4,
                },
                PyramidLevel {
                    sigma_mm: 2.0,
                    factor: 2,
                },
                PyramidLevel {
                    sigma_mm: 1.0,
                    factor: 1,
                },
            ],
            affine_iterations: 200,
            bspline_iterations: 300,
            affine_step: 0.5,
            bspline_step: 0.5,
            step_decay: 0.05,
            control_spacing_mm: 16.0,
            sample_fraction: 0.1,
            max_samples: 4096,
            seed: 0,
        }
    }
}

impl RegParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.levels.is_empty() {
            return bad("registration needs at least one pyramid level");
        }
        if self.levels.iter().any(|l| l.factor < 1 || !(l.sigma_mm >= 0.0)) {
            return bad("pyramid factors must be >= 1 and sigmas >= 0");
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad("sample_fraction must lie in (0, 1]");
        }
        if self.max_samples == 0 {
            return bad("max_samples must be >= 1");
        }
        if !(self.affine_step >= 0.0 && self.bspline_step >= 0.0) {
            return bad("step sizes must be >= 0");
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return bad("step_decay must lie in (0, 1]");
        }
        if !(self.control_spacing_mm > 0.0) {
            return bad("control_spacing_mm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub transform: GroupTransform,
    /// Full-resolution cost of `transform`.
    pub cost: f64,
    pub identity_cost: f64,
    /// `(level, stage, cost)` for every full-cost evaluation.
    pub checkpoints: Vec<(usize, &'static str, f64)>,
}

fn level_volume(v: &Volume, sigma_mm: f64, factor: usize) -> Volume {
    let smooth = v.gaussian_smooth(sigma_mm);
    if factor <= 1 {
        return smooth;
    }
    smooth.resample(&v.grid().downsampled(factor), |p| p)
}

fn step_schedule(initial: f64, decay: f64, iters: usize) -> impl Iterator<Item = f64> {
    let denom = iters.saturating_sub(1).max(1) as f64;
    (0..iters).map(move |k| initial * decay.powf(k as f64 / denom))
}

/// Jointly register `atlases` to `target`. The returned transform is the
/// one with the lowest full-resolution cost among the identity and the end
/// of every stage, so it never costs more than the identity.
pub fn groupwise_register(target: &Volume, atlases: &[Volume], params: &RegParams) -> Result<Registration> {
    if atlases.is_empty() {
        return Err(Error::NoAtlases);
    }
    params.validate()?;
    let grid = *target.grid();
    let center = grid.center();
    // Affine matrix entries are scaled by a typical lever arm so that a unit
    // step in any parameter moves points by a comparable distance.
    let lever = {
        let d = grid.dims();
        let s = grid.spacing();
        (0..3)
            .map(|a| 0.5 * (d[a] - 1) as f64 * s[a])
            .fold(0.0, f64::max)
            .max(1.0)
    };

    let mut gt = GroupTransform::identity(atlases.len(), center);
    let identity_cost = groupwise_cost(target, atlases, &gt);
    if !identity_cost.is_finite() {
        return Err(Error::NonFiniteCost {
            level: 0,
            stage: "identity",
        });
    }
    let mut best = (identity_cost, gt.clone());
    let mut checkpoints = vec![(0, "identity", identity_cost)];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    for (li, level) in params.levels.iter().enumerate() {
        let tgt = level_volume(target, level.sigma_mm, level.factor);
        let atl: Vec<Volume> = atlases
            .iter()
            .map(|a| level_volume(a, level.sigma_mm, level.factor))
            .collect();
        let n_vox = tgt.grid().len();
        let n_samples = ((params.sample_fraction * n_vox as f64).ceil() as usize)
            .min(params.max_samples)
            .clamp(1, n_vox);
        let voxel = tgt.grid().min_spacing();

        for stage in ["affine", "bspline"] {
            let (iters, step0) = if stage == "affine" {
                (params.affine_iterations, params.affine_step * voxel)
            } else {
                (params.bspline_iterations, params.bspline_step * voxel)
            };
            if iters == 0 {
                continue;
            }
            if stage == "bspline" {
                for t in gt.atlases_mut() {
                    if t.bspline.is_none() {
                        t.bspline = Some(BSplineTransform::zero_covering(&grid, params.control_spacing_mm)?);
                    }
                }
            }
            for step in step_schedule(step0, params.step_decay, iters) {
                let samples = index::sample(&mut rng, n_vox, n_samples).into_vec();
                let (cost, grads) = cost_and_gradient(&tgt, &atl, &gt, &samples, stage == "bspline");
                if !cost.is_finite() {
                    return Err(Error::NonFiniteCost { level: li, stage });
                }
                for (t, g) in gt.atlases_mut().iter_mut().zip(&grads) {
                    if stage == "affine" {
                        affine_step(t, g, step, lever);
                    } else {
                        bspline_step(t, g, step);
                    }
                }
            }
            let full = groupwise_cost(target, atlases, &gt);
            if !full.is_finite() {
                return Err(Error::NonFiniteCost { level: li, stage });
            }
            checkpoints.push((li, stage, full));
            if full < best.0 {
                best = (full, gt.clone());
            }
        }
    }

    Ok(Registration {
        transform: best.1,
        cost: best.0,
        identity_cost,
        checkpoints,
    })
}

/// Normalized gradient step on the 12 affine parameters.
fn affine_step(t: &mut super::AtlasTransform, g: &AtlasGradient, step: f64, lever: f64) {
    let mut scaled = [0.0; 12];
    for a in 0..3 {
        for b in 0..3 {
            scaled[3 * a + b] = g.matrix[a][b] / lever;
        }
        scaled[9 + a] = g.translation[a];
    }
    let norm = scaled.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return;
    }
    let f = step / norm;
    let previous = t.affine;
    for a in 0..3 {
        for b in 0..3 {
            t.affine.matrix[a][b] -= f * scaled[3 * a + b] / lever;
        }
        t.affine.translation[a] -= f * scaled[9 + a];
    }
    if super::transform::det(&t.affine.matrix).abs() < 1e-3 {
        t.affine = previous;
    }
}

/// Normalized gradient step on the control points: the control point with
/// the largest gradient moves by `step` mm.
fn bspline_step(t: &mut super::AtlasTransform, g: &AtlasGradient, step: f64) {
    let (Some(b), Some(grad)) = (t.bspline.as_mut(), g.bspline.as_ref()) else {
        return;
    };
    let max = grad
        .iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
        .fold(0.0, f64::max);
    if !(max > 0.0) {
        return;
    }
    let f = step / max;
    for (c, d) in b.coefficients_mut().iter_mut().zip(grad) {
        c[0] -= f * d[0];
        c[1] -= f * d[1];
        c[2] -= f * d[2];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_geometric() {
        let s: Vec<f64> = step_schedule(2.0, 0.25, 3).collect();
        assert_eq!(s[0], 2.0);
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert!((s[2] - 0.5).abs() < 1e-12);
        assert_eq!(step_schedule(1.0, 0.5, 0).count(), 0);
    }

    #[test]
    fn no_atlases_is_an_error() {
        let g = crate::volume::Grid::with_dims([4, 4, 4]).unwrap();
        assert!(matches!(
            groupwise_register(&Volume::filled(g, 1.0), &[], &RegParams::default()),
            Err(Error::NoAtlases)
        ));
    }
}
