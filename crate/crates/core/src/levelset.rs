//! Two-phase region-based (Chan-Vese) level-set refinement of a mask.
//!
//! `phi` is positive inside the object and measured in units of the
//! smallest voxel spacing `h`; derivatives are taken in mm and rescaled by
//! `h`, so a clean signed distance has unit gradient on any spacing.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::distance_mm;
use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, Vec3, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetField {
    phi: Volume,
}

impl LevelSetField {
    pub fn new(phi: Volume) -> Self {
        LevelSetField { phi }
    }

    pub fn phi(&self) -> &Volume {
        &self.phi
    }

    pub fn grid(&self) -> &Grid {
        self.phi.grid()
    }

    /// Voxels with `phi > 0`.
    pub fn mask(&self) -> LabelVolume {
        LabelVolume::from_bools(*self.grid(), self.phi.data().iter().map(|&p| p > 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvParams {
    /// Surface weight; `None` means `0.2 * (intensity range)^2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    pub nu: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Heaviside width in units of `h`.
    pub epsilon: f64,
    pub dt: f64,
    pub n_iters: usize,
    pub reinit_every: usize,
}

impl Default for CvParams {
    fn default() -> Self {
        CvParams {
            mu: None,
            nu: 0.0,
            lambda1: 1.0,
            lambda2: 1.0,
            epsilon: 1.5,
            dt: 0.45,
            n_iters: 100,
            reinit_every: 25,
        }
    }
}

impl CvParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if let Some(mu) = self.mu {
            if !(mu >= 0.0 && mu.is_finite()) {
                return bad("mu must be >= 0");
            }
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return bad("nu must be >= 0");
        }
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) {
            return bad("lambda1 and lambda2 must be > 0");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if !(self.dt >= 0.0 && self.dt.is_finite()) {
            return bad("dt must be >= 0");
        }
        Ok(())
    }

    fn resolved_mu(&self, image: &Volume) -> f64 {
        self.mu.unwrap_or_else(|| 0.2 * range_sq(image))
    }
}

fn range_sq(image: &Volume) -> f64 {
    let (lo, hi) = image.min_max();
    (hi - lo) * (hi - lo)
}

pub fn heaviside(t: f64, eps: f64) -> f64 {
    0.5 * (1.0 + (2.0 / PI) * (t / eps).atan())
}

pub fn dirac(t: f64, eps: f64) -> f64 {
    eps / (PI * (eps * eps + t * t))
}

/// Interface points: one per face-adjacent opposite-label pair, on the
/// segment joining the two centres. The point sits where a lightly smoothed
/// indicator crosses 1/2, or at the face midpoint when it does not cross
/// between the pair (flat faces give the midpoint either way).
fn interface_points(mask: &LabelVolume) -> Vec<(usize, Vec3)> {
    let grid = *mask.grid();
    let dims = grid.dims();
    let smooth = mask.to_volume().gaussian_smooth(0.6 * grid.min_spacing());
    let mut points = Vec::new();
    for idx in 0..grid.len() {
        let c = grid.coords(idx);
        for axis in 0..3 {
            if c[axis] + 1 >= dims[axis] {
                continue;
            }
            let mut n = c;
            n[axis] += 1;
            if mask.get(c[0], c[1], c[2]) == mask.get(n[0], n[1], n[2]) {
                continue;
            }
            let (sa, sb) = (smooth.get(c[0], c[1], c[2]), smooth.get(n[0], n[1], n[2]));
            let t = if (sa - 0.5) * (sb - 0.5) < 0.0 {
                ((sa - 0.5) / (sa - sb)).clamp(0.05, 0.95)
            } else {
                0.5
            };
            let mut v = c.map(|x| x as f64);
            v[axis] += t;
            points.push((idx, grid.voxel_to_world(v)));
        }
    }
    points
}

/// Signed distance to the mask boundary in units of `h`, positive inside.
/// The boundary is the set of interface points between face-adjacent
/// opposite labels, so the sign pattern of the mask is reproduced exactly.
/// Distances are exact up to a band of four voxels around the interface and
/// taken from the face-midpoint distance transform beyond it.
pub fn init_sdf_from_mask(mask: &LabelVolume) -> Result<LevelSetField> {
    let grid = *mask.grid();
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    if count == grid.len() {
        return Err(Error::FullMask);
    }
    let h = grid.min_spacing();
    let far = midpoint_distance(mask)?;
    let points = interface_points(mask);
    let dims = grid.dims();
    let mut buckets: Vec<Vec<Vec3>> = vec![Vec::new(); grid.len()];
    for (idx, p) in points {
        buckets[idx].push(p);
    }
    let spacing = grid.spacing();
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let mut d = far[idx];
            if d <= 4.0 {
                let x = grid.index_to_world(idx);
                let c = grid.coords(idx);
                // every interface point lies within half a voxel of a face
                // midpoint, so this window holds the nearest one
                let reach = (d + 1.0) * h;
                let r = spacing.map(|s| (reach / s).ceil() as usize + 1);
                let lo = [0, 1, 2].map(|a| c[a].saturating_sub(r[a]));
                let hi = [0, 1, 2].map(|a| (c[a] + r[a]).min(dims[a] - 1));
                let mut best = f64::INFINITY;
                for k in lo[2]..=hi[2] {
                    for j in lo[1]..=hi[1] {
                        for i in lo[0]..=hi[0] {
                            for p in &buckets[grid.index(i, j, k)] {
                                let e = (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2) + (x[2] - p[2]).powi(2);
                                best = best.min(e);
                            }
                        }
                    }
                }
                d = best.sqrt() / h;
            }
            if mask.is_set(idx) {
                d
            } else {
                -d
            }
        })
        .collect();
    Ok(LevelSetField::new(Volume::new(grid, data)?))
}

/// Unsigned distance (units of `h`) from each voxel centre to the nearest
/// face midpoint between opposite labels, via a transform on a lattice of
/// half spacing: voxel centre `c` sits at `2c`, the face between `c` and
/// `c + e_a` at `2c + e_a`.
fn midpoint_distance(mask: &LabelVolume) -> Result<Vec<f64>> {
    let grid = *mask.grid();
    let dims = grid.dims();
    let fine_dims = dims.map(|n| 2 * n - 1);
    let fine = Grid::new(fine_dims, grid.spacing().map(|s| 0.5 * s), grid.origin())?;
    let mut sites = vec![false; fine.len()];
    for idx in 0..grid.len() {
        let c = grid.coords(idx);
        for axis in 0..3 {
            if c[axis] + 1 >= dims[axis] {
                continue;
            }
            let mut n = c;
            n[axis] += 1;
            if mask.get(c[0], c[1], c[2]) != mask.get(n[0], n[1], n[2]) {
                let mut f = c.map(|x| 2 * x);
                f[axis] += 1;
                sites[fine.index(f[0], f[1], f[2])] = true;
            }
        }
    }
    let dist = distance_mm(&fine, &sites);
    let h = grid.min_spacing();
    Ok((0..grid.len())
        .map(|idx| {
            let c = grid.coords(idx);
            dist[fine.index(2 * c[0], 2 * c[1], 2 * c[2])] / h
        })
        .collect())
}

/// Rebuild a clean signed distance from the current zero level.
pub fn reinitialize_sdf(field: &LevelSetField) -> Result<LevelSetField> {
    let mask = field.mask();
    let count = mask.count();
    if count == 0 || count == field.grid().len() {
        return Err(Error::NoZeroCrossing);
    }
    init_sdf_from_mask(&mask)
}

/// Smoothed inside and outside means.
pub fn cv_means(image: &Volume, field: &LevelSetField, eps: f64) -> Result<(f64, f64)> {
    if image.grid() != field.grid() {
        return Err(Error::GridMismatch);
    }
    let (mut s_in, mut m_in, mut s_out, mut m_out) = (0.0, 0.0, 0.0, 0.0);
    for (&v, &p) in image.data().iter().zip(field.phi.data()) {
        let hv = heaviside(p, eps);
        s_in += v * hv;
        m_in += hv;
        s_out += v * (1.0 - hv);
        m_out += 1.0 - hv;
    }
    let floor = 1e-6 * image.grid().len() as f64;
    if !(m_in > floor) {
        return Err(Error::VanishingMass { side: "inside" });
    }
    if !(m_out > floor) {
        return Err(Error::VanishingMass { side: "outside" });
    }
    Ok((s_in / m_in, s_out / m_out))
}

fn stencil(grid: &Grid, idx: usize, axis: usize) -> Option<(usize, usize, f64)> {
    let n = grid.dims()[axis];
    if n == 1 {
        return None;
    }
    let c = grid.coords(idx);
    let stride = [1, grid.dims()[0], grid.dims()[0] * grid.dims()[1]][axis];
    let s = grid.spacing()[axis];
    Some(if c[axis] == 0 {
        (idx, idx + stride, s)
    } else if c[axis] == n - 1 {
        (idx - stride, idx, s)
    } else {
        (idx - stride, idx + stride, 2.0 * s)
    })
}

/// Central-difference gradient in units of `h`.
fn gradient(grid: &Grid, data: &[f64]) -> Vec<Vec3> {
    let h = grid.min_spacing();
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let mut g = [0.0; 3];
            for (axis, slot) in g.iter_mut().enumerate() {
                if let Some((lo, hi, d)) = stencil(grid, idx, axis) {
                    *slot = h * (data[hi] - data[lo]) / d;
                }
            }
            g
        })
        .collect()
}

fn norm(g: Vec3) -> f64 {
    (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
}

/// `div(grad phi / |grad phi|)`, with `|grad phi|` floored at 1e-8.
fn curvature(grid: &Grid, phi: &[f64]) -> Vec<f64> {
    let h = grid.min_spacing();
    let normals: Vec<Vec3> = gradient(grid, phi)
        .into_iter()
        .map(|g| {
            let n = norm(g).max(1e-8);
            [g[0] / n, g[1] / n, g[2] / n]
        })
        .collect();
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            (0..3)
                .filter_map(|axis| {
                    stencil(grid, idx, axis).map(|(lo, hi, d)| h * (normals[hi][axis] - normals[lo][axis]) / d)
                })
                .sum()
        })
        .collect()
}

/// Region energy with the means recomputed from `field`; sums are scaled
/// by the voxel volume.
pub fn cv_energy(image: &Volume, field: &LevelSetField, params: &CvParams) -> Result<f64> {
    let (c1, c2) = cv_means(image, field, params.epsilon)?;
    Ok(energy_with_means(image, field, params, c1, c2))
}

fn energy_with_means(image: &Volume, field: &LevelSetField, params: &CvParams, c1: f64, c2: f64) -> f64 {
    let grid = field.grid();
    let eps = params.epsilon;
    let mu = params.resolved_mu(image);
    let phi = field.phi.data();
    let grads = if mu > 0.0 { gradient(grid, phi) } else { Vec::new() };
    let terms: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let p = phi[i];
            let v = image.data()[i];
            let hv = heaviside(p, eps);
            let surface = if mu > 0.0 {
                mu * dirac(p, eps) * norm(grads[i])
            } else {
                0.0
            };
            surface
                + params.nu * hv
                + params.lambda1 * (v - c1).powi(2) * hv
                + params.lambda2 * (v - c2).powi(2) * (1.0 - hv)
        })
        .collect();
    ordered_sum(&terms) * grid.voxel_volume()
}

fn ordered_sum(v: &[f64]) -> f64 {
    v.chunks(4096).map(|c| c.iter().sum::<f64>()).sum()
}

/// One explicit gradient-flow step with time step `dt`. The force is
/// divided by the squared intensity range so that `dt` is in voxels
/// regardless of the image scale.
pub fn cv_step(image: &Volume, field: &LevelSetField, params: &CvParams) -> Result<LevelSetField> {
    params.validate()?;
    step_with_dt(image, field, params, params.dt)
}

fn step_with_dt(image: &Volume, field: &LevelSetField, params: &CvParams, dt: f64) -> Result<LevelSetField> {
    if dt == 0.0 {
        return Ok(field.clone());
    }
    let (c1, c2) = cv_means(image, field, params.epsilon)?;
    let grid = *field.grid();
    let mu = params.resolved_mu(image);
    let scale = match range_sq(image) {
        r if r > 0.0 => 1.0 / r,
        _ => 1.0,
    };
    let phi = field.phi.data();
    let kappa = if mu > 0.0 {
        curvature(&grid, phi)
    } else {
        vec![0.0; grid.len()]
    };
    let next: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let v = image.data()[i];
            let force =
                mu * kappa[i] - params.nu - params.lambda1 * (v - c1).powi(2) + params.lambda2 * (v - c2).powi(2);
            phi[i] + dt * dirac(phi[i], params.epsilon) * force * scale
        })
        .collect();
    if let Some(bad) = next.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLevelSet(bad));
    }
    Ok(LevelSetField::new(Volume::new(grid, next)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub energy: f64,
    pub c1: f64,
    pub c2: f64,
    /// The field was reinitialized just before this entry's step.
    pub after_reinit: bool,
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub mask: LabelVolume,
    pub field: LevelSetField,
    /// Entry 0 is the initial field; entry `k` follows step `k`.
    pub trace: Vec<TraceEntry>,
}

impl RefineResult {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,energy,c1,c2,after_reinit\n");
        for t in &self.trace {
            let _ = writeln!(
                out,
                "{},{:.10e},{:.6},{:.6},{}",
                t.iteration, t.energy, t.c1, t.c2, t.after_reinit as u8
            );
        }
        out
    }
}

/// Evolve a signed distance built from `mask` for `n_iters` steps and
/// threshold it. A step that would raise the energy is retried with half
/// the time step (up to 30 times) and skipped if none helps.
pub fn cv_refine(image: &Volume, mask: &LabelVolume, params: &CvParams) -> Result<RefineResult> {
    params.validate()?;
    if image.grid() != mask.grid() {
        return Err(Error::GridMismatch);
    }
    let mut field = init_sdf_from_mask(mask)?;
    let entry = |f: &LevelSetField, iteration: usize, after_reinit: bool| -> Result<TraceEntry> {
        let (c1, c2) = cv_means(image, f, params.epsilon)?;
        Ok(TraceEntry {
            iteration,
            energy: energy_with_means(image, f, params, c1, c2),
            c1,
            c2,
            after_reinit,
        })
    };
    let mut current = entry(&field, 0, false)?;
    let mut trace = vec![current];
    let mut reinitialized = false;
    for it in 1..=params.n_iters {
        let mut dt = params.dt;
        let mut accepted = None;
        for _ in 0..=30 {
            let cand = step_with_dt(image, &field, params, dt)?;
            let e = entry(&cand, it, reinitialized)?;
            if e.energy <= current.energy {
                accepted = Some((cand, e));
                break;
            }
            dt *= 0.5;
        }
        current = match accepted {
            Some((f, e)) => {
                field = f;
                e
            }
            None => TraceEntry {
                iteration: it,
                after_reinit: reinitialized,
                ..current
            },
        };
        trace.push(current);
        reinitialized = false;
        if params.reinit_every > 0 && it % params.reinit_every == 0 && it < params.n_iters {
            field = reinitialize_sdf(&field)?;
            current = entry(&field, it, true)?;
            reinitialized = true;
        }
    }
    Ok(RefineResult {
        mask: field.mask(),
        field,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid {
        Grid::with_dims([n, n, n]).unwrap()
    }

    fn ball(n: usize, r: f64) -> LabelVolume {
        let c = (n as f64 - 1.0) / 2.0;
        LabelVolume::from_fn(grid(n), |[i, j, k]| {
            let d = [i, j, k].map(|x| x as f64 - c);
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() <= r
        })
    }

    fn two_value(mask: &LabelVolume, a: f64, b: f64) -> Volume {
        let vals = mask.data().iter().map(|&m| if m != 0 { a } else { b }).collect();
        Volume::new(*mask.grid(), vals).unwrap()
    }

    #[test]
    fn sdf_of_single_voxel() {
        let g = grid(7);
        let m = LabelVolume::from_fn(g, |c| c == [3, 3, 3]);
        let f = init_sdf_from_mask(&m).unwrap();
        assert_eq!(f.phi().get(3, 3, 3), 0.5);
        // oracle: distance to the nearest of the six face midpoints
        let faces: Vec<Vec3> = (0..6)
            .map(|n| {
                let mut p = [3.0; 3];
                p[n / 2] += if n % 2 == 0 { 0.5 } else { -0.5 };
                p
            })
            .collect();
        for idx in 0..g.len() {
            if idx == g.index(3, 3, 3) {
                continue;
            }
            let c = g.coords(idx).map(|x| x as f64);
            let d = faces
                .iter()
                .map(|p| ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2) + (c[2] - p[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!((f.phi().data()[idx] + d).abs() < 1e-12);
        }
    }

    #[test]
    fn sdf_of_half_space_is_linear() {
        let g = Grid::with_dims([12, 4, 4]).unwrap();
        let m = LabelVolume::from_fn(g, |[i, _, _]| i < 5);
        let f = init_sdf_from_mask(&m).unwrap();
        for i in 0..12 {
            assert!((f.phi().get(i, 2, 2) - (4.5 - i as f64)).abs() < 1e-12);
        }
        assert!(matches!(
            init_sdf_from_mask(&LabelVolume::empty(g)),
            Err(Error::EmptyMask)
        ));
        let full = LabelVolume::from_fn(g, |_| true);
        assert!(matches!(init_sdf_from_mask(&full), Err(Error::FullMask)));
    }

    fn unit_gradient_fraction(f: &LevelSetField) -> f64 {
        let g = gradient(f.grid(), f.phi().data());
        let near: Vec<f64> = f
            .phi()
            .data()
            .iter()
            .zip(&g)
            .filter(|(p, _)| p.abs() <= 3.0)
            .map(|(_, g)| norm(*g))
            .collect();
        let ok = near.iter().filter(|&&n| (0.8..=1.2).contains(&n)).count();
        ok as f64 / near.len() as f64
    }

    #[test]
    fn sdf_gradient_is_unit_near_the_front() {
        for t in 0..20 {
            let r = 4.0 + 0.5 * t as f64;
            let f = init_sdf_from_mask(&ball(32, r)).unwrap();
            let frac = unit_gradient_fraction(&f);
            assert!(frac >= 0.95, "radius {r}: {frac}");
        }
    }

    #[test]
    fn means_examples() {
        let m = ball(16, 5.0);
        let f = init_sdf_from_mask(&m).unwrap();
        let (c1, c2) = cv_means(&Volume::filled(*m.grid(), 7.0), &f, 1.5).unwrap();
        assert!((c1 - 7.0).abs() < 1e-12 && (c2 - 7.0).abs() < 1e-12);
        let img = two_value(&m, 100.0, 0.0);
        let (c1, c2) = cv_means(&img, &f, 1e-3).unwrap();
        assert!((c1 - 100.0).abs() < 1.0 && c2.abs() < 1.0, "{c1} {c2}");
        let all_in = LevelSetField::new(Volume::filled(*m.grid(), 1e6));
        assert!(matches!(
            cv_means(&img, &all_in, 1.5),
            Err(Error::VanishingMass { side: "outside" })
        ));
    }

    #[test]
    fn energy_examples() {
        let m = ball(16, 5.0);
        let f = init_sdf_from_mask(&m).unwrap();
        let p = CvParams {
            mu: Some(0.0),
            epsilon: 1e-3,
            ..CvParams::default()
        };
        let img = two_value(&m, 100.0, 0.0);
        let e = cv_energy(&img, &f, &p).unwrap();
        // relative to the energy of an uninformative split
        let scale = m.grid().len() as f64 * 100.0 * 100.0 / 4.0;
        assert!(e < 1e-3 * scale, "{e}");

        let flat = Volume::filled(*m.grid(), 3.0);
        let p = CvParams {
            mu: Some(2.0),
            ..CvParams::default()
        };
        let surface = cv_energy(&flat, &f, &p).unwrap();
        let expected: f64 = gradient(f.grid(), f.phi().data())
            .iter()
            .zip(f.phi().data())
            .map(|(g, &ph)| 2.0 * dirac(ph, 1.5) * norm(*g))
            .sum();
        assert!((surface - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn data_energy_grows_with_mismatch() {
        let g = Grid::with_dims([20, 6, 6]).unwrap();
        let truth = LabelVolume::from_fn(g, |[i, _, _]| i < 10);
        let img = two_value(&truth, 100.0, 0.0);
        let p = CvParams {
            mu: Some(0.0),
            ..CvParams::default()
        };
        let mut last = f64::NEG_INFINITY;
        for shift in 0..6 {
            let m = LabelVolume::from_fn(g, |[i, _, _]| i < 10 + shift);
            let e = cv_energy(&img, &init_sdf_from_mask(&m).unwrap(), &p).unwrap();
            assert!(e > last, "shift {shift}");
            last = e;
        }
    }

    #[test]
    fn zero_level_on_a_symmetric_edge_is_stationary() {
        // Zero level through the partial-volume voxel column x = 10.
        let g = Grid::with_dims([21, 5, 5]).unwrap();
        let img = Volume::from_fn(g, |[i, _, _]| match i {
            i if i < 10 => 100.0,
            10 => 50.0,
            _ => 0.0,
        })
        .unwrap();
        let field = LevelSetField::new(Volume::from_fn(g, |[i, _, _]| 10.0 - i as f64).unwrap());
        let p = CvParams {
            mu: Some(0.0),
            ..CvParams::default()
        };
        let next = cv_step(&img, &field, &p).unwrap();
        for j in 0..5 {
            for k in 0..5 {
                assert!((next.phi().get(10, j, k) - field.phi().get(10, j, k)).abs() < 1e-6);
            }
        }
        // the mask does not move at all
        assert_eq!(next.mask(), field.mask());
    }

    #[test]
    fn volume_term_shrinks_the_inside() {
        let m = ball(16, 5.0);
        let img = Volume::filled(*m.grid(), 10.0);
        let p = CvParams {
            mu: Some(0.0),
            nu: 1.0,
            dt: 2.0,
            ..CvParams::default()
        };
        let mut f = init_sdf_from_mask(&m).unwrap();
        let mut count = m.count();
        for _ in 0..10 {
            let next = cv_step(&img, &f, &p).unwrap();
            assert!(next.phi().data().iter().zip(f.phi().data()).all(|(a, b)| a < b));
            let c = next.mask().count();
            assert!(c <= count);
            count = c;
            f = next;
        }
        assert!(count < m.count());
    }

    #[test]
    fn zero_dt_is_identity() {
        let m = ball(12, 3.0);
        let f = init_sdf_from_mask(&m).unwrap();
        let p = CvParams {
            dt: 0.0,
            ..CvParams::default()
        };
        assert_eq!(cv_step(&two_value(&m, 1.0, 0.0), &f, &p).unwrap(), f);
    }

    #[test]
    fn reinit_examples() {
        let f = init_sdf_from_mask(&ball(16, 5.0)).unwrap();
        assert_eq!(reinitialize_sdf(&f).unwrap(), f);
        let scaled = LevelSetField::new(f.phi().map(|v| 5.0 * v).unwrap());
        assert_eq!(reinitialize_sdf(&scaled).unwrap(), f);
        let pos = LevelSetField::new(Volume::filled(*f.grid(), 1.0));
        assert!(matches!(reinitialize_sdf(&pos), Err(Error::NoZeroCrossing)));
    }

    #[test]
    fn refine_without_iterations_returns_the_mask() {
        let m = ball(12, 3.0);
        let p = CvParams {
            n_iters: 0,
            ..CvParams::default()
        };
        let r = cv_refine(&two_value(&m, 80.0, 20.0), &m, &p).unwrap();
        assert_eq!(r.mask, m);
        assert_eq!(r.trace.len(), 1);
    }

    #[test]
    fn refine_grows_an_eroded_ball_back() {
        let truth = ball(24, 7.0);
        let img = two_value(&truth, 100.0, 0.0);
        let eroded = ball(24, 5.0);
        let p = CvParams {
            n_iters: 40,
            reinit_every: 10,
            ..CvParams::default()
        };
        let r = cv_refine(&img, &eroded, &p).unwrap();
        let before = crate::metrics::dice(&eroded, &truth).unwrap();
        let after = crate::metrics::dice(&r.mask, &truth).unwrap();
        assert!(after > before, "{before} -> {after}");
        for w in r.trace.windows(2) {
            if !w[1].after_reinit {
                assert!(w[1].energy <= w[0].energy + 1e-6 * r.trace[0].energy.abs());
            }
        }
    }
}
