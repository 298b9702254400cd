//! Synthetic atrium-like phantoms: an ellipsoidal body with cylindrical
//! tubes leaving its surface, a smooth multiplicative bias and Gaussian
//! noise. Cohorts are produced by warping one base phantom with independent
//! random smooth deformations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelVolume, Vec3, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    /// Ellipsoid semi-axes, mm.
    pub semi_axes: Vec3,
    /// Ellipsoid centre in world mm; `None` puts it at the grid centre.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec3>,
    pub n_tubes: usize,
    pub tube_radius: f64,
    /// Length of each tube outside the ellipsoid, mm.
    pub tube_length: f64,
    pub intensity_inside: f64,
    pub intensity_outside: f64,
    pub noise_sigma: f64,
    /// Log-amplitude of the bias: the field spans `[e^-a, e^a]`.
    pub bias_amplitude: f64,
    /// Peak displacement of cohort deformations, mm.
    pub deformation_amplitude: f64,
    /// Gaussian width of cohort deformations, mm.
    pub deformation_smoothness: f64,
    /// Set from the run-wide seed, not read from config sections.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            dims: [64; 3],
            spacing: [1.0; 3],
            semi_axes: [16.0, 13.0, 11.0],
            center: None,
            n_tubes: 4,
            tube_radius: 3.0,
            tube_length: 12.0,
            intensity_inside: 80.0,
            intensity_outside: 20.0,
            noise_sigma: 5.0,
            bias_amplitude: 0.1,
            deformation_amplitude: 3.0,
            deformation_smoothness: 12.0,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing, [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        self.grid()?;
        if self.semi_axes.iter().any(|&a| !(a > 0.0)) {
            return bad("semi-axes must be positive");
        }
        if self.n_tubes > 0 && !(self.tube_radius > 0.0 && self.tube_length >= 0.0) {
            return bad("tube radius must be positive and length non-negative");
        }
        if !(self.noise_sigma >= 0.0 && self.bias_amplitude >= 0.0) {
            return bad("noise sigma and bias amplitude must be non-negative");
        }
        if !(self.deformation_amplitude >= 0.0) {
            return bad("deformation amplitude must be non-negative");
        }
        if self.deformation_amplitude > 0.0 && !(self.deformation_amplitude < self.deformation_smoothness / 2.0) {
            return bad("deformation amplitude must stay below half the smoothness");
        }
        Ok(())
    }
}

struct Geometry {
    center: Vec3,
    semi_axes: Vec3,
    /// (start, end) of each tube axis.
    tubes: Vec<(Vec3, Vec3)>,
    tube_radius: f64,
}

impl Geometry {
    fn new(p: &PhantomParams, grid: &Grid) -> Self {
        let center = p.center.unwrap_or_else(|| grid.center());
        let tubes = (0..p.n_tubes)
            .map(|i| {
                let theta = std::f64::consts::TAU * (i as f64 + 0.5) / p.n_tubes as f64;
                let d = [theta.cos(), 0.6, theta.sin()];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let d = d.map(|v| v / n);
                let to_surface = 1.0 / (0..3).map(|a| (d[a] / p.semi_axes[a]).powi(2)).sum::<f64>().sqrt();
                let reach = to_surface + p.tube_length;
                let end = [
                    center[0] + reach * d[0],
                    center[1] + reach * d[1],
                    center[2] + reach * d[2],
                ];
                (center, end)
            })
            .collect();
        Geometry {
            center,
            semi_axes: p.semi_axes,
            tubes,
            tube_radius: p.tube_radius,
        }
    }

    fn contains(&self, x: Vec3) -> bool {
        let e: f64 = (0..3)
            .map(|a| ((x[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum();
        if e <= 1.0 {
            return true;
        }
        self.tubes
            .iter()
            .any(|&(a, b)| segment_distance(x, a, b) <= self.tube_radius)
    }
}

fn segment_distance(x: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ax = [x[0] - a[0], x[1] - a[1], x[2] - a[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    let t = if len2 > 0.0 {
        ((ax[0] * ab[0] + ax[1] * ab[1] + ax[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ax[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

/// Smooth bias field in `[e^-a, e^a]`.
fn bias_at(grid: &Grid, x: Vec3, amplitude: f64) -> f64 {
    if amplitude == 0.0 {
        return 1.0;
    }
    let ext = |a: usize| ((grid.dims()[a] as f64) * grid.spacing()[a]).max(1e-9);
    let o = grid.origin();
    let s = 0.6 * (std::f64::consts::TAU * (x[0] - o[0]) / ext(0)).sin()
        + 0.4 * (std::f64::consts::TAU * (x[1] - o[1]) / ext(1)).cos();
    (amplitude * s).exp()
}

/// Phantom image and its ground-truth label. Deterministic given the seed.
pub fn generate_phantom(params: &PhantomParams) -> Result<(Volume, LabelVolume)> {
    params.validate()?;
    let grid = params.grid()?;
    let geom = Geometry::new(params, &grid);
    let label = LabelVolume::from_fn(grid, |[i, j, k]| {
        geom.contains(grid.voxel_to_world([i as f64, j as f64, k as f64]))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let data = (0..grid.len())
        .map(|idx| {
            let x = grid.index_to_world(idx);
            let clean = if label.is_set(idx) {
                params.intensity_inside
            } else {
                params.intensity_outside
            };
            let n = if params.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            clean * bias_at(&grid, x, params.bias_amplitude) + n
        })
        .collect();
    Ok((Volume::new(grid, data)?, label))
}

/// Random smooth displacement field on `grid`, peak magnitude `amplitude` mm.
pub fn random_displacement(grid: &Grid, amplitude: f64, smoothness: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    if amplitude == 0.0 {
        return vec![[0.0; 3]; grid.len()];
    }
    // Drawn on a coarse lattice, smoothed, then interpolated to full
    // resolution. The lattice extends three widths past the grid so that
    // edge handling of the smoothing does not inflate the field at the faces.
    let step = (smoothness / 4.0).max(grid.min_spacing());
    let pad = 3.0 * smoothness;
    let (lo, hi) = (grid.voxel_to_world([0.0; 3]), grid.index_to_world(grid.len() - 1));
    let coarse = Grid::new(
        [0, 1, 2].map(|a| ((hi[a] - lo[a] + 2.0 * pad) / step).ceil() as usize + 1),
        [step; 3],
        lo.map(|v| v - pad),
    )
    .expect("positive lattice");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let comps: Vec<Volume> = (0..3)
        .map(|_| {
            let raw: Vec<f64> = (0..coarse.len()).map(|_| normal.sample(rng)).collect();
            Volume::new(coarse, raw)
                .expect("finite normals")
                .gaussian_smooth(smoothness)
        })
        .collect();
    let mut field: Vec<Vec3> = (0..grid.len())
        .map(|idx| {
            let v = coarse.world_to_voxel(grid.index_to_world(idx));
            [
                comps[0].trilinear_sample(v),
                comps[1].trilinear_sample(v),
                comps[2].trilinear_sample(v),
            ]
        })
        .collect();
    let peak = field
        .iter()
        .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
        .fold(0.0, f64::max);
    if peak > 0.0 {
        let s = amplitude / peak;
        field.iter_mut().for_each(|d| *d = d.map(|v| v * s));
    }
    field
}

fn cohort_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// `n` copies of the base phantom, each warped by its own random smooth
/// deformation (image trilinear, label nearest). Member `i` depends only on
/// `(base, seed, i)`.
pub fn generate_cohort(base: &PhantomParams, n: usize, seed: u64) -> Result<Vec<(Volume, LabelVolume)>> {
    if n == 0 {
        return Err(Error::InvalidParameter("cohort size must be >= 1".into()));
    }
    let (image, label) = generate_phantom(base)?;
    let grid = *image.grid();
    (0..n)
        .map(|i| {
            let mut rng = cohort_rng(seed, i);
            let field = random_displacement(&grid, base.deformation_amplitude, base.deformation_smoothness, &mut rng);
            let warp = |idx: usize| {
                let x = grid.index_to_world(idx);
                let d = field[idx];
                grid.world_to_voxel([x[0] + d[0], x[1] + d[1], x[2] + d[2]])
            };
            let img = Volume::new(
                grid,
                (0..grid.len()).map(|idx| image.trilinear_sample(warp(idx))).collect(),
            )?;
            let lab = LabelVolume::new(
                grid,
                (0..grid.len()).map(|idx| label.nearest_sample(warp(idx))).collect(),
            )?;
            Ok((img, lab))
        })
        .collect()
}

/// Replace a mask by a displaced, shrunken copy of itself. Overlap with
/// the original falls as `severity` goes from 0 (unchanged) to 1.
pub fn corrupt_label(lab: &LabelVolume, severity: f64, seed: u64) -> LabelVolume {
    let severity = severity.clamp(0.0, 1.0);
    let count = lab.count();
    if severity == 0.0 || count == 0 {
        return lab.clone();
    }
    let grid = *lab.grid();
    let mut centroid = [0.0; 3];
    for idx in (0..grid.len()).filter(|&i| lab.is_set(i)) {
        let x = grid.index_to_world(idx);
        (0..3).for_each(|a| centroid[a] += x[a]);
    }
    centroid.iter_mut().for_each(|c| *c /= count as f64);
    let radius = (3.0 * count as f64 * grid.voxel_volume() / (4.0 * std::f64::consts::PI)).cbrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
    let shrink = rng.random_range(0.4..0.6);
    let shift = severity * 1.2 * radius;
    let scale = 1.0 - severity * (1.0 - shrink);
    LabelVolume::from_fn(grid, |[i, j, k]| {
        let x = grid.voxel_to_world([i as f64, j as f64, k as f64]);
        let src = [
            centroid[0] + (x[0] - centroid[0] - shift * dir[0]) / scale,
            centroid[1] + (x[1] - centroid[1] - shift * dir[1]) / scale,
            centroid[2] + (x[2] - centroid[2] - shift * dir[2]) / scale,
        ];
        let v = grid.world_to_voxel(src);
        let inside = (0..3).all(|a| v[a] >= -0.5 && v[a] <= grid.dims()[a] as f64 - 0.5);
        inside && lab.nearest_sample(v) == 1
    })
}
