//! Regular-grid 3D volumes, world/voxel mapping, interpolation and
//! finite-difference operators.
//!
//! All grids are axis aligned. Voxel data is stored x-fastest, so the linear
//! index of voxel `(i, j, k)` is `i + nx * (j + ny * k)`, which is also the
//! layout of a MetaImage raw payload.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Geometry of a voxel lattice: voxel counts, spacing in mm and the world
/// position of the centre of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dims: [usize; 3],
    spacing: Vec3,
    origin: Vec3,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("dims {dims:?} must all be >= 1")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing {spacing:?} must be positive and finite"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("origin {origin:?} must be finite")));
        }
        Ok(Grid { dims, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Grid::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing[0].min(self.spacing[1]).min(self.spacing[2])
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn world_to_voxel(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    #[inline]
    pub fn voxel_to_world(&self, v: Vec3) -> Vec3 {
        [
            self.origin[0] + v[0] * self.spacing[0],
            self.origin[1] + v[1] * self.spacing[1],
            self.origin[2] + v[2] * self.spacing[2],
        ]
    }

    /// World position of the centre of voxel `idx`.
    #[inline]
    pub fn index_to_world(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.coords(idx);
        self.voxel_to_world([i as f64, j as f64, k as f64])
    }

    /// World coordinate of the grid centre.
    pub fn center(&self) -> Vec3 {
        self.voxel_to_world([
            (self.dims[0] - 1) as f64 / 2.0,
            (self.dims[1] - 1) as f64 / 2.0,
            (self.dims[2] - 1) as f64 / 2.0,
        ])
    }

    /// Block-downsampled grid whose voxel centres sit at the centres of
    /// `factor`-sized blocks of this grid.
    pub fn downsampled(&self, factor: usize) -> Grid {
        if factor <= 1 {
            return *self;
        }
        let f = factor as f64;
        let dims = self.dims.map(|d| d.div_ceil(factor).max(1));
        let spacing = self.spacing.map(|s| s * f);
        let origin = [
            self.origin[0] + (f - 1.0) * 0.5 * self.spacing[0],
            self.origin[1] + (f - 1.0) * 0.5 * self.spacing[1],
            self.origin[2] + (f - 1.0) * 0.5 * self.spacing[2],
        ];
        Grid { dims, spacing, origin }
    }
}

/// Per-axis interpolation cell: lower/upper sample index, fractional offset
/// and whether the coordinate lies strictly inside the grid (so that the
/// derivative along the axis is non-zero).
#[inline]
fn axis_cell(u: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    if !(u > 0.0) {
        return (0, 1, 0.0, false);
    }
    if u >= max {
        return (n - 2, n - 1, 1.0, false);
    }
    let i0 = (u.floor() as usize).min(n - 2);
    (i0, i0 + 1, u - i0 as f64, true)
}

/// Dense scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::DataLength {
                expected: grid.len(),
                got: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Volume {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn([usize; 3]) -> f64) -> Result<Self> {
        let data = (0..grid.len()).map(|idx| f(grid.coords(idx))).collect();
        Volume::new(grid, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Trilinear interpolation at a continuous voxel coordinate, clamped to
    /// the grid boundary.
    #[inline]
    pub fn trilinear_sample(&self, p: Vec3) -> f64 {
        self.sample_with_gradient(p).0
    }

    /// Trilinear value and its exact derivative with respect to the voxel
    /// coordinate (per voxel, not per mm). Clamped axes have zero derivative.
    #[inline]
    pub fn sample_with_gradient(&self, p: Vec3) -> (f64, Vec3) {
        let [nx, ny, nz] = self.grid.dims;
        let (x0, x1, fx, ix) = axis_cell(p[0], nx);
        let (y0, y1, fy, iy) = axis_cell(p[1], ny);
        let (z0, z1, fz, iz) = axis_cell(p[2], nz);
        let d = &self.data;
        let at = |i: usize, j: usize, k: usize| d[i + nx * (j + ny * k)];
        let v000 = at(x0, y0, z0);
        let v100 = at(x1, y0, z0);
        let v010 = at(x0, y1, z0);
        let v110 = at(x1, y1, z0);
        let v001 = at(x0, y0, z1);
        let v101 = at(x1, y0, z1);
        let v011 = at(x0, y1, z1);
        let v111 = at(x1, y1, z1);

        let gx = 1.0 - fx;
        let c00 = v000 * gx + v100 * fx;
        let c10 = v010 * gx + v110 * fx;
        let c01 = v001 * gx + v101 * fx;
        let c11 = v011 * gx + v111 * fx;
        let gy = 1.0 - fy;
        let c0 = c00 * gy + c10 * fy;
        let c1 = c01 * gy + c11 * fy;
        let gz = 1.0 - fz;
        let value = c0 * gz + c1 * fz;

        let dx = if ix {
            let e00 = v100 - v000;
            let e10 = v110 - v010;
            let e01 = v101 - v001;
            let e11 = v111 - v011;
            (e00 * gy + e10 * fy) * gz + (e01 * gy + e11 * fy) * fz
        } else {
            0.0
        };
        let dy = if iy { (c10 - c00) * gz + (c11 - c01) * fz } else { 0.0 };
        let dz = if iz { c1 - c0 } else { 0.0 };
        (value, [dx, dy, dz])
    }

    /// Central-difference gradient per mm at voxel `v`; one-sided at the
    /// boundary faces.
    pub fn gradient_central(&self, v: [usize; 3]) -> Vec3 {
        let mut g = [0.0; 3];
        for (axis, slot) in g.iter_mut().enumerate() {
            let n = self.grid.dims[axis];
            if n == 1 {
                continue;
            }
            let mut lo = v;
            let mut hi = v;
            let h = self.grid.spacing[axis];
            let denom = if v[axis] == 0 {
                hi[axis] = 1;
                h
            } else if v[axis] == n - 1 {
                lo[axis] = n - 2;
                h
            } else {
                lo[axis] -= 1;
                hi[axis] += 1;
                2.0 * h
            };
            *slot = (self.get(hi[0], hi[1], hi[2]) - self.get(lo[0], lo[1], lo[2])) / denom;
        }
        g
    }

    /// Resample onto `out_grid`: output voxel `v` takes the trilinear value of
    /// this volume at `map(world(v))`.
    pub fn resample<F>(&self, out_grid: &Grid, map: F) -> Volume
    where
        F: Fn(Vec3) -> Vec3 + Sync,
    {
        let data = (0..out_grid.len())
            .into_par_iter()
            .map(|idx| {
                let p = map(out_grid.index_to_world(idx));
                self.trilinear_sample(self.grid.world_to_voxel(p))
            })
            .collect();
        Volume { grid: *out_grid, data }
    }

    /// Separable Gaussian smoothing with standard deviation `sigma_mm`,
    /// clamp-to-edge at the borders.
    pub fn gaussian_smooth(&self, sigma_mm: f64) -> Volume {
        if !(sigma_mm > 0.0) {
            return self.clone();
        }
        let mut data = self.data.clone();
        for axis in 0..3 {
            let sigma = sigma_mm / self.grid.spacing[axis];
            data = convolve_axis(&self.grid, &data, axis, &gaussian_kernel(sigma));
        }
        Volume { grid: self.grid, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume> {
        Volume::new(self.grid, self.data.iter().map(|&v| f(v)).collect())
    }
}

pub(crate) fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_vox).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// 1D convolution along one axis with an odd-length kernel, clamped edges.
pub(crate) fn convolve_axis(grid: &Grid, data: &[f64], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let dims = grid.dims;
    let n = dims[axis] as isize;
    let radius = (kernel.len() / 2) as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    } as isize;
    (0..data.len())
        .into_par_iter()
        .map(|idx| {
            let c = grid.coords(idx)[axis] as isize;
            let base = idx as isize - c * stride;
            kernel
                .iter()
                .enumerate()
                .map(|(t, w)| {
                    let pos = (c + t as isize - radius).clamp(0, n - 1);
                    w * data[(base + pos * stride) as usize]
                })
                .sum()
        })
        .collect()
}

/// Dense binary label volume (0 = background, 1 = foreground).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::DataLength {
                expected: grid.len(),
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidLabel {
                index,
                value: data[index],
            });
        }
        Ok(LabelVolume { grid, data })
    }

    pub fn empty(grid: Grid) -> Self {
        LabelVolume {
            grid,
            data: vec![0; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn([usize; 3]) -> bool) -> Self {
        let data = (0..grid.len()).map(|idx| f(grid.coords(idx)) as u8).collect();
        LabelVolume { grid, data }
    }

    pub(crate) fn from_bools(grid: Grid, data: impl IntoIterator<Item = bool>) -> Self {
        let data: Vec<u8> = data.into_iter().map(u8::from).collect();
        debug_assert_eq!(data.len(), grid.len());
        LabelVolume { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn is_set(&self, idx: usize) -> bool {
        self.data[idx] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Label of the voxel whose centre is nearest to the continuous voxel
    /// coordinate `p`. Exact half-way ties go to the lower index; coordinates
    /// outside the grid are clamped.
    #[inline]
    pub fn nearest_sample(&self, p: Vec3) -> u8 {
        let pick = |u: f64, n: usize| -> usize {
            let r = (u - 0.5).ceil();
            if !(r > 0.0) {
                0
            } else {
                (r as usize).min(n - 1)
            }
        };
        let [nx, ny, nz] = self.grid.dims;
        self.get(pick(p[0], nx), pick(p[1], ny), pick(p[2], nz))
    }

    /// Nearest-neighbour resampling onto `out_grid` through `map`.
    pub fn resample<F>(&self, out_grid: &Grid, map: F) -> LabelVolume
    where
        F: Fn(Vec3) -> Vec3 + Sync,
    {
        let data = (0..out_grid.len())
            .into_par_iter()
            .map(|idx| {
                let p = map(out_grid.index_to_world(idx));
                self.nearest_sample(self.grid.world_to_voxel(p))
            })
            .collect();
        LabelVolume { grid: *out_grid, data }
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}
