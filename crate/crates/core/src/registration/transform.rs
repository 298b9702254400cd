//! Spatial transforms mapping target-space world points into atlas space,
//! and their text serialization.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::{Grid, Vec3};

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `p -> matrix · (p - center) + center + translation`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub matrix: Mat3,
    pub translation: Vec3,
    pub center: Vec3,
}

impl AffineTransform {
    pub fn identity(center: Vec3) -> Self {
        AffineTransform {
            matrix: IDENTITY3,
            translation: [0.0; 3],
            center,
        }
    }

    pub fn translation(t: Vec3) -> Self {
        AffineTransform {
            matrix: IDENTITY3,
            translation: t,
            center: [0.0; 3],
        }
    }

    pub fn new(matrix: Mat3, translation: Vec3, center: Vec3) -> Result<Self> {
        let d = det(&matrix);
        if !(d.abs() > 1e-9) {
            return Err(Error::SingularAffine(d));
        }
        Ok(AffineTransform {
            matrix,
            translation,
            center,
        })
    }

    #[inline]
    pub fn apply(&self, p: Vec3) -> Vec3 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let m = mat_vec(&self.matrix, d);
        [
            m[0] + self.center[0] + self.translation[0],
            m[1] + self.center[1] + self.translation[1],
            m[2] + self.center[2] + self.translation[2],
        ]
    }
}

/// Uniform cubic B-spline basis at fractional offset `t ∈ [0, 1)`.
#[inline]
pub fn cubic_bspline_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Free-form deformation `p -> p + Σ β(p) · coefficient` with a cubic
/// B-spline kernel on a regular control lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineTransform {
    control_grid: Grid,
    coefficients: Vec<Vec3>,
}

/// The 4×4×4 support of one evaluation point: first control index per axis
/// and the per-axis basis weights.
#[derive(Debug, Clone, Copy)]
pub struct BSplineSupport {
    pub base: [usize; 3],
    pub weights: [[f64; 4]; 3],
}

impl BSplineTransform {
    /// Zero displacement on a lattice with `spacing_mm` that covers the
    /// world extent of `target` plus one knot on each side.
    pub fn zero_covering(target: &Grid, spacing_mm: f64) -> Result<Self> {
        if !(spacing_mm > 0.0) {
            return Err(Error::InvalidParameter("control point spacing must be positive".into()));
        }
        let mut dims = [0; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            let extent = (target.dims()[a] - 1) as f64 * target.spacing()[a];
            dims[a] = (extent / spacing_mm).floor() as usize + 4;
            origin[a] = target.origin()[a] - spacing_mm;
        }
        let control_grid = Grid::new(dims, [spacing_mm; 3], origin)?;
        Ok(BSplineTransform {
            coefficients: vec![[0.0; 3]; control_grid.len()],
            control_grid,
        })
    }

    pub fn from_parts(control_grid: Grid, coefficients: Vec<Vec3>) -> Result<Self> {
        if control_grid.dims().iter().any(|&d| d < 4) {
            return Err(Error::InvalidParameter(
                "b-spline control grid needs at least 4 knots per axis".into(),
            ));
        }
        if coefficients.len() != control_grid.len() {
            return Err(Error::DataLength {
                expected: control_grid.len(),
                got: coefficients.len(),
            });
        }
        Ok(BSplineTransform {
            control_grid,
            coefficients,
        })
    }

    pub fn control_grid(&self) -> &Grid {
        &self.control_grid
    }

    pub fn coefficients(&self) -> &[Vec3] {
        &self.coefficients
    }

    pub fn coefficients_mut(&mut self) -> &mut [Vec3] {
        &mut self.coefficients
    }

    /// Support of `p`. Points outside the covered extent are clamped onto
    /// its boundary.
    #[inline]
    pub fn support(&self, p: Vec3) -> BSplineSupport {
        let u = self.control_grid.world_to_voxel(p);
        let dims = self.control_grid.dims();
        let mut base = [0; 3];
        let mut weights = [[0.0; 4]; 3];
        for a in 0..3 {
            let hi = (dims[a] - 2) as f64;
            let ua = u[a].clamp(1.0, hi - 1e-9);
            let cell = ua.floor();
            base[a] = cell as usize - 1;
            weights[a] = cubic_bspline_weights(ua - cell);
        }
        BSplineSupport { base, weights }
    }

    /// Visit the 64 control points of a support with their tensor weight.
    #[inline]
    pub fn for_each_weight(&self, s: &BSplineSupport, mut f: impl FnMut(usize, f64)) {
        let dims = self.control_grid.dims();
        for c in 0..4 {
            let wz = s.weights[2][c];
            let kz = s.base[2] + c;
            for b in 0..4 {
                let wyz = s.weights[1][b] * wz;
                let ky = s.base[1] + b;
                let row = dims[0] * (ky + dims[1] * kz);
                for a in 0..4 {
                    f(row + s.base[0] + a, s.weights[0][a] * wyz);
                }
            }
        }
    }

    #[inline]
    pub fn displacement_at(&self, s: &BSplineSupport) -> Vec3 {
        let mut d = [0.0; 3];
        self.for_each_weight(s, |idx, w| {
            let c = self.coefficients[idx];
            d[0] += w * c[0];
            d[1] += w * c[1];
            d[2] += w * c[2];
        });
        d
    }

    #[inline]
    pub fn apply(&self, p: Vec3) -> Vec3 {
        let d = self.displacement_at(&self.support(p));
        [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
    }
}

/// Per-atlas transform `affine ∘ bspline`: target world → atlas world.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasTransform {
    pub affine: AffineTransform,
    pub bspline: Option<BSplineTransform>,
}

impl AtlasTransform {
    pub fn identity(center: Vec3) -> Self {
        AtlasTransform {
            affine: AffineTransform::identity(center),
            bspline: None,
        }
    }

    pub fn from_affine(affine: AffineTransform) -> Self {
        AtlasTransform { affine, bspline: None }
    }

    #[inline]
    pub fn apply(&self, p: Vec3) -> Vec3 {
        match &self.bspline {
            Some(b) => self.affine.apply(b.apply(p)),
            None => self.affine.apply(p),
        }
    }
}

/// Transforms of the whole group. The target is implicitly the identity and
/// is not stored; `atlas(i)` maps target space into atlas `i` (from 0).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTransform {
    atlases: Vec<AtlasTransform>,
}

impl GroupTransform {
    pub fn new(atlases: Vec<AtlasTransform>) -> Self {
        GroupTransform { atlases }
    }

    pub fn identity(n_atlases: usize, center: Vec3) -> Self {
        GroupTransform {
            atlases: vec![AtlasTransform::identity(center); n_atlases],
        }
    }

    /// Number of images in the group, target included.
    pub fn len(&self) -> usize {
        self.atlases.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_atlases(&self) -> usize {
        self.atlases.len()
    }

    pub fn atlas(&self, i: usize) -> &AtlasTransform {
        &self.atlases[i]
    }

    pub fn atlases(&self) -> &[AtlasTransform] {
        &self.atlases
    }

    pub fn atlases_mut(&mut self) -> &mut [AtlasTransform] {
        &mut self.atlases
    }

    pub fn to_text(&self) -> String {
        let nums = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "GroupTransform");
        let _ = writeln!(s, "images = {}", self.len());
        let _ = writeln!(s, "image 0 identity");
        for (i, t) in self.atlases.iter().enumerate() {
            let kind = if t.bspline.is_some() {
                "affine_bspline"
            } else {
                "affine"
            };
            let _ = writeln!(s, "image {} {}", i + 1, kind);
            let m = t.affine.matrix;
            let flat: Vec<f64> = m.iter().flatten().copied().collect();
            let _ = writeln!(s, "matrix = {}", nums(&flat));
            let _ = writeln!(s, "translation = {}", nums(&t.affine.translation));
            let _ = writeln!(s, "center = {}", nums(&t.affine.center));
            if let Some(b) = &t.bspline {
                let g = b.control_grid();
                let d = g.dims();
                let _ = writeln!(s, "control_dims = {} {} {}", d[0], d[1], d[2]);
                let _ = writeln!(s, "control_spacing = {}", nums(&g.spacing()));
                let _ = writeln!(s, "control_origin = {}", nums(&g.origin()));
                let flat: Vec<f64> = b.coefficients().iter().flatten().copied().collect();
                let _ = writeln!(s, "coefficients = {}", nums(&flat));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::TransformParse { line, message };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines
                .next()
                .ok_or_else(|| err(0, format!("unexpected end of input, expected {what}")))
        };
        let kv = |(n, line): (usize, &str), key: &str| -> Result<String> {
            match line.split_once('=') {
                Some((k, v)) if k.trim() == key => Ok(v.trim().to_string()),
                _ => Err(err(n, format!("expected `{key} = ...`, got {line:?}"))),
            }
        };
        let floats = |n: usize, v: &str, count: Option<usize>| -> Result<Vec<f64>> {
            let out: Vec<f64> = v
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(n, format!("bad number: {e}")))?;
            if let Some(c) = count {
                if out.len() != c {
                    return Err(err(n, format!("expected {c} values, got {}", out.len())));
                }
            }
            Ok(out)
        };
        let triple = |v: Vec<f64>| [v[0], v[1], v[2]];

        let (n, magic) = next("header")?;
        if magic != "GroupTransform" {
            return Err(err(n, "missing GroupTransform header".into()));
        }
        let line = next("images")?;
        let images: usize = kv(line, "images")?
            .parse()
            .map_err(|_| err(line.0, "bad image count".into()))?;
        if images < 1 {
            return Err(err(line.0, "image count must be >= 1".into()));
        }
        let (n, first) = next("image 0")?;
        if first != "image 0 identity" {
            return Err(err(n, "image 0 (the target) must be the identity".into()));
        }

        let mut atlases = Vec::with_capacity(images - 1);
        for i in 1..images {
            let (n, head) = next("image entry")?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            let kind = match parts.as_slice() {
                ["image", idx, kind] if idx.parse::<usize>().ok() == Some(i) => *kind,
                _ => return Err(err(n, format!("expected `image {i} <kind>`"))),
            };
            let line = next("matrix")?;
            let m = floats(line.0, &kv(line, "matrix")?, Some(9))?;
            let line = next("translation")?;
            let t = triple(floats(line.0, &kv(line, "translation")?, Some(3))?);
            let line = next("center")?;
            let c = triple(floats(line.0, &kv(line, "center")?, Some(3))?);
            let matrix = [[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]];
            let affine = AffineTransform::new(matrix, t, c).map_err(|e| err(line.0, e.to_string()))?;
            let bspline = match kind {
                "affine" => None,
                "affine_bspline" => {
                    let line = next("control_dims")?;
                    let dims: Vec<usize> = kv(line, "control_dims")?
                        .split_whitespace()
                        .map(|t| t.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| err(line.0, format!("bad dims: {e}")))?;
                    if dims.len() != 3 {
                        return Err(err(line.0, "control_dims needs 3 values".into()));
                    }
                    let line = next("control_spacing")?;
                    let sp = triple(floats(line.0, &kv(line, "control_spacing")?, Some(3))?);
                    let line = next("control_origin")?;
                    let or = triple(floats(line.0, &kv(line, "control_origin")?, Some(3))?);
                    let grid =
                        Grid::new([dims[0], dims[1], dims[2]], sp, or).map_err(|e| err(line.0, e.to_string()))?;
                    let line = next("coefficients")?;
                    let flat = floats(line.0, &kv(line, "coefficients")?, Some(3 * grid.len()))?;
                    let coefs = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
                    Some(BSplineTransform::from_parts(grid, coefs).map_err(|e| err(line.0, e.to_string()))?)
                }
                other => return Err(err(n, format!("unknown transform kind {other:?}"))),
            };
            atlases.push(AtlasTransform { affine, bspline });
        }
        Ok(GroupTransform { atlases })
    }
}
