//! Coherent local intensity clustering: fuzzy c-means with a smooth
//! multiplicative bias field, used to turn a raw scan into a tissue
//! probability map on a 0-100 scale.
//!
//! The minimized objective is the windowed clustering energy
//!
//! ```text
//! E(u, c, b) = sum_y sum_k u_k(y)^q sum_{x in W(y)} (I(y) - b(x) c_k)^2
//! ```
//!
//! where `W(y)` is the cubic window of `window_radius` voxels around `y`
//! (clipped at the volume faces). Every block update (memberships, centers,
//! bias) is an exact minimizer of `E` given the other two blocks, so the
//! energy never increases between outer iterations. The bias update is the
//! window average of the per-voxel estimate `I J1 / J2`, weighted by `J2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};

const CHUNK: usize = 4096;
const BIAS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClicParams {
    pub n_classes: usize,
    pub fuzzifier: f64,
    pub window_radius: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ClicParams {
    fn default() -> Self {
        ClicParams {
            n_classes: 3,
            fuzzifier: 2.0,
            window_radius: 2,
            max_iters: 50,
            tol: 1e-4,
        }
    }
}

impl ClicParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidParameter("n_classes must be >= 2".into()));
        }
        if !(self.fuzzifier > 1.0) {
            return Err(Error::InvalidParameter("fuzzifier must be > 1".into()));
        }
        if self.window_radius < 1 {
            return Err(Error::InvalidParameter("window_radius must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidParameter("tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClicResult {
    /// One membership volume per class, ordered like `centers`.
    pub memberships: Vec<Volume>,
    /// Class centers, ascending.
    pub centers: Vec<f64>,
    /// Multiplicative bias field (mean 1, strictly positive).
    pub bias: Volume,
    /// Objective after initialization followed by one value per outer iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Sum of `data` over the clipped cubic window of `radius` around every voxel.
pub(crate) fn box_sum(grid: &Grid, data: &[f64], radius: usize) -> Vec<f64> {
    let dims = grid.dims();
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let starts: Vec<usize> = (0..grid.len()).filter(|&idx| grid.coords(idx)[axis] == 0).collect();
        let src = &cur;
        let lines: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&s| {
                let mut prefix = Vec::with_capacity(n + 1);
                prefix.push(0.0);
                let mut acc = 0.0;
                for t in 0..n {
                    acc += src[s + t * stride];
                    prefix.push(acc);
                }
                (0..n)
                    .map(|t| {
                        let lo = t.saturating_sub(radius);
                        let hi = (t + radius + 1).min(n);
                        prefix[hi] - prefix[lo]
                    })
                    .collect()
            })
            .collect();
        let mut next = vec![0.0; cur.len()];
        for (&s, line) in starts.iter().zip(&lines) {
            for (t, v) in line.iter().enumerate() {
                next[s + t * stride] = *v;
            }
        }
        cur = next;
    }
    cur
}

/// Deterministic parallel sum: fixed-size chunks reduced in index order.
fn ordered_sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let partial: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(n)).map(&f).sum())
        .collect();
    partial.iter().sum()
}

struct Windowed {
    ones: Vec<f64>,
    b: Vec<f64>,
    b2: Vec<f64>,
}

impl Windowed {
    fn new(grid: &Grid, bias: &[f64], radius: usize) -> Self {
        let ones = box_sum(grid, &vec![1.0; bias.len()], radius);
        let b = box_sum(grid, bias, radius);
        let sq: Vec<f64> = bias.iter().map(|v| v * v).collect();
        let b2 = box_sum(grid, &sq, radius);
        Windowed { ones, b, b2 }
    }

    #[inline]
    fn dist(&self, y: usize, intensity: f64, c: f64) -> f64 {
        let d = intensity * intensity * self.ones[y] - 2.0 * intensity * c * self.b[y] + c * c * self.b2[y];
        d.max(0.0)
    }
}

fn objective(img: &[f64], u: &[Vec<f64>], centers: &[f64], w: &Windowed, q: f64) -> f64 {
    ordered_sum(img.len(), |y| {
        centers
            .iter()
            .enumerate()
            .map(|(k, &c)| u[k][y].powf(q) * w.dist(y, img[y], c))
            .sum::<f64>()
    })
}

fn update_memberships(img: &[f64], centers: &[f64], w: &Windowed, q: f64) -> Vec<Vec<f64>> {
    let k_count = centers.len();
    let expo = -1.0 / (q - 1.0);
    let per_voxel: Vec<Vec<f64>> = (0..img.len())
        .into_par_iter()
        .map(|y| {
            let d: Vec<f64> = centers.iter().map(|&c| w.dist(y, img[y], c)).collect();
            let scale = d.iter().cloned().fold(0.0, f64::max);
            let tiny = 1e-12 * scale.max(f64::MIN_POSITIVE);
            let zeros = d.iter().filter(|&&v| v <= tiny).count();
            if zeros > 0 {
                return d
                    .iter()
                    .map(|&v| if v <= tiny { 1.0 / zeros as f64 } else { 0.0 })
                    .collect();
            }
            // scale-free form avoids overflow of d^expo for tiny distances
            let inv: Vec<f64> = d.iter().map(|&v| (v / scale).powf(expo)).collect();
            let total: f64 = inv.iter().sum();
            inv.iter().map(|v| v / total).collect()
        })
        .collect();
    (0..k_count).map(|k| per_voxel.iter().map(|m| m[k]).collect()).collect()
}

fn initial_centers(img: &[f64], k_count: usize) -> Result<Vec<f64>> {
    let mut sorted = img.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k_count {
        return Err(Error::DegenerateInput {
            distinct: distinct.len(),
            needed: k_count,
        });
    }
    let n = sorted.len();
    let quantiles: Vec<f64> = (1..=k_count)
        .map(|k| {
            let pos = k as f64 / (k_count + 1) as f64 * (n - 1) as f64;
            sorted[pos.round() as usize]
        })
        .collect();
    if quantiles.windows(2).all(|w| w[0] < w[1]) {
        return Ok(quantiles);
    }
    // Quantiles collapse on strongly imbalanced histograms; fall back to an
    // even split of the intensity range.
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    Ok((1..=k_count)
        .map(|k| lo + k as f64 / (k_count + 1) as f64 * (hi - lo))
        .collect())
}

/// Plain fuzzy c-means on the intensities (no bias), started from
/// `centers`. Quantile starts all land in the dominant class when one class
/// covers most of the volume; this pass moves them onto the histogram modes
/// before the bias is allowed to vary.
fn fcm_centers(img: &[f64], mut centers: Vec<f64>, q: f64, max_iters: usize, tol: f64) -> Vec<f64> {
    let expo = -1.0 / (q - 1.0);
    for _ in 0..max_iters {
        let weights: Vec<Vec<f64>> = img
            .par_iter()
            .map(|&v| {
                let d: Vec<f64> = centers.iter().map(|&c| (v - c) * (v - c)).collect();
                if let Some(hit) = d.iter().position(|&x| x == 0.0) {
                    return (0..d.len()).map(|k| (k == hit) as u8 as f64).collect();
                }
                let scale = d.iter().cloned().fold(0.0, f64::max);
                let inv: Vec<f64> = d.iter().map(|&x| (x / scale).powf(expo)).collect();
                let total: f64 = inv.iter().sum();
                inv.iter().map(|x| (x / total).powf(q)).collect()
            })
            .collect();
        let next: Vec<f64> = (0..centers.len())
            .map(|k| {
                let num = ordered_sum(img.len(), |y| weights[y][k] * img[y]);
                let den = ordered_sum(img.len(), |y| weights[y][k]);
                if den > 0.0 {
                    num / den
                } else {
                    centers[k]
                }
            })
            .collect();
        let change = next
            .iter()
            .zip(&centers)
            .map(|(c, p)| (c - p).abs() / p.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        centers = next;
        if change < tol {
            break;
        }
    }
    centers
}

/// Fit the clustering model. Non-convergence is reported through
/// `converged`, never as an error.
pub fn clic_fit(vol: &Volume, params: &ClicParams) -> Result<ClicResult> {
    params.validate()?;
    let grid = *vol.grid();
    let img = vol.data();
    let q = params.fuzzifier;
    let r = params.window_radius;
    let mut centers = fcm_centers(
        img,
        initial_centers(img, params.n_classes)?,
        q,
        params.max_iters,
        params.tol,
    );
    let mut bias = vec![1.0; img.len()];
    let mut w = Windowed::new(&grid, &bias, r);

    let mut u = update_memberships(img, &centers, &w, q);
    let mut trace = vec![objective(img, &u, &centers, &w, q)];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..params.max_iters {
        iterations += 1;
        let prev = centers.clone();

        u = update_memberships(img, &centers, &w, q);

        for (k, c) in centers.iter_mut().enumerate() {
            let uk = &u[k];
            let num = ordered_sum(img.len(), |y| uk[y].powf(q) * img[y] * w.b[y]);
            let den = ordered_sum(img.len(), |y| uk[y].powf(q) * w.b2[y]);
            if den > 0.0 {
                *c = num / den;
            }
        }

        let (j1, j2): (Vec<f64>, Vec<f64>) = (0..img.len())
            .into_par_iter()
            .map(|y| {
                let mut a = 0.0;
                let mut b = 0.0;
                for (k, &c) in centers.iter().enumerate() {
                    let m = u[k][y].powf(q);
                    a += m * c;
                    b += m * c * c;
                }
                (img[y] * a, b)
            })
            .unzip();
        let num = box_sum(&grid, &j1, r);
        let den = box_sum(&grid, &j2, r);
        bias = num
            .iter()
            .zip(&den)
            .map(|(n, d)| if *d > 0.0 { (n / d).max(BIAS_FLOOR) } else { 1.0 })
            .collect();
        let mean = ordered_sum(bias.len(), |y| bias[y]) / bias.len() as f64;
        bias.iter_mut().for_each(|b| *b /= mean);
        centers.iter_mut().for_each(|c| *c *= mean);
        w = Windowed::new(&grid, &bias, r);

        trace.push(objective(img, &u, &centers, &w, q));

        let change = centers
            .iter()
            .zip(&prev)
            .map(|(c, p)| (c - p).abs() / p.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        if change < params.tol {
            converged = true;
            break;
        }
    }

    // Memberships consistent with the final centers and bias.
    u = update_memberships(img, &centers, &w, q);

    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]));
    let memberships = order
        .iter()
        .map(|&k| Volume::new(grid, std::mem::take(&mut u[k])))
        .collect::<Result<Vec<_>>>()?;
    let centers = order.iter().map(|&k| centers[k]).collect();

    Ok(ClicResult {
        memberships,
        centers,
        bias: Volume::new(grid, bias)?,
        objective: trace,
        iterations,
        converged,
    })
}

/// `100 ×` membership of the brightest class, clamped to `[0, 100]`.
pub fn probability_map(res: &ClicResult) -> Volume {
    let bright = res
        .memberships
        .last()
        .expect("ClicResult always holds at least two classes");
    let data = bright.data().iter().map(|&u| (100.0 * u).clamp(0.0, 100.0)).collect();
    Volume::new(*bright.grid(), data).expect("memberships are finite")
}
