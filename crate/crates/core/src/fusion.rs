//! Atlas selection (iterative performance-weighted SIMPLE, or random) and
//! majority-vote label fusion.

use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::volume::LabelVolume;

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasRecord {
    pub id: usize,
    /// Atlas label propagated into target space.
    pub label: LabelVolume,
    pub weight: f64,
    pub alive: bool,
}

impl AtlasRecord {
    pub fn new(id: usize, label: LabelVolume) -> Self {
        AtlasRecord {
            id,
            label,
            weight: 1.0,
            alive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimpleParams {
    /// An atlas dies when its Dice falls below `mean - alpha * std`.
    pub alpha: f64,
    pub max_iters: usize,
    pub min_alive: usize,
    pub final_count: usize,
}

impl Default for SimpleParams {
    fn default() -> Self {
        SimpleParams {
            alpha: 1.0,
            max_iters: 10,
            min_alive: 3,
            final_count: 10,
        }
    }
}

impl SimpleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_alive >= 1 && self.final_count >= self.min_alive) {
            return Err(Error::InvalidParameter(
                "SIMPLE needs final_count >= min_alive >= 1".into(),
            ));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidParameter("alpha must be finite".into()));
        }
        Ok(())
    }
}

/// Per-voxel vote: 1 iff the weight voting 1 strictly exceeds the weight
/// voting 0. Inputs must be in a canonical order for the float sums to be
/// order independent.
fn vote(labels: &[(&LabelVolume, f64)]) -> Result<LabelVolume> {
    let (first, _) = labels.first().ok_or(Error::EmptyLabelList)?;
    let grid = *first.grid();
    if labels.iter().any(|(l, _)| *l.grid() != grid) {
        return Err(Error::GridMismatch);
    }
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let (mut on, mut off) = (0.0, 0.0);
            for (l, w) in labels {
                if l.data()[idx] != 0 {
                    on += w;
                } else {
                    off += w;
                }
            }
            (on > off) as u8
        })
        .collect();
    LabelVolume::new(grid, data)
}

/// Strict majority; an exact tie goes to background.
pub fn majority_vote(labels: &[LabelVolume]) -> Result<LabelVolume> {
    let pairs: Vec<_> = labels.iter().map(|l| (l, 1.0)).collect();
    vote(&pairs)
}

/// Weighted vote over the alive records; dead records are ignored.
pub fn weighted_majority_vote(records: &[AtlasRecord]) -> Result<LabelVolume> {
    let mut alive: Vec<&AtlasRecord> = records.iter().filter(|r| r.alive).collect();
    if alive.is_empty() {
        return Err(Error::EmptyLabelList);
    }
    if alive.iter().any(|r| !(r.weight >= 0.0 && r.weight.is_finite())) {
        return Err(Error::InvalidParameter("atlas weights must be finite and >= 0".into()));
    }
    if alive.iter().all(|r| r.weight == 0.0) {
        return Err(Error::ZeroWeights);
    }
    if alive.len() == 1 {
        return Ok(alive[0].label.clone());
    }
    alive.sort_by_key(|r| r.id);
    let pairs: Vec<_> = alive.iter().map(|r| (&r.label, r.weight)).collect();
    vote(&pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimpleIteration {
    pub iteration: usize,
    /// `(id, dice against the current consensus)` for every atlas alive at
    /// the start of the iteration, ordered by id.
    pub performance: Vec<(usize, f64)>,
    /// Ids still alive after this iteration's eliminations.
    pub alive: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimpleResult {
    /// Best `final_count` survivors, highest performance first.
    pub selected: Vec<usize>,
    /// Final weight of each selected id, in the same order.
    pub weights: Vec<f64>,
    pub history: Vec<SimpleIteration>,
    pub converged: bool,
}

impl SimpleResult {
    /// Line-oriented report: `iteration id performance alive`.
    pub fn history_text(&self) -> String {
        let mut out = String::from("iteration id performance alive\n");
        for h in &self.history {
            for &(id, p) in &h.performance {
                let alive = h.alive.contains(&id) as u8;
                let _ = writeln!(out, "{} {} {:.6} {}", h.iteration, id, p, alive);
            }
        }
        out
    }
}

fn by_performance(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Iteratively estimate each atlas's Dice against the weighted consensus,
/// reweight by it and discard outliers until the alive set stops changing.
pub fn simple_select(records: &[AtlasRecord], params: &SimpleParams) -> Result<SimpleResult> {
    params.validate()?;
    let mut work: Vec<AtlasRecord> = records.iter().filter(|r| r.alive).cloned().collect();
    if work.len() < params.min_alive {
        return Err(Error::TooFewAtlases {
            needed: params.min_alive,
            got: work.len(),
        });
    }
    work.sort_by_key(|r| r.id);
    work.iter_mut().for_each(|r| r.weight = 1.0);

    let mut history = Vec::new();
    let mut converged = false;
    let mut perf: Vec<(usize, f64)> = Vec::new();
    for iteration in 1..=params.max_iters {
        if work.iter().filter(|r| r.alive).all(|r| r.weight == 0.0) {
            work.iter_mut().for_each(|r| r.weight = 1.0);
        }
        let consensus = weighted_majority_vote(&work)?;
        perf = work
            .par_iter()
            .filter(|r| r.alive)
            .map(|r| dice(&r.label, &consensus).map(|d| (r.id, d)))
            .collect::<Result<_>>()?;
        for r in work.iter_mut() {
            if let Some(&(_, p)) = perf.iter().find(|(id, _)| *id == r.id) {
                r.weight = p;
            }
        }

        let n = perf.len() as f64;
        let mean = perf.iter().map(|p| p.1).sum::<f64>() / n;
        let std = (perf.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let threshold = mean - params.alpha * std;
        let mut survivors: Vec<(usize, f64)> = perf.iter().copied().filter(|p| p.1 >= threshold).collect();
        if survivors.len() < params.min_alive {
            let mut ranked = perf.clone();
            ranked.sort_by(by_performance);
            survivors = ranked[..params.min_alive].to_vec();
        }
        let died = survivors.len() < perf.len();
        for r in work.iter_mut() {
            r.alive = r.alive && survivors.iter().any(|s| s.0 == r.id);
        }
        let alive: Vec<usize> = work.iter().filter(|r| r.alive).map(|r| r.id).collect();
        history.push(SimpleIteration {
            iteration,
            performance: perf.clone(),
            alive,
        });
        perf.retain(|p| survivors.iter().any(|s| s.0 == p.0));
        if !died {
            converged = true;
            break;
        }
    }

    perf.sort_by(by_performance);
    perf.truncate(params.final_count);
    Ok(SimpleResult {
        selected: perf.iter().map(|p| p.0).collect(),
        weights: perf.iter().map(|p| p.1).collect(),
        history,
        converged,
    })
}

/// Uniform sample of `k` ids without replacement, deterministic per seed.
pub fn random_select(ids: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > ids.len() {
        return Err(Error::SampleTooLarge { k, count: ids.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, ids.len(), k)
        .into_iter()
        .map(|i| ids[i])
        .collect())
}
