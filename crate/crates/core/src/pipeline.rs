//! Run configuration, per-stage operations with their file formats, and the
//! end-to-end drivers behind the command-line tool.
//!
//! Every stage writes its artifacts through the functions in this module, so
//! running the stage commands one by one produces the same bytes as a full
//! pipeline run with the same configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clic::{clic_fit, probability_map, ClicParams};
use crate::error::{Error, Result};
use crate::fusion::{majority_vote, random_select, simple_select, AtlasRecord, SimpleParams, SimpleResult};
use crate::levelset::{cv_refine, CvParams, RefineResult};
use crate::metrics::{apd, dice};
use crate::mhd::{self, ElementType};
use crate::phantom::{corrupt_label, generate_cohort, PhantomParams};
use crate::registration::{groupwise_register, propagate_label, GroupTransform, RegParams};
use crate::volume::{LabelVolume, Volume};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    #[default]
    Simple,
    Random,
}

impl SelectionMode {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::Simple => "simple",
            SelectionMode::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(SelectionMode::Simple),
            "random" => Ok(SelectionMode::Random),
            _ => Err(Error::Config(format!(
                "unknown selection mode {s:?} (expected simple or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Segment `paths.target` with the atlas directories.
    #[default]
    Single,
    /// Leave-one-out over the atlas directories, or over a generated phantom
    /// cohort when none are given.
    Loo,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atlas_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atlas_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunParams {
    pub seed: u64,
    pub mode: RunMode,
    pub selection: SelectionMode,
    /// Size of the generated cohort for leave-one-out without atlas
    /// directories.
    pub cohort_size: usize,
    /// Number of cohort labels replaced by corrupted copies when they serve
    /// as atlases (evaluation always uses the clean label).
    pub corrupted: usize,
    pub corruption_severity: f64,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            seed: 0,
            mode: RunMode::Single,
            selection: SelectionMode::Simple,
            cohort_size: 12,
            corrupted: 0,
            corruption_severity: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipeline: RunParams,
    pub paths: Paths,
    pub clic: ClicParams,
    pub registration: RegParams,
    pub simple: SimpleParams,
    pub levelset: CvParams,
    pub phantom: PhantomParams,
}

impl PipelineConfig {
    /// Parse config text; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(base) = base {
            for p in [
                &mut cfg.paths.target,
                &mut cfg.paths.truth,
                &mut cfg.paths.atlas_images,
                &mut cfg.paths.atlas_labels,
                &mut cfg.paths.output,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.set_seed(cfg.pipeline.seed);
        Ok(cfg)
    }

    /// Load, resolve and validate a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let cfg = Self::from_toml(&text, path.parent())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The run-wide seed drives every seeded stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.pipeline.seed = seed;
        self.registration.seed = seed;
        self.phantom.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.clic.validate()?;
        self.registration.validate()?;
        self.simple.validate()?;
        self.levelset.validate()?;
        self.phantom.validate()?;
        let p = &self.paths;
        for path in [&p.target, &p.truth, &p.atlas_images, &p.atlas_labels]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(Error::MissingFile(path.clone()));
            }
        }
        if p.atlas_images.is_some() != p.atlas_labels.is_some() {
            return Err(Error::Config(
                "atlas_images and atlas_labels must be given together".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pipeline.corruption_severity) {
            return Err(Error::Config("corruption_severity must lie in [0, 1]".into()));
        }
        if self.pipeline.mode == RunMode::Loo && p.atlas_images.is_none() && self.pipeline.cohort_size < 2 {
            return Err(Error::Config("leave-one-out needs cohort_size >= 2".into()));
        }
        Ok(())
    }

    /// Canonical text of the resolved configuration.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// One named image with its label.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub image: Volume,
    pub label: LabelVolume,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

/// Sorted stems of the `.mhd` files in `dir`.
pub fn list_volumes(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(dir.to_path_buf()),
        _ => Error::io(dir, e),
    })?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("mhd") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Images from `images`, labels with the same file names from `labels`.
pub fn load_cases(images: &Path, labels: &Path) -> Result<Vec<Case>> {
    list_volumes(images)?
        .into_iter()
        .map(|name| {
            let file = format!("{name}.mhd");
            let image = mhd::read_volume(images.join(&file))?;
            let label = mhd::read_label(labels.join(&file))?;
            if image.grid() != label.grid() {
                return Err(Error::GridMismatch);
            }
            Ok(Case { name, image, label })
        })
        .collect()
}

pub fn write_cases(cases: &[Case], dir: &Path) -> Result<()> {
    let (images, labels) = (dir.join("images"), dir.join("labels"));
    create_dir(&images)?;
    create_dir(&labels)?;
    for c in cases {
        mhd::write_mhd(&c.image, images.join(format!("{}.mhd", c.name)), ElementType::Float32)?;
        mhd::write_label(&c.label, labels.join(format!("{}.mhd", c.name)))?;
    }
    Ok(())
}

/// Phantom cohort named `case_00`, `case_01`, ...
pub fn phantom_cases(params: &PhantomParams, n: usize, seed: u64) -> Result<Vec<Case>> {
    Ok(generate_cohort(params, n, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, (image, label))| Case {
            name: format!("case_{i:02}"),
            image,
            label,
        })
        .collect())
}

/// Probability map of `vol`, rounded to the float32 precision it is stored
/// with so that later stages see the same values whether they read it back
/// or not.
pub fn normalize(vol: &Volume, params: &ClicParams) -> Result<Volume> {
    let map = probability_map(&clic_fit(vol, params)?);
    map.map(|v| v as f32 as f64)
}

pub fn write_map(map: &Volume, path: &Path) -> Result<()> {
    mhd::write_mhd(map, path, ElementType::Float32)
}

/// Register the atlas maps to the target map and propagate the atlas labels.
pub fn register_and_propagate(
    target: &Volume,
    atlas_maps: &[Volume],
    atlas_labels: &[LabelVolume],
    params: &RegParams,
) -> Result<(GroupTransform, Vec<LabelVolume>)> {
    let reg = groupwise_register(target, atlas_maps, params)?;
    let propagated = atlas_labels
        .iter()
        .zip(reg.transform.atlases())
        .map(|(l, t)| propagate_label(l, t, target.grid()))
        .collect();
    Ok((reg.transform, propagated))
}

pub fn write_registration(gt: &GroupTransform, names: &[String], propagated: &[LabelVolume], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_text(&dir.join("transform.txt"), &gt.to_text())?;
    let pdir = dir.join("propagated");
    create_dir(&pdir)?;
    for (name, lab) in names.iter().zip(propagated) {
        mhd::write_label(lab, pdir.join(format!("{name}.mhd")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub mode: SelectionMode,
    /// Indices into the atlas list.
    pub ids: Vec<usize>,
    pub simple: Option<SimpleResult>,
}

/// Choose atlases among the propagated labels. Random selection draws
/// `simple.final_count` atlases (all of them if fewer).
pub fn select(labels: &[LabelVolume], mode: SelectionMode, params: &SimpleParams, seed: u64) -> Result<Selection> {
    match mode {
        SelectionMode::Simple => {
            let records: Vec<AtlasRecord> = labels
                .iter()
                .enumerate()
                .map(|(i, l)| AtlasRecord::new(i, l.clone()))
                .collect();
            let res = simple_select(&records, params)?;
            Ok(Selection {
                mode,
                ids: res.selected.clone(),
                simple: Some(res),
            })
        }
        SelectionMode::Random => {
            let ids: Vec<usize> = (0..labels.len()).collect();
            let k = params.final_count.min(ids.len());
            Ok(Selection {
                mode,
                ids: random_select(&ids, k, seed)?,
                simple: None,
            })
        }
    }
}

/// `<prefix>.txt` lists the selection; SIMPLE also writes
/// `<prefix>_history.txt`.
pub fn write_selection(sel: &Selection, names: &[String], dir: &Path, prefix: &str) -> Result<()> {
    create_dir(dir)?;
    let mut out = format!("mode {}\nid name\n", sel.mode.name());
    for &id in &sel.ids {
        let _ = writeln!(out, "{} {}", id, names[id]);
    }
    write_text(&dir.join(format!("{prefix}.txt")), &out)?;
    if let Some(res) = &sel.simple {
        write_text(&dir.join(format!("{prefix}_history.txt")), &res.history_text())?;
    }
    Ok(())
}

/// Selected atlas ids from a selection file.
pub fn read_selection(path: &Path) -> Result<Vec<usize>> {
    let text = read_text(path)?;
    let bad = |line: usize, message: &str| Error::Config(format!("{}:{}: {}", path.display(), line, message));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.starts_with("mode ") => {}
        _ => return Err(bad(1, "expected 'mode <simple|random>'")),
    }
    match lines.next() {
        Some((_, "id name")) => {}
        _ => return Err(bad(2, "expected 'id name'")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_whitespace()
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(n + 1, "expected an atlas id"))
        })
        .collect()
}

/// Majority vote over the selected labels.
pub fn fuse(labels: &[LabelVolume], ids: &[usize]) -> Result<LabelVolume> {
    let chosen: Vec<LabelVolume> = ids
        .iter()
        .map(|&i| {
            labels
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Config(format!("selected atlas id {i} out of range")))
        })
        .collect::<Result<_>>()?;
    majority_vote(&chosen)
}

pub fn refine(map: &Volume, mask: &LabelVolume, params: &CvParams) -> Result<RefineResult> {
    cv_refine(map, mask, params)
}

pub fn write_refinement(res: &RefineResult, mask_path: &Path, trace_path: &Path) -> Result<()> {
    mhd::write_label(&res.mask, mask_path)?;
    write_text(trace_path, &res.trace_csv())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub dice: f64,
    pub apd_ssd_mm: f64,
}

pub fn evaluate(pred: &LabelVolume, truth: &LabelVolume) -> Result<Scores> {
    Ok(Scores {
        dice: dice(pred, truth)?,
        apd_ssd_mm: apd(pred, truth)?,
    })
}

pub const EVALUATION_HEADER: &str = "case,stage,dice,apd_ssd_mm";

pub fn evaluation_row(case: &str, stage: &str, s: &Scores) -> String {
    format!("{},{},{:.6},{:.6}", case, stage, s.dice, s.apd_ssd_mm)
}

/// Wall time of each stage, in run order.
#[derive(Debug, Clone, Default)]
pub struct Timings(Vec<(String, f64)>);

impl Timings {
    pub fn time<T>(&mut self, stage: impl Into<String>, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.0.push((stage.into(), start.elapsed().as_secs_f64()));
        out
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|t| t.1).sum()
    }
}

/// Enough to reproduce a run: toolkit version, seed, config hash and the
/// resolved config itself.
pub fn manifest_text(cfg: &PipelineConfig, command: &str, timings: &Timings) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "tool atlasseg {VERSION}");
    let _ = writeln!(out, "command {command}");
    let _ = writeln!(out, "seed {}", cfg.pipeline.seed);
    let _ = writeln!(out, "config_sha256 {}", cfg.hash());
    for (stage, secs) in &timings.0 {
        let _ = writeln!(out, "stage_seconds {stage} {secs:.3}");
    }
    let _ = writeln!(out, "total_seconds {:.3}", timings.total());
    out.push_str("\n[config]\n");
    out.push_str(&cfg.canonical_text());
    out
}

fn output_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    cfg.paths
        .output
        .clone()
        .ok_or_else(|| Error::Config("no output directory (set paths.output or pass --out)".into()))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("paths.{key} is required for this command")))
}

/// Output layout of a single-target run.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn target_map(&self) -> PathBuf {
        self.root.join("normalized").join("target.mhd")
    }
    pub fn atlas_maps(&self) -> PathBuf {
        self.root.join("normalized").join("atlases")
    }
    pub fn registration(&self) -> PathBuf {
        self.root.join("registration")
    }
    pub fn propagated(&self) -> PathBuf {
        self.registration().join("propagated")
    }
    pub fn selection(&self) -> PathBuf {
        self.root.join("selection.txt")
    }
    pub fn fused(&self) -> PathBuf {
        self.root.join("fused.mhd")
    }
    pub fn refined(&self) -> PathBuf {
        self.root.join("refined.mhd")
    }
    pub fn trace(&self) -> PathBuf {
        self.root.join("levelset_trace.csv")
    }
    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation.csv")
    }
}

fn load_maps(dir: &Path) -> Result<(Vec<String>, Vec<Volume>)> {
    let names = list_volumes(dir)?;
    let maps = names
        .iter()
        .map(|n| mhd::read_volume(dir.join(format!("{n}.mhd"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((names, maps))
}

/// Probability maps of the target and of every atlas image.
pub fn stage_normalize(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let target = mhd::read_volume(required(&cfg.paths.target, "target")?)?;
    let images = required(&cfg.paths.atlas_images, "atlas_images")?;
    create_dir(&out.atlas_maps())?;
    write_map(&normalize(&target, &cfg.clic)?, &out.target_map())?;
    for name in list_volumes(images)? {
        let img = mhd::read_volume(images.join(format!("{name}.mhd")))?;
        write_map(
            &normalize(&img, &cfg.clic)?,
            &out.atlas_maps().join(format!("{name}.mhd")),
        )?;
    }
    Ok(())
}

/// Groupwise registration of the atlas maps to the target map, and
/// propagation of the atlas labels.
pub fn stage_register(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let labels_dir = required(&cfg.paths.atlas_labels, "atlas_labels")?;
    let target = mhd::read_volume(out.target_map())?;
    let (names, maps) = load_maps(&out.atlas_maps())?;
    if names.is_empty() {
        return Err(Error::NoAtlases);
    }
    let labels = names
        .iter()
        .map(|n| mhd::read_label(labels_dir.join(format!("{n}.mhd"))))
        .collect::<Result<Vec<_>>>()?;
    let (gt, propagated) = register_and_propagate(&target, &maps, &labels, &cfg.registration)?;
    write_registration(&gt, &names, &propagated, &out.registration())
}

fn load_propagated(out: &Layout) -> Result<(Vec<String>, Vec<LabelVolume>)> {
    let dir = out.propagated();
    let names = list_volumes(&dir)?;
    let labels = names
        .iter()
        .map(|n| mhd::read_label(dir.join(format!("{n}.mhd"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((names, labels))
}

pub fn stage_select(cfg: &PipelineConfig, out: &Layout) -> Result<Selection> {
    let (names, labels) = load_propagated(out)?;
    let sel = select(&labels, cfg.pipeline.selection, &cfg.simple, cfg.pipeline.seed)?;
    write_selection(&sel, &names, &out.root, "selection")?;
    Ok(sel)
}

pub fn stage_fuse(out: &Layout) -> Result<()> {
    let (_, labels) = load_propagated(out)?;
    let ids = read_selection(&out.selection())?;
    mhd::write_label(&fuse(&labels, &ids)?, out.fused())
}

pub fn stage_refine(cfg: &PipelineConfig, out: &Layout) -> Result<()> {
    let map = mhd::read_volume(out.target_map())?;
    let mask = mhd::read_label(out.fused())?;
    write_refinement(&refine(&map, &mask, &cfg.levelset)?, &out.refined(), &out.trace())
}

/// Scores of the fused and the refined segmentation against `paths.truth`.
pub fn stage_evaluate(cfg: &PipelineConfig, out: &Layout) -> Result<(Scores, Scores)> {
    let truth = mhd::read_label(required(&cfg.paths.truth, "truth")?)?;
    let a = evaluate(&mhd::read_label(out.fused())?, &truth)?;
    let r = evaluate(&mhd::read_label(out.refined())?, &truth)?;
    let csv = format!(
        "{EVALUATION_HEADER}\n{}\n{}\n",
        evaluation_row("target", "atlas", &a),
        evaluation_row("target", "refined", &r)
    );
    write_text(&out.evaluation(), &csv)?;
    Ok((a, r))
}

/// Generated cohort written as `images/` and `labels/` under `out`.
pub fn stage_phantom(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    write_cases(
        &phantom_cases(&cfg.phantom, cfg.pipeline.cohort_size, cfg.pipeline.seed)?,
        out,
    )
}

/// Segment `paths.target` with the atlas set by running every stage in turn,
/// then write `manifest.txt`. Returns the fused and refined scores when
/// `paths.truth` is set.
pub fn run_single(cfg: &PipelineConfig) -> Result<Option<(Scores, Scores)>> {
    cfg.validate()?;
    let out = Layout::new(output_dir(cfg)?);
    create_dir(&out.root)?;
    let mut t = Timings::default();
    let result = (|| {
        t.time("normalize", || stage_normalize(cfg, &out))?;
        t.time("register", || stage_register(cfg, &out))?;
        t.time("select", || stage_select(cfg, &out))?;
        t.time("fuse", || stage_fuse(&out))?;
        t.time("refine", || stage_refine(cfg, &out))?;
        match cfg.paths.truth {
            Some(_) => t.time("evaluate", || stage_evaluate(cfg, &out)).map(Some),
            None => Ok(None),
        }
    })();
    // The manifest is written even when a stage fails.
    write_text(&out.root.join("manifest.txt"), &manifest_text(cfg, "pipeline", &t))?;
    result
}

/// Run the configured mode: single target or leave-one-out.
pub fn run(cfg: &PipelineConfig) -> Result<()> {
    match cfg.pipeline.mode {
        RunMode::Single => run_single(cfg).map(|_| ()),
        RunMode::Loo => run_loo(cfg).map(|_| ()),
    }
}

/// One leave-one-out case, scored for both selection modes.
#[derive(Debug, Clone, PartialEq)]
pub struct LooRow {
    pub case: String,
    pub simple_atlas: Scores,
    pub simple_refined: Scores,
    pub random_atlas: Scores,
    pub random_refined: Scores,
}

pub const LOO_HEADER: &str = "case,simple_dice_atlas,simple_apd_ssd_mm_atlas,simple_dice_refined,simple_apd_ssd_mm_refined,random_dice_atlas,random_apd_ssd_mm_atlas,random_dice_refined,random_apd_ssd_mm_refined";

impl LooRow {
    pub fn csv(&self) -> String {
        let f = |s: &Scores| format!("{:.6},{:.6}", s.dice, s.apd_ssd_mm);
        format!(
            "{},{},{},{},{}",
            self.case,
            f(&self.simple_atlas),
            f(&self.simple_refined),
            f(&self.random_atlas),
            f(&self.random_refined)
        )
    }
}

pub fn loo_csv(rows: &[LooRow]) -> String {
    let mut out = format!("{LOO_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

/// Ids of the cohort members whose labels are corrupted when used as atlases.
pub fn corrupted_ids(n: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    let ids: Vec<usize> = (0..n).collect();
    let mut chosen = random_select(&ids, count.min(n), seed ^ 0xC0FF_EE00)?;
    chosen.sort_unstable();
    Ok(chosen)
}

/// Leave-one-out: every case is segmented with all the others as atlases,
/// once with SIMPLE selection and once with random selection.
///
/// Writes `loo.csv`, `normalized/<name>.mhd`, per-case artifacts under
/// `cases/<name>/` and `manifest.txt`.
pub fn run_loo(cfg: &PipelineConfig) -> Result<Vec<LooRow>> {
    cfg.validate()?;
    let out = output_dir(cfg)?;
    create_dir(&out)?;
    let mut t = Timings::default();
    let seed = cfg.pipeline.seed;
    let result = (|| {
        let cases = t.time("load", || match (&cfg.paths.atlas_images, &cfg.paths.atlas_labels) {
            (Some(i), Some(l)) => load_cases(i, l),
            _ => phantom_cases(&cfg.phantom, cfg.pipeline.cohort_size, seed),
        })?;
        if cases.len() < 2 {
            return Err(Error::TooFewAtlases {
                needed: 2,
                got: cases.len(),
            });
        }
        let names: Vec<String> = cases.iter().map(|c| c.name.clone()).collect();
        let bad = corrupted_ids(cases.len(), cfg.pipeline.corrupted, seed)?;
        let atlas_labels: Vec<LabelVolume> = cases
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if bad.contains(&i) {
                    corrupt_label(&c.label, cfg.pipeline.corruption_severity, seed.wrapping_add(i as u64))
                } else {
                    c.label.clone()
                }
            })
            .collect();

        let ndir = out.join("normalized");
        create_dir(&ndir)?;
        let maps = t.time("normalize", || {
            cases
                .iter()
                .map(|c| {
                    let m = normalize(&c.image, &cfg.clic)?;
                    write_map(&m, &ndir.join(format!("{}.mhd", c.name)))?;
                    Ok(m)
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut rows = Vec::new();
        for (i, case) in cases.iter().enumerate() {
            let cdir = out.join("cases").join(&case.name);
            let others: Vec<usize> = (0..cases.len()).filter(|&j| j != i).collect();
            let other_names: Vec<String> = others.iter().map(|&j| names[j].clone()).collect();
            let other_maps: Vec<Volume> = others.iter().map(|&j| maps[j].clone()).collect();
            let other_labels: Vec<LabelVolume> = others.iter().map(|&j| atlas_labels[j].clone()).collect();
            let reg = RegParams {
                seed: seed.wrapping_add(i as u64),
                ..cfg.registration.clone()
            };
            let (_, propagated) = t.time(format!("register_{}", case.name), || {
                let (gt, prop) = register_and_propagate(&maps[i], &other_maps, &other_labels, &reg)?;
                write_registration(&gt, &other_names, &prop, &cdir)?;
                Ok((gt, prop))
            })?;

            let mut scores = Vec::new();
            for mode in [SelectionMode::Simple, SelectionMode::Random] {
                let tag = mode.name();
                let (a, r) = t.time(format!("{tag}_{}", case.name), || {
                    let sel = select(&propagated, mode, &cfg.simple, seed.wrapping_add(i as u64))?;
                    write_selection(&sel, &other_names, &cdir, &format!("selection_{tag}"))?;
                    let fused = fuse(&propagated, &sel.ids)?;
                    mhd::write_label(&fused, cdir.join(format!("fused_{tag}.mhd")))?;
                    let refined = refine(&maps[i], &fused, &cfg.levelset)?;
                    write_refinement(
                        &refined,
                        &cdir.join(format!("refined_{tag}.mhd")),
                        &cdir.join(format!("levelset_trace_{tag}.csv")),
                    )?;
                    Ok((evaluate(&fused, &case.label)?, evaluate(&refined.mask, &case.label)?))
                })?;
                scores.push((a, r));
            }
            rows.push(LooRow {
                case: case.name.clone(),
                simple_atlas: scores[0].0,
                simple_refined: scores[0].1,
                random_atlas: scores[1].0,
                random_refined: scores[1].1,
            });
            write_text(&out.join("loo.csv"), &loo_csv(&rows))?;
        }
        Ok(rows)
    })();
    write_text(&out.join("manifest.txt"), &manifest_text(cfg, "pipeline loo", &t))?;
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_text() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.canonical_text(), None).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn config_sections_and_seed() {
        let text = "[pipeline]\nseed = 7\nmode = \"loo\"\nselection = \"random\"\n\n[simple]\nalpha = 0.5\n\n[registration]\nlevels = [{ sigma_mm = 2.0, factor = 2 }]\n";
        let cfg = PipelineConfig::from_toml(text, None).unwrap();
        assert_eq!(cfg.pipeline.seed, 7);
        assert_eq!(cfg.registration.seed, 7);
        assert_eq!(cfg.phantom.seed, 7);
        assert_eq!(cfg.pipeline.selection, SelectionMode::Random);
        assert_eq!(cfg.simple.alpha, 0.5);
        assert_eq!(cfg.registration.levels.len(), 1);
        assert_eq!(cfg.clic, ClicParams::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            PipelineConfig::from_toml("[nope]\nx = 1\n", None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml("[simple]\nalpah = 1.0\n", None),
            Err(Error::Config(_))
        ));
        let cfg = PipelineConfig::from_toml("[pipeline]\nmode = \"single\"\n", None).unwrap();
        assert!(matches!(run_single(&cfg), Err(Error::Config(_))));
        let cfg = PipelineConfig::from_toml("[paths]\ntarget = \"/no/such/file.mhd\"\n", None).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::MissingFile(_))));
        let cfg = PipelineConfig::from_toml("[simple]\nmin_alive = 5\nfinal_count = 4\n", None).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::InvalidParameter(_))));
        assert!(matches!(
            PipelineConfig::load(Path::new("/no/such/config.toml")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn readme_config_example_parses() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\n").unwrap() + "```toml\n".len();
        let text = &readme[start..start + readme[start..].find("```").unwrap()];
        let cfg = PipelineConfig::from_toml(text, None).unwrap();
        let defaults = PipelineConfig::default();
        assert_eq!(cfg.clic, defaults.clic);
        assert_eq!(cfg.registration, defaults.registration);
        assert_eq!(cfg.simple, defaults.simple);
        assert_eq!(cfg.levelset, defaults.levelset);
        assert_eq!(cfg.pipeline, defaults.pipeline);
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let cfg = PipelineConfig::from_toml(
            "[paths]\noutput = \"out\"\ntarget = \"/abs/t.mhd\"\n",
            Some(Path::new("/base")),
        )
        .unwrap();
        assert_eq!(cfg.paths.output.as_deref(), Some(Path::new("/base/out")));
        assert_eq!(cfg.paths.target.as_deref(), Some(Path::new("/abs/t.mhd")));
    }

    #[test]
    fn selection_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sel = Selection {
            mode: SelectionMode::Random,
            ids: vec![2, 0],
            simple: None,
        };
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        write_selection(&sel, &names, dir.path(), "sel").unwrap();
        assert_eq!(read_selection(&dir.path().join("sel.txt")).unwrap(), vec![2, 0]);
        fs::write(dir.path().join("bad.txt"), "mode random\nid name\nx c\n").unwrap();
        assert!(read_selection(&dir.path().join("bad.txt")).is_err());
    }

    #[test]
    fn corrupted_ids_are_seeded_and_sorted() {
        let a = corrupted_ids(12, 5, 3).unwrap();
        assert_eq!(a, corrupted_ids(12, 5, 3).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(corrupted_ids(12, 0, 3).unwrap().is_empty());
    }
}
