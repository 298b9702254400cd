use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atlasseg::mhd::{self, ElementType};
use atlasseg::{Grid, Volume};

const FAST: &str = r#"
[pipeline]
seed = 3
cohort_size = 4

[phantom]
dims = [24, 24, 24]
semi_axes = [7.0, 6.0, 5.0]
n_tubes = 2
tube_radius = 1.5
tube_length = 5.0
deformation_amplitude = 1.5
deformation_smoothness = 6.0

[clic]
max_iters = 8

[registration]
levels = [{ sigma_mm = 1.0, factor = 1 }]
affine_iterations = 20
bspline_iterations = 20
max_samples = 1024

[simple]
min_alive = 2
final_count = 3

[levelset]
n_iters = 8
reinit_every = 4
"#;

fn atlasseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atlasseg"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn copy_case(cohort: &Path, name: &str, dest: &Path) {
    for sub in ["images", "labels"] {
        fs::create_dir_all(dest.join(sub)).unwrap();
        for ext in ["mhd", "raw"] {
            fs::copy(
                cohort.join(sub).join(format!("{name}.{ext}")),
                dest.join(sub).join(format!("{name}.{ext}")),
            )
            .unwrap();
        }
    }
}

/// Phantom cohort in `dir/cohort`, with case_00 as target and the rest as
/// atlases under `dir/atlases`; returns the single-target config path.
fn setup(dir: &Path) -> PathBuf {
    let ph = dir.join("phantom.toml");
    fs::write(&ph, FAST).unwrap();
    let out = atlasseg(&[
        "phantom",
        "--config",
        ph.to_str().unwrap(),
        "--out",
        dir.join("cohort").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["case_01", "case_02", "case_03"] {
        copy_case(&dir.join("cohort"), name, &dir.join("atlases"));
    }
    let cfg = dir.join("run.toml");
    let paths = "[paths]\ntarget = \"cohort/images/case_00.mhd\"\ntruth = \"cohort/labels/case_00.mhd\"\natlas_images = \"atlases/images\"\natlas_labels = \"atlases/labels\"\noutput = \"full\"\n";
    fs::write(&cfg, format!("{FAST}\n{paths}")).unwrap();
    cfg
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn stage_commands_reproduce_the_pipeline_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = atlasseg(&["pipeline", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("case,stage,dice,apd_ssd_mm"));

    let staged = dir.path().join("staged");
    for cmd in ["normalize", "register", "select", "fuse", "refine", "evaluate"] {
        let out = atlasseg(&[cmd, "--config", cfg, "--out", staged.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let full = dir.path().join("full");
    let artifacts: Vec<PathBuf> = files(&full)
        .into_iter()
        .filter(|p| !p.starts_with("manifest.txt"))
        .collect();
    for expected in [
        "fused.mhd",
        "refined.mhd",
        "selection.txt",
        "levelset_trace.csv",
        "evaluation.csv",
        "registration/transform.txt",
    ] {
        assert!(artifacts.contains(&PathBuf::from(expected)), "missing {expected}");
    }
    for a in &artifacts {
        assert_eq!(
            fs::read(full.join(a)).unwrap(),
            fs::read(staged.join(a)).unwrap(),
            "{}",
            a.display()
        );
    }

    let manifest = fs::read_to_string(full.join("manifest.txt")).unwrap();
    assert!(manifest.contains("\nseed 3\n"));
    assert!(manifest
        .lines()
        .any(|l| l.starts_with("config_sha256 ") && l.len() == "config_sha256 ".len() + 64));
    assert!(manifest.contains("[config]"));
}

#[test]
fn seed_override_reaches_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out_dir = dir.path().join("seeded");
    let out = atlasseg(&[
        "select",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "99",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    // Selection before registration has nothing to read.
    assert_eq!(code(&out), 2);
    let manifest = fs::read_to_string(out_dir.join("manifest_select.txt")).unwrap();
    assert!(manifest.contains("\nseed 99\n"));
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&atlasseg(&["pipeline", "--config", "/no/such/config.toml"])), 2);
    assert_eq!(code(&atlasseg(&["pipeline"])), 2);
    assert_eq!(code(&atlasseg(&["frobnicate", "--config", "x"])), 2);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[simple]\nalpah = 1.0\n").unwrap();
    let out = atlasseg(&["pipeline", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));

    let missing = dir.path().join("missing.toml");
    fs::write(&missing, "[paths]\ntarget = \"nowhere.mhd\"\n").unwrap();
    assert_eq!(
        code(&atlasseg(&["normalize", "--config", missing.to_str().unwrap()])),
        2
    );
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let flat = Volume::filled(Grid::with_dims([8, 8, 8]).unwrap(), 5.0);
    mhd::write_mhd(&flat, dir.path().join("flat.mhd"), ElementType::Float32).unwrap();
    fs::create_dir_all(dir.path().join("a")).unwrap();
    let cfg = dir.path().join("flat.toml");
    fs::write(
        &cfg,
        "[paths]\ntarget = \"flat.mhd\"\natlas_images = \"a\"\natlas_labels = \"a\"\noutput = \"out\"\n",
    )
    .unwrap();
    let out = atlasseg(&["normalize", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
