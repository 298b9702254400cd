use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use atlasseg::pipeline::{self, Layout, PipelineConfig, Timings};
use atlasseg::{Error, Result};

/// Multi-atlas segmentation of 3D MetaImage volumes.
///
/// Every command reads a TOML config. Stage commands read and write the
/// artifact layout of a single-target pipeline run under the output
/// directory, so running them in order reproduces `pipeline`.
#[derive(Parser)]
#[command(name = "atlasseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `pipeline.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `paths.output`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Probability maps of the target and the atlas images.
    Normalize(Common),
    /// Groupwise registration and label propagation.
    Register(Common),
    /// Atlas selection (SIMPLE or random).
    Select(Common),
    /// Majority vote over the selected atlases.
    Fuse(Common),
    /// Level-set refinement of the fused mask.
    Refine(Common),
    /// Dice and surface distance against `paths.truth`.
    Evaluate(Common),
    /// Write a synthetic phantom cohort (`images/`, `labels/`).
    Phantom(Common),
    /// Full run in the configured mode (single target or leave-one-out).
    Pipeline(Common),
}

fn load(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.paths.output = Some(out.clone());
    }
    Ok(cfg)
}

fn output(cfg: &PipelineConfig) -> Result<PathBuf> {
    let out = cfg
        .paths
        .output
        .clone()
        .ok_or_else(|| Error::Config("no output directory (set paths.output or pass --out)".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    Ok(out)
}

fn stage(common: &Common, name: &str, f: impl FnOnce(&PipelineConfig, &Layout) -> Result<()>) -> Result<()> {
    let cfg = load(common)?;
    let out = Layout::new(output(&cfg)?);
    let mut t = Timings::default();
    let result = t.time(name, || f(&cfg, &out));
    let manifest = out.root.join(format!("manifest_{name}.txt"));
    std::fs::write(&manifest, pipeline::manifest_text(&cfg, name, &t)).map_err(|e| Error::Io {
        path: manifest,
        source: e,
    })?;
    result
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Normalize(c) => stage(&c, "normalize", pipeline::stage_normalize),
        Command::Register(c) => stage(&c, "register", pipeline::stage_register),
        Command::Select(c) => stage(&c, "select", |cfg, out| {
            let sel = pipeline::stage_select(cfg, out)?;
            println!("selected {} atlases: {:?}", sel.ids.len(), sel.ids);
            Ok(())
        }),
        Command::Fuse(c) => stage(&c, "fuse", |_, out| pipeline::stage_fuse(out)),
        Command::Refine(c) => stage(&c, "refine", pipeline::stage_refine),
        Command::Evaluate(c) => stage(&c, "evaluate", |cfg, out| {
            let (a, r) = pipeline::stage_evaluate(cfg, out)?;
            println!("{}", pipeline::EVALUATION_HEADER);
            println!("{}", pipeline::evaluation_row("target", "atlas", &a));
            println!("{}", pipeline::evaluation_row("target", "refined", &r));
            Ok(())
        }),
        Command::Phantom(c) => stage(&c, "phantom", |cfg, out| pipeline::stage_phantom(cfg, &out.root)),
        Command::Pipeline(c) => {
            let cfg = load(&c)?;
            output(&cfg)?;
            match cfg.pipeline.mode {
                pipeline::RunMode::Single => {
                    if let Some((a, r)) = pipeline::run_single(&cfg)? {
                        println!("{}", pipeline::EVALUATION_HEADER);
                        println!("{}", pipeline::evaluation_row("target", "atlas", &a));
                        println!("{}", pipeline::evaluation_row("target", "refined", &r));
                    }
                }
                pipeline::RunMode::Loo => print!("{}", pipeline::loo_csv(&pipeline::run_loo(&cfg)?)),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
