//! Python bindings. Volumes cross the boundary as flat x-fastest lists plus
//! their dimensions.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use atlasseg::fusion::{AtlasRecord, SimpleParams};
use atlasseg::mhd::{self, ElementType};
use atlasseg::phantom::PhantomParams;
use atlasseg::pipeline::PipelineConfig;
use atlasseg::{Error, Grid, LabelVolume, Vec3, Volume};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::MissingFile(_) => PyOSError::new_err(e.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn grid(dims: [usize; 3], spacing: Vec3) -> PyResult<Grid> {
    Grid::new(dims, spacing, [0.0; 3]).map_err(to_py)
}

fn label(data: Vec<u8>, g: Grid) -> PyResult<LabelVolume> {
    LabelVolume::new(g, data).map_err(to_py)
}

/// Dice overlap of two binary masks.
#[pyfunction]
#[pyo3(signature = (a, b, dims, spacing = [1.0, 1.0, 1.0]))]
fn dice(a: Vec<u8>, b: Vec<u8>, dims: [usize; 3], spacing: Vec3) -> PyResult<f64> {
    let g = grid(dims, spacing)?;
    atlasseg::metrics::dice(&label(a, g)?, &label(b, g)?).map_err(to_py)
}

/// Symmetric mean surface distance in mm.
#[pyfunction]
#[pyo3(signature = (a, b, dims, spacing = [1.0, 1.0, 1.0]))]
fn apd(a: Vec<u8>, b: Vec<u8>, dims: [usize; 3], spacing: Vec3) -> PyResult<f64> {
    let g = grid(dims, spacing)?;
    atlasseg::metrics::apd(&label(a, g)?, &label(b, g)?).map_err(to_py)
}

/// `(data, dims, spacing, origin)` of a MetaImage file.
#[pyfunction]
fn read_volume(path: PathBuf) -> PyResult<(Vec<f64>, [usize; 3], Vec3, Vec3)> {
    let v = mhd::read_volume(&path).map_err(to_py)?;
    let g = *v.grid();
    Ok((v.into_data(), g.dims(), g.spacing(), g.origin()))
}

/// Write a MetaImage header and raw payload; `element_type` is one of
/// uint8, int16, uint16, float32.
#[pyfunction]
#[pyo3(signature = (path, data, dims, spacing = [1.0, 1.0, 1.0], origin = [0.0, 0.0, 0.0], element_type = "float32"))]
fn write_volume(
    path: PathBuf,
    data: Vec<f64>,
    dims: [usize; 3],
    spacing: Vec3,
    origin: Vec3,
    element_type: &str,
) -> PyResult<()> {
    let et = match element_type {
        "uint8" => ElementType::UInt8,
        "int16" => ElementType::Int16,
        "uint16" => ElementType::UInt16,
        "float32" => ElementType::Float32,
        other => return Err(PyValueError::new_err(format!("unknown element type {other:?}"))),
    };
    let g = Grid::new(dims, spacing, origin).map_err(to_py)?;
    let v = Volume::new(g, data).map_err(to_py)?;
    mhd::write_mhd(&v, &path, et).map_err(to_py)
}

fn labels(list: Vec<Vec<u8>>, dims: [usize; 3]) -> PyResult<Vec<LabelVolume>> {
    let g = grid(dims, [1.0; 3])?;
    list.into_iter().map(|d| label(d, g)).collect()
}

/// Voxelwise majority vote; ties go to background.
#[pyfunction]
fn majority_vote(masks: Vec<Vec<u8>>, dims: [usize; 3]) -> PyResult<Vec<u8>> {
    let fused = atlasseg::fusion::majority_vote(&labels(masks, dims)?).map_err(to_py)?;
    Ok(fused.data().to_vec())
}

/// SIMPLE atlas selection; returns `(selected ids, weights)`, best first.
#[pyfunction]
#[pyo3(signature = (masks, dims, alpha = 1.0, max_iters = 10, min_alive = 3, final_count = 10))]
fn simple_select(
    masks: Vec<Vec<u8>>,
    dims: [usize; 3],
    alpha: f64,
    max_iters: usize,
    min_alive: usize,
    final_count: usize,
) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let records: Vec<AtlasRecord> = labels(masks, dims)?
        .into_iter()
        .enumerate()
        .map(|(i, l)| AtlasRecord::new(i, l))
        .collect();
    let params = SimpleParams {
        alpha,
        max_iters,
        min_alive,
        final_count,
    };
    let res = atlasseg::fusion::simple_select(&records, &params).map_err(to_py)?;
    Ok((res.selected, res.weights))
}

/// `k` ids drawn without replacement, deterministic per seed.
#[pyfunction]
fn random_select(ids: Vec<usize>, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    atlasseg::fusion::random_select(&ids, k, seed).map_err(to_py)
}

/// Synthetic phantom `(image, label)` with default shape parameters.
#[pyfunction]
#[pyo3(signature = (seed = 0, dims = [64, 64, 64]))]
fn generate_phantom(seed: u64, dims: [usize; 3]) -> PyResult<(Vec<f64>, Vec<u8>)> {
    let params = PhantomParams {
        dims,
        seed,
        ..PhantomParams::default()
    };
    let (img, lab) = atlasseg::phantom::generate_phantom(&params).map_err(to_py)?;
    Ok((img.into_data(), lab.data().to_vec()))
}

/// Run the pipeline described by a config file, as the `pipeline` command does.
#[pyfunction]
#[pyo3(signature = (config, seed = None, out = None))]
fn run_pipeline(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> PyResult<()> {
    let mut cfg = PipelineConfig::load(&config).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if out.is_some() {
        cfg.paths.output = out;
    }
    atlasseg::pipeline::run(&cfg).map_err(to_py)
}

#[pymodule]
fn pyatlasseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", atlasseg::pipeline::VERSION)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(apd, m)?)?;
    m.add_function(wrap_pyfunction!(read_volume, m)?)?;
    m.add_function(wrap_pyfunction!(write_volume, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(simple_select, m)?)?;
    m.add_function(wrap_pyfunction!(random_select, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
