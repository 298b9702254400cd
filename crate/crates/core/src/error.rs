use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("data length {got} does not match grid size {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("non-finite value at voxel index {0}")]
    NonFinite(usize),
    #[error("label value {value} at voxel index {index} is not 0 or 1")]
    InvalidLabel { index: usize, value: u8 },
    #[error("grid mismatch between inputs")]
    GridMismatch,

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: malformed header line {line}: {text:?}", path.display())]
    MalformedHeader { path: PathBuf, line: usize, text: String },
    #[error("{}: missing required header key {key}", path.display())]
    MissingHeaderKey { path: PathBuf, key: &'static str },
    #[error("{}: payload is {got} bytes, header requires {expected}", path.display())]
    SizeMismatch { path: PathBuf, expected: u64, got: u64 },
    #[error("unknown ElementType {0:?}")]
    UnknownElementType(String),
    #[error("{}: compressed MetaImage data is not supported", .0.display())]
    CompressedNotSupported(PathBuf),
    #[error("value {value} at voxel index {index} does not fit element type {element_type}")]
    ValueOverflow {
        index: usize,
        value: f64,
        element_type: &'static str,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("degenerate input: {distinct} distinct intensity values, need at least {needed}")]
    DegenerateInput { distinct: usize, needed: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("registration needs at least one atlas")]
    NoAtlases,
    #[error("non-finite cost during optimization (level {level}, stage {stage})")]
    NonFiniteCost { level: usize, stage: &'static str },
    #[error("singular affine matrix (|det| = {0:e})")]
    SingularAffine(f64),
    #[error("transform parse error at line {line}: {message}")]
    TransformParse { line: usize, message: String },

    #[error("label fusion needs at least one label")]
    EmptyLabelList,
    #[error("all fusion weights are zero")]
    ZeroWeights,
    #[error("atlas selection needs at least {needed} records, got {got}")]
    TooFewAtlases { needed: usize, got: usize },
    #[error("cannot select {k} of {count} records")]
    SampleTooLarge { k: usize, count: usize },

    #[error("mask is empty")]
    EmptyMask,
    #[error("mask is full")]
    FullMask,
    #[error("vanishing Heaviside mass {side} the contour")]
    VanishingMass { side: &'static str },
    #[error("level-set field has no zero crossing")]
    NoZeroCrossing,
    #[error("level-set update produced a non-finite value at voxel index {0}")]
    NonFiniteLevelSet(usize),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numerical failures get exit code 3 in the CLI; everything else is an
    /// input/usage problem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::DegenerateInput { .. }
                | Error::NonFiniteCost { .. }
                | Error::SingularAffine(_)
                | Error::ZeroWeights
                | Error::VanishingMass { .. }
                | Error::NoZeroCrossing
                | Error::NonFiniteLevelSet(_)
        )
    }
}
