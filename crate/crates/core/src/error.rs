use std::path::PathBuf;

use crate::mlp::TaskKind;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed image data (stopped near byte {offset}): {message}")]
    Decode { offset: u64, message: String },

    #[error("unsupported image format (only PNG and baseline JPEG are read)")]
    UnsupportedFormat,

    #[error("image is {width}x{height}, need at least {min_width}x{min_height}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min_width: usize,
        min_height: usize,
    },

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("patch must be {expected}x{expected}, got {width}x{height}")]
    PatchSize {
        expected: usize,
        width: usize,
        height: usize,
    },

    #[error("histogram has fewer than two occupied bins")]
    DegenerateHistogram,

    #[error("random walker needs non-empty foreground and background seed sets")]
    MissingSeeds,

    #[error("pixel ({x}, {y}) is seeded as both foreground and background")]
    SeedConflict { x: usize, y: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("training or evaluation data contains only one class")]
    SingleClass,

    #[error("model file is truncated")]
    TruncatedModel,

    #[error("model file is not a forgescan model (bad magic)")]
    BadMagic,

    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },

    #[error("no model loaded for task {0}")]
    MissingModel(TaskKind),

    #[error("image has too little texture to match blocks")]
    InsufficientTexture,

    #[error("parameter {name} = {value} outside [{min}, {max}]")]
    ParamRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("insufficient input data: {0}")]
    InsufficientData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("missing input files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn with_path(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn with_path(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
