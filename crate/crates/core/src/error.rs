use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value at pixel (row {row}, col {col}) in {stage}")]
    Numerical {
        stage: &'static str,
        row: usize,
        col: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("histograms were built with different binning specs")]
    SpecMismatch,

    #[error("integral histogram needs {required} bytes, budget is {budget} bytes")]
    Resource { required: u64, budget: u64 },

    #[error("rectangle x={x} y={y} w={w} h={h} is outside the {width}x{height} map")]
    Bounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },

    #[error("payload of {requested:.3} bits exceeds capacity of {ceiling:.3} bits")]
    Capacity { requested: f64, ceiling: f64 },

    #[error("need {required} entries but only {available} are available ({what})")]
    Shortfall {
        what: String,
        required: usize,
        available: usize,
    },

    #[error("no convergence after {iterations} iterations: {detail}")]
    Convergence { iterations: usize, detail: String },

    #[error("target accuracy {target} is not reachable: {detail}")]
    Infeasible { target: f64, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("detector failed with exit code {code:?}: {output}")]
    DetectorFailed { code: Option<i32>, output: String },

    #[error("could not parse detector output: {output}")]
    DetectorOutput { output: String },

    #[error("detector timed out after {seconds:.1}s")]
    DetectorTimeout { seconds: f64 },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("image error in {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Domain(_)
            | Error::SpecMismatch
            | Error::Config(_)
            | Error::Resource { .. } => 2,
            Error::Convergence { .. } | Error::Infeasible { .. } => 4,
            _ => 3,
        }
    }
}
