//! Band-space transforms: HSV rotation, Tasselled Cap and principal components.

pub mod hsv;
pub mod jacobi;
pub mod pca;
pub mod tct;

use thiserror::Error;

use crate::raster::RasterError;

pub use hsv::{hsv_to_rgb, rgb_grid_to_hsv, rgb_to_hsv, HsvProduct};
pub use jacobi::{symmetric_eigen, Eigen};
pub use pca::{explained_variance, pca, PcaMode, PcaReport, PcaResult, DEFAULT_PCA_BANDS};
pub use tct::{tct, TctCoefficients, TCT_BANDS};

#[derive(Debug, Error, PartialEq)]
pub enum DecompositionError {
    #[error("input has no band {0}")]
    MissingBand(String),
    #[error("sample {value} at pixel {index} of band {band} is outside [0, 1]")]
    OutOfRange { band: usize, index: usize, value: f64 },
    #[error("band {0} has zero variance")]
    DegenerateBand(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("eigen-solver did not converge within {0} sweeps")]
    NotConverged(usize),
    #[error(transparent)]
    Raster(#[from] RasterError),
}
