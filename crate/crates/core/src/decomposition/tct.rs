//! Tasselled Cap Transformation for six Sentinel-2 reflective bands.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DecompositionError;
use crate::raster::{BandDescriptor, RasterGrid};

/// Input order of the weight columns: Blue, Green, Red, NIR, SWIR1, SWIR2.
pub const TCT_BANDS: [&str; 6] = ["B2", "B3", "B4", "B8", "B11", "B12"];
pub const TCT_OUTPUTS: [&str; 3] = ["TCTb", "TCTg", "TCTw"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TctCoefficients {
    /// Rows brightness, greenness, wetness.
    pub weights: [[f64; 6]; 3],
    pub bias: [f64; 3],
}

impl Default for TctCoefficients {
    fn default() -> Self {
        Self {
            weights: [
                [0.3510, 0.3813, 0.3437, 0.7196, 0.2396, 0.1949],
                [-0.3599, -0.3533, -0.4734, 0.6633, -0.0087, -0.2856],
                [0.2578, 0.2305, 0.0883, 0.1071, -0.7611, -0.5308],
            ],
            bias: [0.0; 3],
        }
    }
}

impl TctCoefficients {
    pub fn apply(&self, x: &[f64; 6]) -> [f64; 3] {
        let mut out = self.bias;
        for (o, row) in out.iter_mut().zip(&self.weights) {
            *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }
}

/// Brightness, greenness and wetness planes; 20 m bands must already be on the 10 m lattice.
pub fn tct(grid: &RasterGrid, coeffs: &TctCoefficients) -> Result<RasterGrid, DecompositionError> {
    let mut inputs = Vec::with_capacity(6);
    for name in TCT_BANDS {
        inputs.push(grid.band(name).ok_or_else(|| DecompositionError::MissingBand(name.into()))?);
    }
    let n = grid.len();
    let values: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !grid.mask()[i] {
                return [0.0; 3];
            }
            let x = std::array::from_fn(|b| inputs[b][i]);
            coeffs.apply(&x)
        })
        .collect();
    let planes = (0..3).map(|c| values.iter().map(|v| v[c]).collect()).collect();
    let bands = TCT_OUTPUTS.into_iter().map(BandDescriptor::derived).collect();
    Ok(RasterGrid::new(grid.width(), grid.height(), *grid.geo(), bands, planes, grid.mask().to_vec())?)
}
