//! Band arithmetic: Bare Soil Index, NDVI and three-band display composites.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BandDescriptor, RasterError, RasterGrid};

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("input has no band {0}")]
    MissingBand(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// A single-band derived product.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexProduct {
    pub plane: RasterGrid,
    pub index_name: String,
    pub formula_id: String,
}

impl IndexProduct {
    pub fn formula(&self) -> &'static str {
        match self.formula_id.as_str() {
            BSI_FORMULA_ID => "((B4 + B12) - (B8 + B2)) / ((B4 + B12) + (B8 + B2))",
            NDVI_FORMULA_ID => "(B8 - B4) / (B8 + B4)",
            _ => "",
        }
    }
}

pub const BSI_FORMULA_ID: &str = "bsi-red-swir2-nir-blue";
pub const NDVI_FORMULA_ID: &str = "ndvi-nir-red";

fn band<'a>(grid: &'a RasterGrid, name: &str) -> Result<&'a [f64], IndexError> {
    grid.band(name).ok_or_else(|| IndexError::MissingBand(name.to_string()))
}

/// `(a - b) / (a + b)` per valid pixel; a zero denominator invalidates the pixel.
fn normalized_difference(grid: &RasterGrid, a: &[f64], b: &[f64], name: &str) -> Result<RasterGrid, IndexError> {
    let (values, mask): (Vec<f64>, Vec<bool>) = a
        .par_iter()
        .zip(b)
        .zip(grid.mask())
        .map(|((&a, &b), &ok)| {
            let den = a + b;
            if ok && den != 0.0 {
                ((a - b) / den, true)
            } else {
                (0.0, false)
            }
        })
        .unzip();
    Ok(RasterGrid::new(
        grid.width(),
        grid.height(),
        *grid.geo(),
        vec![BandDescriptor::derived(name)],
        vec![values],
        mask,
    )?)
}

/// Bare Soil Index with SWIR2 (B12): `((Red + SWIR2) − (NIR + Blue)) / ((Red + SWIR2) + (NIR + Blue))`.
pub fn bsi(grid: &RasterGrid) -> Result<IndexProduct, IndexError> {
    let (blue, red, nir, swir2) = (band(grid, "B2")?, band(grid, "B4")?, band(grid, "B8")?, band(grid, "B12")?);
    let soil: Vec<f64> = red.iter().zip(swir2).map(|(r, s)| r + s).collect();
    let veg: Vec<f64> = nir.iter().zip(blue).map(|(n, b)| n + b).collect();
    Ok(IndexProduct {
        plane: normalized_difference(grid, &soil, &veg, "BSI")?,
        index_name: "BSI".into(),
        formula_id: BSI_FORMULA_ID.into(),
    })
}

pub fn ndvi(grid: &RasterGrid) -> Result<IndexProduct, IndexError> {
    let (red, nir) = (band(grid, "B4")?, band(grid, "B8")?);
    Ok(IndexProduct {
        plane: normalized_difference(grid, nir, red, "NDVI")?,
        index_name: "NDVI".into(),
        formula_id: NDVI_FORMULA_ID.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// True colour, B4-B3-B2.
    Rgb,
    /// False SWIR colour, B12-B8-B4.
    Fswir,
    Custom([String; 3]),
}

impl Preset {
    pub fn bands(&self) -> [&str; 3] {
        match self {
            Preset::Rgb => ["B4", "B3", "B2"],
            Preset::Fswir => ["B12", "B8", "B4"],
            Preset::Custom([r, g, b]) => [r.as_str(), g.as_str(), b.as_str()],
        }
    }

    pub fn name(&self) -> String {
        match self {
            Preset::Rgb => "rgb".into(),
            Preset::Fswir => "fswir".into(),
            Preset::Custom(b) => b.join("-"),
        }
    }
}

/// Three bands in display order (R, G, B slots), samples unmodified.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeTriple {
    pub grid: RasterGrid,
    pub preset: Preset,
}

pub fn compose(grid: &RasterGrid, preset: Preset) -> Result<CompositeTriple, IndexError> {
    let names = preset.bands();
    for n in names {
        band(grid, n)?;
    }
    Ok(CompositeTriple {
        grid: grid.select_bands(&names)?,
        preset,
    })
}
