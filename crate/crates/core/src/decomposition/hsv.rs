//! Hexcone RGB ↔ HSV on unit-range triples. Hue is expressed in turns, `[0, 1)`.

use rayon::prelude::*;

use super::DecompositionError;
use crate::raster::{BandDescriptor, RasterGrid};

/// Three-band grid (H, S, V), each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsvProduct {
    pub grid: RasterGrid,
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let s = if max > 0.0 { chroma / max } else { 0.0 };
    if chroma == 0.0 {
        return (0.0, s, max);
    }
    let sector = if r >= g && r >= b {
        (g - b) / chroma
    } else if g >= b {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    let mut h = sector / 6.0;
    if h < 0.0 {
        h += 1.0;
    }
    if h >= 1.0 {
        h -= 1.0;
    }
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let chroma = v * s;
    let hp = (h * 6.0).rem_euclid(6.0);
    let x = chroma * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = v - chroma;
    (r + m, g + m, b + m)
}

/// Converts a stretched three-band grid (R, G, B slots, samples in `[0, 1]`).
pub fn rgb_grid_to_hsv(grid: &RasterGrid) -> Result<HsvProduct, DecompositionError> {
    if grid.band_count() != 3 {
        return Err(DecompositionError::InsufficientData(format!(
            "HSV needs exactly 3 bands, got {}",
            grid.band_count()
        )));
    }
    for (band, plane) in grid.planes().iter().enumerate() {
        if let Some((index, &value)) = plane
            .iter()
            .enumerate()
            .find(|&(i, v)| grid.mask()[i] && !(0.0..=1.0).contains(v))
        {
            return Err(DecompositionError::OutOfRange { band, index, value });
        }
    }
    let (r, g, b) = (grid.plane(0), grid.plane(1), grid.plane(2));
    let hsv: Vec<(f64, f64, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|i| if grid.mask()[i] { rgb_to_hsv(r[i], g[i], b[i]) } else { (0.0, 0.0, 0.0) })
        .collect();
    let planes = vec![
        hsv.iter().map(|p| p.0).collect(),
        hsv.iter().map(|p| p.1).collect(),
        hsv.iter().map(|p| p.2).collect(),
    ];
    let bands = ["H", "S", "V"].into_iter().map(BandDescriptor::derived).collect();
    Ok(HsvProduct {
        grid: RasterGrid::new(grid.width(), grid.height(), *grid.geo(), bands, planes, grid.mask().to_vec())?,
    })
}
