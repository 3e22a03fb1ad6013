//! Georeferenced multi-band raster model.
//!
//! A [`RasterGrid`] holds one `f64` plane per band plus a single validity mask
//! shared by every band. Pixel `(col, row)` has its upper-left corner at
//! `(origin_x + col * pixel_width, origin_y - row * pixel_height)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sub-pixel slack used when deciding whether a pixel centre lies on an ROI edge.
const EDGE_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("region of interest does not intersect the raster extent")]
    DisjointRoi,
    #[error("CRS mismatch: raster is EPSG:{raster}, region is EPSG:{roi}")]
    CrsMismatch { raster: u32, roi: u32 },
    #[error("invalid geotransform: {0}")]
    InvalidGeoTransform(String),
    #[error("invalid region of interest: {0}")]
    InvalidRoi(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_width: f64,
    /// Positive; rows advance towards decreasing y.
    pub pixel_height: f64,
    pub epsg: u32,
}

impl GeoTransform {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        pixel_width: f64,
        pixel_height: f64,
        epsg: u32,
    ) -> Result<Self, RasterError> {
        if !(pixel_width > 0.0 && pixel_width.is_finite()) {
            return Err(RasterError::InvalidGeoTransform(format!(
                "pixel_width must be positive, got {pixel_width}"
            )));
        }
        if !(pixel_height > 0.0 && pixel_height.is_finite()) {
            return Err(RasterError::InvalidGeoTransform(format!(
                "pixel_height must be positive, got {pixel_height}"
            )));
        }
        if !origin_x.is_finite() || !origin_y.is_finite() {
            return Err(RasterError::InvalidGeoTransform("origin must be finite".into()));
        }
        Ok(Self {
            origin_x,
            origin_y,
            pixel_width,
            pixel_height,
            epsg,
        })
    }

    /// Map coordinates of a (fractional) pixel position.
    pub fn pixel_to_map(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_width,
            self.origin_y - row * self.pixel_height,
        )
    }

    /// Inverse of [`GeoTransform::pixel_to_map`].
    pub fn map_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.pixel_width,
            (self.origin_y - y) / self.pixel_height,
        )
    }

    pub fn pixel_center(&self, col: usize, row: usize) -> (f64, f64) {
        self.pixel_to_map(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Geotransform of the window starting at `(col, row)`.
    pub fn offset(&self, col: usize, row: usize) -> Self {
        let (x, y) = self.pixel_to_map(col as f64, row as f64);
        Self {
            origin_x: x,
            origin_y: y,
            ..*self
        }
    }
}

/// Spectral role of a Sentinel-2 MSI band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BandRole {
    Aerosols,
    Blue,
    Green,
    Red,
    RedEdge1,
    RedEdge2,
    RedEdge3,
    RedEdge4,
    Nir,
    WaterVapor,
    Cirrus,
    Swir1,
    Swir2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDescriptor {
    pub name: String,
    /// `None` for derived bands (indices, components).
    pub role: Option<BandRole>,
    pub wavelength_nm: Option<f64>,
    pub native_resolution_m: Option<f64>,
}

/// Sentinel-2A MSI bands: name, role, central wavelength (nm), pixel size (m).
pub const SENTINEL2_BANDS: [(&str, BandRole, f64, f64); 13] = [
    ("B1", BandRole::Aerosols, 443.9, 60.0),
    ("B2", BandRole::Blue, 496.6, 10.0),
    ("B3", BandRole::Green, 560.0, 10.0),
    ("B4", BandRole::Red, 664.5, 10.0),
    ("B5", BandRole::RedEdge1, 703.9, 20.0),
    ("B6", BandRole::RedEdge2, 740.2, 20.0),
    ("B7", BandRole::RedEdge3, 782.5, 20.0),
    ("B8", BandRole::Nir, 835.1, 10.0),
    ("B8A", BandRole::RedEdge4, 864.8, 20.0),
    ("B9", BandRole::WaterVapor, 945.0, 60.0),
    ("B10", BandRole::Cirrus, 1373.5, 60.0),
    ("B11", BandRole::Swir1, 1613.7, 20.0),
    ("B12", BandRole::Swir2, 2202.4, 20.0),
];

impl BandDescriptor {
    /// Descriptor for a Sentinel-2 band name such as `"B8"` or `"B8A"`.
    pub fn sentinel2(name: &str) -> Option<Self> {
        SENTINEL2_BANDS
            .iter()
            .find(|(n, ..)| n.eq_ignore_ascii_case(name))
            .map(|&(n, role, wl, res)| Self {
                name: n.to_string(),
                role: Some(role),
                wavelength_nm: Some(wl),
                native_resolution_m: Some(res),
            })
    }

    pub fn derived(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            role: None,
            wavelength_nm: None,
            native_resolution_m: None,
        }
    }

    /// Sentinel-2 descriptor when the name is a known band, derived otherwise.
    pub fn from_name(name: &str) -> Self {
        Self::sentinel2(name).unwrap_or_else(|| Self::derived(name))
    }
}

/// Accepts `B2`, `b02`, `B8A` style names and returns the canonical `B2` / `B8A` form.
pub fn canonical_band_name(name: &str) -> Option<String> {
    let upper = name.trim().to_ascii_uppercase();
    let digits = upper.strip_prefix('B')?;
    let (num, suffix) = match digits.strip_suffix('A') {
        Some(n) => (n, "A"),
        None => (digits, ""),
    };
    let n: u32 = num.parse().ok()?;
    let candidate = format!("B{n}{suffix}");
    BandDescriptor::sentinel2(&candidate).map(|d| d.name)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionOfInterest {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
    pub epsg: u32,
}

impl RegionOfInterest {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64, epsg: u32) -> Result<Self, RasterError> {
        let roi = Self {
            min_x,
            min_y,
            max_x,
            max_y,
            epsg,
        };
        roi.validate()?;
        Ok(roi)
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        let finite = [self.min_x, self.min_y, self.max_x, self.max_y]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(RasterError::InvalidRoi("coordinates must be finite".into()));
        }
        if self.min_x >= self.max_x {
            return Err(RasterError::InvalidRoi(format!(
                "min_x ({}) must be < max_x ({})",
                self.min_x, self.max_x
            )));
        }
        if self.min_y >= self.max_y {
            return Err(RasterError::InvalidRoi(format!(
                "min_y ({}) must be < max_y ({})",
                self.min_y, self.max_y
            )));
        }
        Ok(())
    }

    /// Closed-rectangle intersection test. Regions in different CRSs never intersect.
    pub fn intersects(&self, other: &RegionOfInterest) -> bool {
        self.epsg == other.epsg
            && self.min_x <= other.max_x
            && other.min_x <= self.max_x
            && self.min_y <= other.max_y
            && other.min_y <= self.max_y
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }
}

/// Immutable multi-band raster with a shared validity mask.
///
/// Samples at invalid pixels are normalised to `0.0` on construction so that
/// grids compare equal whenever their valid data and masks agree.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    width: usize,
    height: usize,
    geo: GeoTransform,
    bands: Vec<BandDescriptor>,
    planes: Vec<Vec<f64>>,
    mask: Vec<bool>,
}

impl RasterGrid {
    pub fn new(
        width: usize,
        height: usize,
        geo: GeoTransform,
        bands: Vec<BandDescriptor>,
        mut planes: Vec<Vec<f64>>,
        mask: Vec<bool>,
    ) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Shape(format!("empty raster {width}x{height}")));
        }
        let n = width
            .checked_mul(height)
            .ok_or_else(|| RasterError::Shape("raster dimensions overflow".into()))?;
        if bands.len() != planes.len() {
            return Err(RasterError::Shape(format!(
                "{} band descriptors for {} planes",
                bands.len(),
                planes.len()
            )));
        }
        if let Some((i, p)) = planes.iter().enumerate().find(|(_, p)| p.len() != n) {
            return Err(RasterError::Shape(format!(
                "plane {i} has {} samples, expected {n}",
                p.len()
            )));
        }
        if mask.len() != n {
            return Err(RasterError::Shape(format!(
                "mask has {} entries, expected {n}",
                mask.len()
            )));
        }
        for plane in &mut planes {
            for (v, &ok) in plane.iter_mut().zip(&mask) {
                if !ok {
                    *v = 0.0;
                }
            }
        }
        Ok(Self {
            width,
            height,
            geo,
            bands,
            planes,
            mask,
        })
    }

    /// Grid with every pixel valid.
    pub fn from_planes(
        width: usize,
        height: usize,
        geo: GeoTransform,
        bands: Vec<BandDescriptor>,
        planes: Vec<Vec<f64>>,
    ) -> Result<Self, RasterError> {
        let mask = vec![true; width.saturating_mul(height)];
        Self::new(width, height, geo, bands, planes, mask)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn geo(&self) -> &GeoTransform {
        &self.geo
    }

    pub fn bands(&self) -> &[BandDescriptor] {
        &self.bands
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn planes(&self) -> &[Vec<f64>] {
        &self.planes
    }

    pub fn plane(&self, index: usize) -> &[f64] {
        &self.planes[index]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.bands.iter().position(|b| b.name.eq_ignore_ascii_case(name))
    }

    pub fn band(&self, name: &str) -> Option<&[f64]> {
        self.band_index(name).map(|i| self.planes[i].as_slice())
    }

    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn sample(&self, band: usize, col: usize, row: usize) -> Option<f64> {
        let i = row * self.width + col;
        self.mask[i].then(|| self.planes[band][i])
    }

    /// Map-space extent of the whole grid.
    pub fn extent(&self) -> RegionOfInterest {
        let (x0, y0) = self.geo.pixel_to_map(0.0, 0.0);
        let (x1, y1) = self.geo.pixel_to_map(self.width as f64, self.height as f64);
        RegionOfInterest {
            min_x: x0.min(x1),
            min_y: y0.min(y1),
            max_x: x0.max(x1),
            max_y: y0.max(y1),
            epsg: self.geo.epsg,
        }
    }

    pub fn into_parts(self) -> (GeoTransform, Vec<BandDescriptor>, Vec<Vec<f64>>, Vec<bool>) {
        (self.geo, self.bands, self.planes, self.mask)
    }

    /// New grid holding only the named bands, in the requested order.
    pub fn select_bands(&self, names: &[&str]) -> Result<Self, RasterError> {
        let mut bands = Vec::with_capacity(names.len());
        let mut planes = Vec::with_capacity(names.len());
        for name in names {
            let i = self
                .band_index(name)
                .ok_or_else(|| RasterError::InvalidParameter(format!("band {name} not present")))?;
            bands.push(self.bands[i].clone());
            planes.push(self.planes[i].clone());
        }
        Self::new(self.width, self.height, self.geo, bands, planes, self.mask.clone())
    }

    /// Copy with different band descriptors (same count).
    pub fn with_bands(&self, bands: Vec<BandDescriptor>) -> Result<Self, RasterError> {
        Self::new(
            self.width,
            self.height,
            self.geo,
            bands,
            self.planes.clone(),
            self.mask.clone(),
        )
    }

    /// Concatenates the bands of several co-registered grids. A pixel is valid
    /// only where it is valid in every input.
    pub fn stack(grids: &[RasterGrid]) -> Result<Self, RasterError> {
        let first = grids
            .first()
            .ok_or_else(|| RasterError::Shape("cannot stack zero grids".into()))?;
        let mut mask = first.mask.clone();
        let mut bands = Vec::new();
        let mut planes = Vec::new();
        for g in grids {
            if g.width != first.width || g.height != first.height || g.geo != first.geo {
                return Err(RasterError::Shape(
                    "stacked grids must share size and geotransform".into(),
                ));
            }
            for (m, &v) in mask.iter_mut().zip(&g.mask) {
                *m &= v;
            }
            bands.extend(g.bands.iter().cloned());
            planes.extend(g.planes.iter().cloned());
        }
        Self::new(first.width, first.height, first.geo, bands, planes, mask)
    }
}

/// Column (or row) index range whose pixel centres lie within `[lo, hi]`,
/// expressed in fractional pixel coordinates.
fn center_window(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    // centre of pixel i sits at i + 0.5
    let first = (lo - 0.5 - EDGE_EPS).ceil().max(0.0);
    let last = (hi - 0.5 + EDGE_EPS).floor().min(n as f64 - 1.0);
    if last < first {
        return None;
    }
    Some((first as usize, last as usize))
}

/// Crops `grid` to the pixels whose centres fall inside `roi` (closed rectangle).
pub fn crop(grid: &RasterGrid, roi: &RegionOfInterest) -> Result<RasterGrid, RasterError> {
    roi.validate()?;
    let geo = grid.geo;
    if roi.epsg != geo.epsg {
        return Err(RasterError::CrsMismatch {
            raster: geo.epsg,
            roi: roi.epsg,
        });
    }
    let (c_lo, r_top) = geo.map_to_pixel(roi.min_x, roi.max_y);
    let (c_hi, r_bottom) = geo.map_to_pixel(roi.max_x, roi.min_y);
    let (c0, c1) = center_window(c_lo, c_hi, grid.width).ok_or(RasterError::DisjointRoi)?;
    let (r0, r1) = center_window(r_top, r_bottom, grid.height).ok_or(RasterError::DisjointRoi)?;
    Ok(window(grid, c0, r0, c1 - c0 + 1, r1 - r0 + 1))
}

/// Copies a pixel window. Caller guarantees the window lies inside the grid.
pub(crate) fn window(grid: &RasterGrid, col0: usize, row0: usize, w: usize, h: usize) -> RasterGrid {
    let copy_rows = |src: &[f64]| {
        let mut out = Vec::with_capacity(w * h);
        for r in row0..row0 + h {
            let start = r * grid.width + col0;
            out.extend_from_slice(&src[start..start + w]);
        }
        out
    };
    let planes = grid.planes.iter().map(|p| copy_rows(p)).collect();
    let mut mask = Vec::with_capacity(w * h);
    for r in row0..row0 + h {
        let start = r * grid.width + col0;
        mask.extend_from_slice(&grid.mask[start..start + w]);
    }
    RasterGrid {
        width: w,
        height: h,
        geo: grid.geo.offset(col0, row0),
        bands: grid.bands.clone(),
        planes,
        mask,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMethod {
    Nearest,
    Bilinear,
}

/// Resamples onto a grid of `target_resolution_m` square pixels covering the
/// same extent (pixel counts rounded to the nearest integer, at least one).
pub fn resample_to(
    grid: &RasterGrid,
    target_resolution_m: f64,
    method: ResampleMethod,
) -> Result<RasterGrid, RasterError> {
    if !(target_resolution_m > 0.0 && target_resolution_m.is_finite()) {
        return Err(RasterError::InvalidParameter(format!(
            "target resolution must be positive, got {target_resolution_m}"
        )));
    }
    let geo = grid.geo;
    let w = ((grid.width as f64 * geo.pixel_width) / target_resolution_m).round().max(1.0) as usize;
    let h = ((grid.height as f64 * geo.pixel_height) / target_resolution_m).round().max(1.0) as usize;
    let target = GeoTransform {
        pixel_width: target_resolution_m,
        pixel_height: target_resolution_m,
        ..geo
    };
    resample_onto(grid, &target, w, h, method)
}

/// Resamples `grid` onto an arbitrary target pixel lattice in the same CRS.
///
/// Target pixels whose centre falls outside the source extent are invalid.
/// Bilinear weights are renormalised over valid neighbours; a target pixel with
/// no valid contributing neighbour is invalid.
pub fn resample_onto(
    grid: &RasterGrid,
    target: &GeoTransform,
    width: usize,
    height: usize,
    method: ResampleMethod,
) -> Result<RasterGrid, RasterError> {
    if target.epsg != grid.geo.epsg {
        return Err(RasterError::CrsMismatch {
            raster: grid.geo.epsg,
            roi: target.epsg,
        });
    }
    if width == 0 || height == 0 {
        return Err(RasterError::Shape("empty target lattice".into()));
    }
    let n = width * height;
    let nb = grid.band_count();
    let mut planes = vec![vec![0.0; n]; nb];
    let mut mask = vec![false; n];

    // Source fractional coordinates of each target column / row centre, where
    // integer values coincide with source pixel centres.
    let src_cols: Vec<f64> = (0..width)
        .map(|c| {
            let (x, _) = target.pixel_center(c, 0);
            (x - grid.geo.origin_x) / grid.geo.pixel_width - 0.5
        })
        .collect();
    let src_rows: Vec<f64> = (0..height)
        .map(|r| {
            let (_, y) = target.pixel_center(0, r);
            (grid.geo.origin_y - y) / grid.geo.pixel_height - 0.5
        })
        .collect();

    let sw = grid.width as f64;
    let sh = grid.height as f64;
    let inside = |s: f64, len: f64| s >= -0.5 - EDGE_EPS && s < len - 0.5 + EDGE_EPS;

    let mut samples = vec![0.0; nb];
    for (r, &sy) in src_rows.iter().enumerate() {
        if !inside(sy, sh) {
            continue;
        }
        for (c, &sx) in src_cols.iter().enumerate() {
            if !inside(sx, sw) {
                continue;
            }
            let ok = match method {
                ResampleMethod::Nearest => nearest_sample(grid, sx, sy, &mut samples),
                ResampleMethod::Bilinear => bilinear_sample(grid, sx, sy, &mut samples),
            };
            if ok {
                let i = r * width + c;
                mask[i] = true;
                for (plane, &v) in planes.iter_mut().zip(&samples) {
                    plane[i] = v;
                }
            }
        }
    }
    RasterGrid::new(width, height, *target, grid.bands.clone(), planes, mask)
}

fn nearest_sample(grid: &RasterGrid, sx: f64, sy: f64, out: &mut [f64]) -> bool {
    let c = ((sx + 0.5).floor().max(0.0) as usize).min(grid.width - 1);
    let r = ((sy + 0.5).floor().max(0.0) as usize).min(grid.height - 1);
    let i = r * grid.width + c;
    if !grid.mask[i] {
        return false;
    }
    for (o, p) in out.iter_mut().zip(&grid.planes) {
        *o = p[i];
    }
    true
}

fn bilinear_sample(grid: &RasterGrid, sx: f64, sy: f64, out: &mut [f64]) -> bool {
    let sx = sx.clamp(0.0, (grid.width - 1) as f64);
    let sy = sy.clamp(0.0, (grid.height - 1) as f64);
    let c0 = sx.floor() as usize;
    let r0 = sy.floor() as usize;
    let c1 = (c0 + 1).min(grid.width - 1);
    let r1 = (r0 + 1).min(grid.height - 1);
    let fx = sx - c0 as f64;
    let fy = sy - r0 as f64;
    let taps = [
        (r0, c0, (1.0 - fx) * (1.0 - fy)),
        (r0, c1, fx * (1.0 - fy)),
        (r1, c0, (1.0 - fx) * fy),
        (r1, c1, fx * fy),
    ];
    let mut wsum = 0.0;
    out.iter_mut().for_each(|o| *o = 0.0);
    for &(r, c, w) in &taps {
        let i = r * grid.width + c;
        if w > 0.0 && grid.mask[i] {
            wsum += w;
            for (o, p) in out.iter_mut().zip(&grid.planes) {
                *o += w * p[i];
            }
        }
    }
    if wsum <= 0.0 {
        return false;
    }
    out.iter_mut().for_each(|o| *o /= wsum);
    true
}

/// Bilinear interpolant of one band at a map coordinate, `None` when the point
/// lies outside the grid or has no valid neighbour.
pub fn sample_bilinear(grid: &RasterGrid, band: usize, x: f64, y: f64) -> Option<f64> {
    let (px, py) = grid.geo.map_to_pixel(x, y);
    let (sx, sy) = (px - 0.5, py - 0.5);
    if px < 0.0 || py < 0.0 || px > grid.width as f64 || py > grid.height as f64 {
        return None;
    }
    let mut out = vec![0.0; grid.band_count()];
    bilinear_sample(grid, sx, sy, &mut out).then(|| out[band])
}

/// Multiplies every valid sample by `factor`, e.g. `1e-4` to turn Level-1C
/// digital numbers into reflectance.
pub fn scale_reflectance(grid: &RasterGrid, factor: f64) -> Result<RasterGrid, RasterError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(RasterError::InvalidParameter(format!(
            "scale factor must be positive, got {factor}"
        )));
    }
    let planes = grid
        .planes
        .iter()
        .map(|p| p.iter().map(|v| v * factor).collect())
        .collect();
    RasterGrid::new(
        grid.width,
        grid.height,
        grid.geo,
        grid.bands.clone(),
        planes,
        grid.mask.clone(),
    )
}
