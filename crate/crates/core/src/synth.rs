//! Deterministic synthetic scene sets with planted buried features.
//!
//! Every scene is `base + contrast·inside + noise`, with independent Gaussian
//! noise per pixel and per scene. Bands coarser than 10 m are generated at
//! their native resolution from the block mean of the 10 m signal. Scenes are
//! written as Level-1C style uint16 GeoTIFFs plus sidecars, ready for
//! [`crate::catalog::ingest_directory`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{default_windows, Asset, CatalogError, SceneRecord, SeasonalWindow};
use crate::io::{write_geotiff_with, write_png, ColorKind, GeoTiffError, Image8, SampleFormat, WriteOptions};
use crate::raster::{canonical_band_name, BandDescriptor, GeoTransform, RasterGrid, RegionOfInterest};

pub const TRUTH_MASK_FILE: &str = "truth_mask.png";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    GeoTiff(#[from] GeoTiffError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::InvalidSpec(msg.into())
}

/// Feature geometry in 10 m pixel coordinates (column, row), origin top-left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureKind {
    Palaeochannel { points: Vec<(f64, f64)>, width: f64 },
    MoatRing { center: (f64, f64), inner_radius: f64, outer_radius: f64 },
    RectangularEarthwork { min: (f64, f64), max: (f64, f64) },
}

impl FeatureKind {
    /// A channel crossing the raster left to right with a seeded sinuous course.
    pub fn meandering_channel(width_px: usize, height_px: usize, channel_width: f64, amplitude: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (width_px as f64, height_px as f64);
        let waves: Vec<(f64, f64, f64)> = (0..2)
            .map(|k| {
                let wavelength = w * rng.random_range(0.35..0.9) / (k + 1) as f64;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let share = if k == 0 { 0.7 } else { 0.3 };
                (wavelength, phase, share)
            })
            .collect();
        let centre = h * rng.random_range(0.4..0.6);
        let points = (0..=64)
            .map(|i| {
                let x = w * i as f64 / 64.0;
                let y = centre
                    + amplitude
                        * waves
                            .iter()
                            .map(|(l, p, s)| s * (std::f64::consts::TAU * x / l + p).sin())
                            .sum::<f64>();
                (x, y)
            })
            .collect();
        FeatureKind::Palaeochannel {
            points,
            width: channel_width,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let finite = |p: &(f64, f64)| p.0.is_finite() && p.1.is_finite();
        match self {
            FeatureKind::Palaeochannel { points, width } => {
                if points.len() < 2 || !points.iter().all(finite) {
                    return Err(invalid("palaeochannel needs at least two finite points"));
                }
                if !(*width > 0.0 && width.is_finite()) {
                    return Err(invalid(format!("palaeochannel width must be positive, got {width}")));
                }
            }
            FeatureKind::MoatRing {
                center,
                inner_radius,
                outer_radius,
            } => {
                if !finite(center) || !(*inner_radius > 0.0 && inner_radius < outer_radius && outer_radius.is_finite()) {
                    return Err(invalid("moat ring needs 0 < inner_radius < outer_radius"));
                }
            }
            FeatureKind::RectangularEarthwork { min, max } => {
                if !finite(min) || !finite(max) || min.0 >= max.0 || min.1 >= max.1 {
                    return Err(invalid("earthwork box needs min < max"));
                }
            }
        }
        Ok(())
    }

    /// Whether the point `(x, y)` (pixel units) lies inside the feature.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            FeatureKind::Palaeochannel { points, width } => {
                let half = width / 2.0;
                points.windows(2).any(|s| segment_distance(x, y, s[0], s[1]) <= half)
            }
            FeatureKind::MoatRing {
                center,
                inner_radius,
                outer_radius,
            } => {
                let d = (x - center.0).hypot(y - center.1);
                *inner_radius <= d && d <= *outer_radius
            }
            FeatureKind::RectangularEarthwork { min, max } => min.0 <= x && x <= max.0 && min.1 <= y && y <= max.1,
        }
    }
}

fn segment_distance(x: f64, y: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (x - (a.0 + t * dx)).hypot(y - (a.1 + t * dy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    /// Reflectance offset per band inside the feature; unlisted bands get 0.
    pub contrast: BTreeMap<String, f64>,
}

/// Damp fill: darker in the visible and SWIR, slightly brighter in the NIR.
pub fn soil_mark_contrast(magnitude: f64) -> BTreeMap<String, f64> {
    [
        ("B1", -1.0),
        ("B2", -1.0),
        ("B3", -1.0),
        ("B4", -1.0),
        ("B8", 1.0),
        ("B8A", 1.0),
        ("B11", -1.0),
        ("B12", -1.0),
    ]
    .into_iter()
    .map(|(b, s)| (b.to_string(), s * magnitude))
    .collect()
}

/// Bare-soil reflectance for the bands used by the products.
pub fn default_base_reflectance() -> BTreeMap<String, f64> {
    [("B2", 0.08), ("B3", 0.11), ("B4", 0.13), ("B8", 0.25), ("B11", 0.30), ("B12", 0.22)]
        .into_iter()
        .map(|(b, v)| (b.to_string(), v))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSetSpec {
    pub n_scenes: usize,
    /// Raster size at 10 m.
    pub width: usize,
    pub height: usize,
    pub origin_x: f64,
    pub origin_y: f64,
    pub epsg: u32,
    pub base_reflectance: BTreeMap<String, f64>,
    pub features: Vec<FeatureSpec>,
    pub noise_sd: f64,
    pub seed: u64,
    pub windows: Vec<SeasonalWindow>,
    pub first_year: i32,
    pub last_year: i32,
}

impl SceneSetSpec {
    /// 12 scenes over the Jan–Mar / Oct–Dec windows of 2015–2020 with one
    /// meandering palaeochannel.
    pub fn palaeochannel(width: usize, height: usize, contrast: f64, noise_sd: f64, seed: u64) -> Self {
        let channel = FeatureKind::meandering_channel(width, height, (width as f64 / 24.0).max(3.0), height as f64 / 8.0, seed);
        Self {
            n_scenes: 12,
            width,
            height,
            origin_x: 600_000.0,
            origin_y: 5_000_000.0,
            epsg: 32632,
            base_reflectance: default_base_reflectance(),
            features: vec![FeatureSpec {
                kind: channel,
                contrast: soil_mark_contrast(contrast),
            }],
            noise_sd,
            seed,
            windows: default_windows(),
            first_year: 2015,
            last_year: 2020,
        }
    }

    pub fn geo(&self) -> GeoTransform {
        GeoTransform {
            origin_x: self.origin_x,
            origin_y: self.origin_y,
            pixel_width: 10.0,
            pixel_height: 10.0,
            epsg: self.epsg,
        }
    }

    pub fn roi(&self) -> RegionOfInterest {
        RegionOfInterest {
            min_x: self.origin_x,
            min_y: self.origin_y - 10.0 * self.height as f64,
            max_x: self.origin_x + 10.0 * self.width as f64,
            max_y: self.origin_y,
            epsg: self.epsg,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.n_scenes == 0 {
            return Err(invalid("n_scenes must be at least 1"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("raster must be at least 1x1"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(invalid(format!("noise_sd must be non-negative, got {}", self.noise_sd)));
        }
        if self.base_reflectance.is_empty() {
            return Err(invalid("at least one band is required"));
        }
        for (band, v) in &self.base_reflectance {
            if canonical_band_name(band).as_deref() != Some(band.as_str()) {
                return Err(invalid(format!("unknown band {band:?}")));
            }
            if !v.is_finite() {
                return Err(invalid(format!("base reflectance of {band} is not finite")));
            }
        }
        for f in &self.features {
            f.kind.validate()?;
            if let Some((b, _)) = f.contrast.iter().find(|(_, c)| !c.is_finite()) {
                return Err(invalid(format!("contrast for {b} is not finite")));
            }
        }
        if self.windows.is_empty() || self.first_year > self.last_year {
            return Err(invalid("windows and a non-empty year range are required"));
        }
        GeoTransform::new(self.origin_x, self.origin_y, 10.0, 10.0, self.epsg).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub scenes: Vec<SceneRecord>,
    /// Row-major 10 m mask of pixels inside any feature.
    pub truth: Vec<bool>,
    pub truth_path: PathBuf,
    pub roi: RegionOfInterest,
}

fn native_factor(band: &str) -> usize {
    BandDescriptor::sentinel2(band)
        .and_then(|d| d.native_resolution_m)
        .map(|r| (r / 10.0).round().max(1.0) as usize)
        .unwrap_or(1)
}

/// Per-pixel planted offset for each band at 10 m.
fn signal_planes(spec: &SceneSetSpec, truth_by_feature: &[Vec<bool>]) -> BTreeMap<String, Vec<f64>> {
    spec.base_reflectance
        .iter()
        .map(|(band, &base)| {
            let mut plane = vec![base; spec.width * spec.height];
            for (f, inside) in spec.features.iter().zip(truth_by_feature) {
                let c = f.contrast.get(band).copied().unwrap_or(0.0);
                if c != 0.0 {
                    for (v, &m) in plane.iter_mut().zip(inside) {
                        if m {
                            *v += c;
                        }
                    }
                }
            }
            (band.clone(), plane)
        })
        .collect()
}

/// Block mean of a 10 m plane at `factor`× coarser resolution (edge blocks partial).
fn block_mean(plane: &[f64], width: usize, height: usize, factor: usize) -> (Vec<f64>, usize, usize) {
    if factor == 1 {
        return (plane.to_vec(), width, height);
    }
    let (w, h) = (width.div_ceil(factor), height.div_ceil(factor));
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let (mut s, mut n) = (0.0, 0);
            for rr in r * factor..((r + 1) * factor).min(height) {
                for cc in c * factor..((c + 1) * factor).min(width) {
                    s += plane[rr * width + cc];
                    n += 1;
                }
            }
            out[r * w + c] = s / n as f64;
        }
    }
    (out, w, h)
}

/// Writes `n_scenes` scene directories plus [`TRUTH_MASK_FILE`] under `out_dir`.
pub fn generate_scene_set(spec: &SceneSetSpec, out_dir: &Path) -> Result<SyntheticSet, SynthError> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let (w, h) = (spec.width, spec.height);
    let by_feature: Vec<Vec<bool>> = spec
        .features
        .iter()
        .map(|f| {
            (0..w * h)
                .into_par_iter()
                .map(|i| f.kind.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5))
                .collect()
        })
        .collect();
    let truth: Vec<bool> = (0..w * h).map(|i| by_feature.iter().any(|m| m[i])).collect();
    let signal = signal_planes(spec, &by_feature);
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| invalid(e.to_string()))?;
    let years = (spec.last_year - spec.first_year + 1) as usize;
    let geo = spec.geo();

    let scenes = (0..spec.n_scenes)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(idx as u64 + 1);
            let window = &spec.windows[idx % spec.windows.len()];
            let year = spec.first_year + ((idx / spec.windows.len()) % years) as i32;
            let (start, end) = window
                .interval(year)
                .ok_or_else(|| invalid(format!("window {} does not exist in {year}", window.label)))?;
            let span_days = (end - start).num_days().max(0);
            let day = rng.random_range(0..=span_days);
            let acquired_at = Utc
                .from_utc_datetime(&(start.date_naive() + Duration::days(day)).and_hms_opt(10, 20, 0).expect("valid time"));
            let scene_id = format!("SYN_{}_{idx:03}", acquired_at.format("%Y%m%d"));
            let cloud_cover_pct = (rng.random_range(0.0..15.0f64) * 100.0).round() / 100.0;
            let dir = out_dir.join(&scene_id);
            fs::create_dir_all(&dir)?;

            let mut band_files = BTreeMap::new();
            for (band, plane) in &signal {
                let factor = native_factor(band);
                let (mut values, bw, bh) = block_mean(plane, w, h, factor);
                for v in values.iter_mut() {
                    // DN 0 is nodata, so the darkest written value is 1
                    *v = (*v + noise.sample(&mut rng)).max(1e-4);
                }
                let band_geo = GeoTransform {
                    pixel_width: 10.0 * factor as f64,
                    pixel_height: 10.0 * factor as f64,
                    ..geo
                };
                let grid = RasterGrid::from_planes(bw, bh, band_geo, vec![BandDescriptor::from_name(band)], vec![values])
                    .map_err(|e| invalid(e.to_string()))?;
                let path = dir.join(format!("{band}.tif"));
                write_geotiff_with(&grid, &path, &WriteOptions::new(SampleFormat::UInt16))?;
                band_files.insert(band.clone(), Asset::Local(path));
            }
            let record = SceneRecord {
                scene_id,
                acquired_at,
                cloud_cover_pct,
                band_files,
                footprint: spec.roi(),
            };
            record.write_sidecar(&dir)?;
            Ok(record)
        })
        .collect::<Result<Vec<_>, SynthError>>()?;

    let truth_path = out_dir.join(TRUTH_MASK_FILE);
    let img = Image8::new(w, h, ColorKind::Gray, truth.iter().map(|&m| if m { 255 } else { 0 }).collect())?;
    write_png(&img, &truth_path)?;
    Ok(SyntheticSet {
        scenes,
        truth,
        truth_path,
        roi: spec.roi(),
    })
}

/// Four bands (B2, B3, B4, B8) sharing one Gaussian factor, giving a pairwise
/// correlation of `correlation` in expectation. The correlation matrix then has
/// eigenvalues `1 + 3r` and `1 − r` (three times).
pub fn correlated_band_stack(width: usize, height: usize, correlation: f64, seed: u64) -> Result<RasterGrid, SynthError> {
    if !(0.0..=1.0).contains(&correlation) {
        return Err(invalid(format!("correlation must be in [0, 1], got {correlation}")));
    }
    let bands = ["B2", "B3", "B4", "B8"];
    let base = [0.08, 0.11, 0.13, 0.25];
    let spread = [0.01, 0.012, 0.015, 0.03];
    let n = width * height;
    let (shared, own) = (correlation.sqrt(), (1.0 - correlation).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut planes: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(n)).collect();
    for _ in 0..n {
        let f: f64 = std_normal.sample(&mut rng);
        for b in 0..4 {
            let e: f64 = std_normal.sample(&mut rng);
            planes[b].push(base[b] + spread[b] * (shared * f + own * e));
        }
    }
    let geo = GeoTransform {
        origin_x: 600_000.0,
        origin_y: 5_000_000.0,
        pixel_width: 10.0,
        pixel_height: 10.0,
        epsg: 32632,
    };
    RasterGrid::from_planes(width, height, geo, bands.iter().map(|b| BandDescriptor::from_name(b)).collect(), planes)
        .map_err(|e| invalid(e.to_string()))
}
