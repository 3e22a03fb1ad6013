//! Per-pixel temporal mean compositing.
//!
//! Scenes are streamed one at a time onto a common target lattice: every band
//! is reflectance-scaled, aligned (bilinear for 20/60 m bands or shifted
//! tiles) and added to a running `f64` sum with a per-pixel observation count.
//! A pixel counts as observed in a scene only when every requested band is
//! valid there, so one count plane serves all bands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{filter_catalog, Asset, Catalog, FilterSpec, SceneRecord};
use crate::io::{read_geotiff, write_geotiff, write_geotiff_with, GeoTiffError, SampleFormat, WriteOptions};
use crate::raster::{
    crop, resample_onto, scale_reflectance, BandDescriptor, GeoTransform, RasterError, RasterGrid, RegionOfInterest,
    ResampleMethod,
};

/// Level-1C digital numbers are reflectance × 10 000.
pub const DEFAULT_DN_SCALE: f64 = 1e-4;
const STRIP_ROWS: usize = 64;

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error("scene {scene_id} has no band {band}")]
    MissingBand { scene_id: String, band: String },
    #[error("scene {scene_id} is in EPSG:{scene} but the ROI is in EPSG:{roi}")]
    CrsMismatch { scene_id: String, scene: u32, roi: u32 },
    #[error("no scenes to composite")]
    EmptyInput,
    #[error("no scenes in bucket {0}")]
    EmptyBucket(String),
    #[error("scene {scene_id} band {band} is a remote asset; fetch it first")]
    RemoteAsset { scene_id: String, band: String },
    #[error("{}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: GeoTiffError,
    },
    #[error(transparent)]
    GeoTiff(#[from] GeoTiffError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("composite metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Applied to unsigned-integer inputs only; float inputs are taken as reflectance.
    pub dn_scale: f64,
    pub resample: ResampleMethod,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            dn_scale: DEFAULT_DN_SCALE,
            resample: ResampleMethod::Bilinear,
        }
    }
}

/// Pixel lattice every scene is aligned onto.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetLattice {
    pub geo: GeoTransform,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Bucket label, e.g. `jan-mar/2015-2020` or `jan-mar/2017`.
    pub bucket: Option<String>,
    pub scene_ids: Vec<String>,
    pub bands: Vec<String>,
    pub roi: RegionOfInterest,
    pub filter: Option<FilterSpec>,
    pub load: LoadOptions,
    pub lattice: TargetLattice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeStack {
    pub grid: RasterGrid,
    /// Valid observations per pixel; a pixel is valid iff its count is positive.
    pub counts: Vec<u32>,
    pub provenance: Provenance,
}

impl CompositeStack {
    /// Rounds every sample to `f32` precision, matching what a float32 GeoTIFF
    /// export and reload yields.
    pub fn quantized_f32(&self) -> Result<Self, CompositeError> {
        let (geo, bands, planes, mask) = self.grid.clone().into_parts();
        let planes = planes
            .into_iter()
            .map(|p| p.into_iter().map(|v| v as f32 as f64).collect())
            .collect();
        Ok(Self {
            grid: RasterGrid::new(self.grid.width(), self.grid.height(), geo, bands, planes, mask)?,
            counts: self.counts.clone(),
            provenance: self.provenance.clone(),
        })
    }
}

fn lattice_of(grid: &RasterGrid) -> TargetLattice {
    TargetLattice {
        geo: *grid.geo(),
        width: grid.width(),
        height: grid.height(),
    }
}

fn canonical_order(scenes: &[SceneRecord]) -> Vec<&SceneRecord> {
    let mut ordered: Vec<&SceneRecord> = scenes.iter().collect();
    ordered.sort_by(|a, b| (a.acquired_at, &a.scene_id).cmp(&(b.acquired_at, &b.scene_id)));
    ordered
}

fn check_scenes(scenes: &[&SceneRecord], bands: &[&str], roi: &RegionOfInterest) -> Result<(), CompositeError> {
    if scenes.is_empty() {
        return Err(CompositeError::EmptyInput);
    }
    for s in scenes {
        if s.footprint.epsg != roi.epsg {
            return Err(CompositeError::CrsMismatch {
                scene_id: s.scene_id.clone(),
                scene: s.footprint.epsg,
                roi: roi.epsg,
            });
        }
        for b in bands {
            match s.band_files.get(*b) {
                None => {
                    return Err(CompositeError::MissingBand {
                        scene_id: s.scene_id.clone(),
                        band: b.to_string(),
                    })
                }
                Some(Asset::Remote(_)) => {
                    return Err(CompositeError::RemoteAsset {
                        scene_id: s.scene_id.clone(),
                        band: b.to_string(),
                    })
                }
                Some(Asset::Local(_)) => {}
            }
        }
    }
    Ok(())
}

/// Reads one band of one scene as reflectance, in the file's own lattice.
fn read_band(scene: &SceneRecord, band: &str, roi: &RegionOfInterest, opts: &LoadOptions) -> Result<RasterGrid, CompositeError> {
    let missing = || CompositeError::MissingBand {
        scene_id: scene.scene_id.clone(),
        band: band.to_string(),
    };
    let path = match scene.band_files.get(band).ok_or_else(missing)? {
        Asset::Local(p) => p,
        Asset::Remote(_) => {
            return Err(CompositeError::RemoteAsset {
                scene_id: scene.scene_id.clone(),
                band: band.to_string(),
            })
        }
    };
    let (grid, header) = read_geotiff(path).map_err(|source| CompositeError::Read {
        path: path.clone(),
        source,
    })?;
    if grid.geo().epsg != roi.epsg {
        return Err(CompositeError::CrsMismatch {
            scene_id: scene.scene_id.clone(),
            scene: grid.geo().epsg,
            roi: roi.epsg,
        });
    }
    let grid = if grid.band_count() == 1 {
        grid.with_bands(vec![BandDescriptor::from_name(band)])?
    } else {
        grid.select_bands(&[band]).map_err(|_| missing())?
    };
    Ok(match header.sample_format {
        SampleFormat::UInt16 => scale_reflectance(&grid, opts.dn_scale)?,
        SampleFormat::Float32 => grid,
    })
}

/// Target lattice: the first scene's finest requested band, cropped to `roi`.
pub fn target_lattice(
    scenes: &[SceneRecord],
    bands: &[&str],
    roi: &RegionOfInterest,
    opts: &LoadOptions,
) -> Result<TargetLattice, CompositeError> {
    let ordered = canonical_order(scenes);
    check_scenes(&ordered, bands, roi)?;
    let first = ordered[0];
    let mut best: Option<RasterGrid> = None;
    for b in bands {
        let g = read_band(first, b, roi, opts)?;
        if best.as_ref().is_none_or(|cur| g.geo().pixel_width < cur.geo().pixel_width) {
            best = Some(g);
        }
    }
    let best = best.ok_or(CompositeError::EmptyInput)?;
    Ok(lattice_of(&crop(&best, roi)?))
}

/// Integer pixel offset of `target`'s origin inside `src`, when both share the
/// pixel size and the lattices coincide.
fn aligned_offset(src: &GeoTransform, target: &GeoTransform) -> Option<(i64, i64)> {
    let same = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs());
    if !same(src.pixel_width, target.pixel_width) || !same(src.pixel_height, target.pixel_height) {
        return None;
    }
    let dc = (target.origin_x - src.origin_x) / src.pixel_width;
    let dr = (src.origin_y - target.origin_y) / src.pixel_height;
    let (rc, rr) = (dc.round(), dr.round());
    ((dc - rc).abs() < 1e-6 && (dr - rr).abs() < 1e-6).then_some((rc as i64, rr as i64))
}

/// Exact copy onto an aligned lattice; pixels outside the source are invalid.
fn shift_onto(grid: &RasterGrid, lattice: &TargetLattice, dc: i64, dr: i64) -> Result<RasterGrid, RasterError> {
    let n = lattice.width * lattice.height;
    let mut planes = vec![vec![0.0; n]; grid.band_count()];
    let mut mask = vec![false; n];
    for r in 0..lattice.height {
        let sr = r as i64 + dr;
        if sr < 0 || sr >= grid.height() as i64 {
            continue;
        }
        for c in 0..lattice.width {
            let sc = c as i64 + dc;
            if sc < 0 || sc >= grid.width() as i64 {
                continue;
            }
            let si = sr as usize * grid.width() + sc as usize;
            let ti = r * lattice.width + c;
            mask[ti] = grid.mask()[si];
            for (p, src) in planes.iter_mut().zip(grid.planes()) {
                p[ti] = src[si];
            }
        }
    }
    RasterGrid::new(lattice.width, lattice.height, lattice.geo, grid.bands().to_vec(), planes, mask)
}

fn align(grid: &RasterGrid, lattice: &TargetLattice, method: ResampleMethod) -> Result<RasterGrid, RasterError> {
    match aligned_offset(grid.geo(), &lattice.geo) {
        Some((dc, dr)) => shift_onto(grid, lattice, dc, dr),
        None => resample_onto(grid, &lattice.geo, lattice.width, lattice.height, method),
    }
}

/// Loads a scene's requested bands onto `lattice`; the mask is the AND over bands.
pub fn load_scene(
    scene: &SceneRecord,
    bands: &[&str],
    roi: &RegionOfInterest,
    lattice: &TargetLattice,
    opts: &LoadOptions,
) -> Result<RasterGrid, CompositeError> {
    let mut aligned = Vec::with_capacity(bands.len());
    for b in bands {
        let g = read_band(scene, b, roi, opts)?;
        aligned.push(align(&g, lattice, opts.resample)?);
    }
    Ok(RasterGrid::stack(&aligned)?)
}

/// Running per-pixel sums and counts over a fixed lattice.
#[derive(Debug, Clone)]
pub struct Accumulator {
    lattice: TargetLattice,
    bands: Vec<BandDescriptor>,
    sums: Vec<Vec<f64>>,
    counts: Vec<u32>,
}

impl Accumulator {
    pub fn new(lattice: TargetLattice, bands: Vec<BandDescriptor>) -> Self {
        let n = lattice.width * lattice.height;
        Self {
            sums: vec![vec![0.0; n]; bands.len()],
            counts: vec![0; n],
            lattice,
            bands,
        }
    }

    pub fn add(&mut self, grid: &RasterGrid) -> Result<(), CompositeError> {
        if grid.width() != self.lattice.width
            || grid.height() != self.lattice.height
            || grid.band_count() != self.sums.len()
        {
            return Err(RasterError::Shape("scene does not match the composite lattice".into()).into());
        }
        let strip = STRIP_ROWS * self.lattice.width;
        let mask = grid.mask();
        self.counts
            .par_chunks_mut(strip)
            .zip(mask.par_chunks(strip))
            .for_each(|(counts, m)| {
                for (c, &ok) in counts.iter_mut().zip(m) {
                    *c += ok as u32;
                }
            });
        for (sum, plane) in self.sums.iter_mut().zip(grid.planes()) {
            sum.par_chunks_mut(strip)
                .zip(plane.par_chunks(strip))
                .zip(mask.par_chunks(strip))
                .for_each(|((s, p), m)| {
                    for ((s, &v), &ok) in s.iter_mut().zip(p).zip(m) {
                        if ok {
                            *s += v;
                        }
                    }
                });
        }
        Ok(())
    }

    pub fn finish(self, provenance: Provenance) -> Result<CompositeStack, CompositeError> {
        let counts = self.counts;
        let planes = self
            .sums
            .into_par_iter()
            .map(|s| {
                s.iter()
                    .zip(&counts)
                    .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
                    .collect()
            })
            .collect();
        let mask = counts.iter().map(|&c| c > 0).collect();
        let grid = RasterGrid::new(self.lattice.width, self.lattice.height, self.lattice.geo, self.bands, planes, mask)?;
        Ok(CompositeStack {
            grid,
            counts,
            provenance,
        })
    }
}

/// Mean composite on a given lattice, scenes accumulated in `(acquired_at, scene_id)` order.
pub fn mean_composite_on(
    scenes: &[SceneRecord],
    bands: &[&str],
    roi: &RegionOfInterest,
    lattice: &TargetLattice,
    opts: &LoadOptions,
) -> Result<CompositeStack, CompositeError> {
    let ordered = canonical_order(scenes);
    check_scenes(&ordered, bands, roi)?;
    let descriptors = bands.iter().map(|b| BandDescriptor::from_name(b)).collect();
    let mut acc = Accumulator::new(*lattice, descriptors);
    for scene in &ordered {
        acc.add(&load_scene(scene, bands, roi, lattice, opts)?)?;
    }
    acc.finish(Provenance {
        bucket: None,
        scene_ids: ordered.iter().map(|s| s.scene_id.clone()).collect(),
        bands: bands.iter().map(|b| b.to_string()).collect(),
        roi: *roi,
        filter: None,
        load: *opts,
        lattice: *lattice,
    })
}

/// Mean composite on the lattice of the first scene's finest requested band, cropped to `roi`.
pub fn mean_composite(
    scenes: &[SceneRecord],
    bands: &[&str],
    roi: &RegionOfInterest,
    opts: &LoadOptions,
) -> Result<CompositeStack, CompositeError> {
    let lattice = target_lattice(scenes, bands, roi, opts)?;
    mean_composite_on(scenes, bands, roi, &lattice, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompositeMode {
    /// One composite per window over all years (the default product).
    Pooled,
    PerYear,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum YearSelection {
    Pooled { first: i32, last: i32 },
    Year(i32),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BucketKey {
    pub window: String,
    pub years: YearSelection,
}

impl BucketKey {
    pub fn label(&self) -> String {
        match self.years {
            YearSelection::Pooled { first, last } => format!("{}/{first}-{last}", self.window),
            YearSelection::Year(y) => format!("{}/{y}", self.window),
        }
    }
}

/// Composites every window, pooled over the year range and/or per year.
///
/// All buckets share one lattice derived from the earliest retained scene, so
/// per-year and pooled composites are directly comparable. Empty buckets are
/// reported as [`CompositeError::EmptyBucket`] without affecting the others.
pub fn window_composites(
    catalog: &Catalog,
    spec: &FilterSpec,
    bands: &[&str],
    mode: CompositeMode,
    opts: &LoadOptions,
) -> Result<BTreeMap<BucketKey, Result<CompositeStack, CompositeError>>, CompositeError> {
    spec.validate().map_err(|e| RasterError::InvalidParameter(e.to_string()))?;
    let kept = filter_catalog(catalog, spec);
    let mut groups: BTreeMap<BucketKey, Vec<SceneRecord>> = BTreeMap::new();
    for (wi, w) in spec.windows.iter().enumerate() {
        if mode != CompositeMode::PerYear {
            groups.insert(
                BucketKey {
                    window: w.label.clone(),
                    years: YearSelection::Pooled {
                        first: spec.first_year,
                        last: spec.last_year,
                    },
                },
                Vec::new(),
            );
        }
        if mode != CompositeMode::Pooled {
            for year in spec.years() {
                groups.insert(
                    BucketKey {
                        window: w.label.clone(),
                        years: YearSelection::Year(year),
                    },
                    Vec::new(),
                );
            }
        }
        for r in kept.records() {
            let Some(b) = spec.bucket_of(&r.acquired_at) else { continue };
            if b.window != wi {
                continue;
            }
            for key in [
                YearSelection::Pooled {
                    first: spec.first_year,
                    last: spec.last_year,
                },
                YearSelection::Year(b.year),
            ] {
                let key = BucketKey {
                    window: w.label.clone(),
                    years: key,
                };
                if let Some(g) = groups.get_mut(&key) {
                    g.push(r.clone());
                }
            }
        }
    }

    let mut out = BTreeMap::new();
    if kept.is_empty() {
        for key in groups.into_keys() {
            let label = key.label();
            out.insert(key, Err(CompositeError::EmptyBucket(label)));
        }
        return Ok(out);
    }
    let lattice = target_lattice(kept.records(), bands, &spec.roi, opts)?;
    for (key, scenes) in groups {
        let label = key.label();
        let result = if scenes.is_empty() {
            Err(CompositeError::EmptyBucket(label))
        } else {
            mean_composite_on(&scenes, bands, &spec.roi, &lattice, opts).map(|mut c| {
                c.provenance.bucket = Some(label);
                c.provenance.filter = Some(spec.clone());
                c
            })
        };
        out.insert(key, result);
    }
    Ok(out)
}

/// Writes `<stem>.tif` (float32 bands), `<stem>.counts.tif` (uint16) and
/// `<stem>.json` (provenance) into `dir`.
pub fn save_composite(stack: &CompositeStack, dir: &Path, stem: &str) -> Result<(), CompositeError> {
    fs::create_dir_all(dir)?;
    write_geotiff(&stack.grid, dir.join(format!("{stem}.tif")), SampleFormat::Float32)?;
    let counts_plane = stack.counts.iter().map(|&c| c.min(u16::MAX as u32) as f64).collect();
    let counts = RasterGrid::new(
        stack.grid.width(),
        stack.grid.height(),
        *stack.grid.geo(),
        vec![BandDescriptor::derived("count")],
        vec![counts_plane],
        stack.grid.mask().to_vec(),
    )?;
    let opts = WriteOptions {
        dn_scale: 1.0,
        ..WriteOptions::new(SampleFormat::UInt16)
    };
    write_geotiff_with(&counts, dir.join(format!("{stem}.counts.tif")), &opts)?;
    let json = serde_json::to_vec_pretty(&stack.provenance)?;
    fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

/// Reads a composite written by [`save_composite`].
pub fn load_composite(dir: &Path, stem: &str) -> Result<CompositeStack, CompositeError> {
    let read = |name: String| {
        let path = dir.join(name);
        read_geotiff(&path).map_err(|source| CompositeError::Read { path, source })
    };
    let (grid, _) = read(format!("{stem}.tif"))?;
    let (counts, _) = read(format!("{stem}.counts.tif"))?;
    if counts.width() != grid.width() || counts.height() != grid.height() {
        return Err(RasterError::Shape("counts raster does not match the composite".into()).into());
    }
    let provenance: Provenance = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
    let counts: Vec<u32> = counts.plane(0).iter().map(|&v| v as u32).collect();
    let (geo, bands, planes, mask) = grid.into_parts();
    let mask: Vec<bool> = mask.iter().zip(&counts).map(|(&m, &c)| m && c > 0).collect();
    let counts = counts.iter().zip(&mask).map(|(&c, &m)| if m { c } else { 0 }).collect();
    let grid = RasterGrid::new(provenance.lattice.width, provenance.lattice.height, geo, bands, planes, mask)?;
    Ok(CompositeStack {
        grid,
        counts,
        provenance,
    })
}
