//! Percentile contrast stretching, 8-bit rendering, histograms and per-band
//! diagnostic exports.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{write_png, ColorKind, Image8};
use crate::raster::RasterGrid;

pub const DEFAULT_LOWER_PCT: f64 = 2.0;
pub const DEFAULT_UPPER_PCT: f64 = 98.0;
pub const APPROX_BINS: usize = 1024;
pub const DEFAULT_HISTOGRAM_BINS: usize = 256;
pub const QUANTILE_CONVENTION: &str = "linear interpolation at position p*(N-1) of the sorted valid samples";
pub const ROUNDING_CONVENTION: &str = "round half away from zero";
const CHUNK: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("band has no valid pixels")]
    EmptyBand,
    #[error("invalid stretch: {field} {message}")]
    InvalidStretch { field: &'static str, message: String },
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),
    #[error("image shape: {0}")]
    Shape(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RenderError + '_ {
    move |source| RenderError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PercentileMethod {
    /// Full sort of the valid samples.
    #[default]
    Exact,
    /// 1024-bin histogram; error at most one bin width.
    Histogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StretchParams {
    pub lower_pct: f64,
    pub upper_pct: f64,
    pub lower_value: f64,
    pub upper_value: f64,
}

impl StretchParams {
    /// Explicit data range, e.g. for fixed-scale products.
    pub fn fixed(lower_value: f64, upper_value: f64) -> Self {
        Self {
            lower_pct: 0.0,
            upper_pct: 100.0,
            lower_value,
            upper_value,
        }
    }
}

pub fn validate_percents(lower_pct: f64, upper_pct: f64) -> Result<(), RenderError> {
    if !(0.0..=100.0).contains(&lower_pct) {
        return Err(RenderError::InvalidStretch {
            field: "lower_pct",
            message: format!("{lower_pct} outside [0, 100]"),
        });
    }
    if !(0.0..=100.0).contains(&upper_pct) {
        return Err(RenderError::InvalidStretch {
            field: "upper_pct",
            message: format!("{upper_pct} outside [0, 100]"),
        });
    }
    if upper_pct <= lower_pct {
        return Err(RenderError::InvalidStretch {
            field: "upper_pct",
            message: format!("{upper_pct} must exceed lower_pct {lower_pct}"),
        });
    }
    Ok(())
}

fn valid_values(values: &[f64], mask: &[bool]) -> Vec<f64> {
    values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect()
}

/// Linear quantile of ascending `sorted` at fraction `p ∈ [0, 1]`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    let (a, b) = (sorted[lo], sorted[hi]);
    (a + frac * (b - a)).clamp(a, b)
}

fn value_range(values: &[f64], mask: &[bool]) -> Option<(f64, f64)> {
    values
        .par_chunks(CHUNK)
        .zip(mask.par_chunks(CHUNK))
        .map(|(v, m)| {
            v.iter().zip(m).filter(|(_, &ok)| ok).fold(None, |acc: Option<(f64, f64)>, (&x, _)| {
                Some(acc.map_or((x, x), |(lo, hi)| (lo.min(x), hi.max(x))))
            })
        })
        .reduce(|| None, |a, b| match (a, b) {
            (Some(a), Some(b)) => Some((a.0.min(b.0), a.1.max(b.1))),
            (a, None) => a,
            (None, b) => b,
        })
}

/// Cumulative count cut over the valid samples.
pub fn percentile_cut(
    values: &[f64],
    mask: &[bool],
    lower_pct: f64,
    upper_pct: f64,
    method: PercentileMethod,
) -> Result<StretchParams, RenderError> {
    validate_percents(lower_pct, upper_pct)?;
    let (lower_value, upper_value) = match method {
        PercentileMethod::Exact => {
            let mut v = valid_values(values, mask);
            if v.is_empty() {
                return Err(RenderError::EmptyBand);
            }
            v.par_sort_unstable_by(f64::total_cmp);
            (quantile_sorted(&v, lower_pct / 100.0), quantile_sorted(&v, upper_pct / 100.0))
        }
        PercentileMethod::Histogram => {
            let h = histogram(values, mask, APPROX_BINS, None)?;
            (h.quantile(lower_pct / 100.0), h.quantile(upper_pct / 100.0))
        }
    };
    Ok(StretchParams {
        lower_pct,
        upper_pct,
        lower_value,
        upper_value: upper_value.max(lower_value),
    })
}

/// `v ↦ round(255·(clamp(v, lo, hi) − lo)/(hi − lo))`; invalid pixels and a
/// collapsed range map to 0.
pub fn stretch_to_bytes(values: &[f64], mask: &[bool], params: &StretchParams) -> Vec<u8> {
    let (lo, hi) = (params.lower_value, params.upper_value);
    values
        .par_iter()
        .zip(mask)
        .map(|(&v, &ok)| {
            if !ok || hi <= lo {
                return 0;
            }
            (255.0 * (v.clamp(lo, hi) - lo) / (hi - lo)).round() as u8
        })
        .collect()
}

/// Same mapping onto `[0, 1]` without quantisation.
pub fn stretch_to_unit(values: &[f64], mask: &[bool], params: &StretchParams) -> Vec<f64> {
    let (lo, hi) = (params.lower_value, params.upper_value);
    values
        .par_iter()
        .zip(mask)
        .map(|(&v, &ok)| if !ok || hi <= lo { 0.0 } else { (v.clamp(lo, hi) - lo) / (hi - lo) })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub valid_total: u64,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    fn bin_of(&self, v: f64) -> usize {
        let n = self.counts.len();
        let (lo, hi) = (self.bin_edges[0], self.bin_edges[n]);
        let mut i = (((v - lo) / (hi - lo)) * n as f64).floor().clamp(0.0, (n - 1) as f64) as usize;
        while i > 0 && v < self.bin_edges[i] {
            i -= 1;
        }
        while i + 1 < n && v >= self.bin_edges[i + 1] {
            i += 1;
        }
        i
    }

    /// Centre of the bin holding the sample of 0-based rank `r`.
    fn rank_value(&self, r: u64) -> f64 {
        let mut below = 0u64;
        for (i, &c) in self.counts.iter().enumerate() {
            below += c;
            if r < below {
                return 0.5 * (self.bin_edges[i] + self.bin_edges[i + 1]);
            }
        }
        *self.bin_edges.last().expect("histogram has edges")
    }

    /// Linear quantile estimate: each order statistic is placed at its bin
    /// centre, so the error is at most half a bin width.
    pub fn quantile(&self, p: f64) -> f64 {
        let pos = p * self.valid_total.saturating_sub(1) as f64;
        let lo = pos.floor() as u64;
        let hi = (lo + 1).min(self.valid_total.saturating_sub(1));
        let (a, b) = (self.rank_value(lo), self.rank_value(hi));
        a + (pos - lo as f64) * (b - a)
    }
}

/// Equal-width histogram of the valid samples. The last bin is closed; samples
/// outside an explicit range are counted in the nearest edge bin. A constant
/// band without an explicit range is binned over `(c − 0.5, c + 0.5)`.
pub fn histogram(values: &[f64], mask: &[bool], nbins: usize, range: Option<(f64, f64)>) -> Result<Histogram, RenderError> {
    if nbins == 0 {
        return Err(RenderError::InvalidHistogram("at least one bin is required".into()));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) => {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(RenderError::InvalidHistogram(format!("range ({lo}, {hi}) is empty")));
            }
            (lo, hi)
        }
        None => {
            let (lo, hi) = value_range(values, mask).ok_or(RenderError::EmptyBand)?;
            if lo < hi {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        }
    };
    let mut bin_edges: Vec<f64> = (0..nbins).map(|i| lo + (hi - lo) * i as f64 / nbins as f64).collect();
    bin_edges.push(hi);
    let mut h = Histogram {
        bin_edges,
        counts: vec![0; nbins],
        valid_total: 0,
    };
    let partials: Vec<Vec<u64>> = values
        .par_chunks(CHUNK)
        .zip(mask.par_chunks(CHUNK))
        .map(|(v, m)| {
            let mut c = vec![0u64; nbins];
            for (&x, &ok) in v.iter().zip(m) {
                if ok {
                    c[h.bin_of(x)] += 1;
                }
            }
            c
        })
        .collect();
    for p in partials {
        for (c, x) in h.counts.iter_mut().zip(p) {
            *c += x;
        }
    }
    h.valid_total = h.counts.iter().sum();
    if h.valid_total == 0 {
        return Err(RenderError::EmptyBand);
    }
    Ok(h)
}

pub fn write_histogram_csv(h: &Histogram, path: &Path) -> Result<(), RenderError> {
    let csv_err = |source| RenderError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["lo", "hi", "count"]).map_err(csv_err)?;
    for (i, c) in h.counts.iter().enumerate() {
        w.write_record([h.bin_edges[i].to_string(), h.bin_edges[i + 1].to_string(), c.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_histogram_csv(path: &Path) -> Result<Histogram, RenderError> {
    let csv_err = |source| RenderError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut h = Histogram {
        bin_edges: Vec::new(),
        counts: Vec::new(),
        valid_total: 0,
    };
    for row in r.deserialize::<(f64, f64, u64)>() {
        let (lo, hi, count) = row.map_err(csv_err)?;
        if h.bin_edges.is_empty() {
            h.bin_edges.push(lo);
        }
        h.bin_edges.push(hi);
        h.counts.push(count);
        h.valid_total += count;
    }
    Ok(h)
}

pub fn render_gray(grid: &RasterGrid, band: usize, params: &StretchParams) -> Result<Image8, RenderError> {
    let data = stretch_to_bytes(grid.plane(band), grid.mask(), params);
    Image8::new(grid.width(), grid.height(), ColorKind::Gray, data).map_err(|e| RenderError::Shape(e.to_string()))
}

/// Renders the first three bands into the R, G, B slots.
pub fn render_rgb(grid: &RasterGrid, params: &[StretchParams; 3]) -> Result<Image8, RenderError> {
    if grid.band_count() < 3 {
        return Err(RenderError::Shape(format!("RGB rendering needs 3 bands, got {}", grid.band_count())));
    }
    let channels: Vec<Vec<u8>> = (0..3).map(|c| stretch_to_bytes(grid.plane(c), grid.mask(), &params[c])).collect();
    let data = (0..grid.len()).flat_map(|i| [channels[0][i], channels[1][i], channels[2][i]]).collect();
    Image8::new(grid.width(), grid.height(), ColorKind::Rgb, data).map_err(|e| RenderError::Shape(e.to_string()))
}

/// Per-band cuts at the given percents.
pub fn stretch_bands(
    grid: &RasterGrid,
    bands: &[usize],
    lower_pct: f64,
    upper_pct: f64,
    method: PercentileMethod,
) -> Result<Vec<StretchParams>, RenderError> {
    bands
        .iter()
        .map(|&b| percentile_cut(grid.plane(b), grid.mask(), lower_pct, upper_pct, method))
        .collect()
}

/// Rendering metadata written next to each PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StretchMetadata {
    pub bands: Vec<String>,
    pub channels: Vec<StretchParams>,
    pub percentile_method: PercentileMethod,
    pub quantile: String,
    pub rounding: String,
}

impl StretchMetadata {
    pub fn new(bands: Vec<String>, channels: Vec<StretchParams>, method: PercentileMethod) -> Self {
        Self {
            bands,
            channels,
            percentile_method: method,
            quantile: QUANTILE_CONVENTION.into(),
            rounding: ROUNDING_CONVENTION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandReportFiles {
    pub band: String,
    pub png: PathBuf,
    pub csv: PathBuf,
}

/// Writes a 2/98-stretched grayscale PNG and a histogram CSV for every band,
/// named `band<i>_<name>.{png,csv}` with `i` counted from 1.
pub fn band_report(grid: &RasterGrid, dir: &Path, nbins: usize, method: PercentileMethod) -> Result<Vec<BandReportFiles>, RenderError> {
    if grid.band_count() == 0 {
        return Err(RenderError::Shape("band report needs at least one band".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut out = Vec::with_capacity(grid.band_count());
    for (i, desc) in grid.bands().iter().enumerate() {
        let stem = format!("band{}_{}", i + 1, desc.name);
        let params = percentile_cut(grid.plane(i), grid.mask(), DEFAULT_LOWER_PCT, DEFAULT_UPPER_PCT, method)?;
        let png = dir.join(format!("{stem}.png"));
        write_png(&render_gray(grid, i, &params)?, &png).map_err(io_err(&png))?;
        let csv = dir.join(format!("{stem}.csv"));
        write_histogram_csv(&histogram(grid.plane(i), grid.mask(), nbins, None)?, &csv)?;
        out.push(BandReportFiles {
            band: desc.name.clone(),
            png,
            csv,
        });
    }
    Ok(out)
}
