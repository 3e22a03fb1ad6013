//! Principal component analysis over the valid pixels of a band stack.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::jacobi::symmetric_eigen;
use super::DecompositionError;
use crate::raster::{BandDescriptor, RasterGrid};

/// The 10 m bands.
pub const DEFAULT_PCA_BANDS: [&str; 4] = ["B2", "B3", "B4", "B8"];
const STRIP_ROWS: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcaMode {
    /// Standardised bands (correlation matrix).
    #[default]
    Correlation,
    /// Centred bands (covariance matrix).
    Covariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub mode: PcaMode,
    pub bands: Vec<String>,
    pub valid_pixels: u64,
    pub means: Vec<f64>,
    pub std_devs: Vec<f64>,
    /// The correlation or covariance matrix that was diagonalised.
    pub matrix: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// `eigenvectors[band][component]`.
    pub eigenvectors: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    /// One band per component, `PC1` first.
    pub scores: RasterGrid,
}

/// Serialisable summary of a [`PcaResult`] (everything but the scores).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub mode: PcaMode,
    pub bands: Vec<String>,
    pub valid_pixels: u64,
    pub means: Vec<f64>,
    pub std_devs: Vec<f64>,
    pub matrix: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaResult {
    pub fn report(&self) -> PcaReport {
        PcaReport {
            mode: self.mode,
            bands: self.bands.clone(),
            valid_pixels: self.valid_pixels,
            means: self.means.clone(),
            std_devs: self.std_devs.clone(),
            matrix: self.matrix.clone(),
            eigenvalues: self.eigenvalues.clone(),
            eigenvectors: self.eigenvectors.clone(),
            explained_variance_ratio: self.explained_variance_ratio.clone(),
        }
    }
}

/// Sum of the first `n` explained-variance ratios; `None` unless `1 ≤ n ≤ k`.
pub fn explained_variance(result: &PcaResult, n: usize) -> Option<f64> {
    (1..=result.explained_variance_ratio.len())
        .contains(&n)
        .then(|| result.explained_variance_ratio[..n].iter().sum())
}

/// Running mean and co-moment matrix (Welford, merged with Chan's update).
#[derive(Debug, Clone)]
pub(crate) struct Moments {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<Vec<f64>>,
}

impl Moments {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; k],
            m2: vec![vec![0.0; k]; k],
        }
    }

    pub(crate) fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        let k = x.len();
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        for i in 0..k {
            for j in i..k {
                self.m2[i][j] += delta[i] * (x[j] - self.mean[j]);
            }
        }
    }

    pub(crate) fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let k = delta.len();
        for i in 0..k {
            for j in i..k {
                self.m2[i][j] += other.m2[i][j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d * nb / n;
        }
        self.n += other.n;
    }

    /// Sample covariance with the `n - 1` denominator.
    pub(crate) fn covariance(&self) -> Vec<Vec<f64>> {
        let k = self.mean.len();
        let d = (self.n - 1) as f64;
        let mut c = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i..k {
                c[i][j] = self.m2[i][j] / d;
                c[j][i] = c[i][j];
            }
        }
        c
    }
}

/// Moments of the listed planes over valid pixels, strips merged in row order.
pub(crate) fn band_moments(grid: &RasterGrid, planes: &[&[f64]]) -> Moments {
    let k = planes.len();
    let strip = STRIP_ROWS * grid.width().max(1);
    let n = grid.len();
    let parts: Vec<Moments> = (0..n.div_ceil(strip))
        .into_par_iter()
        .map(|s| {
            let mut m = Moments::new(k);
            let mut x = vec![0.0; k];
            for i in s * strip..((s + 1) * strip).min(n) {
                if grid.mask()[i] {
                    for (xb, p) in x.iter_mut().zip(planes) {
                        *xb = p[i];
                    }
                    m.push(&x);
                }
            }
            m
        })
        .collect();
    parts.iter().fold(Moments::new(k), |mut acc, m| {
        acc.merge(m);
        acc
    })
}

pub fn pca(grid: &RasterGrid, bands: &[&str], mode: PcaMode) -> Result<PcaResult, DecompositionError> {
    let k = bands.len();
    if k < 2 {
        return Err(DecompositionError::InsufficientData(format!("PCA needs at least 2 bands, got {k}")));
    }
    let mut planes = Vec::with_capacity(k);
    for b in bands {
        planes.push(grid.band(b).ok_or_else(|| DecompositionError::MissingBand(b.to_string()))?);
    }
    let moments = band_moments(grid, &planes);
    if moments.n < k.max(2) as u64 {
        return Err(DecompositionError::InsufficientData(format!(
            "{} valid pixels for {k} bands",
            moments.n
        )));
    }
    let cov = moments.covariance();
    let std_devs: Vec<f64> = (0..k).map(|i| cov[i][i].sqrt()).collect();
    let matrix = match mode {
        PcaMode::Covariance => {
            if cov.iter().enumerate().all(|(i, r)| r[i] <= 0.0) {
                return Err(DecompositionError::DegenerateBand(bands.join(",")));
            }
            cov
        }
        PcaMode::Correlation => {
            if let Some(i) = std_devs.iter().position(|&s| s.is_nan() || s <= 0.0) {
                return Err(DecompositionError::DegenerateBand(bands[i].to_string()));
            }
            (0..k)
                .map(|i| {
                    (0..k)
                        .map(|j| if i == j { 1.0 } else { cov[i][j] / (std_devs[i] * std_devs[j]) })
                        .collect()
                })
                .collect()
        }
    };

    let eigen = symmetric_eigen(&matrix)?;
    let trace: f64 = (0..k).map(|i| matrix[i][i]).sum();
    let explained_variance_ratio = eigen.values.iter().map(|v| v / trace).collect();

    let scale: Vec<f64> = match mode {
        PcaMode::Correlation => std_devs.iter().map(|s| 1.0 / s).collect(),
        PcaMode::Covariance => vec![1.0; k],
    };
    let means = moments.mean.clone();
    let vectors = &eigen.vectors;
    let projected: Vec<Vec<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if !grid.mask()[i] {
                return vec![0.0; k];
            }
            let z: Vec<f64> = (0..k).map(|b| (planes[b][i] - means[b]) * scale[b]).collect();
            (0..k).map(|c| (0..k).map(|b| vectors[b][c] * z[b]).sum()).collect()
        })
        .collect();
    let score_planes = (0..k).map(|c| projected.iter().map(|p| p[c]).collect()).collect();
    let score_bands = (1..=k).map(|c| BandDescriptor::derived(format!("PC{c}"))).collect();
    let scores = RasterGrid::new(grid.width(), grid.height(), *grid.geo(), score_bands, score_planes, grid.mask().to_vec())?;

    Ok(PcaResult {
        mode,
        bands: bands.iter().map(|b| b.to_string()).collect(),
        valid_pixels: moments.n,
        means,
        std_devs,
        matrix,
        eigenvalues: eigen.values,
        eigenvectors: eigen.vectors,
        explained_variance_ratio,
        scores,
    })
}
