//! Pipeline configuration: one JSON document, plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use soilmark_core::catalog::{default_windows, FilterSpec, MonthDay, SeasonalWindow, StacQuery, DEFAULT_MAX_CLOUD_PCT};
use soilmark_core::compositor::{CompositeMode, LoadOptions};
use soilmark_core::decomposition::{PcaMode, DEFAULT_PCA_BANDS, TCT_BANDS};
use soilmark_core::raster::{canonical_band_name, RegionOfInterest};
use soilmark_core::render::{validate_percents, PercentileMethod, RenderError, DEFAULT_HISTOGRAM_BINS};

use crate::error::CliError;

pub const STAC_ENDPOINT_ENV: &str = "SOILMARK_STAC_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Product {
    Rgb,
    Fswir,
    Bsi,
    Ndvi,
    Hsv,
    Tct,
    Pca,
}

impl Product {
    pub const ALL: [Product; 7] = [
        Product::Rgb,
        Product::Fswir,
        Product::Bsi,
        Product::Ndvi,
        Product::Hsv,
        Product::Tct,
        Product::Pca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Product::Rgb => "rgb",
            Product::Fswir => "fswir",
            Product::Bsi => "bsi",
            Product::Ndvi => "ndvi",
            Product::Hsv => "hsv",
            Product::Tct => "tct",
            Product::Pca => "pca",
        }
    }

    /// Band arithmetic and display composites, as opposed to band-space transforms.
    pub fn is_index(self) -> bool {
        matches!(self, Product::Rgb | Product::Fswir | Product::Bsi | Product::Ndvi)
    }

    pub fn required_bands(self, config: &PipelineConfig) -> Vec<String> {
        let fixed: &[&str] = match self {
            Product::Rgb | Product::Hsv => &["B4", "B3", "B2"],
            Product::Fswir => &["B12", "B8", "B4"],
            Product::Bsi => &["B2", "B4", "B8", "B12"],
            Product::Ndvi => &["B4", "B8"],
            Product::Tct => &TCT_BANDS,
            Product::Pca => return config.pca_bands.clone(),
        };
        fixed.iter().map(|b| b.to_string()).collect()
    }
}

impl fmt::Display for Product {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Product {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Product::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown product {s:?}; expected one of rgb, fswir, bsi, ndvi, hsv, tct, pca"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StacInput {
    pub endpoint: String,
    #[serde(default)]
    pub collections: Vec<String>,
    #[serde(default = "default_page_limit")]
    pub page_limit: usize,
    /// Where assets are downloaded; `<output_dir>/assets` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub download_dir: Option<PathBuf>,
}

fn default_page_limit() -> usize {
    100
}

impl StacInput {
    pub fn query(&self) -> StacQuery {
        StacQuery {
            endpoint: self.endpoint.clone(),
            collections: self.collections.clone(),
            page_limit: self.page_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// Root of a tree of `*.scene.json` sidecars.
    Directory(PathBuf),
    Stac(StacInput),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StretchConfig {
    pub lower_pct: f64,
    pub upper_pct: f64,
    #[serde(default)]
    pub method: PercentileMethod,
}

impl Default for StretchConfig {
    fn default() -> Self {
        Self {
            lower_pct: 2.0,
            upper_pct: 98.0,
            method: PercentileMethod::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: InputSource,
    /// Analysis extent; the earliest scene's footprint when absent (directory input only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roi: Option<RegionOfInterest>,
    pub windows: Vec<SeasonalWindow>,
    pub first_year: i32,
    pub last_year: i32,
    pub max_cloud_pct: f64,
    /// Bands composited; every product's inputs must be among them.
    pub bands: Vec<String>,
    pub products: Vec<Product>,
    pub pca_mode: PcaMode,
    pub pca_bands: Vec<String>,
    pub stretch: StretchConfig,
    pub composite_mode: CompositeMode,
    pub histogram_bins: usize,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: InputSource::Directory(PathBuf::from("scenes")),
            roi: None,
            windows: default_windows(),
            first_year: 2015,
            last_year: 2020,
            max_cloud_pct: DEFAULT_MAX_CLOUD_PCT,
            bands: ["B2", "B3", "B4", "B8", "B11", "B12"].iter().map(|b| b.to_string()).collect(),
            products: Product::ALL.to_vec(),
            pca_mode: PcaMode::Correlation,
            pca_bands: DEFAULT_PCA_BANDS.iter().map(|b| b.to_string()).collect(),
            stretch: StretchConfig::default(),
            composite_mode: CompositeMode::Pooled,
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
            output_dir: PathBuf::from("output"),
        }
    }
}

fn safe_label(label: &str) -> bool {
    !label.is_empty()
        && label != "."
        && label != ".."
        && label.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl PipelineConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
        let mut config: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.rebase(base);
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        match &mut self.input {
            InputSource::Directory(d) => join(d),
            InputSource::Stac(s) => {
                if let Some(d) = s.download_dir.as_mut() {
                    join(d)
                }
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Checks every field, naming the first offending one.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.products.is_empty() {
            return Err(CliError::config("products", "at least one product is required"));
        }
        if let InputSource::Stac(s) = &self.input {
            if !(s.endpoint.starts_with("http://") || s.endpoint.starts_with("https://")) {
                return Err(CliError::config("input.stac.endpoint", format!("{:?} is not an http(s) URL", s.endpoint)));
            }
            if s.page_limit == 0 {
                return Err(CliError::config("input.stac.page_limit", "must be at least 1"));
            }
            match &self.roi {
                None => return Err(CliError::config("roi", "required for STAC input")),
                Some(r) if r.epsg != 4326 => {
                    return Err(CliError::config("roi.epsg", "STAC input needs a longitude/latitude ROI (EPSG:4326)"))
                }
                _ => {}
            }
        }
        if let Some(roi) = &self.roi {
            roi.validate().map_err(|e| CliError::config("roi", e))?;
        }
        if self.windows.is_empty() {
            return Err(CliError::config("windows", "at least one window is required"));
        }
        for (i, w) in self.windows.iter().enumerate() {
            if !safe_label(&w.label) {
                return Err(CliError::config(
                    &format!("windows[{i}].label"),
                    format!("{:?} must be non-empty and use only letters, digits, '-', '_' or '.'", w.label),
                ));
            }
            SeasonalWindow::new(w.label.clone(), w.start, w.end).map_err(|e| CliError::config(&format!("windows[{i}]"), e))?;
            if self.windows[..i].iter().any(|o| o.label == w.label) {
                return Err(CliError::config(&format!("windows[{i}].label"), format!("duplicate label {:?}", w.label)));
            }
        }
        if self.first_year > self.last_year {
            return Err(CliError::config(
                "last_year",
                format!("{} precedes first_year {}", self.last_year, self.first_year),
            ));
        }
        if !(0.0..=100.0).contains(&self.max_cloud_pct) {
            return Err(CliError::config("max_cloud_pct", format!("{} outside [0, 100]", self.max_cloud_pct)));
        }
        check_bands("bands", &self.bands)?;
        check_bands("pca_bands", &self.pca_bands)?;
        if self.pca_bands.len() < 2 {
            return Err(CliError::config("pca_bands", "at least two bands are required"));
        }
        validate_percents(self.stretch.lower_pct, self.stretch.upper_pct).map_err(|e| match e {
            RenderError::InvalidStretch { field, message } => CliError::config(&format!("stretch.{field}"), message),
            other => CliError::config("stretch", other),
        })?;
        if self.histogram_bins == 0 {
            return Err(CliError::config("histogram_bins", "must be at least 1"));
        }
        for p in self.selected_products() {
            let missing: Vec<String> = p.required_bands(self).into_iter().filter(|b| !self.bands.contains(b)).collect();
            if !missing.is_empty() {
                return Err(CliError::config("bands", format!("product {p} needs {}", missing.join(", "))));
            }
        }
        Ok(())
    }

    /// Requested products in canonical order, without repeats.
    pub fn selected_products(&self) -> Vec<Product> {
        let mut p = self.products.clone();
        p.sort();
        p.dedup();
        p
    }

    pub fn filter_spec(&self, roi: RegionOfInterest) -> FilterSpec {
        FilterSpec {
            windows: self.windows.clone(),
            first_year: self.first_year,
            last_year: self.last_year,
            max_cloud_pct: self.max_cloud_pct,
            roi,
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions::default()
    }

    /// SHA-256 over the fields that affect products: output and download
    /// locations are excluded and the product list is taken as a set.
    pub fn semantic_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.products = self.selected_products();
        if let InputSource::Stac(s) = &mut canonical.input {
            s.download_dir = None;
        }
        let bytes = serde_json::to_vec(&canonical).expect("config serialises");
        format!("{:x}", Sha256::digest(bytes))
    }
}

fn check_bands(field: &str, bands: &[String]) -> Result<(), CliError> {
    if bands.is_empty() {
        return Err(CliError::config(field, "at least one band is required"));
    }
    for (i, b) in bands.iter().enumerate() {
        if canonical_band_name(b).as_deref() != Some(b.as_str()) {
            return Err(CliError::config(field, format!("{b:?} is not a Sentinel-2 band name such as B2 or B8A")));
        }
        if bands[..i].contains(b) {
            return Err(CliError::config(field, format!("{b} is listed twice")));
        }
    }
    Ok(())
}

/// `min_x,min_y,max_x,max_y,epsg`.
pub fn parse_roi(s: &str) -> Result<RegionOfInterest, CliError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || CliError::config("--roi", format!("{s:?}: expected min_x,min_y,max_x,max_y,epsg"));
    if parts.len() != 5 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts[..4].iter().map(|p| p.parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
    let epsg: u32 = parts[4].trim_start_matches("EPSG:").parse().map_err(|_| bad())?;
    RegionOfInterest::new(nums[0], nums[1], nums[2], nums[3], epsg).map_err(|e| CliError::config("--roi", e))
}

/// Comma-separated `label=MM-DD:MM-DD`; the label defaults to `MMDD-MMDD`.
pub fn parse_windows(s: &str) -> Result<Vec<SeasonalWindow>, CliError> {
    s.split(',')
        .map(|item| {
            let item = item.trim();
            let (label, range) = match item.split_once('=') {
                Some((l, r)) => (Some(l.trim()), r),
                None => (None, item),
            };
            let (a, b) = range
                .split_once(':')
                .ok_or_else(|| CliError::config("--windows", format!("{item:?}: expected [label=]MM-DD:MM-DD")))?;
            let start: MonthDay = a.trim().parse().map_err(|e| CliError::config("--windows", e))?;
            let end: MonthDay = b.trim().parse().map_err(|e| CliError::config("--windows", e))?;
            let label = label
                .map(str::to_string)
                .unwrap_or_else(|| format!("{}-{}", start.to_string().replace('-', ""), end.to_string().replace('-', "")));
            SeasonalWindow::new(label, start, end).map_err(|e| CliError::config("--windows", e))
        })
        .collect()
}

/// `YYYY` or `YYYY-YYYY`.
pub fn parse_years(s: &str) -> Result<(i32, i32), CliError> {
    let bad = || CliError::config("--years", format!("{s:?}: expected YYYY or YYYY-YYYY"));
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    let first = a.trim().parse().map_err(|_| bad())?;
    let last = b.trim().parse().map_err(|_| bad())?;
    Ok((first, last))
}

/// `lower,upper` percents.
pub fn parse_stretch(s: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::config("--stretch", format!("{s:?}: expected lower,upper percents"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

pub fn parse_products(s: &str) -> Result<Vec<Product>, CliError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.parse().map_err(|e| CliError::config("--products", e)))
        .collect()
}

pub fn parse_pca_mode(s: &str) -> Result<PcaMode, CliError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "correlation" => Ok(PcaMode::Correlation),
        "covariance" => Ok(PcaMode::Covariance),
        _ => Err(CliError::config("--pca-mode", format!("{s:?}: expected correlation or covariance"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ExitKind;

    fn field_of(e: CliError) -> String {
        assert_eq!(e.kind, ExitKind::Config);
        e.message
    }

    #[test]
    fn defaults_follow_the_seasonal_protocol() {
        let c = PipelineConfig::default();
        assert_eq!(c.windows.len(), 2);
        assert_eq!(c.windows[0].start.to_string(), "01-01");
        assert_eq!(c.windows[0].end.to_string(), "03-31");
        assert_eq!(c.windows[1].start.to_string(), "10-01");
        assert_eq!(c.windows[1].end.to_string(), "12-31");
        assert_eq!((c.first_year, c.last_year), (2015, 2020));
        assert_eq!((c.stretch.lower_pct, c.stretch.upper_pct), (2.0, 98.0));
        assert_eq!(c.pca_mode, PcaMode::Correlation);
        assert_eq!(c.pca_bands, ["B2", "B3", "B4", "B8"]);
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = PipelineConfig::default();
        c.roi = Some(RegionOfInterest::new(11.0, 44.5, 11.5, 45.0, 4326).unwrap());
        c.input = InputSource::Stac(StacInput {
            endpoint: "https://example.org/v1".into(),
            collections: vec!["sentinel-2-l1c".into()],
            page_limit: 50,
            download_dir: Some("cache".into()),
        });
        c.products = vec![Product::Pca, Product::Bsi];
        c.pca_mode = PcaMode::Covariance;
        c.stretch.method = PercentileMethod::Histogram;
        c.composite_mode = CompositeMode::Both;
        let back: PipelineConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), c.to_json());
    }

    #[test]
    fn partial_documents_take_defaults_and_typos_are_rejected() {
        let c: PipelineConfig = serde_json::from_str(r#"{"products": ["bsi"]}"#).unwrap();
        assert_eq!(c.products, [Product::Bsi]);
        assert_eq!(c.bands, PipelineConfig::default().bands);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"prodcts": ["bsi"]}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"products": ["evi"]}"#).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = PipelineConfig::default();
        c.stretch.upper_pct = 2.0;
        assert!(field_of(c.validate().unwrap_err()).contains("stretch.upper_pct"));

        let mut c = PipelineConfig::default();
        c.products.clear();
        assert!(field_of(c.validate().unwrap_err()).contains("products"));

        let mut c = PipelineConfig::default();
        c.bands.retain(|b| b != "B12");
        let msg = field_of(c.validate().unwrap_err());
        assert!(msg.contains("bands") && msg.contains("B12"), "{msg}");

        let mut c = PipelineConfig::default();
        c.last_year = 2010;
        assert!(field_of(c.validate().unwrap_err()).contains("last_year"));

        let mut c = PipelineConfig::default();
        c.max_cloud_pct = 120.0;
        assert!(field_of(c.validate().unwrap_err()).contains("max_cloud_pct"));

        let mut c = PipelineConfig::default();
        c.windows[1].label = "jan-mar".into();
        assert!(field_of(c.validate().unwrap_err()).contains("windows[1].label"));

        let mut c = PipelineConfig::default();
        c.windows[0].label = "a/b".into();
        assert!(field_of(c.validate().unwrap_err()).contains("windows[0].label"));

        let mut c = PipelineConfig::default();
        c.input = InputSource::Stac(StacInput {
            endpoint: "http://localhost:1".into(),
            collections: vec![],
            page_limit: 10,
            download_dir: None,
        });
        assert!(field_of(c.validate().unwrap_err()).contains("roi"));
    }

    #[test]
    fn hash_tracks_meaningful_fields_only() {
        let base = PipelineConfig::default();
        let h = base.semantic_hash();

        let mut moved = base.clone();
        moved.output_dir = "elsewhere".into();
        moved.products.reverse();
        assert_eq!(moved.semantic_hash(), h);

        let mut changed = base.clone();
        changed.max_cloud_pct = 19.5;
        assert_ne!(changed.semantic_hash(), h);
        let mut changed = base.clone();
        changed.pca_mode = PcaMode::Covariance;
        assert_ne!(changed.semantic_hash(), h);
        let mut changed = base.clone();
        changed.products.pop();
        assert_ne!(changed.semantic_hash(), h);
        let mut changed = base;
        changed.stretch.lower_pct = 1.0;
        assert_ne!(changed.semantic_hash(), h);
    }

    #[test]
    fn override_parsers() {
        let r = parse_roi("600000,4990000,610000,5000000,32632").unwrap();
        assert_eq!((r.min_x, r.max_y, r.epsg), (600000.0, 5000000.0, 32632));
        assert!(parse_roi("1,2,3").is_err());
        assert!(parse_roi("3,2,1,4,4326").is_err());

        let w = parse_windows("winter=01-01:03-31, 10-01:12-31").unwrap();
        assert_eq!(w[0].label, "winter");
        assert_eq!(w[1].label, "1001-1231");
        assert!(parse_windows("01-01").is_err());

        assert_eq!(parse_years("2015-2020").unwrap(), (2015, 2020));
        assert_eq!(parse_years("2018").unwrap(), (2018, 2018));
        assert_eq!(parse_stretch("1, 99").unwrap(), (1.0, 99.0));
        assert_eq!(parse_products("bsi,PCA").unwrap(), [Product::Bsi, Product::Pca]);
        assert!(parse_products("bsi,evi").is_err());
        assert_eq!(parse_pca_mode("covariance").unwrap(), PcaMode::Covariance);
    }
}
