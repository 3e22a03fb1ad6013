//! Stage orchestration: catalogue → composites → products, with a run manifest.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use soilmark_core::catalog::{fetch_assets, ingest_directory, stac_search, Catalog};
use soilmark_core::compositor::{
    load_composite, save_composite, window_composites, BucketKey, CompositeError, CompositeMode, CompositeStack,
    YearSelection,
};
use soilmark_core::raster::RegionOfInterest;

use crate::config::{InputSource, PipelineConfig, Product};
use crate::error::CliError;
use crate::products::{write_product, COMPOSITE_DIR, COMPOSITE_STEM};

pub const LOCK_FILE: &str = ".pipeline.lock";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::input(format!(
                "{} is in use by another run (delete {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: String,
    pub acquired_at: DateTime<Utc>,
    pub cloud_cover_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketEntry {
    pub label: String,
    pub directory: String,
    /// `ok` or `empty`.
    pub status: String,
    pub scene_ids: Vec<String>,
    pub files: Vec<FileEntry>,
}

/// Machine-readable record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub roi: Option<RegionOfInterest>,
    pub scenes: Vec<SceneEntry>,
    pub buckets: Vec<BucketEntry>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl Manifest {
    fn new(command: &str, config: &PipelineConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: config.semantic_hash(),
            config: config.clone(),
            roi: config.roi,
            scenes: Vec::new(),
            buckets: Vec::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        fs::write(&path, text)?;
        Ok(path)
    }

    /// All buckets empty maps to the "empty result" exit status.
    fn outcome(self) -> Result<Self, CliError> {
        if self.buckets.iter().all(|b| b.status != "ok") {
            return Err(CliError::empty("no scenes fell into any window bucket"));
        }
        Ok(self)
    }
}

struct Stopwatch {
    start: Instant,
    lap: Instant,
}

impl Stopwatch {
    fn new() -> Self {
        let now = Instant::now();
        Self { start: now, lap: now }
    }

    fn lap(&mut self, m: &mut Manifest, stage: &str) {
        let now = Instant::now();
        *m.timings_ms.entry(stage.into()).or_default() += (now - self.lap).as_secs_f64() * 1e3;
        self.lap = now;
    }

    fn finish(self, m: &mut Manifest) {
        m.timings_ms.insert("total".into(), self.start.elapsed().as_secs_f64() * 1e3);
    }
}

/// `jan-mar` for a pooled bucket, `jan-mar_2017` for a single year.
pub fn bucket_dir_name(key: &BucketKey) -> String {
    match key.years {
        YearSelection::Pooled { .. } => key.window.clone(),
        YearSelection::Year(y) => format!("{}_{y}", key.window),
    }
}

/// Every bucket the configuration asks for, in output order.
pub fn bucket_keys(config: &PipelineConfig) -> Vec<BucketKey> {
    let mut keys = Vec::new();
    for w in &config.windows {
        if config.composite_mode != CompositeMode::PerYear {
            keys.push(BucketKey {
                window: w.label.clone(),
                years: YearSelection::Pooled {
                    first: config.first_year,
                    last: config.last_year,
                },
            });
        }
        if config.composite_mode != CompositeMode::Pooled {
            for y in config.first_year..=config.last_year {
                keys.push(BucketKey {
                    window: w.label.clone(),
                    years: YearSelection::Year(y),
                });
            }
        }
    }
    keys.sort();
    keys
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(format!("{:x}", Sha256::digest(fs::read(path)?)))
}

fn file_entries(root: &Path, files: &[PathBuf]) -> Result<Vec<FileEntry>, CliError> {
    files
        .iter()
        .map(|f| {
            let rel = f.strip_prefix(root).unwrap_or(f);
            let path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            Ok(FileEntry {
                path,
                sha256: sha256_file(f)?,
            })
        })
        .collect()
}

/// Scenes from the configured directory, or from a STAC search with assets downloaded.
pub fn load_catalog(config: &PipelineConfig) -> Result<Catalog, CliError> {
    match &config.input {
        InputSource::Directory(dir) => {
            if !dir.is_dir() {
                return Err(CliError::input(format!("input directory {} does not exist", dir.display())));
            }
            Ok(ingest_directory(dir)?)
        }
        InputSource::Stac(stac) => {
            let roi = config.roi.ok_or_else(|| CliError::config("roi", "required for STAC input"))?;
            let found = stac_search(&stac.query(), &config.filter_spec(roi))?;
            let dest = stac.download_dir.clone().unwrap_or_else(|| config.output_dir.join("assets"));
            let local = found
                .iter()
                .map(|r| fetch_assets(r, dest.join(&r.scene_id)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Catalog::new(local))
        }
    }
}

/// The configured ROI, else the footprint of the earliest scene.
fn resolve_roi(config: &PipelineConfig, catalog: &Catalog) -> Result<RegionOfInterest, CliError> {
    if let Some(roi) = config.roi {
        return Ok(roi);
    }
    catalog
        .records()
        .first()
        .map(|r| r.footprint)
        .ok_or_else(|| CliError::empty("the input holds no scenes"))
}

/// One bucket's composite, or why it is empty.
pub type BucketComposite = (BucketKey, Result<CompositeStack, CompositeError>);

/// Mean composites per bucket, quantised to float32 so that products computed
/// in memory match those computed from the saved composite.
pub fn build_composites(
    config: &PipelineConfig,
    catalog: &Catalog,
) -> Result<Vec<BucketComposite>, CliError> {
    let roi = resolve_roi(config, catalog)?;
    let bands: Vec<&str> = config.bands.iter().map(String::as_str).collect();
    let spec = config.filter_spec(roi);
    let mut out = Vec::new();
    for (key, result) in window_composites(catalog, &spec, &bands, config.composite_mode, &config.load_options())? {
        let result = match result {
            Ok(stack) => Ok(stack.quantized_f32()?),
            Err(CompositeError::EmptyBucket(label)) => Err(CompositeError::EmptyBucket(label)),
            Err(e) => return Err(e.into()),
        };
        out.push((key, result));
    }
    Ok(out)
}

fn start(config: &PipelineConfig, command: &str) -> Result<(OutputLock, Manifest, Stopwatch), CliError> {
    config.validate()?;
    let lock = OutputLock::acquire(&config.output_dir)?;
    Ok((lock, Manifest::new(command, config), Stopwatch::new()))
}

fn record_scenes(manifest: &mut Manifest, catalog: &Catalog, config: &PipelineConfig) -> Result<(), CliError> {
    manifest.roi = Some(resolve_roi(config, catalog)?);
    manifest.scenes = catalog
        .records()
        .iter()
        .map(|r| SceneEntry {
            scene_id: r.scene_id.clone(),
            acquired_at: r.acquired_at,
            cloud_cover_pct: r.cloud_cover_pct,
        })
        .collect();
    Ok(())
}

fn empty_bucket(key: &BucketKey) -> BucketEntry {
    BucketEntry {
        label: key.label(),
        directory: bucket_dir_name(key),
        status: "empty".into(),
        scene_ids: Vec::new(),
        files: Vec::new(),
    }
}

/// Catalogue, composites and the requested products in one pass.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Manifest, CliError> {
    let (_lock, mut manifest, mut clock) = start(config, "pipeline")?;
    let out = &config.output_dir;
    let catalog = load_catalog(config)?;
    record_scenes(&mut manifest, &catalog, config)?;
    clock.lap(&mut manifest, "catalog");
    let composites = build_composites(config, &catalog)?;
    clock.lap(&mut manifest, "composite");
    for (key, result) in composites {
        let Ok(stack) = result else {
            manifest.buckets.push(empty_bucket(&key));
            continue;
        };
        let dir = out.join(bucket_dir_name(&key));
        let mut files = Vec::new();
        for p in config.selected_products() {
            files.extend(write_product(p, &stack, config, &dir)?);
        }
        manifest.buckets.push(BucketEntry {
            label: key.label(),
            directory: bucket_dir_name(&key),
            status: "ok".into(),
            scene_ids: stack.provenance.scene_ids.clone(),
            files: file_entries(out, &files)?,
        });
        clock.lap(&mut manifest, "products");
    }
    clock.finish(&mut manifest);
    manifest.write(out)?;
    manifest.outcome()
}

/// Saves each bucket's composite under `<output>/<bucket>/composite/`.
pub fn run_composite(config: &PipelineConfig) -> Result<Manifest, CliError> {
    let (_lock, mut manifest, mut clock) = start(config, "composite")?;
    let out = &config.output_dir;
    let catalog = load_catalog(config)?;
    record_scenes(&mut manifest, &catalog, config)?;
    clock.lap(&mut manifest, "catalog");
    for (key, result) in build_composites(config, &catalog)? {
        let Ok(stack) = result else {
            manifest.buckets.push(empty_bucket(&key));
            continue;
        };
        let dir = out.join(bucket_dir_name(&key)).join(COMPOSITE_DIR);
        save_composite(&stack, &dir, COMPOSITE_STEM)?;
        let files: Vec<PathBuf> = ["tif", "counts.tif", "json"]
            .iter()
            .map(|ext| dir.join(format!("{COMPOSITE_STEM}.{ext}")))
            .collect();
        manifest.buckets.push(BucketEntry {
            label: key.label(),
            directory: bucket_dir_name(&key),
            status: "ok".into(),
            scene_ids: stack.provenance.scene_ids.clone(),
            files: file_entries(out, &files)?,
        });
    }
    clock.lap(&mut manifest, "composite");
    clock.finish(&mut manifest);
    manifest.write(out)?;
    manifest.outcome()
}

/// Computes `products` from composites previously saved by [`run_composite`].
pub fn run_products(config: &PipelineConfig, products: &[Product], command: &str) -> Result<Manifest, CliError> {
    let mut config = config.clone();
    config.products = products.to_vec();
    let (_lock, mut manifest, mut clock) = start(&config, command)?;
    let out = &config.output_dir;
    for key in bucket_keys(&config) {
        let dir = out.join(bucket_dir_name(&key));
        let composite_dir = dir.join(COMPOSITE_DIR);
        if !composite_dir.join(format!("{COMPOSITE_STEM}.tif")).is_file() {
            manifest.buckets.push(empty_bucket(&key));
            continue;
        }
        let stack = load_composite(&composite_dir, COMPOSITE_STEM)?;
        let missing: Vec<&String> = config.bands.iter().filter(|b| stack.grid.band_index(b).is_none()).collect();
        if !missing.is_empty() {
            return Err(CliError::input(format!(
                "composite in {} lacks bands {missing:?}",
                composite_dir.display()
            )));
        }
        let mut files = Vec::new();
        for p in config.selected_products() {
            files.extend(write_product(p, &stack, &config, &dir)?);
        }
        manifest.buckets.push(BucketEntry {
            label: key.label(),
            directory: bucket_dir_name(&key),
            status: "ok".into(),
            scene_ids: stack.provenance.scene_ids.clone(),
            files: file_entries(out, &files)?,
        });
        clock.lap(&mut manifest, "products");
    }
    clock.finish(&mut manifest);
    manifest.write(out)?;
    manifest.outcome()
}
