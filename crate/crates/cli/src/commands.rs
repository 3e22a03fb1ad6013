//! Command-line surface: argument definitions and dispatch.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use soilmark_core::catalog::{fetch_assets, ingest_directory, stac_search, SceneRecord, StacQuery};
use soilmark_core::io::{read_geotiff, write_png};
use soilmark_core::render::{render_gray, render_rgb, stretch_bands, PercentileMethod, StretchMetadata};
use soilmark_core::synth::{generate_scene_set, SceneSetSpec};

use crate::config::{
    parse_pca_mode, parse_products, parse_roi, parse_stretch, parse_windows, parse_years, InputSource, PipelineConfig,
    Product, StacInput, STAC_ENDPOINT_ENV,
};
use crate::error::CliError;
use crate::pipeline::{run_composite, run_pipeline, run_products, Manifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "soilmark", version, about = "Seasonal Sentinel-2 composites, spectral indices and decompositions for soil-mark prospection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by the config-driven subcommands; each flag overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON pipeline configuration; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Directory of scene sidecars (replaces the configured input).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// min_x,min_y,max_x,max_y,epsg
    #[arg(long, allow_hyphen_values = true)]
    pub roi: Option<String>,
    /// Comma-separated [label=]MM-DD:MM-DD windows.
    #[arg(long)]
    pub windows: Option<String>,
    /// YYYY or YYYY-YYYY.
    #[arg(long)]
    pub years: Option<String>,
    /// Maximum scene cloud cover in percent.
    #[arg(long)]
    pub max_cloud: Option<f64>,
    /// lower,upper stretch percents.
    #[arg(long)]
    pub stretch: Option<String>,
    /// correlation or covariance.
    #[arg(long)]
    pub pca_mode: Option<String>,
}

impl Overrides {
    /// Config file (or defaults), then flags, then the STAC endpoint variable.
    pub fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(o) = &self.output {
            c.output_dir = o.clone();
        }
        if let Some(i) = &self.input {
            c.input = InputSource::Directory(i.clone());
        }
        if let Some(r) = &self.roi {
            c.roi = Some(parse_roi(r)?);
        }
        if let Some(w) = &self.windows {
            c.windows = parse_windows(w)?;
        }
        if let Some(y) = &self.years {
            (c.first_year, c.last_year) = parse_years(y)?;
        }
        if let Some(m) = self.max_cloud {
            c.max_cloud_pct = m;
        }
        if let Some(s) = &self.stretch {
            (c.stretch.lower_pct, c.stretch.upper_pct) = parse_stretch(s)?;
        }
        if let Some(m) = &self.pca_mode {
            c.pca_mode = parse_pca_mode(m)?;
        }
        if let (InputSource::Stac(s), Ok(endpoint)) = (&mut c.input, std::env::var(STAC_ENDPOINT_ENV)) {
            if !endpoint.is_empty() {
                s.endpoint = endpoint;
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List the scenes under a directory of sidecars.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Also write the records as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Query a STAC API for scenes matching the windows, years, cloud limit and ROI.
    Search {
        #[command(flatten)]
        overrides: Overrides,
        /// STAC API root; falls back to $SOILMARK_STAC_ENDPOINT, then the config.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, value_delimiter = ',')]
        collections: Vec<String>,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Download every asset below this directory.
        #[arg(long)]
        download: Option<PathBuf>,
    },
    /// Build and save the per-window mean composites.
    Composite {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Spectral indices and display composites from saved composites.
    Index {
        #[arg(value_enum, required = true)]
        products: Vec<Product>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// HSV, Tasselled Cap or PCA from saved composites.
    Decompose {
        #[arg(value_enum, required = true)]
        products: Vec<Product>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Stretch bands of a GeoTIFF into a PNG.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// One or three 1-based band numbers.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        bands: Vec<usize>,
        #[arg(long, default_value = "2,98")]
        stretch: String,
        #[arg(long, value_enum, default_value = "exact")]
        method: Method,
    },
    /// Write a synthetic scene set with a planted palaeochannel.
    Synth {
        #[arg(long)]
        output: PathBuf,
        /// Width and height in 10 m pixels.
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = 12)]
        scenes: usize,
        /// Planted reflectance contrast.
        #[arg(long, default_value_t = 0.05)]
        contrast: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run every stage: catalogue, composites and the requested products.
    Pipeline {
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated products.
        #[arg(long)]
        products: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Method {
    Exact,
    Histogram,
}

fn print_scenes(out: &mut impl Write, scenes: &[SceneRecord]) -> Result<(), CliError> {
    for s in scenes {
        let bands: Vec<&str> = s.band_files.keys().map(String::as_str).collect();
        writeln!(
            out,
            "{}\t{}\t{:.2}\t{}",
            s.scene_id,
            s.acquired_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            s.cloud_cover_pct,
            bands.join(",")
        )?;
    }
    Ok(())
}

fn write_json(path: &Option<PathBuf>, scenes: &[SceneRecord]) -> Result<(), CliError> {
    if let Some(p) = path {
        let mut text = serde_json::to_vec_pretty(scenes)?;
        text.push(b'\n');
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn summarise(out: &mut impl Write, manifest: &Manifest) -> Result<(), CliError> {
    for b in &manifest.buckets {
        writeln!(
            out,
            "{}: {} ({} scenes, {} files)",
            b.directory,
            b.status,
            b.scene_ids.len(),
            b.files.len()
        )?;
    }
    writeln!(out, "manifest: {}", manifest.config.output_dir.join(MANIFEST_FILE).display())?;
    Ok(())
}

fn search(
    overrides: &Overrides,
    endpoint: &Option<String>,
    collections: &[String],
    json: &Option<PathBuf>,
    download: &Option<PathBuf>,
    out: &mut impl Write,
) -> Result<(), CliError> {
    let config = overrides.resolve()?;
    let configured = match &config.input {
        InputSource::Stac(s) => Some(s.clone()),
        InputSource::Directory(_) => None,
    };
    let endpoint = endpoint
        .clone()
        .or_else(|| std::env::var(STAC_ENDPOINT_ENV).ok().filter(|e| !e.is_empty()))
        .or_else(|| configured.as_ref().map(|s| s.endpoint.clone()))
        .ok_or_else(|| CliError::config("--endpoint", format!("give --endpoint, set {STAC_ENDPOINT_ENV} or configure input.stac")))?;
    let mut stac = configured.unwrap_or(StacInput {
        endpoint: String::new(),
        collections: Vec::new(),
        page_limit: StacQuery::new("").page_limit,
        download_dir: None,
    });
    stac.endpoint = endpoint;
    if !collections.is_empty() {
        stac.collections = collections.to_vec();
    }
    let mut probe = config.clone();
    probe.input = InputSource::Stac(stac.clone());
    probe.validate()?;
    let roi = probe.roi.expect("validated STAC config has an ROI");
    let mut found = stac_search(&stac.query(), &config.filter_spec(roi))?;
    if let Some(dir) = download {
        found = found
            .iter()
            .map(|r| fetch_assets(r, dir.join(&r.scene_id)))
            .collect::<Result<_, _>>()?;
    }
    print_scenes(out, &found)?;
    write_json(json, &found)?;
    writeln!(out, "{} scenes", found.len())?;
    if found.is_empty() {
        return Err(CliError::empty("the search matched no scenes"));
    }
    Ok(())
}

fn render(
    input: &PathBuf,
    output: &PathBuf,
    bands: &[usize],
    stretch: &str,
    method: Method,
    out: &mut impl Write,
) -> Result<(), CliError> {
    let (lo, hi) = parse_stretch(stretch)?;
    let method = match method {
        Method::Exact => PercentileMethod::Exact,
        Method::Histogram => PercentileMethod::Histogram,
    };
    let (grid, _) = read_geotiff(input).map_err(|e| CliError::input(format!("{}: {e}", input.display())))?;
    if bands.len() != 1 && bands.len() != 3 {
        return Err(CliError::config("--bands", "give one or three band numbers"));
    }
    let indices: Vec<usize> = bands
        .iter()
        .map(|&b| {
            (1..=grid.band_count())
                .contains(&b)
                .then_some(b - 1)
                .ok_or_else(|| CliError::config("--bands", format!("band {b} not in 1..={}", grid.band_count())))
        })
        .collect::<Result<_, _>>()?;
    let params = stretch_bands(&grid, &indices, lo, hi, method).map_err(|e| match e {
        soilmark_core::render::RenderError::InvalidStretch { field, message } => {
            CliError::config(&format!("--stretch {field}"), message)
        }
        other => other.into(),
    })?;
    let image = if indices.len() == 3 {
        let picked = grid.select_bands(&indices.iter().map(|&i| grid.bands()[i].name.as_str()).collect::<Vec<_>>())?;
        render_rgb(&picked, &[params[0], params[1], params[2]])?
    } else {
        render_gray(&grid, indices[0], &params[0])?
    };
    write_png(&image, output)?;
    let names = indices.iter().map(|&i| grid.bands()[i].name.clone()).collect();
    let meta = StretchMetadata::new(names, params, method);
    let mut text = serde_json::to_vec_pretty(&meta)?;
    text.push(b'\n');
    std::fs::write(output.with_extension("json"), text)?;
    writeln!(out, "{}", output.display())?;
    Ok(())
}

fn stage_products(products: &[Product], overrides: &Overrides, index: bool, out: &mut impl Write) -> Result<(), CliError> {
    let command = if index { "index" } else { "decompose" };
    if let Some(p) = products.iter().find(|p| p.is_index() != index) {
        let allowed = if index { "rgb, fswir, bsi, ndvi" } else { "hsv, tct, pca" };
        return Err(CliError::config("products", format!("{p} is not handled by `{command}` (expected {allowed})")));
    }
    let manifest = run_products(&overrides.resolve()?, products, command)?;
    summarise(out, &manifest)
}

/// Executes one parsed command, writing progress to `out`.
pub fn run(cli: &Cli, out: &mut impl Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest { input, json } => {
            if !input.is_dir() {
                return Err(CliError::input(format!("input directory {} does not exist", input.display())));
            }
            let catalog = ingest_directory(input)?;
            print_scenes(out, catalog.records())?;
            write_json(json, catalog.records())?;
            writeln!(out, "{} scenes", catalog.len())?;
            if catalog.is_empty() {
                return Err(CliError::empty(format!("no scene sidecars under {}", input.display())));
            }
            Ok(())
        }
        Command::Search {
            overrides,
            endpoint,
            collections,
            json,
            download,
        } => search(overrides, endpoint, collections, json, download, out),
        Command::Composite { overrides } => {
            let manifest = run_composite(&overrides.resolve()?)?;
            summarise(out, &manifest)
        }
        Command::Index { products, overrides } => stage_products(products, overrides, true, out),
        Command::Decompose { products, overrides } => stage_products(products, overrides, false, out),
        Command::Render {
            input,
            output,
            bands,
            stretch,
            method,
        } => render(input, output, bands, stretch, *method, out),
        Command::Synth {
            output,
            size,
            scenes,
            contrast,
            noise,
            seed,
        } => {
            let mut spec = SceneSetSpec::palaeochannel(*size, *size, *contrast, *noise, *seed);
            spec.n_scenes = *scenes;
            let set = generate_scene_set(&spec, output).map_err(|e| match e {
                soilmark_core::synth::SynthError::InvalidSpec(m) => CliError::config("synth", m),
                other => other.into(),
            })?;
            print_scenes(out, &set.scenes)?;
            let r = set.roi;
            writeln!(out, "roi: {},{},{},{},{}", r.min_x, r.min_y, r.max_x, r.max_y, r.epsg)?;
            writeln!(out, "truth mask: {}", set.truth_path.display())?;
            Ok(())
        }
        Command::Pipeline { overrides, products } => {
            let mut config = overrides.resolve()?;
            if let Some(p) = products {
                config.products = parse_products(p)?;
            }
            let manifest = run_pipeline(&config)?;
            summarise(out, &manifest)
        }
    }
}
