//! Per-bucket product generation and file layout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use soilmark_core::compositor::CompositeStack;
use soilmark_core::decomposition::{pca, rgb_grid_to_hsv, tct, TctCoefficients};
use soilmark_core::indices::{bsi, compose, ndvi, IndexProduct, Preset};
use soilmark_core::io::{write_geotiff, write_png, Image8, SampleFormat};
use soilmark_core::raster::RasterGrid;
use soilmark_core::render::{
    band_report, histogram, render_gray, render_rgb, stretch_bands, stretch_to_unit, StretchMetadata, StretchParams,
};

use crate::config::{PipelineConfig, Product};
use crate::error::CliError;

/// Directory holding the saved composite inside a bucket directory.
pub const COMPOSITE_DIR: &str = "composite";
pub const COMPOSITE_STEM: &str = "composite";
pub const BAND_REPORT_DIR: &str = "band_report";

struct Rendered {
    grid: RasterGrid,
    image: Image8,
    stretch: StretchMetadata,
    details: Value,
}

fn band_names(grid: &RasterGrid) -> Vec<String> {
    grid.bands().iter().map(|b| b.name.clone()).collect()
}

fn percent_stretch(grid: &RasterGrid, bands: &[usize], config: &PipelineConfig) -> Result<Vec<StretchParams>, CliError> {
    Ok(stretch_bands(grid, bands, config.stretch.lower_pct, config.stretch.upper_pct, config.stretch.method)?)
}

/// First three bands as RGB, or the first band as grayscale.
fn render_display(grid: &RasterGrid, config: &PipelineConfig) -> Result<(Image8, StretchMetadata), CliError> {
    let shown: Vec<usize> = (0..grid.band_count().min(3)).collect();
    let shown = if shown.len() == 3 { shown } else { vec![0] };
    let params = percent_stretch(grid, &shown, config)?;
    let image = if params.len() == 3 {
        render_rgb(grid, &[params[0], params[1], params[2]])?
    } else {
        render_gray(grid, 0, &params[0])?
    };
    let names = shown.iter().map(|&i| grid.bands()[i].name.clone()).collect();
    Ok((image, StretchMetadata::new(names, params, config.stretch.method)))
}

fn index_product(p: IndexProduct, config: &PipelineConfig) -> Result<Rendered, CliError> {
    let (image, stretch) = render_display(&p.plane, config)?;
    let details = json!({"index": p.index_name, "formula_id": p.formula_id, "formula": p.formula()});
    Ok(Rendered {
        grid: p.plane,
        image,
        stretch,
        details,
    })
}

fn preset_product(grid: &RasterGrid, preset: Preset, config: &PipelineConfig) -> Result<Rendered, CliError> {
    let triple = compose(grid, preset)?;
    let (image, stretch) = render_display(&triple.grid, config)?;
    Ok(Rendered {
        details: json!({"preset": triple.preset.name(), "slots": triple.preset.bands()}),
        grid: triple.grid,
        image,
        stretch,
    })
}

/// HSV of the percent-stretched true-colour triple.
fn hsv_product(grid: &RasterGrid, config: &PipelineConfig) -> Result<Rendered, CliError> {
    let triple = compose(grid, Preset::Rgb)?.grid;
    let cuts = percent_stretch(&triple, &[0, 1, 2], config)?;
    let unit = (0..3).map(|b| stretch_to_unit(triple.plane(b), triple.mask(), &cuts[b])).collect();
    let unit = RasterGrid::new(triple.width(), triple.height(), *triple.geo(), triple.bands().to_vec(), unit, triple.mask().to_vec())?;
    let hsv = rgb_grid_to_hsv(&unit)?.grid;
    let fixed = [StretchParams::fixed(0.0, 1.0); 3];
    let image = render_rgb(&hsv, &fixed)?;
    Ok(Rendered {
        details: json!({
            "input": StretchMetadata::new(band_names(&triple), cuts, config.stretch.method),
            "hue_unit": "turns in [0, 1)",
        }),
        stretch: StretchMetadata::new(band_names(&hsv), fixed.to_vec(), config.stretch.method),
        grid: hsv,
        image,
    })
}

fn tct_product(grid: &RasterGrid, config: &PipelineConfig) -> Result<Rendered, CliError> {
    let coefficients = TctCoefficients::default();
    let out = tct(grid, &coefficients)?;
    let (image, stretch) = render_display(&out, config)?;
    Ok(Rendered {
        details: json!({"coefficients": coefficients}),
        grid: out,
        image,
        stretch,
    })
}

fn pca_product(grid: &RasterGrid, config: &PipelineConfig) -> Result<Rendered, CliError> {
    let bands: Vec<&str> = config.pca_bands.iter().map(String::as_str).collect();
    let result = pca(grid, &bands, config.pca_mode)?;
    let (image, stretch) = render_display(&result.scores, config)?;
    Ok(Rendered {
        details: json!({"pca": result.report()}),
        grid: result.scores,
        image,
        stretch,
    })
}

fn build(product: Product, grid: &RasterGrid, config: &PipelineConfig) -> Result<Rendered, CliError> {
    match product {
        Product::Rgb => preset_product(grid, Preset::Rgb, config),
        Product::Fswir => preset_product(grid, Preset::Fswir, config),
        Product::Bsi => index_product(bsi(grid)?, config),
        Product::Ndvi => index_product(ndvi(grid)?, config),
        Product::Hsv => hsv_product(grid, config),
        Product::Tct => tct_product(grid, config),
        Product::Pca => pca_product(grid, config),
    }
}

#[derive(Serialize)]
struct ProductMetadata<'a> {
    product: &'a str,
    bucket: Option<&'a str>,
    scene_ids: &'a [String],
    bands: Vec<String>,
    stretch: &'a StretchMetadata,
    #[serde(flatten)]
    details: &'a Value,
}

/// One histogram per band: `band,lo,hi,count`.
fn write_histograms(grid: &RasterGrid, bins: usize, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| CliError::input(format!("{}: {e}", path.display()));
    w.write_record(["band", "lo", "hi", "count"]).map_err(csv_err)?;
    for (b, desc) in grid.bands().iter().enumerate() {
        let h = histogram(grid.plane(b), grid.mask(), bins, None)?;
        for (i, count) in h.counts.iter().enumerate() {
            w.write_record([
                desc.name.clone(),
                h.bin_edges[i].to_string(),
                h.bin_edges[i + 1].to_string(),
                count.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `<bucket_dir>/<product>/<product>.{tif,png,csv,json}`; PCA adds a
/// per-component band report. Returns the files written, in order.
pub fn write_product(
    product: Product,
    stack: &CompositeStack,
    config: &PipelineConfig,
    bucket_dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let rendered = build(product, &stack.grid, config)?;
    let name = product.name();
    let dir = bucket_dir.join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let tif = dir.join(format!("{name}.tif"));
    let grid = &rendered.grid;
    write_geotiff(grid, &tif, SampleFormat::Float32)?;
    let png = dir.join(format!("{name}.png"));
    write_png(&rendered.image, &png)?;
    let csv = dir.join(format!("{name}.csv"));
    write_histograms(grid, config.histogram_bins, &csv)?;
    let json_path = dir.join(format!("{name}.json"));
    let meta = ProductMetadata {
        product: name,
        bucket: stack.provenance.bucket.as_deref(),
        scene_ids: &stack.provenance.scene_ids,
        bands: band_names(grid),
        stretch: &rendered.stretch,
        details: &rendered.details,
    };
    let mut text = serde_json::to_vec_pretty(&meta)?;
    text.push(b'\n');
    fs::write(&json_path, text)?;

    let mut files = vec![tif, png, csv, json_path];
    if product == Product::Pca {
        for f in band_report(grid, &dir.join(BAND_REPORT_DIR), config.histogram_bins, config.stretch.method)? {
            files.push(f.png);
            files.push(f.csv);
        }
    }
    Ok(files)
}
