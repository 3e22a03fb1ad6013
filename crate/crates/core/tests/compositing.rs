use std::path::Path;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use soilmark_core::catalog::{ingest_directory, Asset, Catalog, FilterSpec, SceneRecord};
use soilmark_core::compositor::{
    load_composite, mean_composite, save_composite, window_composites, BucketKey, CompositeMode, CompositeStack,
    LoadOptions, YearSelection,
};
use soilmark_core::io::{read_geotiff, write_geotiff, write_geotiff_with, SampleFormat, WriteOptions};
use soilmark_core::raster::{BandDescriptor, GeoTransform, RasterGrid, RegionOfInterest};
use soilmark_core::synth::{generate_scene_set, SceneSetSpec, SyntheticSet};

const BANDS: [&str; 4] = ["B2", "B4", "B8", "B11"];

fn synthetic(dir: &Path, size: usize, contrast: f64, seed: u64) -> SyntheticSet {
    generate_scene_set(&SceneSetSpec::palaeochannel(size, size, contrast, 0.05, seed), dir).unwrap()
}

fn bits(stack: &CompositeStack) -> Vec<Vec<u64>> {
    stack.grid.planes().iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect()
}

/// Blanks a rectangle of one band so that scene contributes fewer observations there.
fn punch_hole(scene: &SceneRecord, band: &str, cols: std::ops::Range<usize>, rows: std::ops::Range<usize>) {
    let Asset::Local(path) = &scene.band_files[band] else { unreachable!() };
    let (grid, _) = read_geotiff(path).unwrap();
    let mut mask = grid.mask().to_vec();
    for r in rows {
        for c in cols.clone() {
            mask[r * grid.width() + c] = false;
        }
    }
    let holed = RasterGrid::new(grid.width(), grid.height(), *grid.geo(), grid.bands().to_vec(), grid.planes().to_vec(), mask)
        .unwrap();
    let opts = WriteOptions {
        dn_scale: 1.0,
        ..WriteOptions::new(SampleFormat::UInt16)
    };
    write_geotiff_with(&holed, path, &opts).unwrap();
}

#[test]
fn shuffled_input_order_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let set = synthetic(dir.path(), 64, 0.05, 11);
    let reference = mean_composite(&set.scenes, &BANDS, &set.roi, &LoadOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..4 {
        let mut scenes = set.scenes.clone();
        scenes.shuffle(&mut rng);
        let again = mean_composite(&scenes, &BANDS, &set.roi, &LoadOptions::default()).unwrap();
        assert_eq!(bits(&again), bits(&reference));
        assert_eq!(again.counts, reference.counts);
        assert_eq!(again.provenance, reference.provenance);
    }
}

#[test]
fn masked_pixels_are_excluded_per_hand_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let geo = GeoTransform::new(500_000.0, 4_000_030.0, 10.0, 10.0, 32632).unwrap();
    let roi = RegionOfInterest::new(500_000.0, 4_000_000.0, 500_040.0, 4_000_030.0, 32632).unwrap();
    let nan = f64::NAN;
    // three scenes of 4x3 pixels; NaN marks a missing observation
    let red: [[f64; 12]; 3] = [
        [0.10, 0.20, nan, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, nan, 0.11, 0.12],
        [0.30, nan, nan, 0.20, 0.10, 0.25, 0.35, 0.45, 0.55, nan, 0.15, 0.16],
        [0.50, 0.60, nan, nan, 0.30, 0.20, 0.10, 0.05, 0.15, nan, 0.19, 0.20],
    ];
    let nir: [[f64; 12]; 3] = [
        [0.40, 0.50, 0.60, 0.70, nan, 0.90, 0.10, 0.20, 0.30, 0.40, 0.50, 0.60],
        [0.41, 0.51, 0.61, 0.71, 0.81, 0.91, 0.11, 0.21, 0.31, 0.41, 0.51, 0.61],
        [0.42, 0.52, 0.62, 0.72, 0.82, 0.92, 0.12, 0.22, 0.32, 0.42, 0.52, nan],
    ];
    let mut scenes = Vec::new();
    for s in 0..3 {
        let scene_dir = dir.path().join(format!("S{s}"));
        std::fs::create_dir_all(&scene_dir).unwrap();
        let mut band_files = std::collections::BTreeMap::new();
        for (band, values) in [("B4", &red[s]), ("B8", &nir[s])] {
            let grid = RasterGrid::from_planes(4, 3, geo, vec![BandDescriptor::from_name(band)], vec![values.to_vec()]).unwrap();
            let path = scene_dir.join(format!("{band}.tif"));
            write_geotiff(&grid, &path, SampleFormat::Float32).unwrap();
            band_files.insert(band.to_string(), Asset::Local(path));
        }
        scenes.push(SceneRecord {
            scene_id: format!("S{s}"),
            acquired_at: DateTime::parse_from_rfc3339(&format!("2017-0{}-10T10:00:00Z", s + 1)).unwrap().with_timezone(&Utc),
            cloud_cover_pct: 1.0,
            band_files,
            footprint: roi,
        });
    }
    let stack = mean_composite(&scenes, &["B4", "B8"], &roi, &LoadOptions::default()).unwrap();

    for i in 0..12 {
        // a scene counts at a pixel only when every band is present there
        let used: Vec<usize> = (0..3).filter(|&s| !red[s][i].is_nan() && !nir[s][i].is_nan()).collect();
        assert_eq!(stack.counts[i], used.len() as u32, "pixel {i}");
        assert_eq!(stack.grid.mask()[i], !used.is_empty());
        for (b, values) in [&red, &nir].into_iter().enumerate() {
            let got = stack.grid.plane(b)[i];
            if used.is_empty() {
                assert_eq!(got, 0.0);
                continue;
            }
            let want = used.iter().map(|&s| values[s][i] as f32 as f64).sum::<f64>() / used.len() as f64;
            assert!((got - want).abs() < 1e-15, "pixel {i} band {b}: {got} vs {want}");
        }
    }
    assert_eq!(stack.counts, vec![3, 2, 0, 2, 2, 3, 3, 3, 3, 0, 3, 2]);
}

#[test]
fn pooled_composite_is_observation_weighted_mean_of_years() {
    let dir = tempfile::tempdir().unwrap();
    let set = synthetic(dir.path(), 48, 0.05, 3);
    // uneven observation counts across years
    punch_hole(&set.scenes[0], "B4", 0..20, 0..10);
    punch_hole(&set.scenes[5], "B8", 10..40, 5..30);
    punch_hole(&set.scenes[9], "B4", 30..48, 20..48);
    let catalog = ingest_directory(dir.path()).unwrap();
    let spec = FilterSpec::seasonal_default(set.roi);
    let out = window_composites(&catalog, &spec, &["B4", "B8"], CompositeMode::Both, &LoadOptions::default()).unwrap();
    assert_eq!(out.len(), 2 * 7);

    for window in ["jan-mar", "oct-dec"] {
        let pooled = out[&BucketKey {
            window: window.into(),
            years: YearSelection::Pooled { first: 2015, last: 2020 },
        }]
        .as_ref()
        .unwrap();
        let years: Vec<&CompositeStack> = (2015..=2020)
            .map(|y| {
                out[&BucketKey {
                    window: window.into(),
                    years: YearSelection::Year(y),
                }]
                .as_ref()
                .unwrap()
            })
            .collect();
        let n = pooled.grid.len();
        let mut uneven = false;
        for i in 0..n {
            let total: u32 = years.iter().map(|s| s.counts[i]).sum();
            assert_eq!(pooled.counts[i], total);
            uneven |= total != 6;
            if total == 0 {
                continue;
            }
            for b in 0..2 {
                let weighted = years
                    .iter()
                    .map(|s| s.counts[i] as f64 * s.grid.plane(b)[i])
                    .sum::<f64>()
                    / total as f64;
                assert!((pooled.grid.plane(b)[i] - weighted).abs() < 1e-12, "{window} pixel {i}");
            }
        }
        assert!(uneven || window == "oct-dec");
    }
}

#[test]
fn mean_lies_between_scene_extremes_and_counts_bound_by_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let set = synthetic(dir.path(), 40, 0.05, 8);
    punch_hole(&set.scenes[2], "B8", 0..40, 0..13);
    let opts = LoadOptions::default();
    let stack = mean_composite(&set.scenes, &BANDS, &set.roi, &opts).unwrap();
    let lattice = stack.provenance.lattice;
    let loaded: Vec<RasterGrid> = set
        .scenes
        .iter()
        .map(|s| soilmark_core::compositor::load_scene(s, &BANDS, &set.roi, &lattice, &opts).unwrap())
        .collect();
    for i in 0..stack.grid.len() {
        let valid: Vec<&RasterGrid> = loaded.iter().filter(|g| g.mask()[i]).collect();
        assert_eq!(stack.counts[i] as usize, valid.len());
        assert!(stack.counts[i] <= set.scenes.len() as u32);
        for b in 0..BANDS.len() {
            let lo = valid.iter().map(|g| g.plane(b)[i]).fold(f64::INFINITY, f64::min);
            let hi = valid.iter().map(|g| g.plane(b)[i]).fold(f64::NEG_INFINITY, f64::max);
            let v = stack.grid.plane(b)[i];
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
    assert_eq!(stack.counts.iter().filter(|&&c| c == 11).count(), 40 * 13);
}

#[test]
fn composite_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let set = synthetic(&dir.path().join("scenes"), 32, 0.05, 2);
    let stack = mean_composite(&set.scenes, &BANDS, &set.roi, &LoadOptions::default())
        .unwrap()
        .quantized_f32()
        .unwrap();
    save_composite(&stack, &dir.path().join("out"), "composite").unwrap();
    let back = load_composite(&dir.path().join("out"), "composite").unwrap();
    assert_eq!(bits(&back), bits(&stack));
    assert_eq!(back.counts, stack.counts);
    assert_eq!(back.provenance, stack.provenance);
    assert_eq!(back.grid.geo(), stack.grid.geo());
}

/// Inside-minus-outside mean of `values` and the standard error of that difference.
fn separation(values: &[f64], inside: &[bool]) -> (f64, f64) {
    let stats = |want: bool| {
        let v: Vec<f64> = values.iter().zip(inside).filter(|(_, &m)| m == want).map(|(&v, _)| v).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, var / n)
    };
    let (mi, vi) = stats(true);
    let (mo, vo) = stats(false);
    (mi - mo, (vi + vo).sqrt())
}

#[test]
fn planted_contrast_is_recovered() {
    let dir = tempfile::tempdir().unwrap();
    let set = synthetic(dir.path(), 128, 0.05, 21);
    let stack = mean_composite(&set.scenes, &["B8"], &set.roi, &LoadOptions::default()).unwrap();
    let (diff, se) = separation(stack.grid.plane(0), &set.truth);
    assert!((diff - 0.05).abs() <= 3.0 * se, "diff {diff} se {se}");
    assert!(diff > 10.0 * se);
}

#[test]
fn zero_contrast_leaves_no_trace() {
    let dir = tempfile::tempdir().unwrap();
    let set = synthetic(dir.path(), 128, 0.0, 21);
    assert!(set.truth.iter().any(|&m| m));
    let stack = mean_composite(&set.scenes, &["B8"], &set.roi, &LoadOptions::default()).unwrap();
    let (diff, se) = separation(stack.grid.plane(0), &set.truth);
    assert!(diff.abs() <= 3.0 * se, "diff {diff} se {se}");
}

#[test]
fn catalogue_from_disk_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    let set = synthetic(dir.path(), 24, 0.05, 4);
    let catalog = ingest_directory(dir.path()).unwrap();
    assert_eq!(catalog, Catalog::new(set.scenes.clone()));
}
