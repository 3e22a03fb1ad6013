//! Reader and writer for the GeoTIFF subset used by the pipeline.
//!
//! Supported on read: classic (non-Big) TIFF, either byte order, strips or
//! tiles, no compression or deflate, `uint16` or `float32` samples,
//! pixel-interleaved or band-sequential planes. Georeferencing comes from
//! ModelPixelScale + ModelTiepoint and the EPSG code from the GeoKey
//! directory. Nodata uses the GDAL ASCII tag (42113) and band names the
//! `DESCRIPTION` items of the GDAL metadata tag (42112).
//!
//! The reader works on an in-memory buffer and bounds-checks every offset, so
//! truncated or corrupted input yields [`GeoTiffError::MalformedFile`] rather
//! than a panic.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BandDescriptor, GeoTransform, RasterGrid};

const TAG_IMAGE_WIDTH: u16 = 256;
const TAG_IMAGE_LENGTH: u16 = 257;
const TAG_BITS_PER_SAMPLE: u16 = 258;
const TAG_COMPRESSION: u16 = 259;
const TAG_PHOTOMETRIC: u16 = 262;
const TAG_STRIP_OFFSETS: u16 = 273;
const TAG_SAMPLES_PER_PIXEL: u16 = 277;
const TAG_ROWS_PER_STRIP: u16 = 278;
const TAG_STRIP_BYTE_COUNTS: u16 = 279;
const TAG_PLANAR_CONFIG: u16 = 284;
const TAG_PREDICTOR: u16 = 317;
const TAG_TILE_WIDTH: u16 = 322;
const TAG_TILE_LENGTH: u16 = 323;
const TAG_TILE_OFFSETS: u16 = 324;
const TAG_TILE_BYTE_COUNTS: u16 = 325;
const TAG_EXTRA_SAMPLES: u16 = 338;
const TAG_SAMPLE_FORMAT: u16 = 339;
const TAG_MODEL_PIXEL_SCALE: u16 = 33550;
const TAG_MODEL_TIEPOINT: u16 = 33922;
const TAG_MODEL_TRANSFORMATION: u16 = 34264;
const TAG_GEO_KEY_DIRECTORY: u16 = 34735;
const TAG_GDAL_METADATA: u16 = 42112;
const TAG_GDAL_NODATA: u16 = 42113;

const KEY_MODEL_TYPE: u16 = 1024;
const KEY_RASTER_TYPE: u16 = 1025;
const KEY_GEOGRAPHIC_TYPE: u16 = 2048;
const KEY_PROJECTED_CS_TYPE: u16 = 3072;

const COMPRESSION_NONE: u64 = 1;
const COMPRESSION_DEFLATE: u64 = 8;
const COMPRESSION_DEFLATE_OLD: u64 = 32946;

/// Upper bound on the inflate ratio accepted before allocating output buffers.
const MAX_INFLATE_RATIO: u64 = 1100;
const MAX_PIXELS: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum GeoTiffError {
    #[error("unsupported TIFF feature: {0}")]
    UnsupportedFeature(String),
    #[error("malformed TIFF: {0}")]
    MalformedFile(String),
    #[error("invalid write options: {0}")]
    InvalidOptions(String),
    #[error("raster error: {0}")]
    Raster(#[from] crate::raster::RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, GeoTiffError> {
    Err(GeoTiffError::MalformedFile(msg.into()))
}

fn unsupported<T>(msg: impl Into<String>) -> Result<T, GeoTiffError> {
    Err(GeoTiffError::UnsupportedFeature(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ByteOrder {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleFormat {
    UInt16,
    Float32,
}

impl SampleFormat {
    fn bytes(self) -> usize {
        match self {
            SampleFormat::UInt16 => 2,
            SampleFormat::Float32 => 4,
        }
    }

    pub fn bits(self) -> u16 {
        (self.bytes() * 8) as u16
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    Strips { rows_per_strip: u32 },
    Tiles { width: u32, height: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Compression {
    None,
    Deflate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanarConfig {
    /// Pixel-interleaved samples.
    Chunky,
    /// One plane per band.
    Planar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoTiffHeader {
    pub byte_order: ByteOrder,
    pub width: u32,
    pub height: u32,
    pub samples_per_pixel: u16,
    pub sample_format: SampleFormat,
    pub bits_per_sample: u16,
    pub layout: Layout,
    pub compression: Compression,
    pub planar: PlanarConfig,
    pub pixel_scale: Option<[f64; 3]>,
    pub tiepoint: Option<[f64; 6]>,
    pub epsg: Option<u32>,
    pub nodata: Option<String>,
    pub band_names: Vec<Option<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WriteOptions {
    pub sample_format: SampleFormat,
    pub byte_order: ByteOrder,
    /// `None` picks strips of roughly 64 KiB.
    pub layout: Option<Layout>,
    pub compression: Compression,
    pub planar: PlanarConfig,
    /// Multiplier applied before `uint16` quantisation (reflectance to DN).
    pub dn_scale: f64,
}

impl WriteOptions {
    pub fn new(sample_format: SampleFormat) -> Self {
        Self {
            sample_format,
            byte_order: ByteOrder::Little,
            layout: None,
            compression: Compression::Deflate,
            planar: PlanarConfig::Planar,
            dn_scale: 10_000.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    data: &'a [u8],
    order: ByteOrder,
}

impl<'a> Cursor<'a> {
    fn bytes(&self, offset: u64, len: u64) -> Result<&'a [u8], GeoTiffError> {
        let end = offset
            .checked_add(len)
            .ok_or_else(|| GeoTiffError::MalformedFile("offset overflow".into()))?;
        if end > self.data.len() as u64 {
            return malformed(format!(
                "range {offset}..{end} exceeds file size {}",
                self.data.len()
            ));
        }
        Ok(&self.data[offset as usize..end as usize])
    }

    fn u16_at(&self, offset: u64) -> Result<u16, GeoTiffError> {
        let b = self.bytes(offset, 2)?;
        Ok(self.u16_from(b))
    }

    fn u32_at(&self, offset: u64) -> Result<u32, GeoTiffError> {
        let b = self.bytes(offset, 4)?;
        Ok(self.u32_from(b))
    }

    fn u16_from(&self, b: &[u8]) -> u16 {
        let a = [b[0], b[1]];
        match self.order {
            ByteOrder::Little => u16::from_le_bytes(a),
            ByteOrder::Big => u16::from_be_bytes(a),
        }
    }

    fn u32_from(&self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self.order {
            ByteOrder::Little => u32::from_le_bytes(a),
            ByteOrder::Big => u32::from_be_bytes(a),
        }
    }

    fn u64_from(&self, b: &[u8]) -> u64 {
        let mut a = [0u8; 8];
        a.copy_from_slice(&b[..8]);
        match self.order {
            ByteOrder::Little => u64::from_le_bytes(a),
            ByteOrder::Big => u64::from_be_bytes(a),
        }
    }
}

#[derive(Debug, Clone)]
enum TagValue {
    Unsigned(Vec<u64>),
    Signed(Vec<i64>),
    Double(Vec<f64>),
    Ascii(String),
}

impl TagValue {
    fn unsigned(&self, tag: u16) -> Result<Vec<u64>, GeoTiffError> {
        match self {
            TagValue::Unsigned(v) => Ok(v.clone()),
            _ => malformed(format!("tag {tag} must hold unsigned integers")),
        }
    }

    fn doubles(&self, tag: u16) -> Result<Vec<f64>, GeoTiffError> {
        match self {
            TagValue::Double(v) => Ok(v.clone()),
            TagValue::Unsigned(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TagValue::Signed(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TagValue::Ascii(_) => malformed(format!("tag {tag} must hold numbers")),
        }
    }

    fn ascii(&self, tag: u16) -> Result<String, GeoTiffError> {
        match self {
            TagValue::Ascii(s) => Ok(s.clone()),
            _ => malformed(format!("tag {tag} must hold ASCII text")),
        }
    }
}

fn type_size(field_type: u16) -> Option<u64> {
    match field_type {
        1 | 2 | 6 | 7 => Some(1),
        3 | 8 => Some(2),
        4 | 9 | 11 => Some(4),
        5 | 10 | 12 => Some(8),
        _ => None,
    }
}

fn read_entry(cur: &Cursor<'_>, entry_offset: u64) -> Result<(u16, Option<TagValue>), GeoTiffError> {
    let tag = cur.u16_at(entry_offset)?;
    let field_type = cur.u16_at(entry_offset + 2)?;
    let count = cur.u32_at(entry_offset + 4)? as u64;
    let Some(size) = type_size(field_type) else {
        // unknown field types must be skipped per the TIFF spec
        return Ok((tag, None));
    };
    let total = count
        .checked_mul(size)
        .ok_or_else(|| GeoTiffError::MalformedFile(format!("tag {tag} count overflow")))?;
    let raw = if total <= 4 {
        &cur.bytes(entry_offset + 8, 4)?[..total as usize]
    } else {
        let off = cur.u32_at(entry_offset + 8)? as u64;
        cur.bytes(off, total)?
    };
    let n = count as usize;
    let value = match field_type {
        1 | 7 => TagValue::Unsigned(raw.iter().map(|&b| b as u64).collect()),
        6 => TagValue::Signed(raw.iter().map(|&b| b as i8 as i64).collect()),
        2 => {
            let text: Vec<u8> = raw.iter().copied().take_while(|&b| b != 0).collect();
            TagValue::Ascii(String::from_utf8_lossy(&text).into_owned())
        }
        3 => TagValue::Unsigned((0..n).map(|i| cur.u16_from(&raw[i * 2..]) as u64).collect()),
        8 => TagValue::Signed((0..n).map(|i| cur.u16_from(&raw[i * 2..]) as i16 as i64).collect()),
        4 => TagValue::Unsigned((0..n).map(|i| cur.u32_from(&raw[i * 4..]) as u64).collect()),
        9 => TagValue::Signed((0..n).map(|i| cur.u32_from(&raw[i * 4..]) as i32 as i64).collect()),
        11 => TagValue::Double(
            (0..n)
                .map(|i| f32::from_bits(cur.u32_from(&raw[i * 4..])) as f64)
                .collect(),
        ),
        12 => TagValue::Double((0..n).map(|i| f64::from_bits(cur.u64_from(&raw[i * 8..]))).collect()),
        5 | 10 => TagValue::Double(
            (0..n)
                .map(|i| {
                    let a = cur.u32_from(&raw[i * 8..]);
                    let b = cur.u32_from(&raw[i * 8 + 4..]);
                    if field_type == 5 {
                        a as f64 / b as f64
                    } else {
                        a as i32 as f64 / b as i32 as f64
                    }
                })
                .collect(),
        ),
        _ => unreachable!("filtered by type_size"),
    };
    Ok((tag, Some(value)))
}

struct Ifd(Vec<(u16, TagValue)>);

impl Ifd {
    fn get(&self, tag: u16) -> Option<&TagValue> {
        self.0.iter().find(|(t, _)| *t == tag).map(|(_, v)| v)
    }

    fn required_scalar(&self, tag: u16, name: &str) -> Result<u64, GeoTiffError> {
        match self.get(tag) {
            Some(v) => v
                .unsigned(tag)?
                .first()
                .copied()
                .ok_or_else(|| GeoTiffError::MalformedFile(format!("{name} is empty"))),
            None => malformed(format!("missing required tag {name} ({tag})")),
        }
    }

    fn scalar_or(&self, tag: u16, default: u64) -> Result<u64, GeoTiffError> {
        match self.get(tag) {
            Some(v) => Ok(v.unsigned(tag)?.first().copied().unwrap_or(default)),
            None => Ok(default),
        }
    }

    fn uniform(&self, tag: u16, name: &str, default: u64, spp: usize) -> Result<u64, GeoTiffError> {
        let Some(v) = self.get(tag) else {
            return Ok(default);
        };
        let vals = v.unsigned(tag)?;
        let first = *vals
            .first()
            .ok_or_else(|| GeoTiffError::MalformedFile(format!("{name} is empty")))?;
        if vals.len() != 1 && vals.len() != spp {
            return malformed(format!("{name} has {} values for {spp} samples", vals.len()));
        }
        if vals.iter().any(|&x| x != first) {
            return unsupported(format!("{name} differs between samples: {vals:?}"));
        }
        Ok(first)
    }
}

fn parse_ifd(cur: &Cursor<'_>) -> Result<Ifd, GeoTiffError> {
    let magic = cur.u16_at(2)?;
    if magic == 43 {
        return unsupported("BigTIFF (version 43)");
    }
    if magic != 42 {
        return malformed(format!("bad TIFF version {magic}"));
    }
    let ifd_offset = cur.u32_at(4)? as u64;
    let count = cur.u16_at(ifd_offset)? as u64;
    // make sure the whole entry table is present before iterating
    cur.bytes(ifd_offset + 2, count * 12)?;
    let mut entries = Vec::with_capacity(count as usize);
    for i in 0..count {
        let (tag, value) = read_entry(cur, ifd_offset + 2 + i * 12)?;
        if let Some(v) = value {
            entries.push((tag, v));
        }
    }
    Ok(Ifd(entries))
}

/// Extracts `<Item name="DESCRIPTION" sample="N" role="description">text</Item>`
/// entries from GDAL's metadata XML.
fn parse_band_descriptions(xml: &str, spp: usize) -> Vec<Option<String>> {
    let mut names = vec![None; spp];
    let mut rest = xml;
    while let Some(start) = rest.find("<Item") {
        rest = &rest[start + 5..];
        let Some(tag_end) = rest.find('>') else { break };
        let attrs = &rest[..tag_end];
        let body = &rest[tag_end + 1..];
        let Some(close) = body.find("</Item>") else { break };
        let text = &body[..close];
        rest = &body[close..];
        let attr = |key: &str| -> Option<&str> {
            let pat = format!("{key}=\"");
            let i = attrs.find(&pat)? + pat.len();
            let j = attrs[i..].find('"')?;
            Some(&attrs[i..i + j])
        };
        let is_description = attr("role") == Some("description") || attr("name") == Some("DESCRIPTION");
        if !is_description {
            continue;
        }
        if let Some(sample) = attr("sample").and_then(|s| s.parse::<usize>().ok()) {
            if sample < spp {
                names[sample] = Some(xml_unescape(text));
            }
        }
    }
    names
}

fn xml_unescape(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn parse_nodata(text: &str) -> Result<f64, GeoTiffError> {
    let t = text.trim();
    if t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("-nan") {
        return Ok(f64::NAN);
    }
    t.parse::<f64>()
        .map_err(|_| GeoTiffError::MalformedFile(format!("unparseable GDAL_NODATA value {t:?}")))
}

/// Reads a GeoTIFF from disk.
pub fn read_geotiff(path: impl AsRef<Path>) -> Result<(RasterGrid, GeoTiffHeader), GeoTiffError> {
    let data = fs::read(path)?;
    decode_geotiff(&data)
}

/// Decodes a GeoTIFF held in memory. Samples are converted to `f64` without
/// scaling; pixels equal to the nodata value, and non-finite samples, are
/// masked invalid in every band.
pub fn decode_geotiff(data: &[u8]) -> Result<(RasterGrid, GeoTiffHeader), GeoTiffError> {
    if data.len() < 8 {
        return malformed("file shorter than the TIFF header");
    }
    let order = match &data[..2] {
        b"II" => ByteOrder::Little,
        b"MM" => ByteOrder::Big,
        _ => return malformed("missing II/MM byte-order mark"),
    };
    let cur = Cursor { data, order };
    let ifd = parse_ifd(&cur)?;

    let width = ifd.required_scalar(TAG_IMAGE_WIDTH, "ImageWidth")?;
    let height = ifd.required_scalar(TAG_IMAGE_LENGTH, "ImageLength")?;
    if width == 0 || height == 0 {
        return malformed(format!("empty image {width}x{height}"));
    }
    if width > u32::MAX as u64 || height > u32::MAX as u64 || width * height > MAX_PIXELS {
        return unsupported(format!("image too large: {width}x{height}"));
    }
    let spp = ifd.scalar_or(TAG_SAMPLES_PER_PIXEL, 1)?;
    if spp == 0 || spp > u16::MAX as u64 {
        return malformed(format!("SamplesPerPixel={spp}"));
    }
    let spp_us = spp as usize;
    let bits = ifd.uniform(TAG_BITS_PER_SAMPLE, "BitsPerSample", 1, spp_us)?;
    let format_code = ifd.uniform(TAG_SAMPLE_FORMAT, "SampleFormat", 1, spp_us)?;
    let sample_format = match (format_code, bits) {
        (1, 16) => SampleFormat::UInt16,
        (3, 32) => SampleFormat::Float32,
        (f, b) => return unsupported(format!("SampleFormat={f} with BitsPerSample={b}")),
    };
    let compression = match ifd.scalar_or(TAG_COMPRESSION, COMPRESSION_NONE)? {
        COMPRESSION_NONE => Compression::None,
        COMPRESSION_DEFLATE | COMPRESSION_DEFLATE_OLD => Compression::Deflate,
        c => return unsupported(format!("Compression={c}")),
    };
    let predictor = ifd.scalar_or(TAG_PREDICTOR, 1)?;
    if predictor != 1 {
        return unsupported(format!("Predictor={predictor}"));
    }
    let planar = match ifd.scalar_or(TAG_PLANAR_CONFIG, 1)? {
        1 => PlanarConfig::Chunky,
        2 => PlanarConfig::Planar,
        p => return malformed(format!("PlanarConfiguration={p}")),
    };

    let tiled = ifd.get(TAG_TILE_WIDTH).is_some() || ifd.get(TAG_TILE_OFFSETS).is_some();
    let (layout, chunk_w, chunk_h, offsets, counts) = if tiled {
        let tw = ifd.required_scalar(TAG_TILE_WIDTH, "TileWidth")?;
        let th = ifd.required_scalar(TAG_TILE_LENGTH, "TileLength")?;
        if tw == 0 || th == 0 || tw > u32::MAX as u64 || th > u32::MAX as u64 {
            return malformed(format!("tile size {tw}x{th}"));
        }
        let offsets = required_list(&ifd, TAG_TILE_OFFSETS, "TileOffsets")?;
        let counts = required_list(&ifd, TAG_TILE_BYTE_COUNTS, "TileByteCounts")?;
        (
            Layout::Tiles {
                width: tw as u32,
                height: th as u32,
            },
            tw,
            th,
            offsets,
            counts,
        )
    } else {
        let rps = ifd.scalar_or(TAG_ROWS_PER_STRIP, u32::MAX as u64)?.min(height);
        if rps == 0 {
            return malformed("RowsPerStrip=0");
        }
        let offsets = required_list(&ifd, TAG_STRIP_OFFSETS, "StripOffsets")?;
        let counts = required_list(&ifd, TAG_STRIP_BYTE_COUNTS, "StripByteCounts")?;
        (
            Layout::Strips {
                rows_per_strip: rps as u32,
            },
            width,
            rps,
            offsets,
            counts,
        )
    };

    let across = width.div_ceil(chunk_w);
    let down = height.div_ceil(chunk_h);
    let planes_in_file = if planar == PlanarConfig::Planar { spp } else { 1 };
    let samples_per_chunk_pixel = if planar == PlanarConfig::Planar { 1 } else { spp };
    let expected_chunks = across * down * planes_in_file;
    if offsets.len() as u64 != expected_chunks || counts.len() as u64 != expected_chunks {
        return malformed(format!(
            "expected {expected_chunks} chunks, found {} offsets and {} byte counts",
            offsets.len(),
            counts.len()
        ));
    }

    let bps = sample_format.bytes() as u64;
    let needed = width * height * spp * bps;
    let declared: u64 = counts.iter().try_fold(0u64, |a, &c| a.checked_add(c)).unwrap_or(u64::MAX);
    for (&off, &cnt) in offsets.iter().zip(&counts) {
        cur.bytes(off, cnt)?;
    }
    let budget = match compression {
        Compression::None => declared,
        Compression::Deflate => declared.saturating_mul(MAX_INFLATE_RATIO).saturating_add(1 << 20),
    };
    if needed > budget {
        return malformed(format!("declared byte counts ({declared}) cannot hold {needed} bytes of samples"));
    }

    let npix = (width * height) as usize;
    let mut planes = vec![vec![0.0f64; npix]; spp_us];
    let mut scratch = Vec::new();
    for (chunk, (&off, &cnt)) in offsets.iter().zip(&counts).enumerate() {
        let chunk = chunk as u64;
        let plane_index = chunk / (across * down);
        let within = chunk % (across * down);
        let (cx, cy) = (within % across, within / across);
        let x0 = cx * chunk_w;
        let y0 = cy * chunk_h;
        // strips may be short at the bottom; tiles are always full size
        let rows = if tiled { chunk_h } else { chunk_h.min(height - y0) };
        let expect = chunk_w * rows * samples_per_chunk_pixel * bps;
        let raw = cur.bytes(off, cnt)?;
        let bytes: &[u8] = match compression {
            Compression::None => {
                if (raw.len() as u64) < expect {
                    return malformed(format!("chunk {chunk} holds {} bytes, needs {expect}", raw.len()));
                }
                &raw[..expect as usize]
            }
            Compression::Deflate => {
                scratch.clear();
                ZlibDecoder::new(raw)
                    .take(expect + 1)
                    .read_to_end(&mut scratch)
                    .map_err(|e| GeoTiffError::MalformedFile(format!("chunk {chunk}: deflate error: {e}")))?;
                if scratch.len() as u64 != expect {
                    return malformed(format!(
                        "chunk {chunk} inflates to {} bytes, expected {expect}",
                        scratch.len()
                    ));
                }
                &scratch
            }
        };
        let x_end = (x0 + chunk_w).min(width);
        let y_end = (y0 + rows).min(height);
        let spc = samples_per_chunk_pixel as usize;
        for y in y0..y_end {
            for x in x0..x_end {
                let pix_in_chunk = ((y - y0) * chunk_w + (x - x0)) as usize;
                let dst = (y * width + x) as usize;
                for s in 0..spc {
                    let at = (pix_in_chunk * spc + s) * bps as usize;
                    let v = decode_sample(&cur, sample_format, &bytes[at..]);
                    let band = if planar == PlanarConfig::Planar {
                        plane_index as usize
                    } else {
                        s
                    };
                    planes[band][dst] = v;
                }
            }
        }
    }

    let nodata_text = match ifd.get(TAG_GDAL_NODATA) {
        Some(v) => Some(v.ascii(TAG_GDAL_NODATA)?),
        None => None,
    };
    let nodata = nodata_text.as_deref().map(parse_nodata).transpose()?;
    let mut mask = vec![true; npix];
    for plane in &planes {
        for (m, &v) in mask.iter_mut().zip(plane) {
            let hit = match nodata {
                Some(nd) if nd.is_nan() => v.is_nan(),
                Some(nd) => v == nd,
                None => false,
            };
            if hit || !v.is_finite() {
                *m = false;
            }
        }
    }

    let (geo, pixel_scale, tiepoint, epsg) = read_georeferencing(&ifd)?;
    let band_names = match ifd.get(TAG_GDAL_METADATA) {
        Some(v) => parse_band_descriptions(&v.ascii(TAG_GDAL_METADATA)?, spp_us),
        None => vec![None; spp_us],
    };
    let bands = band_names
        .iter()
        .enumerate()
        .map(|(i, n)| match n {
            Some(name) => BandDescriptor::from_name(name),
            None => BandDescriptor::derived(format!("band_{}", i + 1)),
        })
        .collect();

    let grid = RasterGrid::new(width as usize, height as usize, geo, bands, planes, mask)?;
    let header = GeoTiffHeader {
        byte_order: order,
        width: width as u32,
        height: height as u32,
        samples_per_pixel: spp as u16,
        sample_format,
        bits_per_sample: bits as u16,
        layout,
        compression,
        planar,
        pixel_scale,
        tiepoint,
        epsg,
        nodata: nodata_text,
        band_names,
    };
    Ok((grid, header))
}

fn required_list(ifd: &Ifd, tag: u16, name: &str) -> Result<Vec<u64>, GeoTiffError> {
    match ifd.get(tag) {
        Some(v) => v.unsigned(tag),
        None => malformed(format!("missing required tag {name} ({tag})")),
    }
}

fn decode_sample(cur: &Cursor<'_>, format: SampleFormat, b: &[u8]) -> f64 {
    match format {
        SampleFormat::UInt16 => cur.u16_from(b) as f64,
        SampleFormat::Float32 => f32::from_bits(cur.u32_from(b)) as f64,
    }
}

type Georef = (GeoTransform, Option<[f64; 3]>, Option<[f64; 6]>, Option<u32>);

fn read_georeferencing(ifd: &Ifd) -> Result<Georef, GeoTiffError> {
    if ifd.get(TAG_MODEL_TRANSFORMATION).is_some() {
        return unsupported("ModelTransformationTag (rotated rasters)");
    }
    let scale = match ifd.get(TAG_MODEL_PIXEL_SCALE) {
        Some(v) => {
            let d = v.doubles(TAG_MODEL_PIXEL_SCALE)?;
            if d.len() < 2 {
                return malformed("ModelPixelScale needs at least two values");
            }
            Some([d[0], d[1], d.get(2).copied().unwrap_or(0.0)])
        }
        None => None,
    };
    let tie = match ifd.get(TAG_MODEL_TIEPOINT) {
        Some(v) => {
            let d = v.doubles(TAG_MODEL_TIEPOINT)?;
            if d.len() < 6 {
                return malformed("ModelTiepoint needs six values");
            }
            if d.len() > 6 {
                return unsupported("multiple tiepoints");
            }
            Some([d[0], d[1], d[2], d[3], d[4], d[5]])
        }
        None => None,
    };

    let mut epsg = None;
    let mut pixel_is_point = false;
    if let Some(v) = ifd.get(TAG_GEO_KEY_DIRECTORY) {
        let keys = v.unsigned(TAG_GEO_KEY_DIRECTORY)?;
        if keys.len() < 4 {
            return malformed("GeoKeyDirectory header truncated");
        }
        let n = keys[3] as usize;
        if keys.len() < 4 + 4 * n {
            return malformed("GeoKeyDirectory shorter than declared key count");
        }
        for k in 0..n {
            let e = &keys[4 + 4 * k..8 + 4 * k];
            let (id, location, value) = (e[0] as u16, e[1], e[3]);
            if location != 0 {
                continue;
            }
            match id {
                KEY_PROJECTED_CS_TYPE | KEY_GEOGRAPHIC_TYPE if value != 32767 => {
                    // projected code wins over the geographic base CRS
                    if id == KEY_PROJECTED_CS_TYPE || epsg.is_none() {
                        epsg = Some(value as u32);
                    }
                }
                KEY_RASTER_TYPE => pixel_is_point = value == 2,
                _ => {}
            }
        }
    }

    let (sx, sy) = match scale {
        Some(s) => (s[0], s[1]),
        None => (1.0, 1.0),
    };
    let (mut ox, mut oy) = match tie {
        Some(t) => (t[3] - t[0] * sx, t[4] + t[1] * sy),
        None => (0.0, 0.0),
    };
    if pixel_is_point {
        ox -= 0.5 * sx;
        oy += 0.5 * sy;
    }
    let geo = GeoTransform::new(ox, oy, sx, sy, epsg.unwrap_or(0))
        .map_err(|e| GeoTiffError::MalformedFile(format!("georeferencing: {e}")))?;
    Ok((geo, scale, tie, epsg))
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

struct Out {
    buf: Vec<u8>,
    order: ByteOrder,
}

impl Out {
    fn u16(&mut self, v: u16) {
        match self.order {
            ByteOrder::Little => self.buf.extend_from_slice(&v.to_le_bytes()),
            ByteOrder::Big => self.buf.extend_from_slice(&v.to_be_bytes()),
        }
    }

    fn u32(&mut self, v: u32) {
        match self.order {
            ByteOrder::Little => self.buf.extend_from_slice(&v.to_le_bytes()),
            ByteOrder::Big => self.buf.extend_from_slice(&v.to_be_bytes()),
        }
    }

    fn f64(&mut self, v: f64) {
        match self.order {
            ByteOrder::Little => self.buf.extend_from_slice(&v.to_le_bytes()),
            ByteOrder::Big => self.buf.extend_from_slice(&v.to_be_bytes()),
        }
    }

    fn pad_even(&mut self) {
        if self.buf.len() % 2 == 1 {
            self.buf.push(0);
        }
    }
}

enum EntryData {
    Short(Vec<u16>),
    Long(Vec<u32>),
    Double(Vec<f64>),
    Ascii(String),
}

impl EntryData {
    fn type_code(&self) -> u16 {
        match self {
            EntryData::Short(_) => 3,
            EntryData::Long(_) => 4,
            EntryData::Double(_) => 12,
            EntryData::Ascii(_) => 2,
        }
    }

    fn count(&self) -> u32 {
        match self {
            EntryData::Short(v) => v.len() as u32,
            EntryData::Long(v) => v.len() as u32,
            EntryData::Double(v) => v.len() as u32,
            EntryData::Ascii(s) => s.len() as u32 + 1,
        }
    }

    fn write(&self, out: &mut Out) {
        match self {
            EntryData::Short(v) => v.iter().for_each(|&x| out.u16(x)),
            EntryData::Long(v) => v.iter().for_each(|&x| out.u32(x)),
            EntryData::Double(v) => v.iter().for_each(|&x| out.f64(x)),
            EntryData::Ascii(s) => {
                out.buf.extend_from_slice(s.as_bytes());
                out.buf.push(0);
            }
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            EntryData::Short(v) => v.len() * 2,
            EntryData::Long(v) => v.len() * 4,
            EntryData::Double(v) => v.len() * 8,
            EntryData::Ascii(s) => s.len() + 1,
        }
    }
}

fn quantise_u16(v: f64, scale: f64) -> u16 {
    (v * scale).round().clamp(0.0, 65535.0) as u16
}

fn default_layout(grid: &RasterGrid, opts: &WriteOptions) -> Layout {
    let spp_in_chunk = match opts.planar {
        PlanarConfig::Planar => 1,
        PlanarConfig::Chunky => grid.band_count(),
    };
    let row_bytes = grid.width() * spp_in_chunk * opts.sample_format.bytes();
    let rows = (65_536 / row_bytes.max(1)).clamp(1, grid.height());
    Layout::Strips {
        rows_per_strip: rows as u32,
    }
}

fn geokey_directory(epsg: u32) -> Vec<u16> {
    let geographic = (4000..5000).contains(&epsg);
    let (model, cs_key) = if geographic {
        (2, KEY_GEOGRAPHIC_TYPE)
    } else {
        (1, KEY_PROJECTED_CS_TYPE)
    };
    vec![
        1, 1, 0, 3, //
        KEY_MODEL_TYPE, 0, 1, model, //
        KEY_RASTER_TYPE, 0, 1, 1, //
        cs_key, 0, 1, epsg.min(u16::MAX as u32) as u16,
    ]
}

fn gdal_metadata(grid: &RasterGrid) -> String {
    let mut xml = String::from("<GDALMetadata>\n");
    for (i, b) in grid.bands().iter().enumerate() {
        xml.push_str(&format!(
            "  <Item name=\"DESCRIPTION\" sample=\"{i}\" role=\"description\">{}</Item>\n",
            xml_escape(&b.name)
        ));
    }
    xml.push_str("</GDALMetadata>");
    xml
}

/// Encodes `grid` as a GeoTIFF byte stream.
///
/// Invalid pixels are written as the nodata value: `0` for `uint16` (valid
/// samples are multiplied by `dn_scale`, rounded half away from zero and
/// clamped to `[0, 65535]`) and NaN for `float32`.
pub fn encode_geotiff(grid: &RasterGrid, opts: &WriteOptions) -> Result<Vec<u8>, GeoTiffError> {
    let width = grid.width();
    let height = grid.height();
    let spp = grid.band_count();
    if spp == 0 {
        return Err(GeoTiffError::InvalidOptions("grid has no bands".into()));
    }
    if width > u32::MAX as usize || height > u32::MAX as usize || spp > u16::MAX as usize {
        return Err(GeoTiffError::InvalidOptions("grid too large for classic TIFF".into()));
    }
    if !(opts.dn_scale > 0.0 && opts.dn_scale.is_finite()) {
        return Err(GeoTiffError::InvalidOptions("dn_scale must be positive".into()));
    }
    let layout = opts.layout.unwrap_or_else(|| default_layout(grid, opts));
    let (chunk_w, chunk_h, tiled) = match layout {
        Layout::Strips { rows_per_strip } => {
            if rows_per_strip == 0 {
                return Err(GeoTiffError::InvalidOptions("rows_per_strip must be >= 1".into()));
            }
            (width, (rows_per_strip as usize).min(height), false)
        }
        Layout::Tiles { width: tw, height: th } => {
            if tw == 0 || th == 0 || tw % 16 != 0 || th % 16 != 0 {
                return Err(GeoTiffError::InvalidOptions(format!(
                    "tile size {tw}x{th} must be a positive multiple of 16"
                )));
            }
            (tw as usize, th as usize, true)
        }
    };
    let across = width.div_ceil(chunk_w);
    let down = height.div_ceil(chunk_h);
    let plane_groups: Vec<Vec<usize>> = match opts.planar {
        PlanarConfig::Planar => (0..spp).map(|b| vec![b]).collect(),
        PlanarConfig::Chunky => vec![(0..spp).collect()],
    };

    let mut out = Out {
        buf: Vec::new(),
        order: opts.byte_order,
    };
    out.buf.extend_from_slice(match opts.byte_order {
        ByteOrder::Little => b"II",
        ByteOrder::Big => b"MM",
    });
    out.u16(42);
    out.u32(0); // IFD offset, patched below

    let mask = grid.mask();
    let mut offsets = Vec::new();
    let mut byte_counts = Vec::new();
    let mut raw = Out {
        buf: Vec::new(),
        order: opts.byte_order,
    };
    for group in &plane_groups {
        for cy in 0..down {
            for cx in 0..across {
                raw.buf.clear();
                let x0 = cx * chunk_w;
                let y0 = cy * chunk_h;
                let rows = if tiled { chunk_h } else { chunk_h.min(height - y0) };
                for y in y0..y0 + rows {
                    for x in x0..x0 + chunk_w {
                        let inside = x < width && y < height;
                        for &b in group {
                            let (valid, v) = if inside {
                                let i = y * width + x;
                                (mask[i], grid.plane(b)[i])
                            } else {
                                (false, 0.0)
                            };
                            match opts.sample_format {
                                SampleFormat::UInt16 => {
                                    raw.u16(if valid { quantise_u16(v, opts.dn_scale) } else { 0 })
                                }
                                SampleFormat::Float32 => {
                                    let f = if valid { v as f32 } else { f32::NAN };
                                    raw.u32(f.to_bits())
                                }
                            }
                        }
                    }
                }
                let encoded = match opts.compression {
                    Compression::None => raw.buf.clone(),
                    Compression::Deflate => {
                        let mut enc = ZlibEncoder::new(Vec::new(), flate2::Compression::default());
                        enc.write_all(&raw.buf)?;
                        enc.finish()?
                    }
                };
                out.pad_even();
                offsets.push(out.buf.len() as u32);
                byte_counts.push(encoded.len() as u32);
                out.buf.extend_from_slice(&encoded);
            }
        }
    }
    if out.buf.len() > u32::MAX as usize {
        return Err(GeoTiffError::InvalidOptions("encoded size exceeds 4 GiB".into()));
    }

    let geo = grid.geo();
    let format_code: u16 = match opts.sample_format {
        SampleFormat::UInt16 => 1,
        SampleFormat::Float32 => 3,
    };
    let nodata = match opts.sample_format {
        SampleFormat::UInt16 => "0".to_string(),
        SampleFormat::Float32 => "nan".to_string(),
    };
    let mut entries: Vec<(u16, EntryData)> = vec![
        (TAG_IMAGE_WIDTH, EntryData::Long(vec![width as u32])),
        (TAG_IMAGE_LENGTH, EntryData::Long(vec![height as u32])),
        (TAG_BITS_PER_SAMPLE, EntryData::Short(vec![opts.sample_format.bits(); spp])),
        (
            TAG_COMPRESSION,
            EntryData::Short(vec![match opts.compression {
                Compression::None => COMPRESSION_NONE as u16,
                Compression::Deflate => COMPRESSION_DEFLATE as u16,
            }]),
        ),
        (TAG_PHOTOMETRIC, EntryData::Short(vec![1])),
        (TAG_SAMPLES_PER_PIXEL, EntryData::Short(vec![spp as u16])),
        (
            TAG_PLANAR_CONFIG,
            EntryData::Short(vec![match opts.planar {
                PlanarConfig::Chunky => 1,
                PlanarConfig::Planar => 2,
            }]),
        ),
        (TAG_SAMPLE_FORMAT, EntryData::Short(vec![format_code; spp])),
        (
            TAG_MODEL_PIXEL_SCALE,
            EntryData::Double(vec![geo.pixel_width, geo.pixel_height, 0.0]),
        ),
        (
            TAG_MODEL_TIEPOINT,
            EntryData::Double(vec![0.0, 0.0, 0.0, geo.origin_x, geo.origin_y, 0.0]),
        ),
        (TAG_GEO_KEY_DIRECTORY, EntryData::Short(geokey_directory(geo.epsg))),
        (TAG_GDAL_METADATA, EntryData::Ascii(gdal_metadata(grid))),
        (TAG_GDAL_NODATA, EntryData::Ascii(nodata)),
    ];
    if spp > 1 {
        entries.push((TAG_EXTRA_SAMPLES, EntryData::Short(vec![0; spp - 1])));
    }
    if tiled {
        entries.push((TAG_TILE_WIDTH, EntryData::Long(vec![chunk_w as u32])));
        entries.push((TAG_TILE_LENGTH, EntryData::Long(vec![chunk_h as u32])));
        entries.push((TAG_TILE_OFFSETS, EntryData::Long(offsets)));
        entries.push((TAG_TILE_BYTE_COUNTS, EntryData::Long(byte_counts)));
    } else {
        entries.push((TAG_ROWS_PER_STRIP, EntryData::Long(vec![chunk_h as u32])));
        entries.push((TAG_STRIP_OFFSETS, EntryData::Long(offsets)));
        entries.push((TAG_STRIP_BYTE_COUNTS, EntryData::Long(byte_counts)));
    }
    entries.sort_by_key(|(t, _)| *t);

    out.pad_even();
    let ifd_offset = out.buf.len();
    let ifd_len = 2 + entries.len() * 12 + 4;
    let mut overflow_at = ifd_offset + ifd_len;
    let mut overflow = Out {
        buf: Vec::new(),
        order: opts.byte_order,
    };
    let mut overflow_end = 0;
    out.u16(entries.len() as u16);
    for (tag, data) in &entries {
        out.u16(*tag);
        out.u16(data.type_code());
        out.u32(data.count());
        if data.byte_len() <= 4 {
            let start = out.buf.len();
            data.write(&mut out);
            out.buf.resize(start + 4, 0);
        } else {
            out.u32(overflow_at as u32);
            data.write(&mut overflow);
            overflow_end = overflow.buf.len();
            overflow.pad_even();
            overflow_at = ifd_offset + ifd_len + overflow.buf.len();
        }
    }
    out.u32(0);
    overflow.buf.truncate(overflow_end);
    out.buf.extend_from_slice(&overflow.buf);

    let ifd_bytes = match opts.byte_order {
        ByteOrder::Little => (ifd_offset as u32).to_le_bytes(),
        ByteOrder::Big => (ifd_offset as u32).to_be_bytes(),
    };
    out.buf[4..8].copy_from_slice(&ifd_bytes);
    Ok(out.buf)
}

/// Writes with the default layout: little-endian, deflate, band-sequential strips.
pub fn write_geotiff(grid: &RasterGrid, path: impl AsRef<Path>, sample_format: SampleFormat) -> Result<(), GeoTiffError> {
    write_geotiff_with(grid, path, &WriteOptions::new(sample_format))
}

pub fn write_geotiff_with(grid: &RasterGrid, path: impl AsRef<Path>, opts: &WriteOptions) -> Result<(), GeoTiffError> {
    let bytes = encode_geotiff(grid, opts)?;
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_grid() -> RasterGrid {
        let geo = GeoTransform::new(600_000.0, 5_000_040.0, 10.0, 10.0, 32632).unwrap();
        let w = 5;
        let h = 3;
        let b2: Vec<f64> = (0..w * h).map(|i| 0.05 + i as f64 * 0.01).collect();
        let b8: Vec<f64> = (0..w * h).map(|i| 0.4 - i as f64 * 0.013).collect();
        let mut mask = vec![true; w * h];
        mask[7] = false;
        RasterGrid::new(
            w,
            h,
            geo,
            vec![BandDescriptor::from_name("B2"), BandDescriptor::from_name("B8")],
            vec![b2, b8],
            mask,
        )
        .unwrap()
    }

    fn f32_exact(grid: &RasterGrid) -> RasterGrid {
        let planes = grid
            .planes()
            .iter()
            .map(|p| p.iter().map(|&v| v as f32 as f64).collect())
            .collect();
        RasterGrid::new(
            grid.width(),
            grid.height(),
            *grid.geo(),
            grid.bands().to_vec(),
            planes,
            grid.mask().to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn float32_default_round_trip() {
        let g = sample_grid();
        let bytes = encode_geotiff(&g, &WriteOptions::new(SampleFormat::Float32)).unwrap();
        let (back, header) = decode_geotiff(&bytes).unwrap();
        assert_eq!(back, f32_exact(&g));
        assert_eq!(header.epsg, Some(32632));
        assert_eq!(header.nodata.as_deref(), Some("nan"));
        assert_eq!(header.planar, PlanarConfig::Planar);
        assert_eq!(header.compression, Compression::Deflate);
        assert_eq!(back.bands()[1].name, "B8");
        assert_eq!(back.bands()[1].native_resolution_m, Some(10.0));
    }

    #[test]
    fn float_sample_is_bit_exact() {
        let geo = GeoTransform::new(0.0, 1.0, 1.0, 1.0, 4326).unwrap();
        let v = 0.4f32 as f64;
        let g = RasterGrid::from_planes(1, 1, geo, vec![BandDescriptor::derived("x")], vec![vec![v]]).unwrap();
        let (back, _) = decode_geotiff(&encode_geotiff(&g, &WriteOptions::new(SampleFormat::Float32)).unwrap()).unwrap();
        assert_eq!(back.plane(0)[0].to_bits(), v.to_bits());
    }

    #[test]
    fn uint16_export_scales_and_clamps() {
        let geo = GeoTransform::new(0.0, 1.0, 1.0, 1.0, 32633).unwrap();
        let g = RasterGrid::new(
            4,
            1,
            geo,
            vec![BandDescriptor::from_name("B4")],
            vec![vec![0.4, 7.0, -0.2, 0.3]],
            vec![true, true, true, false],
        )
        .unwrap();
        let (back, header) = decode_geotiff(&encode_geotiff(&g, &WriteOptions::new(SampleFormat::UInt16)).unwrap()).unwrap();
        assert_eq!(header.sample_format, SampleFormat::UInt16);
        assert_eq!(back.plane(0)[0], 4000.0);
        assert_eq!(back.plane(0)[1], 65535.0);
        // clamped to 0, which is the nodata value
        assert_eq!(back.mask(), &[true, true, false, false]);
    }

    #[test]
    fn geographic_crs_uses_geographic_key() {
        let geo = GeoTransform::new(10.5, 45.2, 0.0001, 0.0001, 4326).unwrap();
        let g = RasterGrid::from_planes(2, 2, geo, vec![BandDescriptor::derived("x")], vec![vec![1.0; 4]]).unwrap();
        let (back, h) = decode_geotiff(&encode_geotiff(&g, &WriteOptions::new(SampleFormat::Float32)).unwrap()).unwrap();
        assert_eq!(h.epsg, Some(4326));
        assert_eq!(back.geo(), &geo);
    }

    #[test]
    fn rejects_64_bit_samples() {
        let g = sample_grid();
        let mut bytes = encode_geotiff(&g, &WriteOptions::new(SampleFormat::Float32)).unwrap();
        patch_short_tag(&mut bytes, TAG_BITS_PER_SAMPLE, 64);
        match decode_geotiff(&bytes) {
            Err(GeoTiffError::UnsupportedFeature(msg)) => assert!(msg.contains("BitsPerSample=64"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_compression_and_predictor() {
        let g = sample_grid();
        let mut bytes = encode_geotiff(&g, &WriteOptions::new(SampleFormat::Float32)).unwrap();
        patch_short_tag(&mut bytes, TAG_COMPRESSION, 5);
        assert!(matches!(decode_geotiff(&bytes), Err(GeoTiffError::UnsupportedFeature(m)) if m.contains("Compression=5")));
    }

    #[test]
    fn truncated_file_is_malformed() {
        let g = sample_grid();
        let bytes = encode_geotiff(&g, &WriteOptions::new(SampleFormat::Float32)).unwrap();
        for cut in [0, 4, 7, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_geotiff(&bytes[..cut]), Err(GeoTiffError::MalformedFile(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn band_description_parsing() {
        let xml = r#"<GDALMetadata><Item name="STATISTICS_MEAN" sample="0">1</Item>
            <Item name="DESCRIPTION" sample="1" role="description">B8A &amp; co</Item></GDALMetadata>"#;
        assert_eq!(parse_band_descriptions(xml, 2), vec![None, Some("B8A & co".to_string())]);
    }

    #[test]
    fn tile_size_must_be_multiple_of_16() {
        let mut opts = WriteOptions::new(SampleFormat::Float32);
        opts.layout = Some(Layout::Tiles { width: 10, height: 16 });
        assert!(matches!(encode_geotiff(&sample_grid(), &opts), Err(GeoTiffError::InvalidOptions(_))));
    }

    /// Overwrites every value of an inline SHORT tag in a little-endian file.
    fn patch_short_tag(bytes: &mut [u8], tag: u16, value: u16) {
        let ifd = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let n = u16::from_le_bytes(bytes[ifd..ifd + 2].try_into().unwrap()) as usize;
        for i in 0..n {
            let e = ifd + 2 + i * 12;
            if u16::from_le_bytes(bytes[e..e + 2].try_into().unwrap()) == tag {
                let count = u32::from_le_bytes(bytes[e + 4..e + 8].try_into().unwrap()) as usize;
                let base = if count * 2 <= 4 {
                    e + 8
                } else {
                    u32::from_le_bytes(bytes[e + 8..e + 12].try_into().unwrap()) as usize
                };
                for k in 0..count {
                    bytes[base + 2 * k..base + 2 * k + 2].copy_from_slice(&value.to_le_bytes());
                }
                return;
            }
        }
        panic!("tag {tag} not found");
    }
}
