//! Minimal PNG encoder for 8-bit grayscale and RGB images (no interlace).

use std::fs;
use std::io::Write;
use std::path::Path;

use flate2::write::ZlibEncoder;

const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorKind {
    Gray,
    Rgb,
}

impl ColorKind {
    pub fn channels(self) -> usize {
        match self {
            ColorKind::Gray => 1,
            ColorKind::Rgb => 3,
        }
    }

    fn png_color_type(self) -> u8 {
        match self {
            ColorKind::Gray => 0,
            ColorKind::Rgb => 2,
        }
    }
}

/// Row-major 8-bit image, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub kind: ColorKind,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, kind: ColorKind, data: Vec<u8>) -> std::io::Result<Self> {
        if width == 0 || height == 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("image must be at least 1x1, got {width}x{height}"),
            ));
        }
        if data.len() != width * height * kind.channels() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("{} bytes for a {width}x{height} {kind:?} image", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            kind,
            data,
        })
    }
}

fn chunk(out: &mut Vec<u8>, kind: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    let mut crc = crc32fast::Hasher::new();
    crc.update(kind);
    crc.update(payload);
    out.extend_from_slice(kind);
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc.finalize().to_be_bytes());
}

pub fn encode_png(image: &Image8) -> std::io::Result<Vec<u8>> {
    let mut out = SIGNATURE.to_vec();

    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(image.width as u32).to_be_bytes());
    ihdr.extend_from_slice(&(image.height as u32).to_be_bytes());
    ihdr.push(8); // bit depth
    ihdr.push(image.kind.png_color_type());
    ihdr.extend_from_slice(&[0, 0, 0]); // deflate, adaptive filtering, no interlace
    chunk(&mut out, b"IHDR", &ihdr);

    let stride = image.width * image.kind.channels();
    let mut enc = ZlibEncoder::new(Vec::new(), flate2::Compression::default());
    for row in image.data.chunks(stride) {
        enc.write_all(&[0])?; // filter: none
        enc.write_all(row)?;
    }
    chunk(&mut out, b"IDAT", &enc.finish()?);
    chunk(&mut out, b"IEND", &[]);
    Ok(out)
}

pub fn write_png(image: &Image8, path: impl AsRef<Path>) -> std::io::Result<()> {
    fs::write(path, encode_png(image)?)
}
