//! File codecs: a GeoTIFF subset reader/writer and a minimal PNG writer.

pub mod geotiff;
pub mod png;

pub use geotiff::{
    decode_geotiff, encode_geotiff, read_geotiff, write_geotiff, write_geotiff_with, ByteOrder, Compression,
    GeoTiffError, GeoTiffHeader, Layout, PlanarConfig, SampleFormat, WriteOptions,
};
pub use png::{encode_png, write_png, ColorKind, Image8};
