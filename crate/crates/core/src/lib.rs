//! Enhancement of buried landscape features in multispectral satellite imagery.

pub mod catalog;
pub mod compositor;
pub mod decomposition;
pub mod indices;
pub mod io;
pub mod raster;
pub mod render;
pub mod synth;
