use std::fmt;

use soilmark_core::catalog::CatalogError;
use soilmark_core::compositor::CompositeError;
use soilmark_core::decomposition::DecompositionError;
use soilmark_core::indices::IndexError;
use soilmark_core::io::GeoTiffError;
use soilmark_core::raster::RasterError;
use soilmark_core::render::RenderError;
use soilmark_core::synth::SynthError;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 1,
    Input = 2,
    Empty = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn config(field: &str, message: impl fmt::Display) -> Self {
        Self {
            kind: ExitKind::Config,
            message: format!("config error: {field}: {message}"),
        }
    }

    pub fn input(message: impl fmt::Display) -> Self {
        Self {
            kind: ExitKind::Input,
            message: message.to_string(),
        }
    }

    pub fn empty(message: impl fmt::Display) -> Self {
        Self {
            kind: ExitKind::Empty,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::input(e)
    }
}

impl From<CatalogError> for CliError {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::InvalidFilter(m) => Self::config("filter", m),
            other => Self::input(other),
        }
    }
}

impl From<CompositeError> for CliError {
    fn from(e: CompositeError) -> Self {
        match e {
            CompositeError::EmptyBucket(_) | CompositeError::EmptyInput => Self::empty(e),
            other => Self::input(other),
        }
    }
}

macro_rules! input_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::input(e)
            }
        })*
    };
}

input_error!(RasterError, DecompositionError, IndexError, GeoTiffError, RenderError, SynthError, serde_json::Error);
