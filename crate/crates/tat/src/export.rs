//! Correlation-map artifacts: CSV with six decimals and a binary PGM.

use std::path::Path;

use tat_core::losses::CorrelationMap;
use tat_core::Real;

use crate::error::{Error, Result};

pub fn write_correlation_csv<T: Real>(map: &CorrelationMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, map.to_csv()).map_err(|e| Error::io(path, e))
}

/// Min-max normalized 8-bit grayscale image of the map.
pub fn write_correlation_pgm<T: Real>(map: &CorrelationMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, map.to_pgm()).map_err(|e| Error::io(path, e))
}

pub fn read_correlation_csv(path: impl AsRef<Path>) -> Result<CorrelationMap<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(CorrelationMap::from_csv(&text)?)
}
