//! `IPCM1` binary field format and PGM export.
//!
//! Layout, little-endian: magic `IPCM1`, u32 rows, u32 cols, f64 resolution,
//! f64 origin_x, f64 origin_y, then `rows * cols` f64 values row-major.

use std::io::Write;
use std::path::Path;

use super::{CostMapError, ScalarField};
use crate::grid::Grid;

const MAGIC: &[u8; 5] = b"IPCM1";
const HEADER_LEN: usize = 5 + 4 + 4 + 8 * 3;

impl ScalarField {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (rows, cols) = self.values.dims();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * rows * cols);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        out.extend_from_slice(&self.resolution.to_le_bytes());
        out.extend_from_slice(&self.origin[0].to_le_bytes());
        out.extend_from_slice(&self.origin[1].to_le_bytes());
        for v in self.values.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CostMapError> {
        if bytes.len() < HEADER_LEN || &bytes[..5] != MAGIC {
            return Err(CostMapError::Format("missing IPCM1 header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (rows, cols) = (u32_at(5), u32_at(9));
        let resolution = f64_at(13);
        let origin = [f64_at(21), f64_at(29)];
        let expected = HEADER_LEN + 8 * rows * cols;
        if bytes.len() != expected {
            return Err(CostMapError::Format(format!(
                "expected {expected} bytes for a {rows}x{cols} field, found {}",
                bytes.len()
            )));
        }
        let values = (0..rows * cols).map(|i| f64_at(HEADER_LEN + 8 * i)).collect();
        Ok(ScalarField::new(
            Grid::from_vec(rows, cols, values),
            resolution,
            origin,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<(), CostMapError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CostMapError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Binary PGM (P5) with values scaled linearly from [min, max] to [0, 255].
/// The first image row is the grid's top (largest y).
pub fn write_pgm(field: &ScalarField, path: &Path) -> Result<(), CostMapError> {
    let (rows, cols) = field.values.dims();
    let (lo, hi) = (field.min_value(), field.max_value());
    let span = hi - lo;
    let mut out = Vec::with_capacity(rows * cols + 32);
    write!(out, "P5\n{cols} {rows}\n255\n")?;
    for r in (0..rows).rev() {
        for c in 0..cols {
            let v = *field.values.get(r, c);
            let px = if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            };
            out.push(px);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
