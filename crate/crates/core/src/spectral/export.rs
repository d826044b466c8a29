//! Heatmap (PGM) and CSV grid writers. Log scaling here is display-only.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Linear,
    /// `ln(1 + v)` before normalization.
    Log,
}

/// Binary 8-bit PGM (`P5`), rows in row-major order, values mapped linearly
/// from `[min, max]` onto `[0, 255]`. A constant grid maps to all zeros.
pub fn pgm(grid: &Tensor, scale: Scale) -> Result<Vec<u8>> {
    let (h, w) = match grid.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::InvalidArgument(format!("expected 2D grid, got {s:?}"))),
    };
    let vals: Vec<f64> = grid
        .data()
        .iter()
        .map(|&v| match scale {
            Scale::Linear => v,
            Scale::Log => v.max(0.0).ln_1p(),
        })
        .collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(vals.iter().map(|&v| {
        if hi > lo {
            (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Comma-separated rows with full round-trip precision.
pub fn grid_csv(grid: &Tensor) -> Result<String> {
    let w = match grid.shape() {
        [_, w] => *w,
        s => return Err(Error::InvalidArgument(format!("expected 2D grid, got {s:?}"))),
    };
    let mut s = String::new();
    for row in grid.data().chunks(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    Ok(s)
}

pub fn parse_grid_csv(text: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = None;
    for (ln, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse()).collect();
        let row = row.map_err(|e| Error::InvalidArgument(format!("line {}: {e}", ln + 1)))?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(Error::InvalidArgument(format!("line {}: ragged row", ln + 1)));
        }
        data.extend(row);
        rows += 1;
    }
    Tensor::new(vec![rows, width.unwrap_or(0)], data)
}
