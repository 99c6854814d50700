//! Report-time rendering: 8-bit colormapped preview grids and small text
//! writers. Stored maps stay 16-bit grayscale; colour only appears here.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use sanity_core::metrics::minmax_normalize;
use sanity_core::Tensor;
use serde::Serialize;

use crate::error::CliError;

/// Viridis sampled at nine evenly spaced points.
const VIRIDIS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 145, 140],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

const GAP: u32 = 2;

pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let (a, b) = (VIRIDIS[i][c] as f64, VIRIDIS[i + 1][c] as f64);
        out[c] = (a + f * (b - a)).round() as u8;
    }
    out
}

/// Writes a grid of `[H, W]` maps, each min-max normalized on its own and
/// colormapped, separated by white gutters.
pub fn write_grid(rows: &[Vec<&Tensor>], path: &Path) -> Result<(), CliError> {
    let Some(first) = rows.first().and_then(|r| r.first()) else {
        return Ok(());
    };
    let (h, w) = (first.shape()[0] as u32, first.shape()[1] as u32);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let width = cols * w + (cols.saturating_sub(1)) * GAP;
    let height = rows.len() as u32 * h + (rows.len() as u32).saturating_sub(1) * GAP;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, map) in row.iter().enumerate() {
            let norm = minmax_normalize(map.data());
            let (x0, y0) = (c as u32 * (w + GAP), r as u32 * (h + GAP));
            for y in 0..h {
                for x in 0..w {
                    let v = norm[(y * w + x) as usize];
                    img.put_pixel(x0 + x, y0 + y, Rgb(colormap(v)));
                }
            }
        }
    }
    img.save(path).map_err(|source| CliError::Image {
        path: path.into(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(sanity_core::Error::from)?;
    write_text(path, &(text + "\n"))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// `None` as an empty CSV field.
pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
