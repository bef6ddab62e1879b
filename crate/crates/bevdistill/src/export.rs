//! Map exports: per-pillar height counts and prediction-error counts as
//! CSV (one row per ρ bin, one column per θ bin) and 8-bit binary PGM
//! scaled to the map maximum.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::HeightMap;

/// CSV rendering: row `ρi`, column `θi`.
pub fn map_to_csv(map: &HeightMap) -> String {
    let mut out = String::new();
    for rho in 0..map.rho_bins {
        for theta in 0..map.theta_bins {
            if theta > 0 {
                out.push(',');
            }
            write!(out, "{}", map.at(rho, theta)).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Binary PGM (P5) with values scaled to 0–255 by the map maximum; an
/// all-zero map renders black.
pub fn map_to_pgm(map: &HeightMap) -> Vec<u8> {
    let max = map.values.iter().copied().max().unwrap_or(0);
    let mut out = format!("P5\n{} {}\n255\n", map.theta_bins, map.rho_bins).into_bytes();
    for rho in 0..map.rho_bins {
        for theta in 0..map.theta_bins {
            let v = map.at(rho, theta);
            let pixel = if max == 0 {
                0u8
            } else {
                ((v as f64 * 255.0 / max as f64).round()) as u8
            };
            out.push(pixel);
        }
    }
    out
}

pub fn write_map(map: &HeightMap, csv_path: &Path, pgm_path: &Path) -> Result<()> {
    std::fs::write(csv_path, map_to_csv(map)).map_err(|e| Error::io(csv_path, e))?;
    std::fs::write(pgm_path, map_to_pgm(map)).map_err(|e| Error::io(pgm_path, e))
}

/// Parses a P5 PGM produced by [`map_to_pgm`] back into rows of pixel
/// values (test support for cross-format checks).
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::Numeric("pgm: truncated header".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Numeric("pgm: invalid header".into()))?;
    let mut lines = header.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != "P5" {
        return Err(Error::Numeric(format!("pgm: unexpected magic {magic:?}")));
    }
    let dims = lines.next().unwrap_or_default();
    let mut it = dims.split_whitespace();
    let w: usize = it.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let h: usize = it.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = bytes[header_end + 1..].to_vec();
    if data.len() != w * h {
        return Err(Error::Numeric(format!(
            "pgm: {w}x{h} header but {} pixels",
            data.len()
        )));
    }
    Ok((w, h, data))
}
