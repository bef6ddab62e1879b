//! Cylindrical voxel grids and polar bird's-eye-view pillar grids.
//!
//! Points are quantized in cylindrical coordinates `(ρ, θ, z)` with
//! half-open bins `[min, max)` and floor indexing; out-of-range points are
//! dropped and counted, never clamped. The teacher side keeps the full 3D
//! lattice as a sorted sparse grid, the student side collapses z into
//! dense polar pillars over the identical `(ρ, θ)` lattice, which is what
//! makes exact column-to-pillar correspondence possible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{Point, PointCloud};
use crate::tensor::Tensor;

/// Bin layout shared by the voxel grid and the BEV grid. The azimuth range
/// is fixed to `[-π, π)`; radial and height ranges are configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_bins: usize,
    pub theta_bins: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub z_bins: usize,
}

impl GridSpec {
    /// Desk-scale default: 16×16 pillars, 8 height bins over ±2 m.
    pub fn desk_default() -> Self {
        GridSpec {
            rho_min: 0.0,
            rho_max: 16.0,
            rho_bins: 16,
            theta_bins: 16,
            z_min: -2.0,
            z_max: 2.0,
            z_bins: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho_bins < 1 || self.theta_bins < 1 || self.z_bins < 1 {
            return Err(Error::Config("grid bin counts must be >= 1".into()));
        }
        if !(self.rho_max > self.rho_min) || !(self.z_max > self.z_min) {
            return Err(Error::Config(
                "grid range maxima must exceed their minima".into(),
            ));
        }
        Ok(())
    }

    pub fn pillar_count(&self) -> usize {
        self.rho_bins * self.theta_bins
    }

    pub fn pillar_index(&self, rho: usize, theta: usize) -> usize {
        rho * self.theta_bins + theta
    }
}

/// Integer bin triple of one occupied voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VoxelCoord {
    pub rho: usize,
    pub theta: usize,
    pub z: usize,
}

impl VoxelCoord {
    pub fn column(&self) -> (usize, usize) {
        (self.rho, self.theta)
    }
}

/// Assigns a point to its `(ρ, θ, z)` bin, or `None` when any coordinate
/// falls outside the half-open ranges (including `ρ == ρ_max` and
/// `θ == +π`).
pub fn cylindrical_bin(p: &Point, spec: &GridSpec) -> Option<VoxelCoord> {
    if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
        return None;
    }
    let rho = p.x.hypot(p.y);
    let theta = p.y.atan2(p.x);
    let bin = |v: f64, min: f64, max: f64, n: usize| -> Option<usize> {
        let width = (max - min) / n as f64;
        let k = ((v - min) / width).floor();
        if k >= 0.0 && k < n as f64 {
            Some(k as usize)
        } else {
            None
        }
    };
    Some(VoxelCoord {
        rho: bin(rho, spec.rho_min, spec.rho_max, spec.rho_bins)?,
        theta: bin(
            theta,
            -std::f64::consts::PI,
            std::f64::consts::PI,
            spec.theta_bins,
        )?,
        z: bin(p.z, spec.z_min, spec.z_max, spec.z_bins)?,
    })
}

/// Sorted sparse cylindrical voxel grid with one feature row per occupied
/// voxel.
#[derive(Debug, Clone)]
pub struct SparseVoxelGrid {
    pub spec: GridSpec,
    /// Strictly increasing lexicographic `(ρ, θ, z)` coordinates.
    pub coords: Vec<VoxelCoord>,
    /// One feature row per coordinate.
    pub feats: Tensor,
    /// Points aggregated into each voxel.
    pub point_count: Vec<usize>,
    /// Points that fell outside the grid ranges.
    pub dropped_points: usize,
}

impl SparseVoxelGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Row index of a coordinate, via binary search on the sorted coords.
    pub fn row_of(&self, coord: VoxelCoord) -> Option<usize> {
        self.coords.binary_search(&coord).ok()
    }

    /// Distinct `(ρ, θ)` columns in sorted order, each with the contiguous
    /// voxel row range it covers. Within a column rows ascend in z.
    pub fn column_ranges(&self) -> Vec<((usize, usize), std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.coords.len() {
            let col = self.coords[start].column();
            let mut end = start + 1;
            while end < self.coords.len() && self.coords[end].column() == col {
                end += 1;
            }
            out.push((col, start..end));
            start = end;
        }
        out
    }

    /// Replaces the feature matrix; the row count must stay aligned with
    /// the coordinates.
    pub fn with_feats(mut self, feats: Tensor) -> Self {
        assert_eq!(feats.rows(), self.coords.len(), "feature rows per coord");
        self.feats = feats;
        self
    }

    /// For every voxel row, the index of its column in
    /// [`SparseVoxelGrid::column_ranges`] order, plus the column count.
    pub fn voxel_column_indices(&self) -> (Vec<usize>, usize) {
        let mut idx = vec![0usize; self.coords.len()];
        let mut n_cols = 0;
        for ((_, range), col) in self.column_ranges().iter().zip(0..) {
            for r in range.clone() {
                idx[r] = col;
            }
            n_cols = col + 1;
        }
        (idx, n_cols)
    }
}

/// Dense polar BEV grid: one feature row per `(ρ, θ)` pillar, zero rows
/// where no point landed, plus the occupancy mask.
#[derive(Debug, Clone)]
pub struct BevGrid {
    pub spec: GridSpec,
    /// `(Nρ·Nθ) × C` feature rows in pillar-index order.
    pub feats: Tensor,
    pub mask: Vec<bool>,
    pub dropped_points: usize,
}

impl BevGrid {
    pub fn occupied_pillars(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// Per-pillar count of occupied z bins.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    pub rho_bins: usize,
    pub theta_bins: usize,
    pub values: Vec<u32>,
}

impl HeightMap {
    pub fn at(&self, rho: usize, theta: usize) -> u32 {
        self.values[rho * self.theta_bins + theta]
    }

    pub fn total(&self) -> u64 {
        self.values.iter().map(|&v| v as u64).sum()
    }
}

/// Groups points into voxels, averaging the encoder output over each
/// voxel's members. Coordinates come out sorted and unique; out-of-range
/// points are dropped and counted.
pub fn voxelize<F>(pc: &PointCloud, spec: &GridSpec, width: usize, encoder: F) -> SparseVoxelGrid
where
    F: Fn(&Point) -> Vec<f64>,
{
    let mut binned: Vec<(VoxelCoord, usize)> = Vec::with_capacity(pc.len());
    let mut dropped = 0;
    for (i, p) in pc.points.iter().enumerate() {
        match cylindrical_bin(p, spec) {
            Some(c) => binned.push((c, i)),
            None => dropped += 1,
        }
    }
    binned.sort_unstable();

    let mut coords = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let mut point_count = Vec::new();
    let mut i = 0;
    while i < binned.len() {
        let coord = binned[i].0;
        let mut sum = vec![0.0; width];
        let mut n = 0usize;
        while i < binned.len() && binned[i].0 == coord {
            let enc = encoder(&pc.points[binned[i].1]);
            debug_assert_eq!(enc.len(), width, "encoder width");
            for (s, v) in sum.iter_mut().zip(&enc) {
                *s += v;
            }
            n += 1;
            i += 1;
        }
        for s in &mut sum {
            *s /= n as f64;
        }
        coords.push(coord);
        data.extend_from_slice(&sum);
        point_count.push(n);
    }
    let rows = coords.len();
    SparseVoxelGrid {
        spec: *spec,
        coords,
        feats: Tensor::matrix(rows, width, data),
        point_count,
        dropped_points: dropped,
    }
}

/// Groups points into BEV pillars on the same `(ρ, θ)` lattice with z
/// ignored for indexing, averaging the encoder output per pillar.
pub fn pillarize<F>(pc: &PointCloud, spec: &GridSpec, width: usize, encoder: F) -> BevGrid
where
    F: Fn(&Point) -> Vec<f64>,
{
    let n_pillars = spec.pillar_count();
    let mut data = vec![0.0; n_pillars * width];
    let mut counts = vec![0usize; n_pillars];
    let mut dropped = 0;
    for p in &pc.points {
        match cylindrical_bin(p, spec) {
            Some(c) => {
                let idx = spec.pillar_index(c.rho, c.theta);
                let enc = encoder(p);
                debug_assert_eq!(enc.len(), width, "encoder width");
                for (j, v) in enc.iter().enumerate() {
                    data[idx * width + j] += v;
                }
                counts[idx] += 1;
            }
            None => dropped += 1,
        }
    }
    let mut mask = vec![false; n_pillars];
    for (idx, &n) in counts.iter().enumerate() {
        if n > 0 {
            mask[idx] = true;
            for j in 0..width {
                data[idx * width + j] /= n as f64;
            }
        }
    }
    BevGrid {
        spec: *spec,
        feats: Tensor::matrix(n_pillars, width, data),
        mask,
        dropped_points: dropped,
    }
}

/// Counts the occupied z bins of every `(ρ, θ)` column.
pub fn height_map(grid: &SparseVoxelGrid) -> HeightMap {
    let spec = &grid.spec;
    let mut values = vec![0u32; spec.pillar_count()];
    for c in &grid.coords {
        values[spec.pillar_index(c.rho, c.theta)] += 1;
    }
    HeightMap {
        rho_bins: spec.rho_bins,
        theta_bins: spec.theta_bins,
        values,
    }
}

/// Pairs every nonempty teacher column with the student pillar at the same
/// lattice position. Output is `(column index, pillar index)` sorted by
/// `(ρ, θ)`; pillars without student points still match (their feature row
/// is zero).
pub fn match_columns(grid: &SparseVoxelGrid, bev: &BevGrid) -> Result<Vec<(usize, usize)>> {
    if grid.spec != bev.spec {
        return Err(Error::Config(
            "match_columns: voxel grid and BEV grid use different grid specs".into(),
        ));
    }
    Ok(grid
        .column_ranges()
        .iter()
        .enumerate()
        .map(|(col_idx, ((rho, theta), _))| (col_idx, grid.spec.pillar_index(*rho, *theta)))
        .collect())
}

/// Encoder keeping the raw `(x, y, z, intensity)` quadruple.
pub fn encode_xyzi(p: &Point) -> Vec<f64> {
    vec![p.x, p.y, p.z, p.intensity]
}

/// BEV encoder: the projection drops z, which is exactly the height
/// information the distillation modules reinject.
pub fn encode_xyi(p: &Point) -> Vec<f64> {
    vec![p.x, p.y, p.intensity]
}

/// Per-point voxel row assignment (None when the point fell outside).
pub fn point_voxel_rows(pc: &PointCloud, grid: &SparseVoxelGrid) -> Vec<Option<usize>> {
    pc.points
        .iter()
        .map(|p| cylindrical_bin(p, &grid.spec).and_then(|c| grid.row_of(c)))
        .collect()
}

/// Per-point pillar index (None when the point fell outside).
pub fn point_pillar_indices(pc: &PointCloud, spec: &GridSpec) -> Vec<Option<usize>> {
    pc.points
        .iter()
        .map(|p| cylindrical_bin(p, spec).map(|c| spec.pillar_index(c.rho, c.theta)))
        .collect()
}
