//! Sparse z-axis compression of voxel features into per-column rows.
//!
//! Two variants, matching the ablation pair: a learned per-z-bin linear
//! kernel summed over occupied bins (the "sparse convolution" reading of a
//! single-step z collapse, kernel size `Nz`, stride `Nz`), and a
//! parameter-free scatter-max. Both emit one row per nonempty column in
//! [`crate::grid::SparseVoxelGrid::column_ranges`] order, which is also
//! the [`crate::grid::match_columns`] order. Empty voxels never
//! contribute.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SparseVoxelGrid;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compression mode of the voxel-to-pillar path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZCompressMode {
    /// Elementwise max over occupied z bins; requires equal feature widths.
    ScatterMax,
    /// Learned per-z-bin weight matrices summed over occupied bins, then
    /// bias and ReLU.
    ZConv,
}

/// Tape-bound parameters of the learned kernel: the per-z weight matrices
/// stacked into one `(Nz·C_in) × C_out` block, plus the bias row.
#[derive(Debug, Clone, Copy)]
pub struct ZConvParams {
    pub weight: Var,
    pub bias: Var,
    pub nz: usize,
}

impl ZConvParams {
    /// Shapes of the stacked weight and bias tensors for the given grid
    /// depth and feature widths.
    pub fn shapes(nz: usize, c_in: usize, c_out: usize) -> (Vec<usize>, Vec<usize>) {
        (vec![nz * c_in, c_out], vec![c_out])
    }
}

fn check_zconv_shapes(
    tape: &Tape,
    params: &ZConvParams,
    c_in: usize,
) -> Result<(usize, usize)> {
    let w = tape.value(params.weight);
    let b = tape.value(params.bias);
    let c_out = w.cols();
    if w.rows() != params.nz * c_in || b.len() != c_out {
        return Err(Error::ShapeMismatch {
            op: "compress_z_conv",
            left: w.shape().to_vec(),
            right: vec![params.nz * c_in, c_out],
        });
    }
    Ok((c_in, c_out))
}

/// Pre-activation z collapse: for each nonempty column, the sum over its
/// occupied z bins of `feats[v] · W_z[z(v)]`, plus bias. Exposed so the
/// linearity of the kernel can be tested before the ReLU.
pub fn compress_z_conv_preact(
    tape: &Tape,
    grid: &SparseVoxelGrid,
    feats: Var,
    params: &ZConvParams,
) -> Result<Var> {
    let fv = tape.value(feats);
    let c_in = fv.cols();
    let (_, c_out) = check_zconv_shapes(tape, params, c_in)?;
    if fv.rows() != grid.len() {
        return Err(Error::ShapeMismatch {
            op: "compress_z_conv",
            left: fv.shape().to_vec(),
            right: vec![grid.len(), c_in],
        });
    }
    let (voxel_col, n_cols) = grid.voxel_column_indices();
    if n_cols == 0 {
        return Ok(tape.leaf(Tensor::zeros(vec![0, c_out])));
    }

    let mut acc: Option<Var> = None;
    for z in 0..params.nz {
        let rows: Vec<usize> = grid
            .coords
            .iter()
            .enumerate()
            .filter_map(|(r, c)| (c.z == z).then_some(r))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let x = tape.gather_rows(feats, &rows);
        let w_rows: Vec<usize> = (z * c_in..(z + 1) * c_in).collect();
        let w = tape.gather_rows(params.weight, &w_rows);
        let y = tape.matmul(x, w)?;
        let cols: Vec<usize> = rows.iter().map(|&r| voxel_col[r]).collect();
        let scattered = tape.scatter_add_rows(y, &cols, n_cols);
        acc = Some(match acc {
            None => scattered,
            Some(a) => tape.add(a, scattered)?,
        });
    }
    let summed = acc.expect("nonempty grid has at least one occupied z bin");
    tape.add_rowvec(summed, params.bias)
}

/// Learned z collapse: `ReLU(Σ_z feats·W_z + b)` per nonempty column.
pub fn compress_z_conv(
    tape: &Tape,
    grid: &SparseVoxelGrid,
    feats: Var,
    params: &ZConvParams,
) -> Result<Var> {
    Ok(tape.relu(compress_z_conv_preact(tape, grid, feats, params)?))
}

/// Scatter-max z collapse: per-column elementwise max over occupied z
/// bins. No learned mixing, so input and output widths agree; the
/// subgradient routes to the argmax voxel, ties resolving to the lowest z
/// (voxel rows ascend in z within a column).
pub fn compress_scatter_max(
    tape: &Tape,
    grid: &SparseVoxelGrid,
    feats: Var,
) -> Result<Var> {
    let fv = tape.value(feats);
    if fv.rows() != grid.len() {
        return Err(Error::ShapeMismatch {
            op: "compress_scatter_max",
            left: fv.shape().to_vec(),
            right: vec![grid.len(), fv.cols()],
        });
    }
    let (voxel_col, n_cols) = grid.voxel_column_indices();
    if n_cols == 0 {
        return Ok(tape.leaf(Tensor::zeros(vec![0, fv.cols()])));
    }
    Ok(tape.scatter_max_rows(feats, &voxel_col, n_cols))
}
