//! Label-weight distillation for the last pre-classification layer.
//!
//! The teacher's voxel features get a learned per-z-bin height embedding,
//! pass through two compression stages (a z-preserving per-voxel mixing,
//! then the z collapse to column rows), and are compared against student
//! pillar features only inside a few regions sampled proportionally to
//! the height-map mass. Regions with no height information are never
//! selected.

use rand::Rng;

use crate::compress::{compress_z_conv, ZConvParams};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, HeightMap, SparseVoxelGrid};
use crate::tape::{Tape, Var};
use crate::vpd::NORM_EPS;

/// Tiling of the `(ρ, θ)` lattice into `Kρ×Kθ` contiguous regions. When
/// the bin counts do not divide evenly the tiles differ by one bin
/// (proportional floor split), staying disjoint and exhaustive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionPartition {
    pub k_rho: usize,
    pub k_theta: usize,
    rho_bins: usize,
    theta_bins: usize,
}

impl RegionPartition {
    pub fn new(k_rho: usize, k_theta: usize, spec: &GridSpec) -> Result<Self> {
        if k_rho < 1 || k_theta < 1 {
            return Err(Error::Config("region counts must be >= 1".into()));
        }
        if k_rho > spec.rho_bins || k_theta > spec.theta_bins {
            return Err(Error::Config(format!(
                "region tiling {k_rho}x{k_theta} exceeds the {}x{} lattice",
                spec.rho_bins, spec.theta_bins
            )));
        }
        Ok(RegionPartition {
            k_rho,
            k_theta,
            rho_bins: spec.rho_bins,
            theta_bins: spec.theta_bins,
        })
    }

    pub fn k(&self) -> usize {
        self.k_rho * self.k_theta
    }

    pub fn region_of(&self, rho_bin: usize, theta_bin: usize) -> usize {
        let r = rho_bin * self.k_rho / self.rho_bins;
        let t = theta_bin * self.k_theta / self.theta_bins;
        r * self.k_theta + t
    }
}

/// Region weights and selection probabilities from the height map:
/// `W_i = H_i / ΣH`, `P_i = W_i / ΣW`. Regions with no height mass get
/// probability zero. Errors on an all-zero height map.
pub fn region_weights(h: &HeightMap, part: &RegionPartition) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut sums = vec![0u64; part.k()];
    for rho in 0..h.rho_bins {
        for theta in 0..h.theta_bins {
            sums[part.region_of(rho, theta)] += h.at(rho, theta) as u64;
        }
    }
    let total: u64 = sums.iter().sum();
    if total == 0 {
        return Err(Error::Numeric(
            "region_weights: height map is all zero".into(),
        ));
    }
    let w: Vec<f64> = sums.iter().map(|&s| s as f64 / total as f64).collect();
    let w_sum: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|&v| v / w_sum).collect();
    Ok((w, p))
}

/// Samples `m` distinct regions proportionally to `p`, renormalizing
/// after each draw. Zero-probability regions are never returned.
pub fn sample_regions<R: Rng>(p: &[f64], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    let positive = p.iter().filter(|&&v| v > 0.0).count();
    if m < 1 || m > positive {
        return Err(Error::Numeric(format!(
            "sample_regions: requested {m} of {positive} regions with positive probability"
        )));
    }
    let mut remaining: Vec<f64> = p.to_vec();
    let mut picked = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = remaining.iter().sum();
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &pi) in remaining.iter().enumerate() {
            if pi <= 0.0 {
                continue;
            }
            acc += pi;
            if u < acc {
                chosen = Some(i);
                break;
            }
        }
        // numeric dust can leave u >= acc; fall back to the last positive
        let i = chosen.unwrap_or_else(|| {
            remaining
                .iter()
                .rposition(|&v| v > 0.0)
                .expect("positive mass remains")
        });
        picked.push(i);
        remaining[i] = 0.0;
    }
    Ok(picked)
}

/// Tape-bound height embedding: one learned row per z bin, added to every
/// voxel at that bin.
#[derive(Debug, Clone, Copy)]
pub struct HeightEmbedding {
    pub table: Var,
}

/// Adds `table[z(v)]` to every voxel feature row. The sparsity pattern is
/// untouched; gradients accumulate per table row over the voxels using it.
pub fn height_embed(
    tape: &Tape,
    grid: &SparseVoxelGrid,
    feats: Var,
    embed: &HeightEmbedding,
) -> Result<Var> {
    let fv = tape.value(feats);
    let tv = tape.value(embed.table);
    if tv.cols() != fv.cols() || tv.rows() != grid.spec.z_bins {
        return Err(Error::ShapeMismatch {
            op: "height_embed",
            left: tv.shape().to_vec(),
            right: vec![grid.spec.z_bins, fv.cols()],
        });
    }
    if grid.is_empty() {
        return Ok(feats);
    }
    let z_bins: Vec<usize> = grid.coords.iter().map(|c| c.z).collect();
    let rows = tape.gather_rows(embed.table, &z_bins);
    tape.add(feats, rows)
}

/// Parameters of the two compression stages: a per-voxel z-indexed mixing
/// (`C_V → C_V`, z preserved) and the z collapse to column rows.
#[derive(Debug, Clone, Copy)]
pub struct TwoStageParams {
    pub stage1: ZConvParams,
    pub stage2: ZConvParams,
}

/// Stage 1: per-voxel `ReLU(feats[v]·W_z[z(v)] + b)`, keeping one row per
/// voxel. Stage 2: the usual learned z collapse.
pub fn compress_two_stage(
    tape: &Tape,
    grid: &SparseVoxelGrid,
    feats: Var,
    params: &TwoStageParams,
) -> Result<Var> {
    let fv = tape.value(feats);
    let c_in = fv.cols();
    let w1 = tape.value(params.stage1.weight);
    if w1.rows() != params.stage1.nz * c_in {
        return Err(Error::ShapeMismatch {
            op: "compress_two_stage",
            left: w1.shape().to_vec(),
            right: vec![params.stage1.nz * c_in, w1.cols()],
        });
    }
    let n = grid.len();
    if n == 0 {
        let c_out = tape.value(params.stage2.weight).cols();
        return Ok(tape.leaf(crate::tensor::Tensor::zeros(vec![0, c_out])));
    }
    let c_mid = w1.cols();
    let mut acc: Option<Var> = None;
    for z in 0..params.stage1.nz {
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
        let w = tape.gather_rows(params.stage1.weight, &w_rows);
        let y = tape.matmul(x, w)?;
        let scattered = tape.scatter_add_rows(y, &rows, n);
        acc = Some(match acc {
            None => scattered,
            Some(a) => tape.add(a, scattered)?,
        });
    }
    let mixed = acc.expect("nonempty grid");
    let stage1_out = tape.relu(tape.add_rowvec(mixed, params.stage1.bias)?);
    debug_assert_eq!(tape.value(stage1_out).cols(), c_mid);
    compress_z_conv(tape, grid, stage1_out, &params.stage2)
}

/// Matched-column indices (in `column_ranges` order) that fall inside the
/// selected regions.
pub fn columns_in_regions(
    grid: &SparseVoxelGrid,
    part: &RegionPartition,
    selected: &[usize],
) -> Vec<usize> {
    let selected: std::collections::BTreeSet<usize> = selected.iter().copied().collect();
    grid.column_ranges()
        .iter()
        .enumerate()
        .filter_map(|(k, ((rho, theta), _))| {
            selected.contains(&part.region_of(*rho, *theta)).then_some(k)
        })
        .collect()
}

/// Label-weight distillation loss over the selected columns: the summed
/// squared distance between unit-normalized rows, divided by the number
/// of selected nonempty columns. Errors when nothing was selected.
pub fn lwd_loss(tape: &Tape, f_b_selected: Var, f_v_selected: Var) -> Result<Var> {
    let a = tape.value(f_b_selected);
    let b = tape.value(f_v_selected);
    if !a.same_shape(&b) {
        return Err(Error::ShapeMismatch {
            op: "lwd_loss",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let n = a.rows();
    if n == 0 || a.is_empty() {
        return Err(Error::Numeric(
            "lwd_loss: no columns fall inside the selected regions".into(),
        ));
    }
    let an = tape.l2_normalize_rows(f_b_selected, NORM_EPS);
    let bn = tape.l2_normalize_rows(f_v_selected, NORM_EPS);
    let d = tape.sub(an, bn)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.scale(tape.sum_all(sq), 1.0 / n as f64))
}
