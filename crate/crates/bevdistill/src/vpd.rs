//! Voxel-to-pillar distillation for middle layers.
//!
//! The teacher's compressed column features are pushed through a small
//! domain-transfer MLP (two linear maps around a row normalization, the
//! BYOL-style projector), cross-attention mixes them into the student's
//! space with the Key coming from the student and Query/Value from the
//! teacher side, and the loss penalizes per-row directional mismatch
//! between the attention output and the transferred teacher features:
//!
//! `loss = (1/N) Σ_rows ‖ a/‖a‖ − b/‖b‖ ‖²`, averaged over distilled
//! layers. The value per row is `2 − 2·cos`, so the loss lives in `[0, 4]`
//! and ignores per-row positive rescaling of either side.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Row-norm epsilon shared by the distillation losses.
pub const NORM_EPS: f64 = 1e-12;

/// Variance floor of the domain-transfer row normalization. Desk-scale
/// feature rows are short and often ReLU-clamped to near-constant, so
/// the floor is set where the normalization gain stays modest (at most
/// `1/sqrt(eps)` about 32).
pub const LAYERNORM_EPS: f64 = 1e-3;

/// Tape-bound domain-transfer parameters:
/// `Linear → (x-mean)/std with learned affine → ReLU → Linear`.
#[derive(Debug, Clone, Copy)]
pub struct DomainTransferParams {
    pub w1: Var,
    pub b1: Var,
    pub gamma: Var,
    pub beta: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape-bound cross-attention projections. `d_k` is the Query/Key width,
/// the Value width must equal the feature width so the attention output
/// compares against the teacher features.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// The BYOL-style projector over row features.
pub fn domain_transfer(tape: &Tape, x: Var, p: &DomainTransferParams) -> Result<Var> {
    let h = tape.add_rowvec(tape.matmul(x, p.w1)?, p.b1)?;
    let mean = tape.row_mean(h);
    let centered = tape.sub_colvec(h, mean)?;
    let variance = tape.row_mean(tape.mul(centered, centered)?);
    let std = tape.sqrt(tape.add_scalar(variance, LAYERNORM_EPS));
    let normed = tape.div_colvec(centered, std)?;
    let affine = tape.add_rowvec(tape.mul_rowvec(normed, p.gamma)?, p.beta)?;
    tape.add_rowvec(tape.matmul(tape.relu(affine), p.w2)?, p.b2)
}

/// Flattens the matched pair for one layer: the teacher's compressed
/// column features go through domain transfer (when given), the student's
/// matched pillar rows pass through unchanged. Both sides must hold one
/// row per matched column.
pub fn flatten_and_transfer(
    tape: &Tape,
    teacher_compressed: Var,
    student_matched: Var,
    transfer: Option<&DomainTransferParams>,
) -> Result<(Var, Var)> {
    let t = tape.value(teacher_compressed);
    let s = tape.value(student_matched);
    if t.rows() != s.rows() {
        return Err(Error::ShapeMismatch {
            op: "flatten_and_transfer",
            left: t.shape().to_vec(),
            right: s.shape().to_vec(),
        });
    }
    let f_v = match transfer {
        Some(p) if t.rows() > 0 => domain_transfer(tape, teacher_compressed, p)?,
        _ => teacher_compressed,
    };
    Ok((f_v, student_matched))
}

/// Scaled dot-product cross-attention, Query and Value from the teacher
/// side `f_v`, Key from the student side `f_b`:
/// `softmax(QKᵀ/√d_k)·V`.
pub fn cross_attention(
    tape: &Tape,
    f_v: Var,
    f_b: Var,
    p: &CrossAttentionParams,
) -> Result<Var> {
    let fv = tape.value(f_v);
    let fb = tape.value(f_b);
    if fv.rows() != fb.rows() {
        return Err(Error::ShapeMismatch {
            op: "cross_attention",
            left: fv.shape().to_vec(),
            right: fb.shape().to_vec(),
        });
    }
    let d_k = tape.value(p.wq).cols();
    if tape.value(p.wk).cols() != d_k {
        return Err(Error::ShapeMismatch {
            op: "cross_attention",
            left: tape.value(p.wq).shape().to_vec(),
            right: tape.value(p.wk).shape().to_vec(),
        });
    }
    let q = tape.matmul(f_v, p.wq)?;
    let k = tape.matmul(f_b, p.wk)?;
    let v = tape.matmul(f_v, p.wv)?;
    let scores = tape.scale(tape.matmul(q, tape.transpose(k))?, 1.0 / (d_k as f64).sqrt());
    tape.matmul(tape.softmax_rows(scores), v)
}

/// Single-layer distillation loss: mean over rows of the squared distance
/// between unit-normalized rows. Zero rows on an empty layer.
pub fn vpd_layer_loss(tape: &Tape, f_b_prime: Var, f_v: Var) -> Result<Var> {
    let a = tape.value(f_b_prime);
    let b = tape.value(f_v);
    if !a.same_shape(&b) {
        return Err(Error::ShapeMismatch {
            op: "vpd_loss",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let n = a.rows();
    if n == 0 || a.is_empty() {
        return Ok(tape.constant(0.0));
    }
    let an = tape.l2_normalize_rows(f_b_prime, NORM_EPS);
    let bn = tape.l2_normalize_rows(f_v, NORM_EPS);
    let d = tape.sub(an, bn)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.scale(tape.sum_all(sq), 1.0 / n as f64))
}

/// Total over the distilled layer subset: the mean of the per-layer
/// losses (the `1/|I|` factor).
pub fn vpd_total(tape: &Tape, layer_losses: &[Var]) -> Result<Var> {
    if layer_losses.is_empty() {
        return Err(Error::Config(
            "vpd_total: the distilled layer subset is empty".into(),
        ));
    }
    let mut acc = layer_losses[0];
    for &l in &layer_losses[1..] {
        acc = tape.add(acc, l)?;
    }
    Ok(tape.scale(acc, 1.0 / layer_losses.len() as f64))
}

/// Host-side reference for tests and trend reporting: mean over rows of
/// the cosine between corresponding rows.
pub fn mean_row_cosine(a: &Tensor, b: &Tensor) -> f64 {
    assert!(a.same_shape(b));
    let (n, c) = (a.rows(), a.cols());
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for j in 0..c {
            dot += a.at(i, j) * b.at(i, j);
            na += a.at(i, j) * a.at(i, j);
            nb += b.at(i, j) * b.at(i, j);
        }
        let denom = (na.sqrt() * nb.sqrt()).max(NORM_EPS);
        total += dot / denom;
    }
    total / n as f64
}
