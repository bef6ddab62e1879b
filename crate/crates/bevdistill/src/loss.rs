//! Segmentation and distillation objectives.
//!
//! Weighted cross-entropy normalizes by the summed weights of the
//! supervised points; the Lovász-softmax term extends `1 − IoU` to soft
//! probabilities through the sorted-error Jaccard gradient; logit
//! distillation matches temperature-softened class distributions with the
//! teacher side detached. The combined objective is
//! `wce + lovasz + β1·vpd + β2·lwd + β3·logit`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Balance coefficients `(β1, β2, β3)` of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // the published balance coefficients
        LossWeights {
            beta1: 2.0,
            beta2: 2.0,
            beta3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta3", self.beta3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn supervised_rows(targets: &[u32], ignore_id: u32) -> Vec<usize> {
    targets
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| (t != ignore_id).then_some(i))
        .collect()
}

/// Weighted cross-entropy over logits:
/// `-Σ_n w_{y_n}·log softmax(x_n)_{y_n} / Σ_n w_{y_n}`, skipping
/// ignore-labeled points. Log-sum-exp stabilized.
pub fn weighted_ce(
    tape: &Tape,
    logits: Var,
    targets: &[u32],
    ignore_id: u32,
    weights: &[f64],
) -> Result<Var> {
    let lv = tape.value(logits);
    if lv.rows() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_ce",
            left: lv.shape().to_vec(),
            right: vec![targets.len(), lv.cols()],
        });
    }
    let rows = supervised_rows(targets, ignore_id);
    if rows.is_empty() {
        return Err(Error::Numeric(
            "weighted_ce: every point carries the ignore label".into(),
        ));
    }
    let kept = tape.gather_rows(logits, &rows);
    let logp = tape.log_softmax_rows(kept);
    let cols: Vec<usize> = rows.iter().map(|&i| targets[i] as usize).collect();
    let picked = tape.pick_per_row(logp, &cols);
    let w: Vec<f64> = cols.iter().map(|&c| weights[c]).collect();
    let w_sum: f64 = w.iter().sum();
    if w_sum <= 0.0 {
        return Err(Error::Numeric(
            "weighted_ce: the supervised points all have zero class weight".into(),
        ));
    }
    let w_col = tape.leaf(Tensor::matrix(w.len(), 1, w));
    let weighted = tape.mul(picked, w_col)?;
    Ok(tape.scale(tape.sum_all(weighted), -1.0 / w_sum))
}

/// Extracts one probability column as an `N×1` tape value.
fn pick_col(tape: &Tape, x: Var, col: usize, rows: usize) -> Var {
    tape.pick_per_row(x, &vec![col; rows])
}

/// Cumulative Jaccard losses `1 - I_k/U_k` of a descending-sorted
/// ground-truth indicator; their forward differences are the Lovász
/// gradient of the per-class error vector.
fn lovasz_jaccard(gt_sorted: &[bool]) -> Vec<f64> {
    let gts: f64 = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut jaccard = Vec::with_capacity(gt_sorted.len());
    let mut cum_gt = 0.0;
    let mut cum_not = 0.0;
    for &g in gt_sorted {
        if g {
            cum_gt += 1.0;
        } else {
            cum_not += 1.0;
        }
        let intersection = gts - cum_gt;
        let union = gts + cum_not;
        jaccard.push(1.0 - intersection / union);
    }
    jaccard
}

/// Lovász-softmax over probability rows: per class present in the
/// targets, errors are `1-p(c)` on that class and `p(c)` elsewhere; the
/// loss is the descending-sorted errors dotted with the Jaccard-extension
/// gradient, averaged over present classes. Rows must sum to one within
/// `1e-6`. The sort permutation and gradient vector are data, only the
/// errors carry derivatives.
pub fn lovasz_softmax(
    tape: &Tape,
    probs: Var,
    targets: &[u32],
    ignore_id: u32,
) -> Result<Var> {
    let pv = tape.value(probs);
    if pv.rows() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "lovasz_softmax",
            left: pv.shape().to_vec(),
            right: vec![targets.len(), pv.cols()],
        });
    }
    let rows = supervised_rows(targets, ignore_id);
    if rows.is_empty() {
        return Err(Error::Numeric(
            "lovasz_softmax: every point carries the ignore label".into(),
        ));
    }
    for &i in &rows {
        let sum: f64 = pv.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!(
                "lovasz_softmax: probability row {i} sums to {sum}"
            )));
        }
    }
    let kept = tape.gather_rows(probs, &rows);
    let kept_targets: Vec<u32> = rows.iter().map(|&i| targets[i]).collect();
    let n = rows.len();

    let mut present: Vec<u32> = kept_targets.clone();
    present.sort_unstable();
    present.dedup();

    let mut class_losses = Vec::new();
    for &c in &present {
        let p_col = pick_col(tape, kept, c as usize, n);
        // e_n = 1 - p_n(c) on the class, p_n(c) off it: an affine map
        let sign: Vec<f64> = kept_targets
            .iter()
            .map(|&t| if t == c { -1.0 } else { 1.0 })
            .collect();
        let offset: Vec<f64> = kept_targets
            .iter()
            .map(|&t| if t == c { 1.0 } else { 0.0 })
            .collect();
        let e = tape.add(
            tape.mul(p_col, tape.leaf(Tensor::matrix(n, 1, sign)))?,
            tape.leaf(Tensor::matrix(n, 1, offset)),
        )?;
        // sort errors descending (stable); the permutation is data
        let ev = tape.value(e);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            ev.data()[b]
                .partial_cmp(&ev.data()[a])
                .expect("finite errors")
        });
        let gt_sorted: Vec<bool> = order.iter().map(|&i| kept_targets[i] == c).collect();
        let jaccard = lovasz_jaccard(&gt_sorted);
        // Abel summation of <sorted errors, jaccard differences>:
        // sum_k jac_k * (e_k - e_{k+1}) with e_{n+1} = 0. Hard 0/1 errors
        // then reduce to a single exact 1 - I/U term.
        let sorted_e = tape.gather_rows(e, &order);
        let shifted = if n > 1 {
            let tail = tape.gather_rows(e, &order[1..]);
            tape.concat_rows(&[tail, tape.leaf(Tensor::zeros(vec![1, 1]))])?
        } else {
            tape.leaf(Tensor::zeros(vec![1, 1]))
        };
        let diff = tape.sub(sorted_e, shifted)?;
        let weighted = tape.mul(diff, tape.leaf(Tensor::matrix(n, 1, jaccard)))?;
        class_losses.push(tape.sum_all(weighted));
    }
    let mut acc = class_losses[0];
    for &l in &class_losses[1..] {
        acc = tape.add(acc, l)?;
    }
    Ok(tape.div_by(acc, class_losses.len() as f64))
}

/// Logit distillation: `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`
/// averaged over points. The teacher side enters as plain values.
pub fn logit_kd(
    tape: &Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    temperature: f64,
) -> Result<Var> {
    let sv = tape.value(student_logits);
    if !sv.same_shape(teacher_logits) {
        return Err(Error::ShapeMismatch {
            op: "logit_kd",
            left: sv.shape().to_vec(),
            right: teacher_logits.shape().to_vec(),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "logit_kd temperature must be positive, got {temperature}"
        )));
    }
    let (n, c) = (sv.rows(), sv.cols());
    if n == 0 {
        return Ok(tape.constant(0.0));
    }
    // softened teacher distribution and its entropy term, host-side
    let mut p = vec![0.0; n * c];
    let mut p_logp_sum = 0.0;
    for i in 0..n {
        let row = teacher_logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] / temperature - max).exp();
            p[i * c + j] = e;
            z += e;
        }
        for j in 0..c {
            p[i * c + j] /= z;
            let pj = p[i * c + j];
            if pj > 0.0 {
                p_logp_sum += pj * pj.ln();
            }
        }
    }
    let log_q = tape.log_softmax_rows(tape.scale(student_logits, 1.0 / temperature));
    let cross = tape.sum_all(tape.mul(tape.leaf(Tensor::matrix(n, c, p)), log_q)?);
    let scale = temperature * temperature / n as f64;
    let kl = tape.add(
        tape.constant(p_logp_sum * scale),
        tape.scale(cross, -scale),
    )?;
    Ok(kl)
}

/// Combined objective: `wce + lovasz + β1·vpd + β2·lwd + β3·logit`.
pub fn total_loss(
    tape: &Tape,
    wce: Var,
    lovasz: Var,
    l_vpd: Var,
    l_lwd: Var,
    l_logit: Var,
    betas: &LossWeights,
) -> Result<Var> {
    let seg = tape.add(wce, lovasz)?;
    let d1 = tape.scale(l_vpd, betas.beta1);
    let d2 = tape.scale(l_lwd, betas.beta2);
    let d3 = tape.scale(l_logit, betas.beta3);
    tape.add(tape.add(tape.add(seg, d1)?, d2)?, d3)
}
