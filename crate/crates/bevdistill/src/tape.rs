//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass. Each recorded node
//! keeps its output value plus a closure that, given the upstream gradient,
//! emits gradient contributions for its parents. [`Tape::backward`] replays
//! the record once in reverse, visiting each operation exactly once, and
//! accumulates gradients for every leaf created with `requires_grad`.
//!
//! All reductions run left-to-right in index order, so forward and backward
//! passes are bit-deterministic for a fixed input.
//!
//! ```
//! use bevdistill::tape::Tape;
//! use bevdistill::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let p = tape.leaf(Tensor::matrix(1, 2, vec![3.0, 4.0]).with_grad());
//! let loss = tape.mse_mean(p, tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]))).unwrap();
//! assert_eq!(tape.value(loss).scalar_value().unwrap(), 12.5);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(p).unwrap().data(), &[3.0, 4.0]);
//! ```

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

type BackFn = Box<dyn Fn(&Tensor, &mut dyn FnMut(usize, Tensor))>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    switch_margin: SwitchMargin,
    min_divisor: SwitchMargin,
}

/// Distance of the forward pass to the nearest non-differentiable switch
/// (a ReLU kink or a scatter-max tie). Finite-difference checks probe
/// this to confirm they run at a differentiable point.
struct SwitchMargin(std::cell::Cell<f64>);

impl Default for SwitchMargin {
    fn default() -> Self {
        SwitchMargin(std::cell::Cell::new(f64::INFINITY))
    }
}

impl SwitchMargin {
    fn note(&self, d: f64) {
        if d < self.0.get() {
            self.0.set(d);
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if any path reached it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Smallest distance any recorded operation came to a
    /// non-differentiable switch (ReLU kinks, scatter-max ties).
    pub fn switch_margin(&self) -> f64 {
        self.switch_margin.0.get()
    }

    /// Smallest per-row divisor any broadcast division saw; tiny values
    /// mean the forward amplifies perturbations enormously there.
    pub fn min_divisor(&self) -> f64 {
        self.min_divisor.0.get()
    }

    /// Places a tensor on the tape. Leaves flagged with
    /// [`Tensor::with_grad`] receive gradients in [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// Convenience for scalar constants.
    pub fn constant(&self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Clones the forward value of `var`.
    pub fn value(&self, var: Var) -> Tensor {
        self.nodes.borrow()[var.id].value.clone()
    }

    fn push(&self, value: Tensor, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, back });
        Var { id }
    }

    fn val(&self, var: Var) -> Tensor {
        self.value(var)
    }

    // ------------------------------------------------------------------
    // linear algebra
    // ------------------------------------------------------------------

    /// Matrix product `a · b`; gradients are `g·bᵀ` and `aᵀ·g`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.val(a);
        let bv = self.val(b);
        if av.cols() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av.data()[i * k + p];
                for j in 0..n {
                    out[i * n + j] += x * bv.data()[p * n + j];
                }
            }
        }
        let (a_shape, b_shape) = (av.shape().to_vec(), bv.shape().to_vec());
        let back: BackFn = Box::new(move |g, emit| {
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for j in 0..n {
                    let gij = g.data()[i * n + j];
                    for p in 0..k {
                        da[i * k + p] += gij * bv.data()[p * n + j];
                        db[p * n + j] += gij * av.data()[i * k + p];
                    }
                }
            }
            emit(a.id, Tensor::new(a_shape.clone(), da));
            emit(b.id, Tensor::new(b_shape.clone(), db));
        });
        Ok(self.push(Tensor::matrix(m, n, out), Some(back)))
    }

    pub fn transpose(&self, x: Var) -> Var {
        let xv = self.val(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv.data()[i * n + j];
            }
        }
        let x_shape = xv.shape().to_vec();
        let back: BackFn = Box::new(move |g, emit| {
            let mut dx = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    dx[i * n + j] = g.data()[j * m + i];
                }
            }
            emit(x.id, Tensor::new(x_shape.clone(), dx));
        });
        self.push(Tensor::matrix(n, m, out), Some(back))
    }

    // ------------------------------------------------------------------
    // elementwise
    // ------------------------------------------------------------------

    fn elementwise2(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Var> {
        let av = self.val(a);
        let bv = self.val(b);
        if !av.same_shape(&bv) {
            return Err(Error::ShapeMismatch {
                op,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = av.shape().to_vec();
        let back_fn: BackFn = Box::new(move |g, emit| {
            let mut da = vec![0.0; av.len()];
            let mut db = vec![0.0; bv.len()];
            for i in 0..av.len() {
                let (ga, gb) = back(g.data()[i], av.data()[i], bv.data()[i]);
                da[i] = ga;
                db[i] = gb;
            }
            emit(a.id, Tensor::new(av.shape().to_vec(), da));
            emit(b.id, Tensor::new(bv.shape().to_vec(), db));
        });
        Ok(self.push(Tensor::new(shape, out), Some(back_fn)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("add", a, b, |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("sub", a, b, |x, y| x - y, |g, _, _| (g, -g))
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("mul", a, b, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let xv = self.val(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| v * c).collect();
        let shape = xv.shape().to_vec();
        let back: BackFn = Box::new(move |g, emit| {
            let dx: Vec<f64> = g.data().iter().map(|&v| v * c).collect();
            emit(x.id, Tensor::new(g.shape().to_vec(), dx));
        });
        self.push(Tensor::new(shape, out), Some(back))
    }

    /// Elementwise division by a constant (not a reciprocal multiply, so
    /// exact-arithmetic identities like `sum/n` survive).
    pub fn div_by(&self, x: Var, c: f64) -> Var {
        let xv = self.val(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| v / c).collect();
        let shape = xv.shape().to_vec();
        let back: BackFn = Box::new(move |g, emit| {
            let dx: Vec<f64> = g.data().iter().map(|&v| v / c).collect();
            emit(x.id, Tensor::new(g.shape().to_vec(), dx));
        });
        self.push(Tensor::new(shape, out), Some(back))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let xv = self.val(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| v + c).collect();
        let shape = xv.shape().to_vec();
        let back: BackFn = Box::new(move |g, emit| {
            emit(x.id, g.clone());
        });
        self.push(Tensor::new(shape, out), Some(back))
    }

    pub fn relu(&self, x: Var) -> Var {
        let xv = self.val(x);
        for &v in xv.data() {
            // an input at exactly 0.0 is structural (an upstream clamp on a
            // locally constant path), not a kink a perturbation can cross
            if v != 0.0 {
                self.switch_margin.note(v.abs());
            }
        }
        let out: Vec<f64> = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = xv.shape().to_vec();
        let back: BackFn = Box::new(move |g, emit| {
            let dx: Vec<f64> = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                .collect();
            emit(x.id, Tensor::new(xv.shape().to_vec(), dx));
        });
        self.push(Tensor::new(shape, out), Some(back))
    }

    /// Elementwise square root; inputs must stay positive for the
    /// gradient to exist (callers add an epsilon first).
    pub fn sqrt(&self, x: Var) -> Var {
        let xv = self.val(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| v.sqrt()).collect();
        let shape = xv.shape().to_vec();
        let yv = out.clone();
        let back: BackFn = Box::new(move |g, emit| {
            let dx: Vec<f64> = g
                .data()
                .iter()
                .zip(&yv)
                .map(|(&gv, &y)| gv / (2.0 * y))
                .collect();
            emit(x.id, Tensor::new(g.shape().to_vec(), dx));
        });
        self.push(Tensor::new(shape, out), Some(back))
    }

    // ------------------------------------------------------------------
    // row-wise ops
    // ------------------------------------------------------------------

    /// Row-wise softmax with row-max subtraction for stability. Each output
    /// row is nonnegative and sums to one.
    pub fn softmax_rows(&self, x: Var) -> Var {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let shape = xv.shape().to_vec();
        let y = out.clone();
        let back: BackFn = Box::new(move |g, emit| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let mut dot = 0.0;
                for j in 0..c {
                    dot += g.data()[i * c + j] * y[i * c + j];
                }
                for j in 0..c {
                    dx[i * c + j] = y[i * c + j] * (g.data()[i * c + j] - dot);
                }
            }
            emit(x.id, Tensor::new(g.shape().to_vec(), dx));
        });
        self.push(Tensor::new(shape, out), Some(back))
    }

    /// Row-wise log-softmax, stabilized through the row maximum.
    pub fn log_softmax_rows(&self, x: Var) -> Var {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let shape = xv.shape().to_vec();
        let logp = out.clone();
        let back: BackFn = Box::new(move |g, emit| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let gsum: f64 = (0..c).map(|j| g.data()[i * c + j]).sum();
                for j in 0..c {
                    dx[i * c + j] = g.data()[i * c + j] - logp[i * c + j].exp() * gsum;
                }
            }
            emit(x.id, Tensor::new(g.shape().to_vec(), dx));
        });
        self.push(Tensor::new(shape, out), Some(back))
    }

    /// Scales every row to unit Euclidean norm; rows with norm below `eps`
    /// are divided by `eps` instead, so all-zero rows stay zero.
    pub fn l2_normalize_rows(&self, x: Var, eps: f64) -> Var {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        let mut clipped = vec![false; r];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            clipped[i] = norm < eps;
            let denom = norm.max(eps);
            norms[i] = denom;
            for j in 0..c {
                out[i * c + j] = row[j] / denom;
            }
        }
        let shape = xv.shape().to_vec();
        let y = out.clone();
        let back: BackFn = Box::new(move |g, emit| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                if clipped[i] {
                    for j in 0..c {
                        dx[i * c + j] = g.data()[i * c + j] / norms[i];
                    }
                } else {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g.data()[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] =
                            (g.data()[i * c + j] - y[i * c + j] * dot) / norms[i];
                    }
                }
            }
            emit(x.id, Tensor::new(g.shape().to_vec(), dx));
        });
        self.push(Tensor::new(shape, out), Some(back))
    }

    /// Mean over columns of each row; `N×C` becomes `N×1`.
    pub fn row_mean(&self, x: Var) -> Var {
        let xv = self.val(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r];
        for i in 0..r {
            out[i] = xv.data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
        }
        let back: BackFn = Box::new(move |g, emit| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let gi = g.data()[i] / c as f64;
                for j in 0..c {
                    dx[i * c + j] = gi;
                }
            }
            emit(x.id, Tensor::new(xv.shape().to_vec(), dx));
        });
        self.push(Tensor::matrix(r, 1, out), Some(back))
    }

    /// Subtracts a per-row column vector `v` (`N×1`) from every column.
    pub fn sub_colvec(&self, x: Var, v: Var) -> Result<Var> {
        let xv = self.val(x);
        let vv = self.val(v);
        if vv.len() != xv.rows() {
            return Err(Error::ShapeMismatch {
                op: "sub_colvec",
                left: xv.shape().to_vec(),
                right: vv.shape().to_vec(),
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xv.data()[i * c + j] - vv.data()[i];
            }
        }
        let shape = xv.shape().to_vec();
        let v_shape = vv.shape().to_vec();
        let back: BackFn = Box::new(move |g, emit| {
            emit(x.id, g.clone());
            let mut dv = vec![0.0; r];
            for i in 0..r {
                for j in 0..c {
                    dv[i] -= g.data()[i * c + j];
                }
            }
            emit(v.id, Tensor::new(v_shape.clone(), dv));
        });
        Ok(self.push(Tensor::new(shape, out), Some(back)))
    }

    /// Divides each row by its entry of the column vector `v` (`N×1`).
    pub fn div_colvec(&self, x: Var, v: Var) -> Result<Var> {
        let xv = self.val(x);
        let vv = self.val(v);
        if vv.len() != xv.rows() {
            return Err(Error::ShapeMismatch {
                op: "div_colvec",
                left: xv.shape().to_vec(),
                right: vv.shape().to_vec(),
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            self.min_divisor.note(vv.data()[i].abs());
            for j in 0..c {
                out[i * c + j] = xv.data()[i * c + j] / vv.data()[i];
            }
        }
        let shape = xv.shape().to_vec();
        let v_shape = vv.shape().to_vec();
        let back: BackFn = Box::new(move |g, emit| {
            let mut dx = vec![0.0; r * c];
            let mut dv = vec![0.0; r];
            for i in 0..r {
                let vi = vv.data()[i];
                for j in 0..c {
                    let gij = g.data()[i * c + j];
                    dx[i * c + j] = gij / vi;
                    dv[i] -= gij * xv.data()[i * c + j] / (vi * vi);
                }
            }
            emit(x.id, Tensor::new(xv.shape().to_vec(), dx));
            emit(v.id, Tensor::new(v_shape.clone(), dv));
        });
        Ok(self.push(Tensor::new(shape, out), Some(back)))
    }

    /// Multiplies every row elementwise by a row vector `r` of width `C`.
    pub fn mul_rowvec(&self, x: Var, rv: Var) -> Result<Var> {
        let xv = self.val(x);
        let rvv = self.val(rv);
        if rvv.len() != xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "mul_rowvec",
                left: xv.shape().to_vec(),
                right: rvv.shape().to_vec(),
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xv.data()[i * c + j] * rvv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let r_shape = rvv.shape().to_vec();
        let back: BackFn = Box::new(move |g, emit| {
            let mut dx = vec![0.0; r * c];
            let mut dr = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    let gij = g.data()[i * c + j];
                    dx[i * c + j] = gij * rvv.data()[j];
                    dr[j] += gij * xv.data()[i * c + j];
                }
            }
            emit(x.id, Tensor::new(xv.shape().to_vec(), dx));
            emit(rv.id, Tensor::new(r_shape.clone(), dr));
        });
        Ok(self.push(Tensor::new(shape, out), Some(back)))
    }

    /// Adds a row vector of width `C` to every row.
    pub fn add_rowvec(&self, x: Var, rv: Var) -> Result<Var> {
        let xv = self.val(x);
        let rvv = self.val(rv);
        if rvv.len() != xv.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_rowvec",
                left: xv.shape().to_vec(),
                right: rvv.shape().to_vec(),
            });
        }
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xv.data()[i * c + j] + rvv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let r_shape = rvv.shape().to_vec();
        let back: BackFn = Box::new(move |g, emit| {
            emit(x.id, g.clone());
            let mut dr = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    dr[j] += g.data()[i * c + j];
                }
            }
            emit(rv.id, Tensor::new(r_shape.clone(), dr));
        });
        Ok(self.push(Tensor::new(shape, out), Some(back)))
    }

    // ------------------------------------------------------------------
    // gather / scatter
    // ------------------------------------------------------------------

    /// Selects rows of `x` in the order given by `idx` (repeats allowed).
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Var {
        let xv = self.val(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let n_out = idx.len();
        let idx = idx.to_vec();
        let (r_in, shape_in) = (xv.rows(), xv.shape().to_vec());
        let back: BackFn = Box::new(move |g, emit| {
            let mut dx = vec![0.0; r_in * c];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    dx[i * c + j] += g.data()[k * c + j];
                }
            }
            emit(x.id, Tensor::new(shape_in.clone(), dx));
        });
        self.push(Tensor::matrix(n_out, c, out), Some(back))
    }

    /// Adds row `k` of `x` into row `idx[k]` of an `out_rows×C` zero
    /// matrix. Inverse of [`Tape::gather_rows`].
    pub fn scatter_add_rows(&self, x: Var, idx: &[usize], out_rows: usize) -> Var {
        let xv = self.val(x);
        let c = xv.cols();
        assert_eq!(xv.rows(), idx.len(), "scatter_add_rows index count");
        let mut out = vec![0.0; out_rows * c];
        for (k, &i) in idx.iter().enumerate() {
            debug_assert!(i < out_rows);
            for j in 0..c {
                out[i * c + j] += xv.data()[k * c + j];
            }
        }
        let idx = idx.to_vec();
        let shape_in = xv.shape().to_vec();
        let back: BackFn = Box::new(move |g, emit| {
            let mut dx = vec![0.0; idx.len() * c];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    dx[k * c + j] = g.data()[i * c + j];
                }
            }
            emit(x.id, Tensor::new(shape_in.clone(), dx));
        });
        self.push(Tensor::matrix(out_rows, c, out), Some(back))
    }

    /// Per-group elementwise maximum over rows. `groups[k]` assigns row `k`
    /// of `x` to an output row; the subgradient routes to the first row
    /// that attains each maximum (rows are scanned in index order, so with
    /// z-sorted voxel rows the lowest z wins ties). Groups without members
    /// yield zero rows and no gradient.
    pub fn scatter_max_rows(&self, x: Var, groups: &[usize], n_groups: usize) -> Var {
        let xv = self.val(x);
        let c = xv.cols();
        assert_eq!(xv.rows(), groups.len(), "scatter_max_rows group count");
        let mut out = vec![0.0; n_groups * c];
        let mut argmax = vec![usize::MAX; n_groups * c];
        let mut runner_up = vec![f64::NEG_INFINITY; n_groups * c];
        for (k, &gidx) in groups.iter().enumerate() {
            debug_assert!(gidx < n_groups);
            for j in 0..c {
                let v = xv.data()[k * c + j];
                let slot = gidx * c + j;
                if argmax[slot] == usize::MAX || v > out[slot] {
                    if argmax[slot] != usize::MAX {
                        runner_up[slot] = out[slot];
                    }
                    out[slot] = v;
                    argmax[slot] = k;
                } else if v > runner_up[slot] {
                    runner_up[slot] = v;
                }
            }
        }
        for slot in 0..n_groups * c {
            if runner_up[slot] > f64::NEG_INFINITY {
                self.switch_margin.note(out[slot] - runner_up[slot]);
            }
        }
        let shape_in = xv.shape().to_vec();
        let n_in = xv.rows();
        let back: BackFn = Box::new(move |g, emit| {
            let mut dx = vec![0.0; n_in * c];
            for slot in 0..argmax.len() {
                let k = argmax[slot];
                if k != usize::MAX {
                    let j = slot % c;
                    dx[k * c + j] += g.data()[slot];
                }
            }
            emit(x.id, Tensor::new(shape_in.clone(), dx));
        });
        self.push(Tensor::matrix(n_groups, c, out), Some(back))
    }

    /// Picks one entry per row: output `N×1` with `y[r] = x[r, cols[r]]`.
    pub fn pick_per_row(&self, x: Var, cols: &[usize]) -> Var {
        let xv = self.val(x);
        let c = xv.cols();
        assert_eq!(xv.rows(), cols.len(), "pick_per_row column count");
        let out: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(r, &j)| xv.data()[r * c + j])
            .collect();
        let cols = cols.to_vec();
        let shape_in = xv.shape().to_vec();
        let n = cols.len();
        let back: BackFn = Box::new(move |g, emit| {
            let mut dx = vec![0.0; n * c];
            for (r, &j) in cols.iter().enumerate() {
                dx[r * c + j] = g.data()[r];
            }
            emit(x.id, Tensor::new(shape_in.clone(), dx));
        });
        self.push(Tensor::matrix(n, 1, out), Some(back))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let values: Vec<Tensor> = parts.iter().map(|&p| self.val(p)).collect();
        let c = values[0].cols();
        for v in &values {
            if v.cols() != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: values[0].shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
        }
        let total_rows: usize = values.iter().map(|v| v.rows()).sum();
        let mut out = Vec::with_capacity(total_rows * c);
        for v in &values {
            out.extend_from_slice(v.data());
        }
        let parts_vec: Vec<Var> = parts.to_vec();
        let row_counts: Vec<usize> = values.iter().map(|v| v.rows()).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let back: BackFn = Box::new(move |g, emit| {
            let mut offset = 0;
            for (i, &p) in parts_vec.iter().enumerate() {
                let n = row_counts[i] * c;
                let slice = g.data()[offset..offset + n].to_vec();
                emit(p.id, Tensor::new(shapes[i].clone(), slice));
                offset += n;
            }
        });
        Ok(self.push(Tensor::matrix(total_rows, c, out), Some(back)))
    }

    // ------------------------------------------------------------------
    // reductions
    // ------------------------------------------------------------------

    /// Sum of all elements, reduced left to right.
    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.val(x);
        let s: f64 = xv.data().iter().sum();
        let shape = xv.shape().to_vec();
        let n = xv.len();
        let back: BackFn = Box::new(move |g, emit| {
            let gv = g.data()[0];
            emit(x.id, Tensor::new(shape.clone(), vec![gv; n]));
        });
        self.push(Tensor::scalar(s), Some(back))
    }

    /// Mean squared difference over all elements.
    pub fn mse_mean(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.val(a);
        let bv = self.val(b);
        if !av.same_shape(&bv) {
            return Err(Error::ShapeMismatch {
                op: "mse_mean",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let n = av.len() as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let back: BackFn = Box::new(move |g, emit| {
            let gv = g.data()[0];
            let da: Vec<f64> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| gv * 2.0 * (x - y) / n)
                .collect();
            let db: Vec<f64> = da.iter().map(|v| -v).collect();
            emit(a.id, Tensor::new(av.shape().to_vec(), da));
            emit(b.id, Tensor::new(bv.shape().to_vec(), db));
        });
        Ok(self.push(Tensor::scalar(s / n), Some(back)))
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Replays the tape in reverse from a scalar loss, visiting every
    /// recorded operation exactly once and accumulating gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar {
                op: "backward",
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            if let Some(back) = &nodes[id].back {
                let mut emit = |pid: usize, contrib: Tensor| match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                };
                back(&g, &mut emit);
            }
        }
        Ok(Gradients { grads })
    }
}
