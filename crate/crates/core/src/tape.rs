//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Tape`] records every primitive op in execution order (which is already
//! a topological order), holding each node's forward value. [`Var`] is a copyable
//! handle to a node. `Var::backward` walks the tape once in reverse, fills
//! per-node gradient buffers, and accumulates gradients into the [`Param`]
//! leaves that requested them.
//!
//! The op set is deliberately small: everything the encoder, heads and losses
//! need, nothing more. All rearrangements (patch partition, windowing, cyclic
//! shifts, head splits) are expressed through `gather`, whose backward is a
//! scatter-add, so index bookkeeping lives outside the engine.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::TensorError;
use crate::tensor::Param;

const GELU_COEF: f32 = 0.044715;

// ── Raw matmul kernels ──────────────────────────────────────────────

/// c[m×n] += a[m×k] · b[k×n]
pub(crate) fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ (rows of `b` are dotted with rows of `a`)
pub(crate) fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn mm_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize, c: &mut [f32]) {
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

// ── Tape ────────────────────────────────────────────────────────────

enum Op {
    Leaf(Option<Param>),
    Constant,
    Add {
        a: usize,
        b: usize,
    },
    /// out[i] = x[i] + tile[i % tile_len]; broadcasts bias rows, attention
    /// masks and relative-position bias over any leading grouping.
    AddTiled {
        x: usize,
        tile: usize,
    },
    Scale {
        x: usize,
        c: f32,
    },
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    /// out[i] = x[idx[i]]; backward scatter-adds, so indices may repeat.
    Gather {
        x: usize,
        idx: Rc<Vec<u32>>,
    },
    Reshape {
        x: usize,
    },
    SoftmaxLast {
        x: usize,
        row: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        dim: usize,
    },
    Gelu {
        x: usize,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    /// Mean over the second-to-last axis: [.., n, d] -> [.., d].
    MeanPool {
        x: usize,
        rows: usize,
        cols: usize,
    },
    SumAll {
        x: usize,
    },
    /// Summed binary cross-entropy on logits against constant targets.
    BceLogitsSum {
        x: usize,
        targets: Rc<Vec<f32>>,
    },
    /// Summed softmax cross-entropy of [rows × k] logits vs class indices.
    CeLogitsSum {
        x: usize,
        classes: Rc<Vec<usize>>,
        k: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
    op: Op,
    /// Saved per-row (mean, rstd) for layer norm.
    aux: Option<Vec<f32>>,
}

/// Records one forward pass; rebuilt per step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Copyable handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool, op: Op) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
            aux: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Register a parameter leaf. Its current value is copied onto the tape;
    /// backward will accumulate into the parameter's grad buffer if it is
    /// trainable.
    pub fn leaf(&self, param: &Param) -> Var<'_> {
        let (shape, data, rg) = {
            let t = param.borrow();
            (t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
        };
        self.push(shape, data, rg, Op::Leaf(Some(param.clone())))
    }

    /// Non-learnable input (images, masks, targets).
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var<'_>, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(self.push(shape, data, false, Op::Constant))
    }

    pub fn scalar(&self, v: f32) -> Var<'_> {
        self.push(vec![1], vec![v], false, Op::Constant)
    }

    fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.nodes.borrow()[id])
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_node(self.id, |n| n.shape.clone())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_node(self.id, |n| n.data.len())
    }

    /// Clone of the forward value.
    pub fn value(&self) -> Vec<f32> {
        self.tape.with_node(self.id, |n| n.data.clone())
    }

    /// Scalar forward value.
    pub fn item(&self) -> f32 {
        self.tape.with_node(self.id, |n| {
            debug_assert_eq!(n.data.len(), 1);
            n.data[0]
        })
    }

    /// Gradient of the last backward pass w.r.t. this node, if it was reached.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.tape.with_node(self.id, |n| n.grad.clone())
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    // ── primitive ops ───────────────────────────────────────────────

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(other);
        let nodes = self.tape.nodes.borrow();
        let (xa, xb) = (&nodes[self.id], &nodes[other.id]);
        if xa.shape != xb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: xa.shape.clone(),
                rhs: xb.shape.clone(),
            });
        }
        let data: Vec<f32> = xa.data.iter().zip(&xb.data).map(|(a, b)| a + b).collect();
        let shape = xa.shape.clone();
        let ng = xa.needs_grad || xb.needs_grad;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            data,
            ng,
            Op::Add {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Add `tile` cyclically: out[i] = self[i] + tile[i % tile.len()].
    /// `tile.len()` must divide `self.len()`.
    pub fn add_tiled(&self, tile: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(tile);
        let nodes = self.tape.nodes.borrow();
        let (x, t) = (&nodes[self.id], &nodes[tile.id]);
        let tl = t.data.len();
        if tl == 0 || x.data.len() % tl != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_tiled",
                lhs: x.shape.clone(),
                rhs: t.shape.clone(),
            });
        }
        let mut data = x.data.clone();
        for chunk in data.chunks_exact_mut(tl) {
            for (d, &tv) in chunk.iter_mut().zip(&t.data) {
                *d += tv;
            }
        }
        let shape = x.shape.clone();
        let ng = x.needs_grad || t.needs_grad;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            data,
            ng,
            Op::AddTiled {
                x: self.id,
                tile: tile.id,
            },
        ))
    }

    pub fn scale(&self, c: f32) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id];
        let data: Vec<f32> = x.data.iter().map(|v| v * c).collect();
        let shape = x.shape.clone();
        let ng = x.needs_grad;
        drop(nodes);
        self.tape.push(shape, data, ng, Op::Scale { x: self.id, c })
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.add(&other.scale(-1.0))
    }

    /// 2-D matrix product [m×k]·[k×n].
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(other);
        let nodes = self.tape.nodes.borrow();
        let (xa, xb) = (&nodes[self.id], &nodes[other.id]);
        let ok = xa.shape.len() == 2 && xb.shape.len() == 2 && xa.shape[1] == xb.shape[0];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: xa.shape.clone(),
                rhs: xb.shape.clone(),
            });
        }
        let (m, k, n) = (xa.shape[0], xa.shape[1], xb.shape[1]);
        let mut data = vec![0.0f32; m * n];
        mm_nn(&xa.data, &xb.data, m, k, n, &mut data);
        let ng = xa.needs_grad || xb.needs_grad;
        drop(nodes);
        Ok(self.tape.push(
            vec![m, n],
            data,
            ng,
            Op::Matmul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        ))
    }

    /// Batched matmul on [g×m×k]; `other` is [g×k×n], or [g×n×k] when
    /// `transpose_b` (used for Q·Kᵀ).
    pub fn bmm(&self, other: &Var<'t>, transpose_b: bool) -> Result<Var<'t>, TensorError> {
        self.same_tape(other);
        let nodes = self.tape.nodes.borrow();
        let (xa, xb) = (&nodes[self.id], &nodes[other.id]);
        let bad = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: xa.shape.clone(),
            rhs: xb.shape.clone(),
        };
        if xa.shape.len() != 3 || xb.shape.len() != 3 || xa.shape[0] != xb.shape[0] {
            return Err(bad());
        }
        let (g, m, k) = (xa.shape[0], xa.shape[1], xa.shape[2]);
        let n = if transpose_b {
            if xb.shape[2] != k {
                return Err(bad());
            }
            xb.shape[1]
        } else {
            if xb.shape[1] != k {
                return Err(bad());
            }
            xb.shape[2]
        };
        let mut data = vec![0.0f32; g * m * n];
        for gi in 0..g {
            let a = &xa.data[gi * m * k..(gi + 1) * m * k];
            let b = &xb.data[gi * k * n..(gi + 1) * k * n];
            let c = &mut data[gi * m * n..(gi + 1) * m * n];
            if transpose_b {
                mm_nt(a, b, m, k, n, c);
            } else {
                mm_nn(a, b, m, k, n, c);
            }
        }
        let ng = xa.needs_grad || xb.needs_grad;
        drop(nodes);
        Ok(self.tape.push(
            vec![g, m, n],
            data,
            ng,
            Op::Bmm {
                a: self.id,
                b: other.id,
                batch: g,
                m,
                k,
                n,
                transpose_b,
            },
        ))
    }

    /// Elementwise gather into `out_shape`: out[i] = self[idx[i]].
    pub fn gather(&self, idx: Rc<Vec<u32>>, out_shape: Vec<usize>) -> Result<Var<'t>, TensorError> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id];
        let out_len: usize = out_shape.iter().product();
        if out_len != idx.len() {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("out shape {out_shape:?} vs {} indices", idx.len()),
            });
        }
        let src_len = x.data.len() as u32;
        if idx.iter().any(|&i| i >= src_len) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index out of bounds for source of {src_len}"),
            });
        }
        let data: Vec<f32> = idx.iter().map(|&i| x.data[i as usize]).collect();
        let ng = x.needs_grad;
        drop(nodes);
        Ok(self
            .tape
            .push(out_shape, data, ng, Op::Gather { x: self.id, idx }))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>, TensorError> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id];
        let expected: usize = shape.iter().product();
        if expected != x.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: x.data.len(),
            });
        }
        let data = x.data.clone();
        let ng = x.needs_grad;
        drop(nodes);
        Ok(self.tape.push(shape, data, ng, Op::Reshape { x: self.id }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id];
        let row = *x.shape.last().expect("softmax on empty shape");
        let mut data = x.data.clone();
        for chunk in data.chunks_exact_mut(row) {
            let max = chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for v in chunk.iter_mut() {
                *v = (*v - max).exp();
                sum += *v as f64;
            }
            let inv = (1.0 / sum) as f32;
            for v in chunk.iter_mut() {
                *v *= inv;
            }
        }
        let shape = x.shape.clone();
        let ng = x.needs_grad;
        drop(nodes);
        self.tape
            .push(shape, data, ng, Op::SoftmaxLast { x: self.id, row })
    }

    /// Softmax over an arbitrary axis, routed through gathers when the axis
    /// is not the innermost one.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        if axis == shape.len() - 1 {
            return Ok(self.softmax_last());
        }
        let (fwd, rev, moved) = axis_to_last(&shape, axis);
        let y = self.gather(Rc::new(fwd), moved)?.softmax_last();
        y.gather(Rc::new(rev), shape)
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        eps: f32,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let nodes = self.tape.nodes.borrow();
        let (x, g, b) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
        let dim = *x.shape.last().unwrap_or(&0);
        if dim == 0 || g.data.len() != dim || b.data.len() != dim {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape.clone(),
                rhs: g.shape.clone(),
            });
        }
        let rows = x.data.len() / dim;
        let mut data = vec![0.0f32; x.data.len()];
        let mut aux = Vec::with_capacity(rows * 2);
        for r in 0..rows {
            let xin = &x.data[r * dim..(r + 1) * dim];
            let mut mean = 0.0f64;
            for &v in xin {
                mean += v as f64;
            }
            mean /= dim as f64;
            let mut var = 0.0f64;
            for &v in xin {
                let d = v as f64 - mean;
                var += d * d;
            }
            var /= dim as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            let (mean, rstd) = (mean as f32, rstd as f32);
            let out = &mut data[r * dim..(r + 1) * dim];
            for (o, ((&v, &gv), &bv)) in out.iter_mut().zip(xin.iter().zip(&g.data).zip(&b.data)) {
                *o = (v - mean) * rstd * gv + bv;
            }
            aux.push(mean);
            aux.push(rstd);
        }
        let shape = x.shape.clone();
        let ng = x.needs_grad || g.needs_grad || b.needs_grad;
        drop(nodes);
        let out = self.tape.push(
            shape,
            data,
            ng,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                dim,
            },
        );
        self.tape.nodes.borrow_mut()[out.id].aux = Some(aux);
        Ok(out)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id];
        let data: Vec<f32> = x
            .data
            .iter()
            .map(|&v| {
                let u = (2.0 / std::f32::consts::PI).sqrt() * (v + GELU_COEF * v * v * v);
                0.5 * v * (1.0 + u.tanh())
            })
            .collect();
        let shape = x.shape.clone();
        let ng = x.needs_grad;
        drop(nodes);
        self.tape.push(shape, data, ng, Op::Gelu { x: self.id })
    }

    pub fn relu(&self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id];
        let data: Vec<f32> = x.data.iter().map(|&v| v.max(0.0)).collect();
        let shape = x.shape.clone();
        let ng = x.needs_grad;
        drop(nodes);
        self.tape.push(shape, data, ng, Op::Relu { x: self.id })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id];
        let data: Vec<f32> = x.data.iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = x.shape.clone();
        let ng = x.needs_grad;
        drop(nodes);
        self.tape.push(shape, data, ng, Op::Sigmoid { x: self.id })
    }

    /// Mean over the token axis: [.., n, d] -> [.., d].
    pub fn mean_pool(&self) -> Result<Var<'t>, TensorError> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id];
        if x.shape.len() < 2 {
            return Err(TensorError::Invalid {
                op: "mean_pool",
                msg: format!("needs at least 2 dims, got {:?}", x.shape),
            });
        }
        let cols = x.shape[x.shape.len() - 1];
        let rows = x.shape[x.shape.len() - 2];
        let groups = x.data.len() / (rows * cols);
        let mut data = vec![0.0f32; groups * cols];
        for gi in 0..groups {
            let src = &x.data[gi * rows * cols..(gi + 1) * rows * cols];
            let dst = &mut data[gi * cols..(gi + 1) * cols];
            for c in 0..cols {
                let mut acc = 0.0f64;
                for r in 0..rows {
                    acc += src[r * cols + c] as f64;
                }
                dst[c] = (acc / rows as f64) as f32;
            }
        }
        let mut shape = x.shape.clone();
        shape.remove(shape.len() - 2);
        let ng = x.needs_grad;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            data,
            ng,
            Op::MeanPool {
                x: self.id,
                rows,
                cols,
            },
        ))
    }

    pub fn sum_all(&self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id];
        let mut acc = 0.0f64;
        for &v in &x.data {
            acc += v as f64;
        }
        let ng = x.needs_grad;
        drop(nodes);
        self.tape
            .push(vec![1], vec![acc as f32], ng, Op::SumAll { x: self.id })
    }

    /// Σ over elements of a numerically stable BCE-with-logits against
    /// constant targets in [0,1].
    pub fn bce_with_logits_sum(&self, targets: Rc<Vec<f32>>) -> Result<Var<'t>, TensorError> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id];
        if targets.len() != x.data.len() {
            return Err(TensorError::Invalid {
                op: "bce_with_logits_sum",
                msg: format!("{} logits vs {} targets", x.data.len(), targets.len()),
            });
        }
        let mut acc = 0.0f64;
        for (&z, &t) in x.data.iter().zip(targets.iter()) {
            let loss = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            acc += loss as f64;
        }
        let ng = x.needs_grad;
        drop(nodes);
        Ok(self.tape.push(
            vec![1],
            vec![acc as f32],
            ng,
            Op::BceLogitsSum {
                x: self.id,
                targets,
            },
        ))
    }

    /// Σ over rows of softmax cross-entropy of [rows × k] logits against
    /// integer class labels.
    pub fn cross_entropy_sum(&self, classes: Rc<Vec<usize>>) -> Result<Var<'t>, TensorError> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id];
        let k = *x.shape.last().unwrap_or(&0);
        let rows = x.data.len().checked_div(k).unwrap_or(0);
        if k == 0 || rows != classes.len() || classes.iter().any(|&c| c >= k) {
            return Err(TensorError::Invalid {
                op: "cross_entropy_sum",
                msg: format!("shape {:?} with {} labels", x.shape, classes.len()),
            });
        }
        let mut acc = 0.0f64;
        for (r, &cls) in classes.iter().enumerate() {
            let row = &x.data[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut lse = 0.0f64;
            for &v in row {
                lse += ((v - max) as f64).exp();
            }
            acc += lse.ln() + max as f64 - row[cls] as f64;
        }
        let ng = x.needs_grad;
        drop(nodes);
        Ok(self.tape.push(
            vec![1],
            vec![acc as f32],
            ng,
            Op::CeLogitsSum {
                x: self.id,
                classes,
                k,
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Node gradients are rebuilt from
    /// scratch; parameter gradients accumulate across calls until
    /// `zero_grad`.
    pub fn backward(&self) -> Result<(), TensorError> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].data.len() != 1 {
            return Err(TensorError::NonScalar {
                op: "backward",
                shape: nodes[self.id].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);

        for i in (0..=self.id).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else { continue };
            if !nodes[i].needs_grad {
                continue;
            }
            fn sink(slot: &mut Option<Vec<f32>>, len: usize) -> &mut [f32] {
                slot.get_or_insert_with(|| vec![0.0; len])
            }
            match &nodes[i].op {
                Op::Leaf(_) | Op::Constant => {}
                Op::Add { a, b } => {
                    for &p in [a, b].iter() {
                        if nodes[*p].needs_grad {
                            let dst = sink(&mut before[*p], g.len());
                            for (d, &gv) in dst.iter_mut().zip(g) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::AddTiled { x, tile } => {
                    if nodes[*x].needs_grad {
                        let dst = sink(&mut before[*x], g.len());
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                    if nodes[*tile].needs_grad {
                        let tl = nodes[*tile].data.len();
                        let dst = sink(&mut before[*tile], tl);
                        for (f, &gv) in g.iter().enumerate() {
                            dst[f % tl] += gv;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if nodes[*x].needs_grad {
                        let dst = sink(&mut before[*x], g.len());
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += gv * c;
                        }
                    }
                }
                Op::Matmul { a, b, m, k, n } => {
                    if nodes[*a].needs_grad {
                        let dst = sink(&mut before[*a], m * k);
                        mm_nt(g, &nodes[*b].data, *m, *n, *k, dst);
                    }
                    if nodes[*b].needs_grad {
                        let dst = sink(&mut before[*b], k * n);
                        mm_tn(&nodes[*a].data, g, *m, *k, *n, dst);
                    }
                }
                Op::Bmm {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    transpose_b,
                } => {
                    let (gm, gk, gn) = (*m, *k, *n);
                    if nodes[*a].needs_grad {
                        let dst = sink(&mut before[*a], batch * m * k);
                        for gi in 0..*batch {
                            let gg = &g[gi * gm * gn..(gi + 1) * gm * gn];
                            let bb = &nodes[*b].data[gi * gk * gn..(gi + 1) * gk * gn];
                            let da = &mut dst[gi * gm * gk..(gi + 1) * gm * gk];
                            if *transpose_b {
                                // c = a·bᵀ with b[n×k]: da = g·b
                                mm_nn(gg, bb, gm, gn, gk, da);
                            } else {
                                mm_nt(gg, bb, gm, gn, gk, da);
                            }
                        }
                    }
                    if nodes[*b].needs_grad {
                        let dst = sink(&mut before[*b], batch * k * n);
                        for gi in 0..*batch {
                            let gg = &g[gi * gm * gn..(gi + 1) * gm * gn];
                            let aa = &nodes[*a].data[gi * gm * gk..(gi + 1) * gm * gk];
                            let db = &mut dst[gi * gk * gn..(gi + 1) * gk * gn];
                            if *transpose_b {
                                // db[j,l] = Σ_i g[i,j]·a[i,l]
                                mm_tn(gg, aa, gm, gn, gk, db);
                            } else {
                                mm_tn(aa, gg, gm, gk, gn, db);
                            }
                        }
                    }
                }
                Op::Gather { x, idx } => {
                    if nodes[*x].needs_grad {
                        let dst = sink(&mut before[*x], nodes[*x].data.len());
                        for (&src_idx, &gv) in idx.iter().zip(g) {
                            dst[src_idx as usize] += gv;
                        }
                    }
                }
                Op::Reshape { x } => {
                    if nodes[*x].needs_grad {
                        let dst = sink(&mut before[*x], g.len());
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
                Op::SoftmaxLast { x, row } => {
                    if nodes[*x].needs_grad {
                        let y = &nodes[i].data;
                        let dst = sink(&mut before[*x], g.len());
                        for r in 0..g.len() / row {
                            let ys = &y[r * row..(r + 1) * row];
                            let gs = &g[r * row..(r + 1) * row];
                            let ds = &mut dst[r * row..(r + 1) * row];
                            let mut dot = 0.0f64;
                            for (&yv, &gv) in ys.iter().zip(gs) {
                                dot += (yv * gv) as f64;
                            }
                            let dot = dot as f32;
                            for ((d, &yv), &gv) in ds.iter_mut().zip(ys).zip(gs) {
                                *d += yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    dim,
                } => {
                    let aux = nodes[i].aux.as_ref().expect("layer_norm aux");
                    let d = *dim;
                    let rows = g.len() / d;
                    let xv = &nodes[*x].data;
                    let gammav = &nodes[*gamma].data;
                    if nodes[*beta].needs_grad {
                        let dst = sink(&mut before[*beta], d);
                        for r in 0..rows {
                            for (dv, &gv) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                                *dv += gv;
                            }
                        }
                    }
                    if nodes[*gamma].needs_grad {
                        let dst = sink(&mut before[*gamma], d);
                        for r in 0..rows {
                            let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                            let xs = &xv[r * d..(r + 1) * d];
                            let gs = &g[r * d..(r + 1) * d];
                            for ((dv, &xi), &gv) in dst.iter_mut().zip(xs).zip(gs) {
                                *dv += gv * (xi - mean) * rstd;
                            }
                        }
                    }
                    if nodes[*x].needs_grad {
                        let dst = sink(&mut before[*x], g.len());
                        for r in 0..rows {
                            let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                            let xs = &xv[r * d..(r + 1) * d];
                            let gs = &g[r * d..(r + 1) * d];
                            let ds = &mut dst[r * d..(r + 1) * d];
                            let mut sum_gg = 0.0f64;
                            let mut sum_ggx = 0.0f64;
                            for ((&xi, &gv), &ga) in xs.iter().zip(gs).zip(gammav) {
                                let gg = (gv * ga) as f64;
                                sum_gg += gg;
                                sum_ggx += gg * ((xi - mean) * rstd) as f64;
                            }
                            let mg = (sum_gg / d as f64) as f32;
                            let mgx = (sum_ggx / d as f64) as f32;
                            for ((dv, (&xi, &gv)), &ga) in
                                ds.iter_mut().zip(xs.iter().zip(gs)).zip(gammav)
                            {
                                let xhat = (xi - mean) * rstd;
                                *dv += rstd * (gv * ga - mg - xhat * mgx);
                            }
                        }
                    }
                }
                Op::Gelu { x } => {
                    if nodes[*x].needs_grad {
                        let xs = &nodes[*x].data;
                        let dst = sink(&mut before[*x], g.len());
                        let c = (2.0f32 / std::f32::consts::PI).sqrt();
                        for ((d, &xi), &gv) in dst.iter_mut().zip(xs).zip(g) {
                            let u = c * (xi + GELU_COEF * xi * xi * xi);
                            let t = u.tanh();
                            let du = c * (1.0 + 3.0 * GELU_COEF * xi * xi);
                            let dy = 0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du;
                            *d += gv * dy;
                        }
                    }
                }
                Op::Relu { x } => {
                    if nodes[*x].needs_grad {
                        let xs = &nodes[*x].data;
                        let dst = sink(&mut before[*x], g.len());
                        for ((d, &xi), &gv) in dst.iter_mut().zip(xs).zip(g) {
                            if xi > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    if nodes[*x].needs_grad {
                        let y = &nodes[i].data;
                        let dst = sink(&mut before[*x], g.len());
                        for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(g) {
                            *d += gv * yv * (1.0 - yv);
                        }
                    }
                }
                Op::MeanPool { x, rows, cols } => {
                    if nodes[*x].needs_grad {
                        let dst = sink(&mut before[*x], nodes[*x].data.len());
                        let inv = 1.0 / *rows as f32;
                        let groups = dst.len() / (rows * cols);
                        for gi in 0..groups {
                            let gs = &g[gi * cols..(gi + 1) * cols];
                            let ds = &mut dst[gi * rows * cols..(gi + 1) * rows * cols];
                            for r in 0..*rows {
                                for (c, &gv) in gs.iter().enumerate() {
                                    ds[r * cols + c] += gv * inv;
                                }
                            }
                        }
                    }
                }
                Op::SumAll { x } => {
                    if nodes[*x].needs_grad {
                        let dst = sink(&mut before[*x], nodes[*x].data.len());
                        for d in dst.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::BceLogitsSum { x, targets } => {
                    if nodes[*x].needs_grad {
                        let xs = &nodes[*x].data;
                        let dst = sink(&mut before[*x], xs.len());
                        for ((d, &z), &t) in dst.iter_mut().zip(xs).zip(targets.iter()) {
                            *d += g[0] * (stable_sigmoid(z) - t);
                        }
                    }
                }
                Op::CeLogitsSum { x, classes, k } => {
                    if nodes[*x].needs_grad {
                        let xs = &nodes[*x].data;
                        let dst = sink(&mut before[*x], xs.len());
                        for (r, &cls) in classes.iter().enumerate() {
                            let row = &xs[r * k..(r + 1) * k];
                            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                            let mut lse = 0.0f64;
                            for &v in row {
                                lse += ((v - max) as f64).exp();
                            }
                            let inv = 1.0 / lse;
                            let ds = &mut dst[r * k..(r + 1) * k];
                            for (j, (d, &v)) in ds.iter_mut().zip(row).enumerate() {
                                let p = (((v - max) as f64).exp() * inv) as f32;
                                let t = if j == cls { 1.0 } else { 0.0 };
                                *d += g[0] * (p - t);
                            }
                        }
                    }
                }
            }
        }

        // Flush leaf gradients into their parameters.
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Leaf(Some(param)) = &node.op {
                if node.needs_grad {
                    if let Some(g) = grads[i].as_ref() {
                        param.borrow_mut().accumulate_grad(g);
                    }
                }
            }
        }
        drop(nodes);

        // Keep node gradients queryable (Grad-CAM reads intermediate grads).
        let mut nodes = self.tape.nodes.borrow_mut();
        for (node, g) in nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }
}

fn stable_sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gather indices that move `axis` to the innermost position, plus the
/// inverse indices and the permuted shape.
fn axis_to_last(shape: &[usize], axis: usize) -> (Vec<u32>, Vec<u32>, Vec<usize>) {
    let mid = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total = outer * mid * inner;
    let mut fwd = vec![0u32; total];
    let mut rev = vec![0u32; total];
    for o in 0..outer {
        for m in 0..mid {
            for i in 0..inner {
                let src = (o * mid + m) * inner + i;
                let dst = (o * inner + i) * mid + m;
                fwd[dst] = src as u32;
                rev[src] = dst as u32;
            }
        }
    }
    let mut moved: Vec<usize> = shape.to_vec();
    moved.remove(axis);
    moved.push(mid);
    (fwd, rev, moved)
}
