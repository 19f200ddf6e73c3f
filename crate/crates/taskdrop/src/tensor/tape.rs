//! Define-by-run gradient tape.
//!
//! A [`Tape`] records one node per operation in creation order, which is
//! already a topological order of the expression graph. [`Tape::backward`]
//! seeds the scalar loss with gradient one and sweeps the record once in
//! reverse, applying each operation's local gradient rule and accumulating
//! into its parents. Only nodes whose ancestry contains a `requires_grad`
//! leaf participate; constants (adjacency matrices, masks, dropout
//! patterns) are recorded as leaves with gradients disabled and cost
//! nothing on the way back.

use super::{matmul_raw, Tensor};
use crate::{Error, Result};

/// Handle to a tape node. Cheap to copy; only valid for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * x + shift`, elementwise; the shift is constant so only
    /// the scale matters going backward.
    Affine(Var, f64),
    Elu(Var),
    Relu(Var),
    /// Rank-1 softmax over the unmasked support with temperature `tau`.
    MaskedSoftmax {
        x: Var,
        mask: Vec<bool>,
        tau: f64,
    },
    /// Independent masked softmax per row of a rank-2 tensor.
    MaskedSoftmaxRows {
        x: Var,
        mask: Vec<bool>,
        tau: f64,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
    },
    Sum(Var),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape; see the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total stored value elements, a direct proxy for tape memory.
    pub fn stored_elements(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0 as usize].value
    }

    /// Gradient of the loss with respect to `v` after [`Tape::backward`].
    /// Tensors the loss never touched get zeros.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0 as usize) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(self.nodes[v.0 as usize].value.shape().to_vec()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(self.nodes.len() < u32::MAX as usize);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0 as usize].requires_grad
    }

    /// Records an input tensor. Gradients flow back into it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a tensor that is constant for differentiation purposes.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                a: ta.shape().to_vec(),
                b: tb.shape().to_vec(),
            });
        }
        let value = matmul_raw(ta, tb);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::BadRank {
                op: "transpose",
                expected: 2,
                shape: ta.shape().to_vec(),
            });
        }
        let value = ta.transposed();
        let rg = self.needs(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn elementwise_pair(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                a: ta.shape().to_vec(),
                b: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("add", a, b)?;
        let value = Tensor {
            shape: self.value(a).shape().to_vec(),
            data: self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("sub", a, b)?;
        let value = Tensor {
            shape: self.value(a).shape().to_vec(),
            data: self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("mul", a, b)?;
        let value = Tensor {
            shape: self.value(a).shape().to_vec(),
            data: self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.needs(x);
        self.push(value, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        let rg = self.needs(x);
        self.push(value, Op::Elu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Softmax with temperature over the unmasked entries of a rank-1
    /// tensor. Masked entries come out exactly zero. The maximum over the
    /// support is subtracted before exponentiation, so adding a constant
    /// to the input moves the result by nothing beyond rounding.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool], tau: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 1 {
            return Err(Error::BadRank {
                op: "masked_softmax",
                expected: 1,
                shape: tx.shape().to_vec(),
            });
        }
        if mask.len() != tx.numel() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                a: tx.shape().to_vec(),
                b: vec![mask.len()],
            });
        }
        let data = softmax_slice(tx.data(), mask, tau)?;
        let value = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        let rg = self.needs(x);
        Ok(self.push(
            value,
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
                tau,
            },
            rg,
        ))
    }

    /// Row-wise masked softmax of a rank-2 tensor; `mask` is row-major
    /// with one flag per entry. Every row needs at least one unmasked
    /// entry.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool], tau: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::BadRank {
                op: "masked_softmax_rows",
                expected: 2,
                shape: tx.shape().to_vec(),
            });
        }
        if mask.len() != tx.numel() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax_rows",
                a: tx.shape().to_vec(),
                b: vec![mask.len()],
            });
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = softmax_slice(&tx.data()[i * c..(i + 1) * c], &mask[i * c..(i + 1) * c], tau)?;
            data[i * c..(i + 1) * c].copy_from_slice(&row);
        }
        let value = Tensor {
            shape: vec![r, c],
            data,
        };
        let rg = self.needs(x);
        Ok(self.push(
            value,
            Op::MaskedSoftmaxRows {
                x,
                mask: mask.to_vec(),
                tau,
            },
            rg,
        ))
    }

    /// Cross-entropy of one sample, computed directly from logits through
    /// a log-sum-exp with maximum subtraction. `logits` is flattened; its
    /// length is the class count.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, label: usize) -> Result<Var> {
        let tl = self.value(logits);
        let classes = tl.numel();
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let m = tl.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + tl.data().iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let value = Tensor::scalar(lse - tl.data()[label]);
        let rg = self.needs(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, label }, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.needs(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat_rows of nothing".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.rank() != 2 || tp.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    a: vec![rows, cols],
                    b: tp.shape().to_vec(),
                });
            }
            rows += tp.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor {
            shape: vec![rows, cols],
            data,
        };
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Picks rows of a rank-2 tensor (or entries of a rank-1 tensor) by
    /// index, in the order given. Indices may repeat; gradients of
    /// repeated rows add up.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (value, bad) = match tx.rank() {
            1 => {
                let n = tx.numel();
                let bad = idx.iter().any(|&i| i >= n);
                let data = if bad {
                    Vec::new()
                } else {
                    idx.iter().map(|&i| tx.data()[i]).collect()
                };
                (
                    Tensor {
                        shape: vec![idx.len()],
                        data,
                    },
                    bad,
                )
            }
            2 => {
                let (r, c) = (tx.rows(), tx.cols());
                let bad = idx.iter().any(|&i| i >= r);
                let mut data = Vec::with_capacity(idx.len() * c);
                if !bad {
                    for &i in idx {
                        data.extend_from_slice(tx.row(i));
                    }
                }
                (
                    Tensor {
                        shape: vec![idx.len(), c],
                        data,
                    },
                    bad,
                )
            }
            _ => {
                return Err(Error::BadRank {
                    op: "gather_rows",
                    expected: 2,
                    shape: tx.shape().to_vec(),
                })
            }
        };
        if bad {
            return Err(Error::Invalid(format!(
                "gather_rows: index out of range for shape {:?}",
                tx.shape()
            )));
        }
        let rg = self.needs(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Reinterprets the storage under a new shape with the same element
    /// count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Arithmetic mean of scalar nodes.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("mean of no scalars".into()));
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(self.scale(acc, 1.0 / parts.len() as f64))
    }

    /// Reverse accumulation from a scalar loss. Re-running replaces any
    /// previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let l = loss.0 as usize;
        if self.nodes[l].value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[l].value.shape().to_vec(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[l].requires_grad {
            return Ok(());
        }
        self.grads[l] = Some(Tensor {
            shape: self.nodes[l].value.shape().to_vec(),
            data: vec![1.0],
        });
        for i in (0..=l).rev() {
            let Some(g) = self.grads[i].clone() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.apply_rule(i, &g);
        }
        Ok(())
    }

    fn apply_rule(&mut self, i: usize, g: &Tensor) {
        // Local rules write into parents through `accum`; parents that do
        // not require gradients are skipped.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bt = self.value(b).transposed();
                    let da = matmul_raw(g, &bt);
                    accum(&mut self.grads, a, da);
                }
                if self.needs(b) {
                    let at = self.value(a).transposed();
                    let db = matmul_raw(&at, g);
                    accum(&mut self.grads, b, db);
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                if self.needs(a) {
                    accum(&mut self.grads, a, g.transposed());
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    accum(&mut self.grads, a, g.clone());
                }
                if self.needs(b) {
                    accum(&mut self.grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    accum(&mut self.grads, a, g.clone());
                }
                if self.needs(b) {
                    accum(&mut self.grads, b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let other = self.value(b);
                    let da = Tensor {
                        shape: g.shape().to_vec(),
                        data: g.data().iter().zip(other.data()).map(|(x, y)| x * y).collect(),
                    };
                    accum(&mut self.grads, a, da);
                }
                if self.needs(b) {
                    let other = self.value(a);
                    let db = Tensor {
                        shape: g.shape().to_vec(),
                        data: g.data().iter().zip(other.data()).map(|(x, y)| x * y).collect(),
                    };
                    accum(&mut self.grads, b, db);
                }
            }
            Op::Affine(x, scale) => {
                let (x, scale) = (*x, *scale);
                if self.needs(x) {
                    accum(&mut self.grads, x, g.map(|v| scale * v));
                }
            }
            Op::Elu(x) => {
                let x = *x;
                if self.needs(x) {
                    let input = self.value(x);
                    let out = &self.nodes[i].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(input.data().iter().zip(out.data()))
                        .map(|(gv, (xv, yv))| if *xv > 0.0 { *gv } else { gv * (yv + 1.0) })
                        .collect();
                    let dx = Tensor {
                        shape: g.shape().to_vec(),
                        data,
                    };
                    accum(&mut self.grads, x, dx);
                }
            }
            Op::Relu(x) => {
                let x = *x;
                if self.needs(x) {
                    let input = self.value(x);
                    let data = g
                        .data()
                        .iter()
                        .zip(input.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    let dx = Tensor {
                        shape: g.shape().to_vec(),
                        data,
                    };
                    accum(&mut self.grads, x, dx);
                }
            }
            Op::MaskedSoftmax { x, mask, tau } => {
                let (x, tau) = (*x, *tau);
                if self.needs(x) {
                    let y = &self.nodes[i].value;
                    let dx = softmax_backward_slice(y.data(), g.data(), mask, tau);
                    accum(
                        &mut self.grads,
                        x,
                        Tensor {
                            shape: y.shape().to_vec(),
                            data: dx,
                        },
                    );
                }
            }
            Op::MaskedSoftmaxRows { x, mask, tau } => {
                let (x, tau) = (*x, *tau);
                if self.needs(x) {
                    let y = &self.nodes[i].value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        let lo = row * c;
                        let hi = lo + c;
                        let d = softmax_backward_slice(
                            &y.data()[lo..hi],
                            &g.data()[lo..hi],
                            &mask[lo..hi],
                            tau,
                        );
                        dx[lo..hi].copy_from_slice(&d);
                    }
                    accum(
                        &mut self.grads,
                        x,
                        Tensor {
                            shape: y.shape().to_vec(),
                            data: dx,
                        },
                    );
                }
            }
            Op::CrossEntropy { logits, label } => {
                let (logits, label) = (*logits, *label);
                if self.needs(logits) {
                    let tl = self.value(logits);
                    let shape = tl.shape().to_vec();
                    let m = tl.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = tl.data().iter().map(|&v| (v - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let gs = g.data()[0];
                    let data = exps
                        .iter()
                        .enumerate()
                        .map(|(j, e)| gs * (e / z - if j == label { 1.0 } else { 0.0 }))
                        .collect();
                    accum(&mut self.grads, logits, Tensor { shape, data });
                }
            }
            Op::Sum(x) => {
                let x = *x;
                if self.needs(x) {
                    let shape = self.value(x).shape().to_vec();
                    let gs = g.data()[0];
                    accum(&mut self.grads, x, Tensor::full(shape, gs));
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let cols = self.nodes[i].value.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accum(
                            &mut self.grads,
                            p,
                            Tensor {
                                shape: vec![rows, cols],
                                data: slice,
                            },
                        );
                    }
                    offset += rows;
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                if self.needs(x) {
                    let src = self.value(x);
                    let mut dx = Tensor::zeros(src.shape().to_vec());
                    if src.rank() == 1 {
                        for (r, &i) in idx.iter().enumerate() {
                            dx.data_mut()[i] += g.data()[r];
                        }
                    } else {
                        let c = src.cols();
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..c {
                                dx.data_mut()[i * c + j] += g.data()[r * c + j];
                            }
                        }
                    }
                    accum(&mut self.grads, x, dx);
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                if self.needs(x) {
                    let shape = self.value(x).shape().to_vec();
                    let dx = Tensor {
                        shape,
                        data: g.data().to_vec(),
                    };
                    accum(&mut self.grads, x, dx);
                }
            }
        }
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0 as usize] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(delta),
    }
}

/// Forward masked softmax on one slice. Errors when the support is empty.
pub(crate) fn softmax_slice(x: &[f64], mask: &[bool], tau: f64) -> Result<Vec<f64>> {
    let mut m = f64::NEG_INFINITY;
    for (v, &keep) in x.iter().zip(mask) {
        if keep && *v > m {
            m = *v;
        }
    }
    if m == f64::NEG_INFINITY {
        return Err(Error::EmptySupport);
    }
    let mut out = vec![0.0; x.len()];
    let mut z = 0.0;
    for (i, (v, &keep)) in x.iter().zip(mask).enumerate() {
        if keep {
            let e = ((v - m) / tau).exp();
            out[i] = e;
            z += e;
        }
    }
    for o in &mut out {
        *o /= z;
    }
    Ok(out)
}

/// d x from d y for one softmax slice: `dx_j = y_j (g_j - sum_k g_k y_k) / tau`.
fn softmax_backward_slice(y: &[f64], g: &[f64], mask: &[bool], tau: f64) -> Vec<f64> {
    let dot: f64 = y
        .iter()
        .zip(g)
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|((yv, gv), _)| yv * gv)
        .sum();
    y.iter()
        .zip(g)
        .zip(mask)
        .map(|((yv, gv), &keep)| if keep { yv * (gv - dot) / tau } else { 0.0 })
        .collect()
}
