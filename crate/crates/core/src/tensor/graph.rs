//! Tape-based reverse-mode differentiation over the [`Tensor`] op set.

use std::collections::HashMap;
use std::rc::Rc;

use super::ops::{gelu_grad_scalar, gemm_acc, log_softmax, LayerNormCache, Transpose};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    MaskedFill {
        x: Var,
        mask: Rc<[bool]>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape. Build the forward pass with the op
/// methods, then call [`Graph::backward`] on a scalar output.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: HashMap<usize, Tensor>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient of the parameter registered under `slot`, if it was reachable.
    pub fn param(&self, slot: usize) -> Option<&Tensor> {
        self.params.get(&slot)
    }

    pub fn leaf(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn into_params(self) -> HashMap<usize, Tensor> {
        self.params
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A free variable whose gradient is reported through [`Gradients::leaf`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A trainable parameter; its gradient is reported under `slot`.
    pub fn param(&mut self, slot: usize, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(slot), true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.value(b).scale(-1.0)?;
        let out = self.value(a).add(&neg)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(bias))?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).scale(factor)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Scale(x, factor), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let src = self.value(x);
        let out = src.with_shape_of(src.data().iter().map(|v| v + c).collect());
        out.check_finite("add_scalar")?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AddScalar(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) =
            self.value(x)
                .layer_norm_cached(self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (out, tanh) = self.value(x).gelu_cached()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gelu { x, tanh }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let out = src.with_shape_of(src.data().iter().map(|v| v.max(0.0)).collect());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let out = src.with_shape_of(src.data().iter().map(|&v| sigmoid(v)).collect());
        out.check_finite("sigmoid")?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sigmoid(x), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let out = self.value(table).embedding_lookup(ids)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn masked_fill(&mut self, x: Var, mask: Rc<[bool]>, value: f64) -> Result<Var> {
        let out = self.value(x).masked_fill(&mask, value)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskedFill { x, mask }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2();
        if start + len > c || len == 0 {
            return Err(Error::Index {
                index: start + len,
                len: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(*p).shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::matrix(rows, total, data);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2();
        if rows.is_empty() {
            return Err(Error::Contract("select_rows of no rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index { index: i, len: r });
            }
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::matrix(rows.len(), c, data);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let out = Tensor::scalar(s);
        out.check_finite("sum")?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    /// Mean over rows of `-log softmax(logits_row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let src = self.value(logits);
        let (r, c) = src.dims2();
        if targets.len() != r {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: src.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = Vec::with_capacity(r * c);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Label {
                    label: t,
                    classes: c,
                });
            }
            let lp = log_softmax(src.row(i));
            loss -= lp[t];
            probs.extend(lp.iter().map(|v| v.exp()));
        }
        let out = Tensor::scalar(loss / r as f64);
        out.check_finite("cross_entropy")?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant | Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let n = self.value(*b).cols();
                    let bv = self.value(*b).data();
                    let av = self.value(*a).data();
                    self.acc(&mut grads, *a, |ga| {
                        gemm_acc(m, n, k, 1.0, &g, Transpose::No, bv, Transpose::Yes, ga)
                    });
                    self.acc(&mut grads, *b, |gb| {
                        gemm_acc(k, m, n, 1.0, av, Transpose::Yes, &g, Transpose::No, gb)
                    });
                }
                Op::MatMulT(a, b) => {
                    // out[m,n] = a[m,k] b[n,k]^T
                    let (m, k) = self.value(*a).dims2();
                    let n = self.value(*b).rows();
                    let bv = self.value(*b).data();
                    let av = self.value(*a).data();
                    self.acc(&mut grads, *a, |ga| {
                        gemm_acc(m, n, k, 1.0, &g, Transpose::No, bv, Transpose::No, ga)
                    });
                    self.acc(&mut grads, *b, |gb| {
                        gemm_acc(n, m, k, 1.0, &g, Transpose::Yes, av, Transpose::No, gb)
                    });
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |ga| axpy(ga, &g, 1.0));
                    self.acc(&mut grads, *b, |gb| axpy(gb, &g, 1.0));
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |ga| axpy(ga, &g, 1.0));
                    self.acc(&mut grads, *b, |gb| axpy(gb, &g, -1.0));
                }
                Op::AddRow(x, bias) => {
                    let c = self.value(*x).cols();
                    self.acc(&mut grads, *x, |gx| axpy(gx, &g, 1.0));
                    self.acc(&mut grads, *bias, |gb| {
                        for row in g.chunks(c) {
                            axpy(gb, row, 1.0);
                        }
                    });
                }
                Op::Scale(x, f) => {
                    self.acc(&mut grads, *x, |gx| axpy(gx, &g, *f));
                }
                Op::AddScalar(x) => {
                    self.acc(&mut grads, *x, |gx| axpy(gx, &g, 1.0));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let c = self.value(*x).cols();
                    let gam = self.value(*gamma).data();
                    self.acc(&mut grads, *gamma, |gg| {
                        for (grow, hrow) in g.chunks(c).zip(cache.xhat.chunks(c)) {
                            for j in 0..c {
                                gg[j] += grow[j] * hrow[j];
                            }
                        }
                    });
                    self.acc(&mut grads, *beta, |gb| {
                        for grow in g.chunks(c) {
                            axpy(gb, grow, 1.0);
                        }
                    });
                    self.acc(&mut grads, *x, |gx| {
                        let mut dxhat = vec![0.0; c];
                        for (i, ((grow, hrow), gxrow)) in g
                            .chunks(c)
                            .zip(cache.xhat.chunks(c))
                            .zip(gx.chunks_mut(c))
                            .enumerate()
                        {
                            let mut sum_d = 0.0;
                            let mut sum_dh = 0.0;
                            for j in 0..c {
                                dxhat[j] = grow[j] * gam[j];
                                sum_d += dxhat[j];
                                sum_dh += dxhat[j] * hrow[j];
                            }
                            let inv = cache.inv_std[i];
                            let cf = c as f64;
                            for j in 0..c {
                                gxrow[j] += inv / cf * (cf * dxhat[j] - sum_d - hrow[j] * sum_dh);
                            }
                        }
                    });
                }
                Op::Gelu { x, tanh } => {
                    let xv = self.value(*x).data();
                    self.acc(&mut grads, *x, |gx| {
                        for (((o, gi), xi), t) in gx.iter_mut().zip(&g).zip(xv).zip(tanh) {
                            *o += gi * gelu_grad_scalar(*xi, *t);
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    self.acc(&mut grads, *x, |gx| {
                        for ((o, gi), xi) in gx.iter_mut().zip(&g).zip(xv) {
                            if *xi > 0.0 {
                                *o += gi;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    self.acc(&mut grads, *x, |gx| {
                        for ((o, gi), yi) in gx.iter_mut().zip(&g).zip(y) {
                            *o += gi * yi * (1.0 - yi);
                        }
                    });
                }
                Op::SoftmaxRows(x) => {
                    let c = node.value.cols();
                    let y = node.value.data();
                    self.acc(&mut grads, *x, |gx| {
                        for ((grow, yrow), orow) in
                            g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                orow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let d = self.value(*table).cols();
                    self.acc(&mut grads, *table, |gt| {
                        for (row, &id) in g.chunks(d).zip(ids) {
                            let id = id as usize;
                            axpy(&mut gt[id * d..(id + 1) * d], row, 1.0);
                        }
                    });
                }
                Op::MaskedFill { x, mask } => {
                    self.acc(&mut grads, *x, |gx| {
                        for ((o, gi), m) in gx.iter_mut().zip(&g).zip(mask.iter()) {
                            if !m {
                                *o += gi;
                            }
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let c = self.value(*x).cols();
                    let len = node.value.cols();
                    self.acc(&mut grads, *x, |gx| {
                        for (grow, orow) in g.chunks(len).zip(gx.chunks_mut(c)) {
                            axpy(&mut orow[*start..*start + len], grow, 1.0);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        self.acc(&mut grads, *p, |gp| {
                            for (grow, orow) in g.chunks(total).zip(gp.chunks_mut(w)) {
                                axpy(orow, &grow[offset..offset + w], 1.0);
                            }
                        });
                        offset += w;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let c = self.value(*x).cols();
                    self.acc(&mut grads, *x, |gx| {
                        for (grow, &r) in g.chunks(c).zip(rows) {
                            axpy(&mut gx[r * c..(r + 1) * c], grow, 1.0);
                        }
                    });
                }
                Op::Sum(x) => {
                    let s = g[0];
                    self.acc(&mut grads, *x, |gx| {
                        for o in gx.iter_mut() {
                            *o += s;
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = self.value(*logits).cols();
                    let scale = g[0] / targets.len() as f64;
                    self.acc(&mut grads, *logits, |gl| {
                        for (i, &t) in targets.iter().enumerate() {
                            let row = &mut gl[i * c..(i + 1) * c];
                            for j in 0..c {
                                row[j] += scale * probs[i * c + j];
                            }
                            row[t] -= scale;
                        }
                    });
                }
            }
        }

        let mut params = HashMap::new();
        let mut leaves = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            let Some(g) = grads[idx].take() else { continue };
            let t = node.value.with_shape_of(g);
            match node.op {
                Op::Param(slot) => {
                    t.check_finite("gradient")?;
                    match params.get_mut(&slot) {
                        Some(existing) => {
                            let existing: &mut Tensor = existing;
                            axpy(existing.data_mut(), t.data(), 1.0);
                        }
                        None => {
                            params.insert(slot, t);
                        }
                    }
                }
                Op::Leaf => {
                    leaves.insert(Var(idx), t);
                }
                _ => {}
            }
        }
        Ok(Gradients { params, leaves })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
