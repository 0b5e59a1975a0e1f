use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use super::kernels::{self, axpy, dot, matmul_acc, matmul_at_b_acc, transpose};
use super::{Tensor, TensorError};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        src: usize,
        rows: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Blend {
        take_new: Vec<bool>,
        new: usize,
        old: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        seq: usize,
        heads: usize,
        valid: Vec<usize>,
        probs: Vec<f64>,
    },
    Softmax {
        x: usize,
        temperature: f64,
    },
    KlDiv(usize, usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Values are stored eagerly; [`Tape::backward`] walks the record in reverse
/// and accumulates gradients for every node that depends on a parameter.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], j: usize) -> &'a mut Vec<f64> {
    let len = nodes[j].value.len();
    grads[j].get_or_insert_with(|| vec![0.0; len])
}

fn cols_of(shape: &[usize]) -> usize {
    *shape.last().unwrap()
}

fn rows_of(shape: &[usize]) -> usize {
    shape.iter().product::<usize>() / cols_of(shape)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Drops every recorded node. Handles from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::Usage("variable is not recorded on this tape".to_string()));
        }
        Ok(v.idx)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a trainable leaf (gradients will be produced for it).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        let t = Tensor::new(shape, data)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.idx];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.idx].value[0]
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    fn dims2(&self, i: usize, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.nodes[i].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::dim(op, format!("expected 2-D input, got {other:?}"))),
        }
    }

    fn same_shape(&self, a: usize, b: usize, op: &'static str) -> Result<(), TensorError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(TensorError::Shape {
                op,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.nodes[a].value, &self.nodes[b].value, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var, TensorError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape(a, b, op)?;
        let out = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, out, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (x, b) = (self.check(x)?, self.check(bias)?);
        let cols = cols_of(&self.nodes[x].shape);
        if self.nodes[b].value.len() != cols {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.nodes[x].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let mut out = self.nodes[x].value.clone();
        let bias_v = &self.nodes[b].value;
        for row in out.chunks_exact_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(bias_v) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(shape, out, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let x = self.check(x)?;
        let out = self.nodes[x].value.iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(shape, out, Op::Scale(x, c), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Result<Var, TensorError> {
        let x = self.check(x)?;
        let out = self.nodes[x].value.iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(shape, out, op(x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| kernels::gelu(v).0, Op::Gelu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, libm::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid)
    }

    /// Inverted dropout: zeroes entries with probability `rate` and rescales
    /// the survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var, TensorError> {
        let x = self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::domain(
                "dropout",
                format!("rate must be in [0, 1), got {rate}"),
            ));
        }
        if rate == 0.0 {
            return Ok(Var { tape: self.id, idx: x });
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[x].value.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.nodes[x].value.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(shape, out, Op::Dropout { x, mask }, rg))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (x, g, b) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let d = cols_of(&self.nodes[x].shape);
        if self.nodes[g].value.len() != d || self.nodes[b].value.len() != d {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: self.nodes[x].shape.clone(),
                rhs: self.nodes[g].shape.clone(),
            });
        }
        let rows = rows_of(&self.nodes[x].shape);
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let xv = &self.nodes[x].value;
            let gv = &self.nodes[g].value;
            let bv = &self.nodes[b].value;
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv[j] + bv[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(g) || self.rg(b);
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain: g,
                bias: b,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Selects rows of a 2-D source by index (embedding lookup, position pick).
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let s = self.check(src)?;
        let (n, d) = self.dims2(s, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                bound: n,
            });
        }
        if rows.is_empty() {
            return Err(TensorError::dim("gather_rows", "no rows requested"));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        let sv = &self.nodes[s].value;
        for &r in rows {
            out.extend_from_slice(&sv[r * d..(r + 1) * d]);
        }
        let rg = self.rg(s);
        Ok(self.push(
            vec![rows.len(), d],
            out,
            Op::GatherRows {
                src: s,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..end` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let (m, n) = self.dims2(xi, "slice_cols")?;
        if start >= end || end > n {
            return Err(TensorError::dim(
                "slice_cols",
                format!("bad column range {start}..{end} of {n}"),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for row in self.nodes[xi].value.chunks_exact(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let rg = self.rg(xi);
        Ok(self.push(vec![m, w], out, Op::SliceCols { x: xi, start }, rg))
    }

    /// Row-wise select: row `r` comes from `new` when `take_new[r]`, else from `old`.
    pub fn blend_rows(&mut self, take_new: &[bool], new: Var, old: Var) -> Result<Var, TensorError> {
        let (n, o) = (self.check(new)?, self.check(old)?);
        self.same_shape(n, o, "blend_rows")?;
        let (rows, d) = self.dims2(n, "blend_rows")?;
        if take_new.len() != rows {
            return Err(TensorError::dim("blend_rows", "mask length differs from row count"));
        }
        let mut out = Vec::with_capacity(rows * d);
        for (r, &t) in take_new.iter().enumerate() {
            let src = if t { &self.nodes[n].value } else { &self.nodes[o].value };
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(n) || self.rg(o);
        Ok(self.push(
            vec![rows, d],
            out,
            Op::Blend {
                take_new: take_new.to_vec(),
                new: n,
                old: o,
            },
            rg,
        ))
    }

    /// Multi-head causal self-attention over a batch of sequences.
    ///
    /// `q`, `k`, `v` are `[batch·seq, d]` with heads laid out as contiguous
    /// column groups. Query `i` of sample `b` attends to keys
    /// `0..=min(i, valid[b] - 1)`: causal, and never to padding.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        valid: &[usize],
    ) -> Result<Var, TensorError> {
        let (qi, ki, vi) = (self.check(q)?, self.check(k)?, self.check(v)?);
        self.same_shape(qi, ki, "attention")?;
        self.same_shape(qi, vi, "attention")?;
        let (rows, d) = self.dims2(qi, "attention")?;
        let batch = valid.len();
        if heads == 0 || d % heads != 0 || seq == 0 || rows != batch * seq {
            return Err(TensorError::dim(
                "attention",
                format!("rows {rows}, width {d}, heads {heads}, seq {seq}, batch {batch} are inconsistent"),
            ));
        }
        if valid.iter().any(|&l| l == 0 || l > seq) {
            return Err(TensorError::dim("attention", "valid lengths must be in 1..=seq"));
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let (qv, kv, vv) = (&self.nodes[qi].value, &self.nodes[ki].value, &self.nodes[vi].value);
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let base = b * seq;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let last = i.min(valid[b] - 1);
                    let qrow = &qv[(base + i) * d + off..(base + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=last {
                        let krow = &kv[(base + j) * d + off..(base + j) * d + off + dh];
                        let s = dot(qrow, krow) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut sum = 0.0;
                    for j in 0..=last {
                        let e = libm::exp(scores[j] - max);
                        p[j] = e;
                        sum += e;
                    }
                    let orow = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                    for j in 0..=last {
                        p[j] /= sum;
                        axpy(p[j], &vv[(base + j) * d + off..(base + j) * d + off + dh], orow);
                    }
                }
            }
        }
        let rg = self.rg(qi) || self.rg(ki) || self.rg(vi);
        Ok(self.push(
            vec![rows, d],
            out,
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                seq,
                heads,
                valid: valid.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax_with_temperature(&mut self, x: Var, temperature: f64) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let t = self.to_tensor(x);
        let out = kernels::softmax_with_temperature(&t, temperature)?;
        let rg = self.rg(xi);
        Ok(self.push(
            out.shape().to_vec(),
            out.into_data(),
            Op::Softmax { x: xi, temperature },
            rg,
        ))
    }

    /// `(1/n) Σ_i D_KL(p_i ‖ q_i)`; gradients flow to both arguments.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var, TensorError> {
        let (pi, qi) = (self.check(p)?, self.check(q)?);
        let value = kernels::kl_divergence(&self.to_tensor(p), &self.to_tensor(q))?;
        let rg = self.rg(pi) || self.rg(qi);
        Ok(self.push(vec![1], vec![value], Op::KlDiv(pi, qi), rg))
    }

    /// Mean cross-entropy of `logits` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let li = self.check(logits)?;
        let (rows, cols) = self.dims2(li, "cross_entropy")?;
        kernels::check_labels(labels, rows, cols)?;
        let lv = &self.nodes[li].value;
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for ((z, p), &y) in lv.chunks_exact(cols).zip(probs.chunks_exact_mut(cols)).zip(labels) {
            total += kernels::log_sum_exp(z) - z[y];
            kernels::softmax_row(z, 1.0, p);
        }
        let rg = self.rg(li);
        Ok(self.push(
            vec![1],
            vec![total / rows as f64],
            Op::CrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let s = self.nodes[xi].value.iter().sum();
        let rg = self.rg(xi);
        Ok(self.push(vec![1], vec![s], Op::Sum(xi), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x)?;
        let n = self.nodes[xi].value.len() as f64;
        let s = self.nodes[xi].value.iter().sum::<f64>() / n;
        let rg = self.rg(xi);
        Ok(self.push(vec![1], vec![s], Op::Mean(xi), rg))
    }

    /// Replays the tape in reverse from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let want = |j: usize| nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                if want(*a) {
                    let bt = transpose(&nodes[*b].value, k, n);
                    matmul_acc(g, &bt, grad_buf(grads, nodes, *a), m, n, k);
                }
                if want(*b) {
                    matmul_at_b_acc(&nodes[*a].value, g, grad_buf(grads, nodes, *b), m, k, n);
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    axpy(1.0, g, grad_buf(grads, nodes, *a));
                }
                if want(*b) {
                    axpy(1.0, g, grad_buf(grads, nodes, *b));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    axpy(1.0, g, grad_buf(grads, nodes, *a));
                }
                if want(*b) {
                    axpy(-1.0, g, grad_buf(grads, nodes, *b));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = &nodes[*b].value;
                    for ((d, &gi), &y) in grad_buf(grads, nodes, *a).iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if want(*b) {
                    let av = &nodes[*a].value;
                    for ((d, &gi), &x) in grad_buf(grads, nodes, *b).iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if want(*x) {
                    axpy(1.0, g, grad_buf(grads, nodes, *x));
                }
                if want(*b) {
                    let cols = nodes[*b].value.len();
                    let db = grad_buf(grads, nodes, *b);
                    for row in g.chunks_exact(cols) {
                        axpy(1.0, row, db);
                    }
                }
            }
            Op::Scale(x, c) => {
                if want(*x) {
                    axpy(*c, g, grad_buf(grads, nodes, *x));
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let xv = &nodes[*x].value;
                    for ((d, &gi), &xi) in grad_buf(grads, nodes, *x).iter_mut().zip(g).zip(xv) {
                        *d += gi * kernels::gelu(xi).1;
                    }
                }
            }
            Op::Tanh(x) => {
                if want(*x) {
                    for ((d, &gi), &y) in grad_buf(grads, nodes, *x).iter_mut().zip(g).zip(&node.value) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if want(*x) {
                    for ((d, &gi), &y) in grad_buf(grads, nodes, *x).iter_mut().zip(g).zip(&node.value) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if want(*x) {
                    for ((d, &gi), &m) in grad_buf(grads, nodes, *x).iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[*gain].value.len();
                let gv = &nodes[*gain].value;
                if want(*gain) {
                    let dg = grad_buf(grads, nodes, *gain);
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if want(*bias) {
                    let db = grad_buf(grads, nodes, *bias);
                    for grow in g.chunks_exact(d) {
                        axpy(1.0, grow, db);
                    }
                }
                if want(*x) {
                    let dx = grad_buf(grads, nodes, *x);
                    let inv_d = 1.0 / d as f64;
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = grow[j] * gv[j];
                            out[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::GatherRows { src, rows } => {
                if want(*src) {
                    let d = nodes[*src].shape[1];
                    let ds = grad_buf(grads, nodes, *src);
                    for (grow, &r) in g.chunks_exact(d).zip(rows) {
                        axpy(1.0, grow, &mut ds[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if want(*x) {
                    let n = nodes[*x].shape[1];
                    let w = node.shape[1];
                    let dx = grad_buf(grads, nodes, *x);
                    for (r, grow) in g.chunks_exact(w).enumerate() {
                        axpy(1.0, grow, &mut dx[r * n + start..r * n + start + w]);
                    }
                }
            }
            Op::Blend { take_new, new, old } => {
                let d = node.shape[1];
                for (target, pick) in [(*new, true), (*old, false)] {
                    if want(target) {
                        let dt = grad_buf(grads, nodes, target);
                        for (r, &t) in take_new.iter().enumerate() {
                            if t == pick {
                                axpy(1.0, &g[r * d..(r + 1) * d], &mut dt[r * d..(r + 1) * d]);
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                valid,
                probs,
            } => {
                let (seq, heads) = (*seq, *heads);
                let d = nodes[*q].shape[1];
                let dh = d / heads;
                let scale = 1.0 / libm::sqrt(dh as f64);
                let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; seq];
                for (b, &len) in valid.iter().enumerate() {
                    let base = b * seq;
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..seq {
                            let last = i.min(len - 1);
                            let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                            let gout = &g[(base + i) * d + off..(base + i) * d + off + dh];
                            let mut weighted = 0.0;
                            for j in 0..=last {
                                let vrow = &vv[(base + j) * d + off..(base + j) * d + off + dh];
                                dp[j] = dot(gout, vrow);
                                weighted += p[j] * dp[j];
                                axpy(p[j], gout, &mut dv[(base + j) * d + off..(base + j) * d + off + dh]);
                            }
                            let qrow = &qv[(base + i) * d + off..(base + i) * d + off + dh];
                            for j in 0..=last {
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                let krow = &kv[(base + j) * d + off..(base + j) * d + off + dh];
                                axpy(ds, krow, &mut dq[(base + i) * d + off..(base + i) * d + off + dh]);
                                axpy(ds, qrow, &mut dk[(base + j) * d + off..(base + j) * d + off + dh]);
                            }
                        }
                    }
                }
                for (target, delta) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if want(target) {
                        axpy(1.0, &delta, grad_buf(grads, nodes, target));
                    }
                }
            }
            Op::Softmax { x, temperature } => {
                if want(*x) {
                    let c = node.shape[1];
                    let dx = grad_buf(grads, nodes, *x);
                    for ((y, gy), dxr) in node
                        .value
                        .chunks_exact(c)
                        .zip(g.chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                    {
                        let s: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dxr[j] += y[j] * (gy[j] - s) / temperature;
                        }
                    }
                }
            }
            Op::KlDiv(p, q) => {
                let rows = nodes[*p].shape[0] as f64;
                let scale = g[0] / rows;
                let (pv, qv) = (&nodes[*p].value, &nodes[*q].value);
                if want(*q) {
                    for ((d, &pi), &qi) in grad_buf(grads, nodes, *q).iter_mut().zip(pv).zip(qv) {
                        if pi > 0.0 {
                            *d -= scale * pi / qi;
                        }
                    }
                }
                if want(*p) {
                    for ((d, &pi), &qi) in grad_buf(grads, nodes, *p).iter_mut().zip(pv).zip(qv) {
                        if pi > 0.0 {
                            *d += scale * (libm::log(pi / qi) + 1.0);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if want(*logits) {
                    let c = nodes[*logits].shape[1];
                    let scale = g[0] / labels.len() as f64;
                    let dl = grad_buf(grads, nodes, *logits);
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if want(*x) {
                    for d in grad_buf(grads, nodes, *x).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if want(*x) {
                    let n = nodes[*x].value.len() as f64;
                    for d in grad_buf(grads, nodes, *x).iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
        }
    }
}
