// SPDX-License-Identifier: MIT OR Apache-2.0

//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value; [`Graph::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products into
//! the parents. Leaves created with [`Graph::param`] receive gradients;
//! leaves created with [`Graph::constant`] do not.
//!
//! The graph is single-threaded and lives for one forward/backward pass.

use super::kernels::{self, gemm};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        qkv: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
        probs: Vec<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    TopK {
        x: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    SumSquares(Var),
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of tensor operations supporting a single backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Trainable leaf: its gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves a node's tensor (with its gradient slot) out of the graph.
    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(
            &mut self.nodes[v.0].value,
            Tensor::from_parts(vec![1], vec![0.0]),
        )
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var, op: &'static str, other: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            _ => Err(self.dim_err(op, v, other)),
        }
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul", b)?;
        let (k2, n) = self.dims2(b, "matmul", a)?;
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t", b)?;
        let (n, k2) = self.dims2(b, "matmul_t", a)?;
        if k != k2 {
            return Err(self.dim_err("matmul_t", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            0.0,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulT(a, b),
            needs,
        ))
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err(op, a, b));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let out: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = va.shape().to_vec();
        let needs = self.needs(&[a, b]);
        self.push(Tensor::from_parts(shape, out), op, needs)
    }

    fn map_op(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let out: Vec<f64> = va.data().iter().map(|x| f(*x)).collect();
        let shape = va.shape().to_vec();
        let needs = self.needs(&[a]);
        self.push(Tensor::from_parts(shape, out), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_op(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `m + v` with `v` broadcast over the rows of `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (_, c) = self.dims2(m, "add_row", v)?;
        if self.shape(v) != [c] {
            return Err(self.dim_err("add_row", m, v));
        }
        let bias = self.value(v).data();
        let mut out = self.value(m).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let shape = self.shape(m).to_vec();
        let needs = self.needs(&[m, v]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(m, v), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map_op(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map_op(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Gelu(a), kernels::gelu)
    }

    // ------------------------------------------------------------------
    // Transformer building blocks
    // ------------------------------------------------------------------

    /// Row-wise layer normalisation of `x: n×d` with learned `gain` and `bias` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "layer_norm", gain)?;
        if self.shape(gain) != [d] {
            return Err(self.dim_err("layer_norm", x, gain));
        }
        if self.shape(bias) != [d] {
            return Err(self.dim_err("layer_norm", x, bias));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; n * d];
        let mut stats = Vec::with_capacity(n);
        for (xr, or) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            stats.push(kernels::layer_norm_row(xr, g, b, or));
        }
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            needs,
        ))
    }

    /// Gathers rows of `table` (`v×d`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = match self.shape(table) {
            [v, d] => (*v, *d),
            s => {
                return Err(Error::Shape(format!(
                    "embedding table must be 2-D, got {s:?}"
                )))
            }
        };
        if ids.is_empty() {
            return Err(Error::Shape("embedding lookup with no ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "id {bad} out of range for table of {v} rows"
            )));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `n×3d` with each row laid out as `[q | k | v]`; heads split each
    /// of those into contiguous `d / heads` slices. `segments` are
    /// `(start_row, len)` pairs that partition the rows into independent
    /// sequences. Output is `n×d`.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        heads: usize,
        segments: &[(usize, usize)],
    ) -> Result<Var> {
        let (n, three_d) = match self.shape(qkv) {
            [n, c] => (*n, *c),
            s => {
                return Err(Error::Shape(format!(
                    "attention input must be 2-D, got {s:?}"
                )))
            }
        };
        if three_d % 3 != 0 || (three_d / 3) % heads != 0 || heads == 0 {
            return Err(Error::Shape(format!(
                "attention width {three_d} incompatible with {heads} heads"
            )));
        }
        let covered: usize = segments.iter().map(|s| s.1).sum();
        if covered != n || segments.iter().any(|&(s, l)| l == 0 || s + l > n) {
            return Err(Error::Shape(format!(
                "segments {segments:?} do not tile {n} rows"
            )));
        }
        let d = three_d / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = self.value(qkv).data();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut scores = Vec::new();
        for &(start, len) in segments {
            for h in 0..heads {
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &x[(start + i) * three_d + h * dh..][..dh];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &x[(start + j) * three_d + d + h * dh..][..dh];
                        scores.push(kernels::dot(qi, kj) * scale);
                    }
                    kernels::softmax_in_place(&mut scores);
                    let orow = &mut out[(start + i) * d + h * dh..][..dh];
                    for (j, &pij) in scores.iter().enumerate() {
                        p[i * len + j] = pij;
                        let vj = &x[(start + j) * three_d + 2 * d + h * dh..][..dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let needs = self.needs(&[qkv]);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::CausalAttention {
                qkv,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean next-token cross-entropy over rows that have a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, v) = match self.shape(logits) {
            [n, v] => (*n, *v),
            s => return Err(Error::Shape(format!("logits must be 2-D, got {s:?}"))),
        };
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Input(format!(
                "target {bad} out of range for {v} classes"
            )));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Shape("cross-entropy with no targets".into()));
        }
        let l = self.value(logits).data();
        let mut probs = l.to_vec();
        let mut loss = 0.0;
        for (row, t) in probs.chunks_exact_mut(v).zip(targets) {
            if let Some(t) = t {
                loss += kernels::log_sum_exp(row) - row[*t];
            }
            kernels::softmax_in_place(row);
        }
        loss /= count as f64;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Row-wise top-k: each row of `x` keeps its `k` largest entries.
    ///
    /// When `allowed` is given, only those columns are eligible. The gradient
    /// passes through the kept entries and is zero elsewhere.
    pub fn topk(&mut self, x: Var, k: usize, allowed: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::Shape("top-k of a scalar".into()))?;
        if k < 1 || k > cols {
            return Err(Error::Parameter(format!(
                "top-k requires 1 <= k <= {cols}, got {k}"
            )));
        }
        if let Some(a) = allowed {
            if a.len() != cols {
                return Err(Error::Shape(format!(
                    "allowed mask length {} != {cols}",
                    a.len()
                )));
            }
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; xs.len()];
        let mut mask = vec![false; xs.len()];
        for (r, row) in xs.chunks_exact(cols).enumerate() {
            for i in kernels::topk_indices(row, k, allowed) {
                out[r * cols + i] = row[i];
                mask[r * cols + i] = true;
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::TopK { x, mask }, needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum(a), needs)
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        let needs = self.needs(&[a]);
        self.push(
            Tensor::from_parts(vec![1], vec![s]),
            Op::SumSquares(a),
            needs,
        )
    }

    /// Mean binary cross-entropy of logits against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let x = self.value(logits).data();
        if x.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} logits",
                labels.len(),
                x.len()
            )));
        }
        let n = x.len() as f64;
        let loss = x
            .iter()
            .zip(labels)
            .map(|(z, y)| kernels::softplus(*z) - y * z)
            .sum::<f64>()
            / n;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![loss]),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Populates the gradient slot of every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.grad = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, false, val(*b), true, ga, 1.0);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    // dB = Aᵀ · dC
                    gemm(k, m, n, val(*a), true, g, false, gb, 1.0);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    // dA = dC · B
                    gemm(m, n, k, g, false, val(*b), false, ga, 1.0);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, n * k);
                    // dB = dCᵀ · A
                    gemm(n, m, k, g, true, val(*a), false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, wants(*a), g.len(), |ga| add_into(ga, g));
                accumulate(grads, *b, wants(*b), g.len(), |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, wants(*a), g.len(), |ga| add_into(ga, g));
                accumulate(grads, *b, wants(*b), g.len(), |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(grads, *a, wants(*a), g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                accumulate(grads, *b, wants(*b), g.len(), |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddRow(m, v) => {
                let c = self.shape(*v)[0];
                accumulate(grads, *m, wants(*m), g.len(), |gm| add_into(gm, g));
                accumulate(grads, *v, wants(*v), c, |gv| {
                    for row in g.chunks_exact(c) {
                        add_into(gv, row);
                    }
                });
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, wants(*a), g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)
                });
            }
            Op::AddScalar(a) => {
                accumulate(grads, *a, wants(*a), g.len(), |ga| add_into(ga, g));
            }
            Op::Gelu(a) => {
                let va = val(*a);
                accumulate(grads, *a, wants(*a), g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * kernels::gelu_grad(va[i]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let d = self.shape(*gain)[0];
                let xs = val(*x);
                let gs = val(*gain);
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; xs.len()];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &xs[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for i in 0..d {
                        xhat[i] = (xr[i] - mean) * rstd;
                        dgain[i] += gr[i] * xhat[i];
                        dbias[i] += gr[i];
                        dxhat[i] = gr[i] * gs[i];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = kernels::dot(&dxhat, &xhat) / d as f64;
                    for i in 0..d {
                        dx[r * d + i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                accumulate(grads, *x, wants(*x), dx.len(), |t| add_into(t, &dx));
                accumulate(grads, *gain, wants(*gain), d, |t| add_into(t, &dgain));
                accumulate(grads, *bias, wants(*bias), d, |t| add_into(t, &dbias));
            }
            Op::Embedding { table, ids } => {
                let numel = self.value(*table).numel();
                let d = self.shape(*table)[1];
                accumulate(grads, *table, wants(*table), numel, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CausalAttention {
                qkv,
                heads,
                segments,
                probs,
            } => {
                if !wants(*qkv) {
                    return;
                }
                let x = val(*qkv);
                let three_d = self.shape(*qkv)[1];
                let d = three_d / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dx = vec![0.0; x.len()];
                let mut dp = Vec::new();
                for (s, &(start, len)) in segments.iter().enumerate() {
                    for h in 0..*heads {
                        let p = &probs[s * heads + h];
                        for i in 0..len {
                            let gi = &g[(start + i) * d + h * dh..][..dh];
                            dp.clear();
                            for j in 0..=i {
                                let vj = &x[(start + j) * three_d + 2 * d + h * dh..][..dh];
                                dp.push(kernels::dot(gi, vj));
                            }
                            let prow = &p[i * len..i * len + i + 1];
                            let inner = kernels::dot(prow, &dp);
                            for j in 0..=i {
                                let pij = prow[j];
                                // dV_j += p_ij dO_i
                                let dv = &mut dx[(start + j) * three_d + 2 * d + h * dh..][..dh];
                                for (t, gv) in dv.iter_mut().zip(gi) {
                                    *t += pij * gv;
                                }
                                let ds = pij * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    let qi = x[(start + i) * three_d + h * dh + c];
                                    let kj = x[(start + j) * three_d + d + h * dh + c];
                                    dx[(start + i) * three_d + h * dh + c] += ds * kj;
                                    dx[(start + j) * three_d + d + h * dh + c] += ds * qi;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *qkv, true, dx.len(), |t| add_into(t, &dx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let count = targets.iter().flatten().count() as f64;
                let scale = g[0] / count;
                accumulate(grads, *logits, wants(*logits), probs.len(), |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = &mut gl[r * v..(r + 1) * v];
                        let pr = &probs[r * v..(r + 1) * v];
                        for i in 0..v {
                            row[i] += scale * pr[i];
                        }
                        row[*t] -= scale;
                    }
                });
            }
            Op::TopK { x, mask } => {
                accumulate(grads, *x, wants(*x), g.len(), |gx| {
                    for i in 0..g.len() {
                        if mask[i] {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, wants(*a), n, |ga| {
                    ga.iter_mut().for_each(|x| *x += g[0])
                });
            }
            Op::SumSquares(a) => {
                let va = val(*a);
                accumulate(grads, *a, wants(*a), va.len(), |ga| {
                    for i in 0..va.len() {
                        ga[i] += 2.0 * va[i] * g[0];
                    }
                });
            }
            Op::BceWithLogits { logits, labels } => {
                let z = val(*logits);
                let n = z.len() as f64;
                accumulate(grads, *logits, wants(*logits), z.len(), |gz| {
                    for i in 0..z.len() {
                        gz[i] += g[0] * (kernels::sigmoid(z[i]) - labels[i]) / n;
                    }
                });
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    wanted: bool,
    len: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if wanted {
        f(slot(grads, v, len));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
