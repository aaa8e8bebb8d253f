use super::kernels::{self, dot};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Tanh(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedNll {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed ops.
///
/// Nodes are appended in execution order and a node can only reference
/// earlier nodes, so reverse index order is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        name: &'static str,
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires = self.op_inputs(&op).iter().any(|&i| self.requires_grad(i));
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data).with_requires_grad(requires),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::AddRowBias(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Gelu(x)
            | Op::Softmax { x, .. }
            | Op::MaskedSoftmax(x)
            | Op::Sum(x)
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::MaskedNll { logits, .. } => vec![*logits],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], out, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(x), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Add(a, b), "add")
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_row_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_row_bias",
                self.shape(x),
                self.shape(bias),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(vec![m, n], out, Op::AddRowBias(x, bias), "add_row_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, c), "scale")
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::MulScalar(x, s), "mul_scalar")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Tanh(x), "tanh")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu(x), "gelu")
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let max = (0..len)
                    .map(|t| src[idx(t)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for t in 0..len {
                    let e = (src[idx(t)] - max).exp();
                    out[idx(t)] = e;
                    sum += e;
                }
                for t in 0..len {
                    out[idx(t)] /= sum;
                }
            }
        }
        self.push(shape, out, Op::Softmax { x, axis }, "softmax")
    }

    /// Row-wise softmax over a `[a, b]` matrix where `allowed[i*b + j]`
    /// marks key `j` visible to row `i`. Forbidden entries get exactly zero
    /// weight. A row with no allowed entry is an error.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let (a, b) = self.matrix_dims(x, "masked_softmax")?;
        if allowed.len() != a * b {
            return Err(Error::shape("masked_softmax", &[a, b], &[allowed.len()]));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; a * b];
        for i in 0..a {
            let row = &src[i * b..(i + 1) * b];
            let ok = &allowed[i * b..(i + 1) * b];
            let max = row
                .iter()
                .zip(ok)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateAttention { row: i });
            }
            let dst = &mut out[i * b..(i + 1) * b];
            let mut sum = 0.0;
            for j in 0..b {
                if ok[j] {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    sum += e;
                }
            }
            dst.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(vec![a, b], out, Op::MaskedSoftmax(x), "masked_softmax")
    }

    /// Normalizes each row over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Config(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bt[j];
            }
        }
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::EmptyInput("embedding ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Index { id: bad, len: v });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Mean negative log-likelihood over positions whose mask is set:
    /// `-(1/Σm) Σ_k m_k log softmax(logits_k)[target_k]`.
    pub fn masked_nll_loss(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (l, v) = self.matrix_dims(logits, "masked_nll_loss")?;
        if targets.len() != l || mask.len() != l {
            return Err(Error::shape(
                "masked_nll_loss",
                &[l, v],
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; l * v];
        let mut weights = vec![0.0; l];
        let mut total = 0.0;
        for k in 0..l {
            if !mask[k] {
                continue;
            }
            let t = targets[k];
            if t >= v {
                return Err(Error::Index { id: t, len: v });
            }
            let row = &src[k * v..(k + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total -= row[t] - lse;
            for j in 0..v {
                probs[k * v + j] = (row[j] - lse).exp();
            }
            weights[k] = 1.0 / count as f64;
        }
        let loss = total / count as f64;
        self.push(
            vec![1],
            vec![loss],
            Op::MaskedNll {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            "masked_nll_loss",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), "sum")
    }

    /// Concatenates matrices along the row (sequence) axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::EmptyInput("concat_rows"));
        };
        let (_, c) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (r, c2) = self.matrix_dims(x, "concat_rows")?;
            if c2 != c {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(x),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(x).data());
        }
        self.push(
            vec![rows, c],
            out,
            Op::ConcatRows(xs.to_vec()),
            "concat_rows",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_rows")?;
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, end]));
        }
        let out = self.value(x).data()[start * c..end * c].to_vec();
        self.push(
            vec![end - start, c],
            out,
            Op::SliceRows { x, start },
            "slice_rows",
        )
    }

    /// Concatenates matrices along the column (feature) axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::EmptyInput("concat_cols"));
        };
        let (r, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r2, c) = self.matrix_dims(x, "concat_cols")?;
            if r2 != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(x),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let src = self.value(x).data();
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(
            vec![r, total],
            out,
            Op::ConcatCols(xs.to_vec()),
            "concat_cols",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, end]));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push(vec![r, w], out, Op::SliceCols { x, start }, "slice_cols")
    }

    // ---- reverse pass ------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient and
    /// adds it to that node's gradient buffer. Calling twice without
    /// [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        if !self.requires_grad(loss) {
            return Ok(());
        }
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            self.nodes[idx].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let needs = |v: Var| self.nodes[v.0].value.requires_grad();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = self.nodes[v.0].value.numel();
            let buf = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = out.cols();
                if needs(*a) {
                    let bv = self.value(*b).data();
                    acc(*a, &mut |buf| kernels::gemm_nt_acc(g, bv, buf, m, n, k));
                }
                if needs(*b) {
                    let av = self.value(*a).data();
                    acc(*b, &mut |buf| kernels::gemm_tn_acc(av, g, buf, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = out.cols();
                if needs(*a) {
                    let bv = self.value(*b).data();
                    acc(*a, &mut |buf| kernels::gemm_nn_acc(g, bv, buf, m, n, k));
                }
                if needs(*b) {
                    let av = self.value(*a).data();
                    acc(*b, &mut |buf| kernels::gemm_tn_acc(g, av, buf, m, n, k));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = dims2(self.shape(*x));
                acc(*x, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc(v, &mut |buf| add_into(buf, g));
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if needs(*x) {
                    acc(*x, &mut |buf| add_into(buf, g));
                }
                if needs(*bias) {
                    let n = out.cols();
                    acc(*bias, &mut |buf| {
                        for row in g.chunks_exact(n) {
                            add_into(buf, row);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b).data();
                    acc(*a, &mut |buf| {
                        for ((o, gi), bi) in buf.iter_mut().zip(g).zip(bv) {
                            *o += gi * bi;
                        }
                    });
                }
                if needs(*b) {
                    let av = self.value(*a).data();
                    acc(*b, &mut |buf| {
                        for ((o, gi), ai) in buf.iter_mut().zip(g).zip(av) {
                            *o += gi * ai;
                        }
                    });
                }
            }
            Op::Scale(x, c) => acc(*x, &mut |buf| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += c * gi;
                }
            }),
            Op::MulScalar(x, s) => {
                let c = self.value(*s).item();
                if needs(*x) {
                    acc(*x, &mut |buf| {
                        for (o, gi) in buf.iter_mut().zip(g) {
                            *o += c * gi;
                        }
                    });
                }
                if needs(*s) {
                    let d = dot(g, self.value(*x).data());
                    acc(*s, &mut |buf| buf[0] += d);
                }
            }
            Op::Tanh(x) => acc(*x, &mut |buf| {
                for ((o, gi), y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *o += gi * (1.0 - y * y);
                }
            }),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |buf| {
                    for ((o, gi), &v) in buf.iter_mut().zip(g).zip(xv) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                        *o += gi * d;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |t: usize| (o * len + t) * inner + i;
                            let s: f64 = (0..len).map(|t| g[idx(t)] * y[idx(t)]).sum();
                            for t in 0..len {
                                buf[idx(t)] += y[idx(t)] * (g[idx(t)] - s);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let b = out.cols();
                let y = out.data();
                acc(*x, &mut |buf| {
                    for ((brow, grow), yrow) in buf
                        .chunks_exact_mut(b)
                        .zip(g.chunks_exact(b))
                        .zip(y.chunks_exact(b))
                    {
                        let s = dot(grow, yrow);
                        for j in 0..b {
                            if yrow[j] != 0.0 {
                                brow[j] += yrow[j] * (grow[j] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gm = self.value(*gamma).data();
                if needs(*x) {
                    acc(*x, &mut |buf| {
                        for (r, is) in inv_std.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut mean_dxh = 0.0;
                            let mut mean_dxh_xh = 0.0;
                            for j in 0..d {
                                let dxh = gr[j] * gm[j];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xh[j];
                            }
                            mean_dxh /= d as f64;
                            mean_dxh_xh /= d as f64;
                            for j in 0..d {
                                let dxh = gr[j] * gm[j];
                                buf[r * d + j] += is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                            }
                        }
                    });
                }
                if needs(*gamma) {
                    acc(*gamma, &mut |buf| {
                        for (grow, xrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                buf[j] += grow[j] * xrow[j];
                            }
                        }
                    });
                }
                if needs(*beta) {
                    acc(*beta, &mut |buf| {
                        for grow in g.chunks_exact(d) {
                            add_into(buf, grow);
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                acc(*table, &mut |buf| {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                });
            }
            Op::MaskedNll {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let gl = g[0];
                acc(*logits, &mut |buf| {
                    for (k, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut buf[k * v..(k + 1) * v];
                        for j in 0..v {
                            row[j] += gl * w * probs[k * v + j];
                        }
                        row[targets[k]] -= gl * w;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    if needs(x) {
                        acc(x, &mut |buf| add_into(buf, &g[off..off + n]));
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                acc(*x, &mut |buf| {
                    add_into(&mut buf[start * c..start * c + g.len()], g)
                });
            }
            Op::ConcatCols(xs) => {
                let total = out.cols();
                let mut off = 0;
                for &x in xs {
                    let w = self.value(x).cols();
                    if needs(x) {
                        acc(x, &mut |buf| {
                            for (i, row) in buf.chunks_exact_mut(w).enumerate() {
                                add_into(row, &g[i * total + off..i * total + off + w]);
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let w = out.cols();
                acc(*x, &mut |buf| {
                    for (i, grow) in g.chunks_exact(w).enumerate() {
                        add_into(&mut buf[i * c + start..i * c + start + w], grow);
                    }
                });
            }
        }
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
