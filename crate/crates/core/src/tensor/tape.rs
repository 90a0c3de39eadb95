use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm_acc, Dest, View};
use super::Tensor;
use crate::math;
use crate::quaternion::HAMILTON_TERMS;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-wise reduction over columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Min,
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Sqrt,
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Bcast, usize, usize),
    Scale(usize, f64),
    Unary(Unary, usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Sum(usize),
    Mean(usize),
    ReduceCols {
        x: usize,
        kind: Reduce,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BinaryCrossEntropy {
        probs: usize,
        labels: Vec<f64>,
    },
    QuatLinear {
        x: usize,
        w: [usize; 4],
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Forward-recorded computation graph. Nodes are appended in evaluation
/// order, so the node list is always topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const PROB_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients flow into it iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    fn req(&self, i: usize) -> bool {
        self.nodes[i].value.requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.req(i));
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (bcast, shape) = if sa == sb {
            (Bcast::Same, sa.to_vec())
        } else if self.value(b).numel() == 1 {
            (Bcast::RhsScalar, sa.to_vec())
        } else if self.value(a).numel() == 1 {
            (Bcast::LhsScalar, sb.to_vec())
        } else {
            return Err(Error::dim(name, sa, sb));
        };
        let (da, db) = (self.data(a), self.data(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<f64> = match bcast {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::RhsScalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Bcast::LhsScalar => db.iter().map(|&y| f(da[0], y)).collect(),
        };
        Ok(self.push(shape, out, Op::Binary(kind, bcast, a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a.0, factor), &[a.0])
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => math::relu,
            Unary::Gelu => math::gelu,
            Unary::Sigmoid => math::sigmoid,
            Unary::Tanh => math::tanh,
            Unary::Sqrt => math::sqrt,
        };
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Unary(kind, a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            1.0,
            View::rows(self.data(a), k),
            View::rows(self.data(b), n),
            Dest {
                data: &mut out,
                offset: 0,
                row_stride: n,
            },
        );
        Ok(self.push(vec![m, n], out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a.0), &[a.0]))
    }

    /// `a[i, j] + row[j]` for a 2-D `a` and a row with `cols(a)` entries.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.value(row).numel() != n {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.data(row);
        let out = self
            .data(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(vec![m, n], out, Op::AddRow(a.0, row.0), &[a.0, row.0]))
    }

    /// `a[i, j] * row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "mul_row")?;
        if self.value(row).numel() != n {
            return Err(Error::dim("mul_row", self.shape(a), self.shape(row)));
        }
        let r = self.data(row);
        let out = self
            .data(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x * y))
            .collect();
        Ok(self.push(vec![m, n], out, Op::MulRow(a.0, row.0), &[a.0, row.0]))
    }

    /// Quaternion linear map. `x: rows × n` holds `n/4` quaternions per row
    /// (component-blocked: reals, then i, j, k parts); each `w[p]` is the
    /// `n/4 × m/4` matrix of weight component `p`. Output row quaternion
    /// `o` is `Σ_q w[q][o] ⊗ x[q]`.
    pub fn quat_linear(&mut self, x: Var, w: [Var; 4]) -> Result<Var> {
        let (rows, n) = self.dims2(x, "quat_linear")?;
        if n % 4 != 0 {
            return Err(Error::Config(format!(
                "quaternion input dimension {n} is not divisible by 4"
            )));
        }
        let (n4, m4) = self.dims2(w[0], "quat_linear")?;
        for wp in &w[1..] {
            if self.shape(*wp) != self.shape(w[0]) {
                return Err(Error::dim("quat_linear", self.shape(w[0]), self.shape(*wp)));
            }
        }
        if n4 * 4 != n {
            return Err(Error::dim("quat_linear", self.shape(x), self.shape(w[0])));
        }
        let m = 4 * m4;
        let mut out = vec![0.0; rows * m];
        let xd = self.data(x);
        for (c, terms) in HAMILTON_TERMS.iter().enumerate() {
            for (p, &(q, sign)) in terms.iter().enumerate() {
                gemm_acc(
                    rows,
                    n4,
                    m4,
                    sign,
                    View::col_block(xd, n, q * n4),
                    View::rows(self.data(w[p]), m4),
                    Dest {
                        data: &mut out,
                        offset: c * m4,
                        row_stride: m,
                    },
                );
            }
        }
        let ws = [w[0].0, w[1].0, w[2].0, w[3].0];
        Ok(self.push(
            vec![rows, m],
            out,
            Op::QuatLinear { x: x.0, w: ws },
            &[x.0, ws[0], ws[1], ws[2], ws[3]],
        ))
    }

    // ---- normalization / attention -----------------------------------

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / math::sqrt(var + eps);
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                normed[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                normed,
                inv_std,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - max);
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(vec![m, n], out, Op::SoftmaxRows(x.0), &[x.0]))
    }

    // ---- indexing / reshaping ----------------------------------------

    /// Rows `ids` of a 2-D table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "table row",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        if ids.is_empty() {
            return Err(Error::Input("gather_rows needs at least one index".into()));
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::Index {
                what: "column slice end",
                index: start + len,
                bound: n,
            });
        }
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(vec![m, len], out, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(vec![m, total], out, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Stacks along the first axis. 1-D inputs give a 1-D result.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let trailing = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != trailing[..] {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            lead += self.shape(p)[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&trailing);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(shape, out, Op::ConcatRows(ids.clone()), &ids))
    }

    // ---- reductions / losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x.0), &[x.0])
    }

    /// Reduces each row of a 2-D tensor to one value; result has shape `[rows]`.
    pub fn reduce_cols(&mut self, x: Var, kind: Reduce) -> Result<Var> {
        let (m, n) = self.dims2(x, "reduce_cols")?;
        let mut out = Vec::with_capacity(m);
        let mut arg = Vec::new();
        for row in self.data(x).chunks(n) {
            match kind {
                Reduce::Mean => out.push(row.iter().sum::<f64>() / n as f64),
                Reduce::Min | Reduce::Max => {
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        let better = match kind {
                            Reduce::Min => v < row[best],
                            _ => v > row[best],
                        };
                        if better {
                            best = j;
                        }
                    }
                    arg.push(best);
                    out.push(row[best]);
                }
            }
        }
        Ok(self.push(
            vec![m],
            out,
            Op::ReduceCols {
                x: x.0,
                kind,
                argmax: arg,
            },
            &[x.0],
        ))
    }

    /// Mean negative log-softmax of each row's target logit.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2(logits, "softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            if t >= v {
                return Err(Error::Index {
                    what: "class target",
                    index: t,
                    bound: v,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = math::exp(*x - max);
                total += *x;
            }
            loss += math::log(total) - math::log(row[t]);
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        loss /= n as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            &[logits.0],
        ))
    }

    /// Mean binary cross-entropy of probabilities against `labels`, with
    /// probabilities clamped to `[1e-12, 1 - 1e-12]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let p = self.data(probs);
        if p.len() != labels.len() {
            return Err(Error::dim(
                "binary_cross_entropy",
                self.shape(probs),
                &[labels.len()],
            ));
        }
        let mut loss = 0.0;
        for (&pi, &y) in p.iter().zip(labels) {
            let pc = pi.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            loss -= y * math::log(pc) + (1.0 - y) * math::log(1.0 - pc);
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BinaryCrossEntropy {
                probs: probs.0,
                labels: labels.to_vec(),
            },
            &[probs.0],
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse-mode accumulation from a scalar `loss`. Afterwards every
    /// grad-requiring node reachable from `loss` carries a gradient; all
    /// other nodes carry none.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if !self.req(loss.0) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].value.grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        macro_rules! slot {
            ($i:expr) => {{
                let i = $i;
                let len = self.nodes[i].value.data.len();
                grads[i].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            &Op::Binary(kind, bcast, a, b) => {
                let (da, db) = (&self.nodes[a].value.data, &self.nodes[b].value.data);
                // d out / d a and d out / d b at element k
                let partial = |k: usize, wrt_a: bool| -> f64 {
                    let (ia, ib) = match bcast {
                        Bcast::Same => (k, k),
                        Bcast::RhsScalar => (k, 0),
                        Bcast::LhsScalar => (0, k),
                    };
                    match (kind, wrt_a) {
                        (Binary::Add, _) => 1.0,
                        (Binary::Sub, true) => 1.0,
                        (Binary::Sub, false) => -1.0,
                        (Binary::Mul, true) => db[ib],
                        (Binary::Mul, false) => da[ia],
                    }
                };
                if self.req(a) {
                    let s = slot!(a);
                    for (k, gk) in g.iter().enumerate() {
                        let ia = if matches!(bcast, Bcast::LhsScalar) { 0 } else { k };
                        s[ia] += gk * partial(k, true);
                    }
                }
                if self.req(b) {
                    let s = slot!(b);
                    for (k, gk) in g.iter().enumerate() {
                        let ib = if matches!(bcast, Bcast::RhsScalar) { 0 } else { k };
                        s[ib] += gk * partial(k, false);
                    }
                }
            }
            &Op::Scale(a, f) => {
                if self.req(a) {
                    for (s, gk) in slot!(a).iter_mut().zip(g) {
                        *s += f * gk;
                    }
                }
            }
            &Op::Unary(kind, a) => {
                if self.req(a) {
                    let x = &self.nodes[a].value.data;
                    let y = &out.data;
                    let s = slot!(a);
                    for k in 0..g.len() {
                        let d = match kind {
                            Unary::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => math::gelu_grad(x[k]),
                            Unary::Sigmoid => y[k] * (1.0 - y[k]),
                            Unary::Tanh => 1.0 - y[k] * y[k],
                            Unary::Sqrt => 0.5 / y[k],
                        };
                        s[k] += g[k] * d;
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].value.shape[0], self.nodes[a].value.shape[1]);
                let n = self.nodes[b].value.shape[1];
                if self.req(a) {
                    let bd = &self.nodes[b].value.data;
                    gemm_acc(
                        m,
                        n,
                        k,
                        1.0,
                        View::rows(g, n),
                        View::rows(bd, n).t(),
                        Dest {
                            data: slot!(a),
                            offset: 0,
                            row_stride: k,
                        },
                    );
                }
                if self.req(b) {
                    let ad = &self.nodes[a].value.data;
                    gemm_acc(
                        k,
                        m,
                        n,
                        1.0,
                        View::rows(ad, k).t(),
                        View::rows(g, n),
                        Dest {
                            data: slot!(b),
                            offset: 0,
                            row_stride: n,
                        },
                    );
                }
            }
            &Op::Transpose(a) => {
                if self.req(a) {
                    let (m, n) = (self.nodes[a].value.shape[0], self.nodes[a].value.shape[1]);
                    let s = slot!(a);
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            &Op::AddRow(a, r) | &Op::MulRow(a, r) => {
                let is_mul = matches!(node.op, Op::MulRow(..));
                let n = out.shape[1];
                let rd = &self.nodes[r].value.data;
                let ad = &self.nodes[a].value.data;
                if self.req(a) {
                    let s = slot!(a);
                    for (k, gk) in g.iter().enumerate() {
                        s[k] += if is_mul { gk * rd[k % n] } else { *gk };
                    }
                }
                if self.req(r) {
                    let s = slot!(r);
                    for (k, gk) in g.iter().enumerate() {
                        s[k % n] += if is_mul { gk * ad[k] } else { *gk };
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let n = out.shape[1];
                let gam = &self.nodes[*gamma].value.data;
                if self.req(*gamma) {
                    let s = slot!(*gamma);
                    for (k, gk) in g.iter().enumerate() {
                        s[k % n] += gk * normed[k];
                    }
                }
                if self.req(*beta) {
                    let s = slot!(*beta);
                    for (k, gk) in g.iter().enumerate() {
                        s[k % n] += gk;
                    }
                }
                if self.req(*x) {
                    let s = slot!(*x);
                    let nf = n as f64;
                    for (i, inv) in inv_std.iter().enumerate() {
                        let row = i * n..(i + 1) * n;
                        let gr = &g[row.clone()];
                        let hr = &normed[row];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            s[i * n + j] += inv / nf * (nf * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                }
            }
            &Op::SoftmaxRows(a) => {
                if self.req(a) {
                    let n = out.shape[1];
                    let s = slot!(a);
                    for (i, (yr, gr)) in out.data.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                        for j in 0..n {
                            s[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if self.req(*table) {
                    let d = out.shape[1];
                    let s = slot!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                if self.req(x) {
                    let n = self.nodes[x].value.shape[1];
                    let len = out.shape[1];
                    let s = slot!(x);
                    for (i, gr) in g.chunks(len).enumerate() {
                        for j in 0..len {
                            s[i * n + start + j] += gr[j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape[1];
                    if self.req(p) {
                        let s = slot!(p);
                        for (i, gr) in g.chunks(total).enumerate() {
                            for j in 0..c {
                                s[i * c + j] += gr[offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.data.len();
                    if self.req(p) {
                        for (s, gk) in slot!(p).iter_mut().zip(&g[offset..offset + len]) {
                            *s += gk;
                        }
                    }
                    offset += len;
                }
            }
            &Op::Sum(a) | &Op::Mean(a) => {
                if self.req(a) {
                    let s = slot!(a);
                    let f = if matches!(node.op, Op::Mean(_)) {
                        1.0 / s.len() as f64
                    } else {
                        1.0
                    };
                    for v in s.iter_mut() {
                        *v += g[0] * f;
                    }
                }
            }
            Op::ReduceCols { x, kind, argmax } => {
                if self.req(*x) {
                    let n = self.nodes[*x].value.shape[1];
                    let s = slot!(*x);
                    for (i, gi) in g.iter().enumerate() {
                        match kind {
                            Reduce::Mean => {
                                for j in 0..n {
                                    s[i * n + j] += gi / n as f64;
                                }
                            }
                            _ => s[i * n + argmax[i]] += gi,
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.req(*logits) {
                    let v = self.nodes[*logits].value.shape[1];
                    let scale = g[0] / targets.len() as f64;
                    let s = slot!(*logits);
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            s[i * v + j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                }
            }
            Op::BinaryCrossEntropy { probs, labels } => {
                if self.req(*probs) {
                    let p = &self.nodes[*probs].value.data;
                    let scale = g[0] / labels.len() as f64;
                    let s = slot!(*probs);
                    for k in 0..labels.len() {
                        let pc = p[k].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                        let y = labels[k];
                        s[k] += scale * (-y / pc + (1.0 - y) / (1.0 - pc));
                    }
                }
            }
            Op::QuatLinear { x, w } => {
                let (rows, n) = (self.nodes[*x].value.shape[0], self.nodes[*x].value.shape[1]);
                let (n4, m4) = (n / 4, out.shape[1] / 4);
                let m = out.shape[1];
                let xd = &self.nodes[*x].value.data;
                for (c, terms) in HAMILTON_TERMS.iter().enumerate() {
                    for (p, &(q, sign)) in terms.iter().enumerate() {
                        if self.req(w[p]) {
                            gemm_acc(
                                n4,
                                rows,
                                m4,
                                sign,
                                View::col_block(xd, n, q * n4).t(),
                                View::col_block(g, m, c * m4),
                                Dest {
                                    data: slot!(w[p]),
                                    offset: 0,
                                    row_stride: m4,
                                },
                            );
                        }
                        if self.req(*x) {
                            let wd = &self.nodes[w[p]].value.data;
                            gemm_acc(
                                rows,
                                m4,
                                n4,
                                sign,
                                View::col_block(g, m, c * m4),
                                View::rows(wd, m4).t(),
                                Dest {
                                    data: slot!(*x),
                                    offset: q * n4,
                                    row_stride: n,
                                },
                            );
                        }
                    }
                }
            }
        }
    }
}
