//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every forward operation appends a node holding its output value and
//! enough bookkeeping to push gradients back to its inputs. Nodes are
//! addressed by [`Var`] handles that are only meaningful for the tape that
//! created them. A tape supports exactly one backward pass.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masking::AttentionMask;
use crate::params::ParameterStore;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    MeanRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

struct DropoutState {
    rate: f64,
    rng: ChaCha8Rng,
}

/// Records a forward computation for one backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grads: Vec<Option<Vec<f64>>>,
    dropout: Option<DropoutState>,
    finished: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape with dropout disabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            dropout: None,
            finished: false,
        }
    }

    /// A tape whose [`Tape::dropout`] calls drop activations at `rate`,
    /// drawing masks from a generator seeded with `seed`.
    pub fn with_dropout(rate: f64, seed: u64) -> Self {
        let mut t = Self::new();
        if rate > 0.0 {
            t.dropout = Some(DropoutState {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            });
        }
        t
    }

    pub fn dropout_enabled(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Trainable parameter `name` from `store`. Repeated requests for the
    /// same name return the same node, so shared weights accumulate one
    /// gradient.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param, true, "param")?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), rg, "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims2() != vb.dims2() {
            return Err(Error::shape("add", format!("{:?} + {:?}", va.dims2(), vb.dims2())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let (r, c) = va.dims2();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(r, c, data)?, Op::Add(a, b), rg, "add")
    }

    /// Adds a single row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let (rr, rc) = self.value(row).dims2();
        if rr != 1 || rc != c {
            return Err(Error::shape("add_row", format!("{r}x{c} + {rr}x{rc}")));
        }
        let rv = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, row]);
        self.push(Tensor::matrix(r, c, data)?, Op::AddRow(a, row), rg, "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims2() != vb.dims2() {
            return Err(Error::shape("mul", format!("{:?} ⊙ {:?}", va.dims2(), vb.dims2())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let (r, c) = va.dims2();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(r, c, data)?, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(r, c, data)?, Op::Scale(a, s), rg, "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(r, c, data)?, Op::Relu(a), rg, "relu")
    }

    /// Row-wise softmax where disallowed entries are treated as `-inf`
    /// scores: their probability is exactly zero.
    pub fn masked_softmax(&mut self, scores: Var, mask: &AttentionMask) -> Result<Var> {
        let (r, c) = self.value(scores).dims2();
        if mask.rows() != r || mask.cols() != c {
            return Err(Error::shape(
                "masked_softmax",
                format!("scores {r}x{c}, mask {}x{}", mask.rows(), mask.cols()),
            ));
        }
        let s = self.value(scores).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let allowed = mask.row(i);
            let row = &s[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(allowed)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: i });
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if allowed[j] {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    z += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.rg(&[scores]);
        self.push(Tensor::matrix(r, c, out)?, Op::Softmax(scores), rg, "masked_softmax")
    }

    /// Per-row normalization to zero mean and unit variance (with
    /// [`LAYER_NORM_EPS`] inside the square root), then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, h) = self.value(x).dims2();
        if h < 2 {
            return Err(Error::shape("layer_norm", "needs at least two features"));
        }
        if self.value(gain).len() != h || self.value(bias).len() != h {
            return Err(Error::shape("layer_norm", "gain/bias width differs from input"));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * h];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * h];
        for i in 0..r {
            let row = &xv[i * h..(i + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..h {
                let xh = (row[j] - mean) * is;
                xhat[i * h + j] = xh;
                out[i * h + j] = g[j] * xh + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            Tensor::matrix(r, h, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// Rows of `table` at `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, c) = t.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let data = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let rg = self.rg(&[table]);
        self.push(
            Tensor::matrix(ids.len(), c, data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if start > end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c}")));
        }
        let xv = self.value(x);
        let data = (0..r).flat_map(|i| xv.row(i)[start..end].iter().copied()).collect();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::matrix(r, end - start, data)?,
            Op::SliceCols { x, start },
            rg,
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::matrix(r, c, data)?, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Inverted dropout; the identity when the tape has dropout disabled.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(state) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let rate = state.rate;
        let n = self.nodes[x.0].value.len();
        let keep: Vec<f64> = (0..n)
            .map(|_| {
                if state.rng.gen::<f64>() < rate {
                    0.0
                } else {
                    1.0 / (1.0 - rate)
                }
            })
            .collect();
        let (r, c) = self.value(x).dims2();
        let data = self.value(x).data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, c, data)?, Op::Dropout { x, keep }, rg, "dropout")
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping positions whose target equals `ignore_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let (l, v) = self.value(logits).dims2();
        if targets.len() != l {
            return Err(Error::shape("cross_entropy", format!("{l} rows, {} targets", targets.len())));
        }
        let mut tg = Vec::with_capacity(l);
        for &t in targets {
            if t == ignore_id {
                tg.push(None);
            } else if t < v {
                tg.push(Some(t));
            } else {
                return Err(Error::shape("cross_entropy", format!("target {t} outside vocabulary {v}")));
            }
        }
        let count = tg.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; l * v];
        let mut total = 0.0;
        for (i, t) in tg.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            if let Some(t) = t {
                total += lse - row[*t];
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: tg,
                probs,
                count,
            },
            rg,
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Column means, as a single row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if r == 0 {
            return Err(Error::EmptyMean);
        }
        let xv = self.value(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(1, c, out)?, Op::MeanRows(x), rg, "mean_rows")
    }

    /// Reverse pass from the scalar `loss`. Gradients of parameter nodes
    /// are accumulated into `store`; all node gradients stay readable via
    /// [`Tape::grad`].
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if self.finished {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        if !self.requires_grad(loss) {
            return Err(Error::NoGraph("loss does not depend on any differentiable input".into()));
        }
        self.finished = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (name, &v) in &self.params {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()]);
            store.accumulate_grad(name, &g)?;
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = nodes[b.0].value.cols();
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    matmul_nt_into(g, nodes[b.0].value.data(), ga, m, n, k);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    matmul_tn_into(nodes[a.0].value.data(), g, gb, k, m, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = nodes[b.0].value.rows();
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    matmul_into(g, nodes[b.0].value.data(), ga, m, n, k);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, n * k);
                    matmul_tn_into(g, nodes[a.0].value.data(), gb, n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(*v) {
                        add_into(slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(*row) {
                    let c = nodes[row.0].value.len();
                    let gr = slot(grads, *row, c);
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += s * g[i];
                }
            }
            Op::Relu(a) => {
                let y = node.value.data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if y[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Softmax(a) => {
                let (r, c) = node.value.dims2();
                let y = node.value.data();
                let ga = slot(grads, *a, r * c);
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, h) = node.value.dims2();
                let gv = nodes[gain.0].value.data();
                if needs(*gain) {
                    let gg = slot(grads, *gain, h);
                    for i in 0..r {
                        for j in 0..h {
                            gg[j] += g[i * h + j] * xhat[i * h + j];
                        }
                    }
                }
                if needs(*bias) {
                    let gb = slot(grads, *bias, h);
                    for chunk in g.chunks(h) {
                        add_into(gb, chunk);
                    }
                }
                if needs(*x) {
                    let gx = slot(grads, *x, r * h);
                    let hf = h as f64;
                    for i in 0..r {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..h {
                            let d = g[i * h + j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xhat[i * h + j];
                        }
                        for j in 0..h {
                            let d = g[i * h + j] * gv[j];
                            gx[i * h + j] +=
                                inv_std[i] / hf * (hf * d - sum_d - xhat[i * h + j] * sum_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let (n, c) = nodes[table.0].value.dims2();
                let gt = slot(grads, *table, n * c);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = nodes[x.0].value.dims2();
                let w = node.value.cols();
                let gx = slot(grads, *x, r * c);
                for i in 0..r {
                    add_into(&mut gx[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c) = node.value.dims2();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if needs(*p) {
                        let gp = slot(grads, *p, r * w);
                        for i in 0..r {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * c + offset..i * c + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Dropout { x, keep } => {
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * keep[i];
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = nodes[logits.0].value.cols();
                let scale = g[0] / *count as f64;
                let gl = slot(grads, *logits, probs.len());
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for j in 0..v {
                        gl[i * v + j] += scale * probs[i * v + j];
                    }
                    gl[i * v + t] -= scale;
                }
            }
            Op::Sum(x) => {
                let n = nodes[x.0].value.len();
                let gx = slot(grads, *x, n);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = nodes[x.0].value.dims2();
                let gx = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j] / r as f64;
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let mut store = ParameterStore::new();
        let x = tape.leaf(t(&[vec![1.0, -2.0], vec![3.0, 0.5]]), true).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_square_sum_is_twice_x() {
        let mut tape = Tape::new();
        let mut store = ParameterStore::new();
        let x = tape.leaf(t(&[vec![1.0, -2.0, 0.25]]), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 0.5]);
    }

    #[test]
    fn second_backward_fails() {
        let mut tape = Tape::new();
        let mut store = ParameterStore::new();
        let x = tape.leaf(Tensor::scalar(2.0), true).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert!(matches!(tape.backward(s, &mut store), Err(Error::BackwardTwice)));
    }

    #[test]
    fn detached_loss_is_no_graph() {
        let mut tape = Tape::new();
        let mut store = ParameterStore::new();
        let x = tape.constant(Tensor::scalar(2.0)).unwrap();
        let s = tape.sum(x).unwrap();
        assert!(matches!(tape.backward(s, &mut store), Err(Error::NoGraph(_))));
    }

    #[test]
    fn params_are_shared_and_accumulate() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_uniform_and_single_key() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::full(&[3, 3], 0.7)).unwrap();
        let p = tape.masked_softmax(s, &AttentionMask::ones(3, 3)).unwrap();
        for v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = tape.constant(t(&[vec![5.0, -1.0, 9.0]])).unwrap();
        let mask = AttentionMask::from_bitstrings(&["100"]).unwrap();
        let p = tape.masked_softmax(s, &mask).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_empty_row() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let mask = AttentionMask::from_bitstrings(&["10", "00"]).unwrap();
        assert!(matches!(tape.masked_softmax(s, &mask), Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn non_finite_values_abort() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(f64::MAX)).unwrap();
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[2, 4]), true).unwrap();
        let ce = tape.cross_entropy(l, &[1, 3], 99).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_all_ignored() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[2, 4]), true).unwrap();
        assert!(matches!(tape.cross_entropy(l, &[0, 0], 0), Err(Error::EmptyLoss)));
        assert!(tape.cross_entropy(l, &[7, 0], 0).is_err());
    }

    #[test]
    fn cross_entropy_confident_logits() {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[vec![60.0, 0.0, 0.0], vec![0.0, 0.0, 60.0]]), true).unwrap();
        let ce = tape.cross_entropy(l, &[0, 2], 9).unwrap();
        assert!(tape.value(ce).item() < 1e-20);
    }

    #[test]
    fn dropout_disabled_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 2], 1.0)).unwrap();
        assert_eq!(tape.dropout(x).unwrap(), x);
        let mut tape = Tape::with_dropout(0.5, 3);
        let x = tape.constant(Tensor::full(&[4, 4], 1.0)).unwrap();
        let y = tape.dropout(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
