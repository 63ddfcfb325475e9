use std::collections::BTreeMap;

use super::{NumError, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MeanGroups {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// A tape is single-use: build the graph, call [`Tape::backward`], drop it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (model inputs you want saliency for).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Register (once) and return the leaf for a named parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumError> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| NumError::MissingParam(name.to_string()))?
            .clone();
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = ta.row(i);
            for j in 0..n {
                out[i * n + j] = dot(arow, tb.row(j));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(shape_err("add", ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = vec![ta.rows(), ta.cols()];
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), ng))
    }

    /// Add a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(row));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let n = ta.cols();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % n])
            .collect();
        let shape = vec![ta.rows(), n];
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(shape_err("mul", ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = vec![ta.rows(), ta.cols()];
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumError> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|x| x * c).collect();
        let shape = vec![t.rows(), t.cols()];
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale(a, c), ng))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| gelu(x)).collect();
        let shape = vec![t.rows(), t.cols()];
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu(a), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|x| x.tanh()).collect();
        let shape = vec![t.rows(), t.cols()];
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Tanh(a), ng))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumError> {
        self.softmax_masked(a, None)
    }

    /// Row-wise softmax where, if `causal_offset` is `Some(o)`, row `i` only
    /// sees columns `j <= i + o`; masked entries are exactly zero.
    pub fn softmax_masked(&mut self, a: Var, causal_offset: Option<usize>) -> Result<Var, NumError> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if n == 0 {
            return Err(NumError::EmptyAxis("softmax"));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let limit = match causal_offset {
                Some(o) => (i + o + 1).min(n),
                None => n,
            };
            let row = &t.row(i)[..limit];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..limit {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for o in &mut out[i * n..i * n + limit] {
                *o /= sum;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Softmax(a), ng))
    }

    /// Layer normalisation over the last axis with learned `1 x n` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumError> {
        if eps <= 0.0 {
            return Err(NumError::InvalidArgument("layer_norm epsilon must be positive".into()));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = (tx.rows(), tx.cols());
        if n == 0 {
            return Err(NumError::EmptyAxis("layer_norm"));
        }
        if tg.len() != n || tb.len() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Mean over the listed rows (with multiplicity), giving a `1 x n` row.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumError> {
        self.mean_groups(x, &[rows.to_vec()])
    }

    /// One output row per group: the mean of that group's rows of `x`.
    pub fn mean_groups(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var, NumError> {
        let t = self.value(x);
        if groups.is_empty() {
            return Err(NumError::EmptyAxis("mean_groups"));
        }
        let n = t.cols();
        let mut out = vec![0.0; groups.len() * n];
        for (gi, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(NumError::EmptyAxis("mean_groups"));
            }
            let o = &mut out[gi * n..(gi + 1) * n];
            for &r in rows {
                if r >= t.rows() {
                    return Err(NumError::IndexOutOfRange {
                        op: "mean_groups",
                        index: r,
                        len: t.rows(),
                    });
                }
                for (o, v) in o.iter_mut().zip(t.row(r)) {
                    *o += v;
                }
            }
            let k = rows.len() as f64;
            o.iter_mut().for_each(|o| *o /= k);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![groups.len(), n], out)?,
            Op::MeanGroups {
                x,
                groups: groups.to_vec(),
            },
            ng,
        ))
    }

    pub fn mean_all_rows(&mut self, x: Var) -> Result<Var, NumError> {
        let rows: Vec<usize> = (0..self.value(x).rows()).collect();
        self.mean_rows(x, &rows)
    }

    /// Select rows by index; doubles as embedding lookup.
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumError> {
        let t = self.value(x);
        let n = t.cols();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= t.rows() {
                return Err(NumError::IndexOutOfRange {
                    op: "gather",
                    index: r,
                    len: t.rows(),
                });
            }
            out.extend_from_slice(t.row(r));
        }
        if rows.is_empty() {
            return Err(NumError::EmptyAxis("gather"));
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![rows.len(), n], out)?,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = *parts.first().ok_or(NumError::EmptyAxis("concat_rows"))?;
        let n = self.value(first).cols();
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            out.extend_from_slice(t.data());
            m += t.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = *parts.first().ok_or(NumError::EmptyAxis("concat_cols"))?;
        let m = self.value(first).rows();
        let mut n = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(shape_err("concat_cols", self.value(first), t));
            }
            n += t.cols();
        }
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..m {
                out[i * n + off..i * n + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if start + len > n || len == 0 {
            return Err(NumError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, ng))
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NumError> {
        let t = self.value(logits);
        let (m, n) = (t.rows(), t.cols());
        if targets.len() != m {
            return Err(NumError::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if n == 0 {
            return Err(NumError::EmptyAxis("cross_entropy"));
        }
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        let mut count = 0;
        for i in 0..m {
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..n {
                probs[i * n + j] = (row[j] - max).exp() / sum;
            }
            if let Some(y) = targets[i] {
                if y >= n {
                    return Err(NumError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: y,
                        len: n,
                    });
                }
                loss += -(row[y] - max - sum.ln());
                count += 1;
            }
        }
        if count == 0 {
            return Err(NumError::EmptyAxis("cross_entropy targets"));
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), ng))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        if self.value(loss).len() != 1 {
            return Err(NumError::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] += dot(grow, tb.row(p));
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, bv) in da[i * k..(i + 1) * k].iter_mut().zip(tb.row(j)) {
                                *d += gv * bv;
                            }
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, av) in db[j * k..(j + 1) * k].iter_mut().zip(ta.row(i)) {
                                *d += gv * av;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let ta = val(*a);
                let (m, n) = (ta.rows(), ta.cols());
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::AddRow(a, r) => {
                acc(*a, &mut |da| add_into(da, g));
                let n = val(*r).cols();
                acc(*r, &mut |dr| {
                    for (i, gv) in g.iter().enumerate() {
                        dr[i % n] += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += gv * bv;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |da| {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }),
            Op::Gelu(a) => {
                let ta = val(*a);
                acc(*a, &mut |da| {
                    for ((d, gv), x) in da.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * gelu_grad(*x);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |da| {
                    for ((d, gv), yv) in da.iter_mut().zip(g).zip(y.data()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.cols();
                acc(*a, &mut |da| {
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &g[i * n..(i + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            da[i * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = val(*gamma);
                let n = tg.len();
                let m = rstd.len();
                acc(*gamma, &mut |dg| {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dxhat[j] = g[i * n + j] * tg.data()[j];
                        }
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxhat, xh) / n as f64;
                        for j in 0..n {
                            dx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::MeanGroups { x, groups } => {
                let n = val(*x).cols();
                acc(*x, &mut |dx| {
                    for (gi, rows) in groups.iter().enumerate() {
                        let k = rows.len() as f64;
                        for &r in rows {
                            for j in 0..n {
                                dx[r * n + j] += g[gi * n + j] / k;
                            }
                        }
                    }
                });
            }
            Op::Gather { x, rows } => {
                let n = val(*x).cols();
                acc(*x, &mut |dx| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &mut |dp| add_into(dp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let m = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    acc(p, &mut |dp| {
                        for i in 0..m {
                            add_into(&mut dp[i * c..(i + 1) * c], &g[i * n + off..i * n + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let n = val(*x).cols();
                let c = node.value.cols();
                let m = node.value.rows();
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        add_into(&mut dx[i * n + start..i * n + start + c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let n = val(*logits).cols();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |dl| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(y) = t else { continue };
                        for j in 0..n {
                            dl[i * n + j] += scale * probs[i * n + j];
                        }
                        dl[i * n + y] -= scale;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if no path reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients of every parameter registered on the tape, keyed by name.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.wrt(*v)))
            .collect()
    }
}
