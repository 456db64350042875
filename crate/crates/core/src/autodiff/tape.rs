//! Dynamic tape of matrix operations with reverse-mode gradients.
//!
//! A [`Tape`] is rebuilt for every forward pass; each operation appends a node
//! holding its value and the recipe for propagating gradients to its inputs.
//! Parameters enter through [`Tape::param`] and receive their gradients in
//! the [`ParamStore`] on [`Tape::backward`].

use std::collections::HashMap;

use super::{AutodiffError, BatchNormState, BatchStats, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    SoftmaxRow(Var),
    LogSoftmaxRow(Var),
    Log(Var),
    SegmentMean { x: Var, segments: Vec<(usize, usize)> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, training: bool },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { x: Var, rows: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    CrossEntropy { p: Var, labels: Vec<usize> },
    CrossEntropyLogits { x: Var, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass, per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &str, detail: String) -> AutodiffError {
    AutodiffError::Shape(format!("{op}: {detail}"))
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Relu(x) | Op::SoftmaxRow(x) | Op::LogSoftmaxRow(x) | Op::Log(x) => vec![*x],
            Op::SegmentMean { x, .. } | Op::GatherRows { x, .. } | Op::ScatterRows { x, .. } | Op::Gather { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Sum(x) | Op::Mean(x) | Op::Reshape(x) => vec![*x],
            Op::CrossEntropy { p, .. } => vec![*p],
            Op::CrossEntropyLogits { x, .. } => vec![*x],
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// An input that gradients are tracked for, readable from [`Gradients`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// The parameter's current value. Each parameter appears at most once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// `x · W + b` with `b` a row broadcast over the rows of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.1 != ws.0 || bs != (1, ws.1) {
            return Err(shape_err("linear", format!("x {xs:?}, W {ws:?}, b {bs:?}")));
        }
        let mut out = self.value(x).matmul(self.value(w));
        let bias = &self.value(b).data;
        for r in 0..out.rows {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bias) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Row-wise softmax, computed with max subtraction.
    pub fn softmax_row(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRow(x))
    }

    pub fn log_softmax_row(&mut self, x: Var) -> Var {
        let out = log_softmax_rows(self.value(x));
        self.push(out, Op::LogSoftmaxRow(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        if let Some(bad) = v.data.iter().find(|&&a| a <= 0.0 || a.is_nan()) {
            return Err(AutodiffError::NonPositiveLog(*bad));
        }
        let out = Tensor { rows: v.rows, cols: v.cols, data: v.data.iter().map(|a| a.ln()).collect() };
        Ok(self.push(out, Op::Log(x)))
    }

    /// Column means over all rows: `n×d -> 1×d`. An empty input gives zeros.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let n = self.shape(x).0;
        self.segment_mean(x, &[(0, n)]).expect("full range is a valid segment")
    }

    /// Means over contiguous row ranges `(start, len)`: one output row per
    /// segment; empty segments give zero rows.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let d = xv.cols;
        let mut out = Tensor::zeros(segments.len(), d);
        for (s, &(start, len)) in segments.iter().enumerate() {
            if start + len > xv.rows {
                return Err(shape_err("segment_mean", format!("segment {start}+{len} exceeds {} rows", xv.rows)));
            }
            if len == 0 {
                continue;
            }
            let o = out.row_mut(s);
            for r in start..start + len {
                for (a, b) in o.iter_mut().zip(xv.row(r)) {
                    *a += b;
                }
            }
            let inv = 1.0 / len as f64;
            o.iter_mut().for_each(|a| *a *= inv);
        }
        Ok(self.push(out, Op::SegmentMean { x, segments: segments.to_vec() }))
    }

    /// Batch normalization over rows. In training mode the batch statistics
    /// are used (and returned so the caller can fold them into the running
    /// estimates); otherwise the running statistics of `state`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        training: bool,
    ) -> Result<(Var, Option<BatchStats>), AutodiffError> {
        let (n, d) = self.shape(x);
        if self.shape(gamma) != (1, d) || self.shape(beta) != (1, d) || state.dim() != d {
            return Err(shape_err(
                "batchnorm",
                format!("x {:?}, gamma {:?}, beta {:?}, state {}", (n, d), self.shape(gamma), self.shape(beta), state.dim()),
            ));
        }
        let xv = self.value(x);
        let (mean, var) = if training {
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            if n > 0 {
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        for r in 0..n {
            for c in 0..d {
                let h = (xv.get(r, c) - mean[c]) * inv_std[c];
                xhat.data[r * d + c] = h;
                out.data[r * d + c] = g[c] * h + b[c];
            }
        }
        let stats = (training && n > 0).then_some(BatchStats { mean, var });
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, training });
        Ok((v, stats))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(shape_err("concat_cols", format!("row counts differ: {shapes:?}")));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.data[r * cols + off..r * cols + off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Output row `i` is row `rows[i]` of `x`; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if let Some(&r) = rows.iter().find(|&&r| r >= xv.rows) {
            return Err(shape_err("gather_rows", format!("row {r} of {}", xv.rows)));
        }
        let mut out = Tensor::zeros(rows.len(), xv.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Places row `i` of `x` at row `rows[i]` of an `n`-row zero matrix.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], n: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if rows.len() != xv.rows || rows.iter().any(|&r| r >= n) {
            return Err(shape_err("scatter_rows", format!("{} rows into {n} via {rows:?}", xv.rows)));
        }
        let mut out = Tensor::zeros(n, xv.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        Ok(self.push(out, Op::ScatterRows { x, rows: rows.to_vec() }))
    }

    /// Picks entries by flat row-major index into a `1×m` row.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if let Some(&i) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(shape_err("gather", format!("index {i} of {}", xv.len())));
        }
        let out = Tensor::row_vector(idx.iter().map(|&i| xv.data[i]).collect());
        Ok(self.push(out, Op::Gather { x, idx: idx.to_vec() }))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = Tensor { rows: av.rows, cols: av.cols, data: av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect() };
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean of all entries; 0 for an empty tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = if v.is_empty() { 0.0 } else { v.data.iter().sum::<f64>() / v.len() as f64 };
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let out = Tensor::from_vec(rows, cols, v.data.clone())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Mean over rows of `-ln p[i, labels[i]]`, where `p` holds probabilities.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let pv = self.value(p);
        if labels.len() != pv.rows || labels.iter().any(|&l| l >= pv.cols) {
            return Err(shape_err("cross_entropy", format!("{} labels for {:?}", labels.len(), pv.shape())));
        }
        let mut total = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let q = pv.get(r, l);
            if q <= 0.0 {
                return Err(AutodiffError::NonPositiveLog(q));
            }
            total -= q.ln();
        }
        let n = labels.len().max(1) as f64;
        Ok(self.push(Tensor::scalar(total / n), Op::CrossEntropy { p, labels: labels.to_vec() }))
    }

    /// Cross-entropy on logits, fused with a stable log-softmax.
    pub fn cross_entropy_logits(&mut self, x: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if labels.len() != xv.rows || labels.iter().any(|&l| l >= xv.cols) {
            return Err(shape_err("cross_entropy_logits", format!("{} labels for {:?}", labels.len(), xv.shape())));
        }
        let logp = log_softmax_rows(xv);
        let total: f64 = labels.iter().enumerate().map(|(r, &l)| -logp.get(r, l)).sum();
        let n = labels.len().max(1) as f64;
        let probs = softmax_rows(xv);
        Ok(self.push(Tensor::scalar(total / n), Op::CrossEntropyLogits { x, labels: labels.to_vec(), probs }))
    }

    /// Reverse pass from a scalar output. Parameter gradients are added to
    /// the store's accumulators; per-node gradients are returned.
    pub fn backward(&self, out: Var, store: &mut ParamStore) -> Result<Gradients, AutodiffError> {
        if self.shape(out) != (1, 1) {
            return Err(AutodiffError::NotScalar(self.shape(out)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if let Op::Param(id) = self.nodes[i].op {
                store.grad_mut(id).add_assign(&g);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if needs(x) {
                    acc(*x, g.matmul_t(wv));
                }
                if needs(w) {
                    acc(*w, xv.t_matmul(g));
                }
                let mut db = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*b, db);
            }
            Op::Relu(x) => {
                let y = &node.value;
                let data = g.data.iter().zip(&y.data).map(|(gg, yy)| if *yy > 0.0 { *gg } else { 0.0 }).collect();
                acc(*x, Tensor { rows: g.rows, cols: g.cols, data });
            }
            Op::SoftmaxRow(x) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((d, gg), yy) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = yy * (gg - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmaxRow(x) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let total: f64 = g.row(r).iter().sum();
                    for ((d, gg), yy) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = gg - yy.exp() * total;
                    }
                }
                acc(*x, dx);
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let data = g.data.iter().zip(&xv.data).map(|(gg, a)| gg / a).collect();
                acc(*x, Tensor { rows: g.rows, cols: g.cols, data });
            }
            Op::SegmentMean { x, segments } => {
                let (n, d) = self.shape(*x);
                let mut dx = Tensor::zeros(n, d);
                for (s, &(start, len)) in segments.iter().enumerate() {
                    if len == 0 {
                        continue;
                    }
                    let inv = 1.0 / len as f64;
                    for r in start..start + len {
                        for (a, b) in dx.row_mut(r).iter_mut().zip(g.row(s)) {
                            *a += b * inv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let (n, d) = xhat.shape();
                let gv = &self.value(*gamma).data;
                let mut dgamma = Tensor::zeros(1, d);
                let mut dbeta = Tensor::zeros(1, d);
                for r in 0..n {
                    for c in 0..d {
                        dgamma.data[c] += g.get(r, c) * xhat.get(r, c);
                        dbeta.data[c] += g.get(r, c);
                    }
                }
                let mut dx = Tensor::zeros(n, d);
                if *training {
                    let nf = n as f64;
                    for c in 0..d {
                        // dxhat = g * gamma; sums over the batch
                        let s1 = dbeta.data[c] * gv[c];
                        let s2 = dgamma.data[c] * gv[c];
                        for r in 0..n {
                            let dxh = g.get(r, c) * gv[c];
                            dx.data[r * d + c] = inv_std[c] / nf * (nf * dxh - s1 - xhat.get(r, c) * s2);
                        }
                    }
                } else {
                    for r in 0..n {
                        for c in 0..d {
                            dx.data[r * d + c] = g.get(r, c) * gv[c] * inv_std[c];
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let mut dp = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                    }
                    off += cols;
                    acc(p, dp);
                }
            }
            Op::GatherRows { x, rows } => {
                let (n, d) = self.shape(*x);
                let mut dx = Tensor::zeros(n, d);
                for (i, &r) in rows.iter().enumerate() {
                    for (a, b) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *a += b;
                    }
                }
                acc(*x, dx);
            }
            Op::ScatterRows { x, rows } => {
                let (n, d) = self.shape(*x);
                let mut dx = Tensor::zeros(n, d);
                for (i, &r) in rows.iter().enumerate() {
                    dx.row_mut(i).copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::Gather { x, idx } => {
                let (n, d) = self.shape(*x);
                let mut dx = Tensor::zeros(n, d);
                for (k, &i) in idx.iter().enumerate() {
                    dx.data[i] += g.data[k];
                }
                acc(*x, dx);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                let mut neg = g.clone();
                neg.scale_assign(-1.0);
                acc(*b, neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                let db = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                acc(*a, Tensor { rows: g.rows, cols: g.cols, data: da });
                acc(*b, Tensor { rows: g.rows, cols: g.cols, data: db });
            }
            Op::Scale(x, s) => {
                let mut dx = g.clone();
                dx.scale_assign(*s);
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let (n, d) = self.shape(*x);
                acc(*x, Tensor::filled(n, d, g.item()));
            }
            Op::Mean(x) => {
                let (n, d) = self.shape(*x);
                let k = (n * d).max(1) as f64;
                acc(*x, Tensor::filled(n, d, g.item() / k));
            }
            Op::Reshape(x) => {
                let (n, d) = self.shape(*x);
                acc(*x, Tensor { rows: n, cols: d, data: g.data.clone() });
            }
            Op::CrossEntropy { p, labels } => {
                let pv = self.value(*p);
                let mut dp = Tensor::zeros(pv.rows, pv.cols);
                let n = labels.len().max(1) as f64;
                for (r, &l) in labels.iter().enumerate() {
                    dp.data[r * pv.cols + l] = -g.item() / (n * pv.get(r, l));
                }
                acc(*p, dp);
            }
            Op::CrossEntropyLogits { x, labels, probs } => {
                let mut dx = probs.clone();
                let n = labels.len().max(1) as f64;
                for (r, &l) in labels.iter().enumerate() {
                    dx.data[r * probs.cols + l] -= 1.0;
                }
                dx.scale_assign(g.item() / n);
                acc(*x, dx);
            }
        }
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}
