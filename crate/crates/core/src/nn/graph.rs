use super::tensor::gemm;
use super::{NnError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]` before logs.
pub const BCE_EPS: f64 = 1e-7;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    WeightedBce { p: Var, y: f64, w_pos: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation tape. Build one per forward pass, call
/// [`Graph::backward`] on a scalar, then read gradients or push them into a
/// [`ParamStore`].
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    track: bool,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), track: true, grads: Vec::new() }
    }

    /// A graph that records no gradient information, for inference.
    pub fn inference() -> Self {
        Self { track: false, ..Self::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.track && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input leaf whose gradient is recorded.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs_grad = self.track;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let p = store.get(id);
        let needs_grad = self.track && !p.frozen;
        self.nodes.push(Node { value: p.value.clone(), op: Op::Leaf, needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.rows(), t.cols(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (tx, tr) = (self.value(x), self.value(row));
        assert_eq!(tr.rows(), 1, "add_row expects a single row");
        assert_eq!(tx.cols(), tr.cols(), "add_row width mismatch");
        let n = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + tr.data()[i % n]).collect();
        let out = Tensor::new(tx.rows(), n, data);
        self.push(out, Op::AddRow(x, row), &[x, row])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x + c);
        self.push(out, Op::AddConst(a), &[a])
    }

    /// Multiplies every entry of `x` by the `1 x 1` variable `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.map(x, |v| v * sv);
        self.push(out, Op::MulScalar(x, s), &[x, s])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i + offset`
    /// is excluded and comes out as exactly zero, where
    /// `offset = cols - rows`.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let offset = c.saturating_sub(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            let lim = if causal { (i + offset + 1).min(c) } else { c };
            let m = row[..lim].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut s = 0.0;
            for j in 0..lim {
                o[j] = (row[j] - m).exp();
                s += o[j];
            }
            o[..lim].iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(r, c, out);
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row layer normalization with `1 x n` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), c, "layer_norm gain width");
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(r, c, out);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let data = (0..t.rows())
            .flat_map(|i| t.row_slice(i)[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(t.rows(), len, data);
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        assert!(parts.iter().all(|&p| self.value(p).rows() == rows), "concat_cols rows");
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::new(rows, cols, data);
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        assert!(parts.iter().all(|&p| self.value(p).cols() == cols), "concat_rows cols");
        let data: Vec<f64> =
            parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        let out = Tensor::new(data.len() / cols.max(1), cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Gathers rows by index; repeated indices are allowed.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let t = self.value(x);
        let data = rows.iter().flat_map(|&r| t.row_slice(r).iter().copied()).collect();
        let out = Tensor::new(rows.len(), t.cols(), data);
        self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, &[x])
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v / r as f64;
            }
        }
        self.push(Tensor::row(out), Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean softmax cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), targets.len(), "one target per row");
        let c = t.cols();
        let mut probs = vec![0.0; t.len()];
        let mut loss = 0.0;
        let mut count = 0;
        for (i, tgt) in targets.iter().enumerate() {
            let row = t.row_slice(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - m).exp() / z;
            }
            if let Some(k) = *tgt {
                loss -= row[k] - m - z.ln();
                count += 1;
            }
        }
        let out = Tensor::scalar(if count > 0 { loss / count as f64 } else { 0.0 });
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count };
        self.push(out, op, &[logits])
    }

    /// `-(w_pos * y * ln p + (1 - y) * ln(1 - p))` for a `1 x 1` probability,
    /// with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn weighted_bce(&mut self, p: Var, y: f64, w_pos: f64) -> Var {
        let pv = self.value(p).item();
        let out = Tensor::scalar(weighted_bce(pv, y, w_pos));
        self.push(out, Op::WeightedBce { p, y, w_pos }, &[p])
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(NnError::NonScalarLoss { rows: shape[0], cols: shape[1] });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dc) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &dc, &mut grads);
            grads[i] = Some(dc);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds gradients of every bound, unfrozen parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            if let Some(g) = self.grad(v) {
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    fn backprop_node(&self, i: usize, dc: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.slot(*a, grads) {
                    // dA += dC * B^T
                    gemm(m, n, k, (dc, n, 1), (tb.data(), 1, n), ga, 1.0);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    // dB += A^T * dC
                    gemm(k, m, n, (ta.data(), 1, k), (dc, n, 1), gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, grads, |g| axpy(g, dc, 1.0));
                self.acc(*b, grads, |g| axpy(g, dc, 1.0));
            }
            Op::AddRow(x, row) => {
                self.acc(*x, grads, |g| axpy(g, dc, 1.0));
                let n = self.value(*row).cols();
                self.acc(*row, grads, |g| {
                    for (j, d) in dc.iter().enumerate() {
                        g[j % n] += d;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc(*a, grads, |g| axpy(g, dc, 1.0));
                self.acc(*b, grads, |g| axpy(g, dc, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(*a, grads, |g| {
                    g.iter_mut().zip(dc).zip(vb).for_each(|((g, d), v)| *g += d * v)
                });
                self.acc(*b, grads, |g| {
                    g.iter_mut().zip(dc).zip(va).for_each(|((g, d), v)| *g += d * v)
                });
            }
            Op::Scale(a, s) => self.acc(*a, grads, |g| axpy(g, dc, *s)),
            Op::AddConst(a) => self.acc(*a, grads, |g| axpy(g, dc, 1.0)),
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).item();
                let vx = self.value(*x).data();
                self.acc(*x, grads, |g| axpy(g, dc, sv));
                self.acc(*s, grads, |g| g[0] += dc.iter().zip(vx).map(|(d, v)| d * v).sum::<f64>());
            }
            Op::Sigmoid(a) => self.acc(*a, grads, |g| {
                g.iter_mut().zip(dc).zip(y).for_each(|((g, d), y)| *g += d * y * (1.0 - y))
            }),
            Op::Tanh(a) => self.acc(*a, grads, |g| {
                g.iter_mut().zip(dc).zip(y).for_each(|((g, d), y)| *g += d * (1.0 - y * y))
            }),
            Op::Gelu(a) => {
                let xs = self.value(*a).data();
                self.acc(*a, grads, |g| {
                    for ((g, d), &x) in g.iter_mut().zip(dc).zip(xs) {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *g += d * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                self.acc(*a, grads, |g| {
                    for i in 0..node.value.rows() {
                        let yr = &y[i * c..(i + 1) * c];
                        let dr = &dc[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[i * c + j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = node.value.cols();
                let gam = self.value(*gamma).data();
                self.acc(*gamma, grads, |g| {
                    for (j, (d, h)) in dc.iter().zip(xhat).enumerate() {
                        g[j % c] += d * h;
                    }
                });
                self.acc(*beta, grads, |g| {
                    for (j, d) in dc.iter().enumerate() {
                        g[j % c] += d;
                    }
                });
                self.acc(*x, grads, |g| {
                    for (i, is) in inv_std.iter().enumerate() {
                        let r = i * c..(i + 1) * c;
                        let dh: Vec<f64> = dc[r.clone()].iter().zip(gam).map(|(d, g)| d * g).collect();
                        let h = &xhat[r.clone()];
                        let m1 = dh.iter().sum::<f64>() / c as f64;
                        let m2 = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            g[i * c + j] += is * (dh[j] - m1 - h[j] * m2);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                self.acc(*a, grads, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j * r + i] += dc[i * c + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (len, src_c) = (node.value.cols(), self.value(*x).cols());
                self.acc(*x, grads, |g| {
                    for i in 0..node.value.rows() {
                        axpy(&mut g[i * src_c + start..i * src_c + start + len], &dc[i * len..(i + 1) * len], 1.0);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let c = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    self.acc(p, grads, |g| {
                        for i in 0..node.value.rows() {
                            axpy(&mut g[i * pc..(i + 1) * pc], &dc[i * c + off..i * c + off + pc], 1.0);
                        }
                    });
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(p, grads, |g| axpy(g, &dc[off..off + n], 1.0));
                    off += n;
                }
            }
            Op::SelectRows { x, rows } => {
                let c = node.value.cols();
                self.acc(*x, grads, |g| {
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut g[r * c..(r + 1) * c], &dc[i * c..(i + 1) * c], 1.0);
                    }
                });
            }
            Op::MeanRows(x) => {
                let t = self.value(*x);
                let (r, c) = (t.rows(), t.cols());
                self.acc(*x, grads, |g| {
                    for i in 0..r {
                        axpy(&mut g[i * c..(i + 1) * c], dc, 1.0 / r as f64);
                    }
                });
            }
            Op::Sum(x) => self.acc(*x, grads, |g| g.iter_mut().for_each(|v| *v += dc[0])),
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let c = self.value(*logits).cols();
                let s = dc[0] / *count as f64;
                self.acc(*logits, grads, |g| {
                    for (i, tgt) in targets.iter().enumerate() {
                        let Some(k) = *tgt else { continue };
                        for j in 0..c {
                            g[i * c + j] += s * probs[i * c + j];
                        }
                        g[i * c + k] -= s;
                    }
                });
            }
            Op::WeightedBce { p, y, w_pos } => {
                let pv = self.value(*p).item();
                self.acc(*p, grads, |g| g[0] += dc[0] * weighted_bce_grad(pv, *y, *w_pos));
            }
        }
    }

    fn slot<'a>(&self, v: Var, grads: &'a mut [Option<Vec<f64>>]) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn acc(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.slot(v, grads) {
            f(g);
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Positive-weighted binary cross-entropy on a probability.
pub fn weighted_bce(p: f64, y: f64, w_pos: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(w_pos * y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn weighted_bce_grad(p: f64, y: f64, w_pos: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    -(w_pos * y / p - (1.0 - y) / (1.0 - p))
}
