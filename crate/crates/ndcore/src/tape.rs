//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Each op
//! returns a [`Var`] handle; ops whose inputs do not require gradients are
//! stored as plain values with no backward record, so an inference tape never
//! pays for bookkeeping. Build a fresh tape per sample.

use std::sync::Arc;

use crate::error::{NdError, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Recip(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    SoftmaxNeighbors(Var, usize),
    L2NormRows(Var),
    LayerNormRows(Var, f64),
    Max(Var, usize),
    Diag(Var),
    PairwiseDiff(Var),
    PairBroadcastAdd(Var, Var),
    HeadScores(Var, Var, usize),
    HeadAggregate(Var, Var, usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `f(a[i][j], row[j])` for every row of the row-major `a`.
fn broadcast_row(a: &[f64], row: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for chunk in a.chunks_exact(row.len()) {
        out.extend(chunk.iter().zip(row).map(|(&x, &y)| f(x, y)));
    }
    out
}

impl Tape {
    /// A tape that records backward information.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that only evaluates values; `leaf(.., true)` is ignored.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`. `None` when
    /// `v` does not require gradients or was not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NdError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, &[a])
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (dims(self.value(a)), dims(self.value(b)));
        if k != k2 {
            return Err(NdError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        Ok(self.push(Tensor::mat(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_operand(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (r, c) = dims(self.value(a));
        let rs = self.shape(row);
        if rs != [1, c] {
            return Err(NdError::ShapeMismatch {
                op,
                lhs: vec![r, c],
                rhs: rs.to_vec(),
            });
        }
        Ok((r, c))
    }

    /// `a + row` with `row` (`1 x c`) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_operand("add_row", a, row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let data = broadcast_row(ta.data(), tr.data(), |x, y| x + y);
        Ok(self.push(Tensor::mat(r, c, data), Op::AddRow(a, row), &[a, row]))
    }

    /// `a * row` with `row` (`1 x c`) broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_operand("mul_row", a, row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let data = broadcast_row(ta.data(), tr.data(), |x, y| x * y);
        Ok(self.push(Tensor::mat(r, c, data), Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + offset)
    }

    /// `a * s` for a `1 x 1` variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(NdError::BadShape {
                op: "scale_by",
                expected: "a 1x1 scale".into(),
                got: self.shape(s).to_vec(),
            });
        }
        let k = self.value(s).item();
        let out = self.value(a).map(|x| x * k);
        Ok(self.push(out, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(NdError::BadShape {
                op: "concat_cols",
                expected: "at least one operand".into(),
                got: vec![],
            });
        };
        let r = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims(self.value(p));
            if pr != r {
                return Err(NdError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(row));
            }
        }
        Ok(self.push(Tensor::mat(r, total, data), Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        if start >= end || end > c {
            return Err(NdError::BadShape {
                op: "slice_cols",
                expected: format!("column range {start}..{end} within {c} columns"),
                got: self.shape(a).to_vec(),
            });
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(r * (end - start));
        for row in 0..r {
            data.extend_from_slice(&t.row(row)[start..end]);
        }
        Ok(self.push(Tensor::mat(r, end - start, data), Op::SliceCols(a, start), &[a]))
    }

    /// `diag(v)` for a column vector `v` (`n x 1`).
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (n, c) = dims(self.value(a));
        if c != 1 {
            return Err(NdError::BadShape {
                op: "diag",
                expected: "a column vector".into(),
                got: self.shape(a).to_vec(),
            });
        }
        let t = self.value(a);
        let out = Tensor::from_fn(n, n, |i, j| if i == j { t.data()[i] } else { 0.0 });
        Ok(self.push(out, Op::Diag(a), &[a]))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let out = Tensor::mat(t.rows(), 1, data);
        self.push(out, Op::SumCols(a), &[a])
    }

    /// Column means: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = dims(t);
        let mut data = vec![0.0; c];
        for row in 0..r {
            for (acc, &x) in data.iter_mut().zip(t.row(row)) {
                *acc += x;
            }
        }
        data.iter_mut().for_each(|x| *x /= r as f64);
        self.push(Tensor::mat(1, c, data), Op::MeanRows(a), &[a])
    }

    /// Maximum entry as a `1 x 1`; the gradient goes to the first maximiser.
    pub fn max(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (idx, m) = t
            .data()
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best });
        self.push(Tensor::scalar(m), Op::Max(a, idx), &[a])
    }

    pub fn l2_norm_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows())
            .map(|r| t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::mat(t.rows(), 1, data);
        self.push(out, Op::L2NormRows(a), &[a])
    }

    // ---- normalisation --------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = dims(t);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_strided(row, 0, 1, c);
        }
        self.push(Tensor::mat(r, c, data), Op::SoftmaxRows(a), &[a])
    }

    /// Softmax over the neighbour axis of a pair tensor.
    ///
    /// `a` is `n*n x h` with row `i*n + j` holding the scores of pair `(i, j)`;
    /// for every `(i, head)` the `n` scores over `j` are normalised.
    pub fn softmax_neighbors(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, h) = dims(self.value(a));
        if r != n * n {
            return Err(NdError::BadShape {
                op: "softmax_neighbors",
                expected: format!("{} pair rows", n * n),
                got: self.shape(a).to_vec(),
            });
        }
        let mut data = self.value(a).data().to_vec();
        for block in data.chunks_mut(n * h) {
            for k in 0..h {
                softmax_strided(block, k, h, n);
            }
        }
        Ok(self.push(Tensor::mat(r, h, data), Op::SoftmaxNeighbors(a, n), &[a]))
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let (r, c) = dims(t);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let (mean, inv_std) = row_moments(row, eps);
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv_std);
        }
        self.push(Tensor::mat(r, c, data), Op::LayerNormRows(a, eps), &[a])
    }

    // ---- pair / attention kernels ---------------------------------------

    /// `n x d -> n*n x d`, row `i*n + j` holds `x_i - x_j`.
    pub fn pairwise_diff(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, d) = dims(t);
        let mut data = Vec::with_capacity(n * n * d);
        for i in 0..n {
            for j in 0..n {
                data.extend(t.row(i).iter().zip(t.row(j)).map(|(x, y)| x - y));
            }
        }
        self.push(Tensor::mat(n * n, d, data), Op::PairwiseDiff(a), &[a])
    }

    /// `n x c, n x c -> n*n x c`, row `i*n + j` holds `a_i + b_j`.
    pub fn pair_broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("pair_broadcast_add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, c) = dims(ta);
        let mut data = Vec::with_capacity(n * n * c);
        for i in 0..n {
            for j in 0..n {
                data.extend(ta.row(i).iter().zip(tb.row(j)).map(|(x, y)| x + y));
            }
        }
        Ok(self.push(Tensor::mat(n * n, c, data), Op::PairBroadcastAdd(a, b), &[a, b]))
    }

    /// Per-head dot products: `q, k: n x d -> n*n x heads`, where entry
    /// `(i*n + j, h)` is `q_i . k_j` restricted to the columns of head `h`.
    pub fn head_scores(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        self.same_shape("head_scores", q, k)?;
        let (n, d) = dims(self.value(q));
        let hd = head_width("head_scores", d, heads, self.shape(q))?;
        let (tq, tk) = (self.value(q), self.value(k));
        let mut data = vec![0.0; n * n * heads];
        for i in 0..n {
            let qi = tq.row(i);
            for j in 0..n {
                let kj = tk.row(j);
                let out = &mut data[(i * n + j) * heads..(i * n + j + 1) * heads];
                for (h, o) in out.iter_mut().enumerate() {
                    let cols = h * hd..(h + 1) * hd;
                    *o = qi[cols.clone()].iter().zip(&kj[cols]).map(|(x, y)| x * y).sum();
                }
            }
        }
        Ok(self.push(Tensor::mat(n * n, heads, data), Op::HeadScores(q, k, heads), &[q, k]))
    }

    /// Attention-weighted sum: `attn: n*n x heads, v: n x d -> n x d`, where
    /// `out[i, c] = sum_j attn[i*n + j, head(c)] * v[j, c]`.
    pub fn head_aggregate(&mut self, attn: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = dims(self.value(v));
        let hd = head_width("head_aggregate", d, heads, self.shape(v))?;
        if self.shape(attn) != [n * n, heads] {
            return Err(NdError::ShapeMismatch {
                op: "head_aggregate",
                lhs: self.shape(attn).to_vec(),
                rhs: vec![n * n, heads],
            });
        }
        let (ta, tv) = (self.value(attn), self.value(v));
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let out = &mut data[i * d..(i + 1) * d];
            for j in 0..n {
                let w = ta.row(i * n + j);
                for (c, (o, &x)) in out.iter_mut().zip(tv.row(j)).enumerate() {
                    *o += w[c / hd] * x;
                }
            }
        }
        Ok(self.push(Tensor::mat(n, d, data), Op::HeadAggregate(attn, v, heads), &[attn, v]))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a `1 x 1` loss. Gradients of every node that
    /// requires them are available through [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(NdError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        acc[loss.0] = Some(vec![1.0]);
        self.grads = vec![None; self.nodes.len()];
        for idx in (0..=loss.0).rev() {
            let Some(g) = acc[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut acc);
            let shape = self.nodes[idx].value.shape().to_vec();
            self.grads[idx] = Some(Tensor::new(shape, g).expect("gradient shape"));
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], acc: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.as_ref();
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut acc[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot => *slot = Some(delta),
            }
        };
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
            // f(grad, input, output)
            val(a)
                .data()
                .iter()
                .zip(out)
                .zip(g)
                .map(|((&x, &y), &gi)| f(gi, x, y))
                .collect()
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (dims(val(a)), dims(val(b)));
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(m, n, k, g, val(b).data(), &mut ga);
                    send(a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(k, m, n, val(a).data(), g, &mut gb);
                    send(b, gb);
                }
            }
            &Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|x| -x).collect());
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (val(a).data(), val(b).data());
                send(a, g.iter().zip(tb).map(|(x, y)| x * y).collect());
                send(b, g.iter().zip(ta).map(|(x, y)| x * y).collect());
            }
            &Op::AddRow(a, row) => {
                let c = val(row).cols();
                let mut gr = vec![0.0; c];
                for gi in g.chunks_exact(c) {
                    gr.iter_mut().zip(gi).for_each(|(s, x)| *s += x);
                }
                send(a, g.to_vec());
                send(row, gr);
            }
            &Op::MulRow(a, row) => {
                let (ta, tr) = (val(a).data(), val(row).data());
                let c = tr.len();
                let mut gr = vec![0.0; c];
                for (gi, ai) in g.chunks_exact(c).zip(ta.chunks_exact(c)) {
                    gr.iter_mut().zip(gi.iter().zip(ai)).for_each(|(s, (x, y))| *s += x * y);
                }
                send(a, broadcast_row(g, tr, |x, y| x * y));
                send(row, gr);
            }
            &Op::Scale(a, f) => send(a, g.iter().map(|x| x * f).collect()),
            &Op::AddScalar(a) => send(a, g.to_vec()),
            &Op::ScaleBy(a, s) => {
                let k = val(s).item();
                let ta = val(a).data();
                send(a, g.iter().map(|x| x * k).collect());
                send(s, vec![g.iter().zip(ta).map(|(x, y)| x * y).sum()]);
            }
            &Op::Recip(a) => send(a, elementwise(a, &|gi, _, y| -gi * y * y)),
            Op::ConcatCols(parts) => {
                let r = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    let mut gp = Vec::with_capacity(r * pc);
                    for row in 0..r {
                        gp.extend_from_slice(&g[row * total + offset..row * total + offset + pc]);
                    }
                    offset += pc;
                    send(p, gp);
                }
            }
            &Op::SliceCols(a, start) => {
                let (r, c) = dims(val(a));
                let w = node.value.cols();
                let mut ga = vec![0.0; r * c];
                for row in 0..r {
                    ga[row * c + start..row * c + start + w].copy_from_slice(&g[row * w..(row + 1) * w]);
                }
                send(a, ga);
            }
            &Op::Reshape(a) => send(a, g.to_vec()),
            &Op::Transpose(a) => {
                let (r, c) = dims(&node.value);
                send(a, Tensor::mat(r, c, g.to_vec()).transpose().into_data());
            }
            &Op::Sum(a) => send(a, vec![g[0]; val(a).len()]),
            &Op::Mean(a) => {
                let len = val(a).len();
                send(a, vec![g[0] / len as f64; len]);
            }
            &Op::SumCols(a) => {
                let (r, c) = dims(val(a));
                let mut ga = Vec::with_capacity(r * c);
                g[..r].iter().for_each(|&x| ga.resize(ga.len() + c, x));
                send(a, ga);
            }
            &Op::MeanRows(a) => {
                let (r, _) = dims(val(a));
                let row: Vec<f64> = g.iter().map(|x| x / r as f64).collect();
                send(a, row.repeat(r));
            }
            &Op::Sigmoid(a) => send(a, elementwise(a, &|gi, _, y| gi * y * (1.0 - y))),
            &Op::Relu(a) => send(a, elementwise(a, &|gi, x, _| if x > 0.0 { gi } else { 0.0 })),
            &Op::Tanh(a) => send(a, elementwise(a, &|gi, _, y| gi * (1.0 - y * y))),
            &Op::LeakyRelu(a, slope) => {
                send(a, elementwise(a, &|gi, x, _| if x > 0.0 { gi } else { slope * gi }))
            }
            &Op::Exp(a) => send(a, elementwise(a, &|gi, _, y| gi * y)),
            &Op::Log(a) => send(a, elementwise(a, &|gi, x, _| gi / x)),
            &Op::Square(a) => send(a, elementwise(a, &|gi, x, _| 2.0 * x * gi)),
            &Op::Clamp(a, lo, hi) => send(
                a,
                elementwise(a, &|gi, x, _| if x > lo && x < hi { gi } else { 0.0 }),
            ),
            &Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out_r) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                    softmax_backward(gr, yr, out_r, 0, 1, c);
                }
                send(a, ga);
            }
            &Op::SoftmaxNeighbors(a, n) => {
                let h = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for i in 0..n {
                    let span = i * n * h..(i + 1) * n * h;
                    for k in 0..h {
                        softmax_backward(&g[span.clone()], &out[span.clone()], &mut ga[span.clone()], k, h, n);
                    }
                }
                send(a, ga);
            }
            &Op::L2NormRows(a) => {
                let t = val(a);
                let c = t.cols();
                let ga = (0..t.len())
                    .map(|i| {
                        let r = i / c;
                        if out[r] > 0.0 {
                            g[r] * t.data()[i] / out[r]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                send(a, ga);
            }
            &Op::LayerNormRows(a, eps) => {
                let t = val(a);
                let c = t.cols();
                let mut ga = vec![0.0; t.len()];
                for (r, gout) in ga.chunks_mut(c).enumerate() {
                    let (_, inv_std) = row_moments(t.row(r), eps);
                    let gr = &g[r * c..(r + 1) * c];
                    let xhat = &out[r * c..(r + 1) * c];
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gx = gr.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((o, &gi), &xh) in gout.iter_mut().zip(gr).zip(xhat) {
                        *o = inv_std * (gi - mean_g - xh * mean_gx);
                    }
                }
                send(a, ga);
            }
            &Op::Max(a, arg) => {
                let mut ga = vec![0.0; val(a).len()];
                ga[arg] = g[0];
                send(a, ga);
            }
            &Op::Diag(a) => {
                let n = val(a).rows();
                send(a, (0..n).map(|i| g[i * n + i]).collect());
            }
            &Op::PairwiseDiff(a) => {
                let (n, d) = dims(val(a));
                let mut ga = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        let gij = &g[(i * n + j) * d..(i * n + j + 1) * d];
                        for (c, &x) in gij.iter().enumerate() {
                            ga[i * d + c] += x;
                            ga[j * d + c] -= x;
                        }
                    }
                }
                send(a, ga);
            }
            &Op::PairBroadcastAdd(a, b) => {
                let (n, c) = dims(val(a));
                let mut ga = vec![0.0; n * c];
                let mut gb = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..c {
                            let x = g[(i * n + j) * c + k];
                            ga[i * c + k] += x;
                            gb[j * c + k] += x;
                        }
                    }
                }
                send(a, ga);
                send(b, gb);
            }
            &Op::HeadScores(q, k, heads) => {
                let (tq, tk) = (val(q), val(k));
                let (n, d) = dims(tq);
                let hd = d / heads;
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        let gij = &g[(i * n + j) * heads..(i * n + j + 1) * heads];
                        for c in 0..d {
                            let w = gij[c / hd];
                            gq[i * d + c] += w * tk.data()[j * d + c];
                            gk[j * d + c] += w * tq.data()[i * d + c];
                        }
                    }
                }
                send(q, gq);
                send(k, gk);
            }
            &Op::HeadAggregate(attn, v, heads) => {
                let (ta, tv) = (val(attn), val(v));
                let (n, d) = dims(tv);
                let hd = d / heads;
                let mut gattn = vec![0.0; n * n * heads];
                let mut gv = vec![0.0; n * d];
                for i in 0..n {
                    let gi = &g[i * d..(i + 1) * d];
                    for j in 0..n {
                        let w = ta.row(i * n + j);
                        let vj = tv.row(j);
                        for c in 0..d {
                            gattn[(i * n + j) * heads + c / hd] += gi[c] * vj[c];
                            gv[j * d + c] += w[c / hd] * gi[c];
                        }
                    }
                }
                send(attn, gattn);
                send(v, gv);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn head_width(op: &'static str, d: usize, heads: usize, shape: &[usize]) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(NdError::BadShape {
            op,
            expected: format!("feature width divisible by {heads} heads"),
            got: shape.to_vec(),
        });
    }
    Ok(d / heads)
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Softmax over `xs[offset + t * stride]` for `t in 0..count`.
fn softmax_strided(xs: &mut [f64], offset: usize, stride: usize, count: usize) {
    let idx = |t: usize| offset + t * stride;
    let max = (0..count).fold(f64::NEG_INFINITY, |m, t| m.max(xs[idx(t)]));
    let mut total = 0.0;
    for t in 0..count {
        let e = (xs[idx(t)] - max).exp();
        xs[idx(t)] = e;
        total += e;
    }
    for t in 0..count {
        xs[idx(t)] /= total;
    }
}

fn softmax_backward(g: &[f64], y: &[f64], out: &mut [f64], offset: usize, stride: usize, count: usize) {
    let idx = |t: usize| offset + t * stride;
    let dot: f64 = (0..count).map(|t| g[idx(t)] * y[idx(t)]).sum();
    for t in 0..count {
        out[idx(t)] = y[idx(t)] * (g[idx(t)] - dot);
    }
}
