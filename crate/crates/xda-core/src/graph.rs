//! Define-by-run reverse-mode autodiff tape.
//!
//! A [`Graph`] records every operation executed on it, in order. Nodes are
//! addressed by [`NodeId`] (plain indices into the tape). [`Graph::backward`]
//! walks the tape exactly once in reverse execution order, accumulating (by
//! summation) gradients into every node that requires them. Graphs are
//! rebuilt per training step and are confined to a single execution context
//! from forward through backward.
//!
//! The op set is intentionally minimal: exactly what a tiny transformer
//! segmentation model and its UDA losses need.

use crate::error::{CoreError, Result};
use crate::interp;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::PROB_EPS;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

const LN_EPS: f64 = 1e-5;

enum Op<F: Scalar> {
    Leaf,
    StopGrad(usize),
    Add(usize, usize),
    /// x[.., d] + row[d], broadcast over leading rows.
    AddRow { x: usize, row: usize },
    Mul(usize, usize),
    Scale(usize, F),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Reshape(usize),
    SliceCols { x: usize, rows: usize, cols: usize, start: usize, len: usize },
    ConcatCols { xs: Vec<usize>, rows: usize, widths: Vec<usize> },
    /// Vertical concatenation of 2-D blocks with equal column counts;
    /// storage is contiguous so the backward split is by numel.
    ConcatRows { xs: Vec<usize> },
    SoftmaxRows { x: usize, scale: F },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<F>, inv_std: Vec<F> },
    Relu(usize),
    BilinearResize { x: usize, h: usize, w: usize, c: usize, h2: usize, w2: usize },
    /// Weighted cross-entropy against fixed one-hot (or all-zero = ignored)
    /// targets, normalized by the count of non-ignored rows.
    CrossEntropy { logits: usize, probs: Vec<F>, target: Vec<F>, weight: Vec<F>, inv_count: F },
    /// Elementwise p*log(p/q) with p fixed (teacher side); gradients reach q only.
    KlRows { p: Vec<F>, q: usize },
    SumAll(usize),
    MeanRows { x: usize, rows: usize, cols: usize },
}

pub struct Graph<F: Scalar> {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<F>>,
    ops: Vec<Op<F>>,
    rg: Vec<bool>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            shapes: Vec::new(),
            values: Vec::new(),
            ops: Vec::new(),
            rg: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, rg: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.shapes.push(shape);
        self.values.push(value);
        self.ops.push(op);
        self.rg.push(rg);
        self.grads.push(None);
        NodeId(self.ops.len() - 1)
    }

    /// Enter a tensor into the graph; `requires_grad` marks it as a gradient
    /// target regardless of the tensor's own flag.
    pub fn leaf(&mut self, t: &Tensor<F>, requires_grad: bool) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    /// Constant leaf (never receives gradient).
    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: F) -> NodeId {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.values[id.0]
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        debug_assert_eq!(self.values[id.0].len(), 1);
        self.values[id.0][0]
    }

    /// Copy a node's value out of the graph as a detached tensor.
    pub fn detach(&self, id: NodeId) -> Tensor<F> {
        Tensor::new(self.shapes[id.0].clone(), self.values[id.0].clone())
            .expect("node shape/value length invariant")
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor<F>> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[id.0].clone(), g.clone()).unwrap())
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        match self.shapes[id.0].as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(CoreError::dim(op, format!("expected 2-d operand, got {:?}", other))),
        }
    }

    // ── elementwise and structural ops ──────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(CoreError::shape("add", &self.shapes[a.0], &self.shapes[b.0]));
        }
        let value: Vec<F> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg[a.0] || self.rg[b.0];
        Ok(self.push(self.shapes[a.0].clone(), value, Op::Add(a.0, b.0), rg))
    }

    /// Add a length-d row vector to every trailing-dimension row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let d = self.shapes[x.0].last().copied().unwrap_or(1);
        if self.values[row.0].len() != d {
            return Err(CoreError::shape("add_row", &self.shapes[x.0], &self.shapes[row.0]));
        }
        let r = &self.values[row.0];
        let value: Vec<F> = self.values[x.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % d])
            .collect();
        let rg = self.rg[x.0] || self.rg[row.0];
        Ok(self.push(self.shapes[x.0].clone(), value, Op::AddRow { x: x.0, row: row.0 }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(CoreError::shape("mul", &self.shapes[a.0], &self.shapes[b.0]));
        }
        let value: Vec<F> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg[a.0] || self.rg[b.0];
        Ok(self.push(self.shapes[a.0].clone(), value, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let value: Vec<F> = self.values[x.0].iter().map(|&v| v * c).collect();
        let rg = self.rg[x.0];
        self.push(self.shapes[x.0].clone(), value, Op::Scale(x.0, c), rg)
    }

    /// Forward identity whose backward contributes zero to all ancestors.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.values[x.0].clone();
        self.push(self.shapes[x.0].clone(), value, Op::StopGrad(x.0), false)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.values[x.0].len() {
            return Err(CoreError::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shapes[x.0], shape),
            ));
        }
        let value = self.values[x.0].clone();
        let rg = self.rg[x.0];
        Ok(self.push(shape, value, Op::Reshape(x.0), rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("transpose", x)?;
        let src = &self.values[x.0];
        let mut value = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg[x.0];
        Ok(self.push(vec![c, r], value, Op::Transpose { x: x.0, rows: r, cols: c }, rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if start + len > c {
            return Err(CoreError::dim(
                "slice_cols",
                format!("columns {}..{} out of range for width {}", start, start + len, c),
            ));
        }
        let src = &self.values[x.0];
        let mut value = Vec::with_capacity(r * len);
        for i in 0..r {
            value.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg[x.0];
        Ok(self.push(
            vec![r, len],
            value,
            Op::SliceCols { x: x.0, rows: r, cols: c, start, len },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(CoreError::dim("concat_cols", "no operands"));
        }
        let (rows, _) = self.dims2("concat_cols", xs[0])?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims2("concat_cols", x)?;
            if r != rows {
                return Err(CoreError::shape("concat_cols", &self.shapes[xs[0].0], &self.shapes[x.0]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                value.extend_from_slice(&self.values[x.0][i * w..(i + 1) * w]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg[x.0]);
        Ok(self.push(
            vec![rows, total],
            value,
            Op::ConcatCols { xs: xs.iter().map(|x| x.0).collect(), rows, widths },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(CoreError::dim("concat_rows", "no operands"));
        }
        let (_, cols) = self.dims2("concat_rows", xs[0])?;
        let mut rows = 0;
        let mut value = Vec::new();
        for &x in xs {
            let (r, c) = self.dims2("concat_rows", x)?;
            if c != cols {
                return Err(CoreError::shape("concat_rows", &self.shapes[xs[0].0], &self.shapes[x.0]));
            }
            rows += r;
            value.extend_from_slice(&self.values[x.0]);
        }
        let rg = xs.iter().any(|&x| self.rg[x.0]);
        Ok(self.push(
            vec![rows, cols],
            value,
            Op::ConcatRows { xs: xs.iter().map(|x| x.0).collect() },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(CoreError::shape("matmul", &self.shapes[a.0], &self.shapes[b.0]));
        }
        let mut value = vec![F::zero(); m * n];
        F::gemm(m, k, n, F::one(), &self.values[a.0], false, &self.values[b.0], false, F::zero(), &mut value);
        let rg = self.rg[a.0] || self.rg[b.0];
        Ok(self.push(vec![m, n], value, Op::MatMul { a: a.0, b: b.0, m, k, n }, rg))
    }

    // ── nonlinearities and normalizations ───────────────────────────────

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value: Vec<F> = self.values[x.0]
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let rg = self.rg[x.0];
        self.push(self.shapes[x.0].clone(), value, Op::Relu(x.0), rg)
    }

    /// Row-wise softmax of `scale * x` over the trailing dimension,
    /// stabilized by max-subtraction.
    pub fn softmax_rows(&mut self, x: NodeId, scale: F) -> Result<NodeId> {
        if scale <= F::zero() {
            return Err(CoreError::Contract(format!("softmax_rows: scale must be > 0, got {}", scale)));
        }
        let n = self.shapes[x.0].last().copied().unwrap_or(0);
        if n == 0 {
            return Err(CoreError::dim("softmax_rows", "empty trailing dimension"));
        }
        if self.values[x.0].iter().any(|v| !v.is_finite()) {
            return Err(CoreError::numeric("softmax_rows", "non-finite input logits"));
        }
        let src = &self.values[x.0];
        let mut value = vec![F::zero(); src.len()];
        for (row_in, row_out) in src.chunks_exact(n).zip(value.chunks_exact_mut(n)) {
            let mut mx = F::neg_infinity();
            for &v in row_in {
                let sv = v * scale;
                if sv > mx {
                    mx = sv;
                }
            }
            let mut sum = F::zero();
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v * scale - mx).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.rg[x.0];
        Ok(self.push(self.shapes[x.0].clone(), value, Op::SoftmaxRows { x: x.0, scale }, rg))
    }

    /// Per-row layer normalization over the trailing dimension with affine
    /// parameters gamma and beta (each length d).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let d = self.shapes[x.0].last().copied().unwrap_or(0);
        if d == 0 || self.values[gamma.0].len() != d || self.values[beta.0].len() != d {
            return Err(CoreError::shape("layer_norm", &self.shapes[x.0], &self.shapes[gamma.0]));
        }
        let eps = F::from_f64(LN_EPS);
        let src = &self.values[x.0];
        let g = &self.values[gamma.0];
        let b = &self.values[beta.0];
        let rows = src.len() / d;
        let mut value = vec![F::zero(); src.len()];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        let inv_d = F::one() / F::from_f64(d as f64);
        for (row_in, row_out) in src.chunks_exact(d).zip(value.chunks_exact_mut(d)) {
            let mean = row_in.iter().copied().sum::<F>() * inv_d;
            let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let inv = F::one() / (var + eps).sqrt();
            for ((o, &v), (&gi, &bi)) in row_out.iter_mut().zip(row_in).zip(g.iter().zip(b)) {
                *o = (v - mean) * inv * gi + bi;
            }
            means.push(mean);
            inv_stds.push(inv);
        }
        let rg = self.rg[x.0] || self.rg[gamma.0] || self.rg[beta.0];
        Ok(self.push(
            self.shapes[x.0].clone(),
            value,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean: means, inv_std: inv_stds },
            rg,
        ))
    }

    /// Bilinear interpolation of an [h, w, c] field to [h2, w2, c]
    /// (align-corners-false convention).
    pub fn bilinear_resize(&mut self, x: NodeId, h2: usize, w2: usize) -> Result<NodeId> {
        let (h, w, c) = match self.shapes[x.0].as_slice() {
            [h, w, c] => (*h, *w, *c),
            other => {
                return Err(CoreError::dim(
                    "bilinear_resize",
                    format!("expected [h, w, c] operand, got {:?}", other),
                ))
            }
        };
        if h2 == 0 || w2 == 0 {
            return Err(CoreError::dim("bilinear_resize", "target dimensions must be >= 1"));
        }
        let mut value = vec![F::zero(); h2 * w2 * c];
        interp::bilinear_forward(&self.values[x.0], h, w, c, h2, w2, &mut value);
        let rg = self.rg[x.0];
        Ok(self.push(
            vec![h2, w2, c],
            value,
            Op::BilinearResize { x: x.0, h, w, c, h2, w2 },
            rg,
        ))
    }

    // ── losses and reductions ───────────────────────────────────────────

    /// Weighted pixel cross-entropy: -sum_p w_p sum_c y_pc log softmax(z)_pc,
    /// normalized by the count of non-ignored rows (all-zero target rows are
    /// ignored). Targets and weights are fixed data, not graph nodes.
    pub fn cross_entropy(&mut self, logits: NodeId, target: &Tensor<F>, weight: &[F]) -> Result<NodeId> {
        let (p, c) = self.dims2("cross_entropy", logits)?;
        if target.shape() != [p, c] {
            return Err(CoreError::shape("cross_entropy", &self.shapes[logits.0], target.shape()));
        }
        if weight.len() != p {
            return Err(CoreError::dim(
                "cross_entropy",
                format!("weight length {} does not match {} rows", weight.len(), p),
            ));
        }
        if weight.iter().any(|w| *w < F::zero() || *w > F::one()) {
            return Err(CoreError::domain("cross_entropy", "weights must lie in [0, 1]"));
        }
        let z = &self.values[logits.0];
        let y = target.data();
        let mut probs = vec![F::zero(); p * c];
        let mut count = 0usize;
        let mut total = F::zero();
        let half = F::from_f64(0.5);
        for i in 0..p {
            let row = &z[i * c..(i + 1) * c];
            let mut mx = F::neg_infinity();
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            let lse = mx + sum.ln();
            for j in 0..c {
                probs[i * c + j] /= sum;
            }
            let trow = &y[i * c..(i + 1) * c];
            let tsum: F = trow.iter().copied().sum();
            if tsum > half {
                count += 1;
                let mut row_loss = F::zero();
                for (j, &t) in trow.iter().enumerate() {
                    if t > F::zero() {
                        row_loss += t * (lse - row[j]);
                    }
                }
                total += weight[i] * row_loss;
            }
        }
        let inv_count = if count == 0 {
            F::zero()
        } else {
            F::one() / F::from_f64(count as f64)
        };
        let loss = total * inv_count;
        let rg = self.rg[logits.0];
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                probs,
                target: y.to_vec(),
                weight: weight.to_vec(),
                inv_count,
            },
            rg,
        ))
    }

    /// Elementwise KL contributions p * log(p/q) over trailing-dimension
    /// probability rows. `p` is the (detached) supervision side; gradients
    /// flow to `q` only. Entries are clamped below by [`PROB_EPS`] inside
    /// the logs.
    pub fn kl_rows(&mut self, p: &Tensor<F>, q: NodeId) -> Result<NodeId> {
        if p.shape() != &self.shapes[q.0][..] {
            return Err(CoreError::shape("kl_rows", p.shape(), &self.shapes[q.0]));
        }
        let n = p.shape().last().copied().unwrap_or(0);
        if n == 0 {
            return Err(CoreError::dim("kl_rows", "empty trailing dimension"));
        }
        let qv = &self.values[q.0];
        if p.data().iter().any(|v| *v < F::zero()) || qv.iter().any(|v| *v < F::zero()) {
            return Err(CoreError::domain("kl_rows", "negative probability entries"));
        }
        let tol = F::from_f64(1e-6);
        for (name, data) in [("p", p.data()), ("q", qv.as_slice())] {
            for row in data.chunks_exact(n) {
                let s: F = row.iter().copied().sum();
                if (s - F::one()).abs() > tol {
                    return Err(CoreError::domain(
                        "kl_rows",
                        format!("{} row sums to {} (expected 1 within 1e-6)", name, s),
                    ));
                }
            }
        }
        let eps = F::from_f64(PROB_EPS);
        let value: Vec<F> = p
            .data()
            .iter()
            .zip(qv)
            .map(|(&pi, &qi)| {
                if pi <= F::zero() {
                    F::zero()
                } else {
                    pi * (pi.max(eps).ln() - qi.max(eps).ln())
                }
            })
            .collect();
        let rg = self.rg[q.0];
        Ok(self.push(p.shape().to_vec(), value, Op::KlRows { p: p.data().to_vec(), q: q.0 }, rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total: F = self.values[x.0].iter().copied().sum();
        let rg = self.rg[x.0];
        self.push(vec![], vec![total], Op::SumAll(x.0), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.values[x.0].len();
        let s = self.sum_all(x);
        self.scale(s, F::one() / F::from_f64(n as f64))
    }

    /// Column means of a 2-D matrix: [n, d] -> [d].
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2("mean_rows", x)?;
        let inv = F::one() / F::from_f64(r as f64);
        let src = &self.values[x.0];
        let mut value = vec![F::zero(); c];
        for row in src.chunks_exact(c) {
            for (o, &v) in value.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in value.iter_mut() {
            *o *= inv;
        }
        let rg = self.rg[x.0];
        Ok(self.push(vec![c], value, Op::MeanRows { x: x.0, rows: r, cols: c }, rg))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients accumulate by summation
    /// over all uses of a node; every `requires_grad` node ends up with a
    /// populated gradient buffer (zeros if unreachable from the loss).
    /// Running backward again resets and recomputes them deterministically.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(CoreError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shapes[loss.0]
            )));
        }
        for i in 0..self.ops.len() {
            self.grads[i] = if self.rg[i] {
                Some(vec![F::zero(); self.values[i].len()])
            } else {
                None
            };
        }
        if !self.rg[loss.0] {
            return Ok(()); // nothing requires grad anywhere below the loss
        }
        self.grads[loss.0].as_mut().unwrap()[0] = F::one();

        for i in (0..=loss.0).rev() {
            if !self.rg[i] {
                continue;
            }
            let g = self.grads[i].take().expect("rg node grad allocated");
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            self.propagate(i, &op, &g);
            self.ops[i] = op;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, parent: usize, f: impl FnOnce(&[Vec<F>], &mut [F])) {
        if self.rg[parent] {
            let mut buf = self.grads[parent].take().expect("rg parent grad allocated");
            f(&self.values, &mut buf);
            self.grads[parent] = Some(buf);
        }
    }

    fn propagate(&mut self, node: usize, op: &Op<F>, g: &[F]) {
        match op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                self.acc(*a, |_, d| {
                    for (o, &gi) in d.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                self.acc(*b, |_, d| {
                    for (o, &gi) in d.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
            }
            Op::AddRow { x, row } => {
                self.acc(*x, |_, d| {
                    for (o, &gi) in d.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                let dlen = self.values[*row].len();
                self.acc(*row, |_, d| {
                    for (i, &gi) in g.iter().enumerate() {
                        d[i % dlen] += gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |vals, d| {
                    for ((o, &gi), &bv) in d.iter_mut().zip(g).zip(&vals[b]) {
                        *o += gi * bv;
                    }
                });
                self.acc(b, |vals, d| {
                    for ((o, &gi), &av) in d.iter_mut().zip(g).zip(&vals[a]) {
                        *o += gi * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(*x, |_, d| {
                    for (o, &gi) in d.iter_mut().zip(g) {
                        *o += gi * c;
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                // dA += g * B^T ; dB += A^T * g
                self.acc(a, |vals, d| {
                    F::gemm(m, n, k, F::one(), g, false, &vals[b], true, F::one(), d);
                });
                self.acc(b, |vals, d| {
                    F::gemm(k, m, n, F::one(), &vals[a], true, g, false, F::one(), d);
                });
            }
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                self.acc(*x, |_, d| {
                    // g has shape [cols, rows]
                    for i in 0..cols {
                        for j in 0..rows {
                            d[j * cols + i] += g[i * rows + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(*x, |_, d| {
                    for (o, &gi) in d.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
            }
            Op::SliceCols { x, rows, cols, start, len } => {
                let (rows, cols, start, len) = (*rows, *cols, *start, *len);
                self.acc(*x, |_, d| {
                    for i in 0..rows {
                        for j in 0..len {
                            d[i * cols + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { xs, rows, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(widths) {
                    let off = offset;
                    self.acc(x, |_, d| {
                        for i in 0..*rows {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.values[x].len();
                    let off = offset;
                    self.acc(x, |_, d| {
                        for (o, &gi) in d.iter_mut().zip(&g[off..off + len]) {
                            *o += gi;
                        }
                    });
                    offset += len;
                }
            }
            Op::SoftmaxRows { x, scale } => {
                let scale = *scale;
                let n = self.shapes[node].last().copied().unwrap();
                self.acc(*x, |vals, d| {
                    let out = &vals[node];
                    for ((drow, grow), orow) in
                        d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.chunks_exact(n))
                    {
                        let dot: F = grow.iter().zip(orow).map(|(&gi, &oi)| gi * oi).sum();
                        for ((o, &gi), &oi) in drow.iter_mut().zip(grow).zip(orow) {
                            *o += scale * oi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let d = self.values[*gamma].len();
                let (x, gamma_id) = (*x, *gamma);
                let inv_d = F::one() / F::from_f64(d as f64);
                self.acc(x, |vals, dst| {
                    let xv = &vals[x];
                    let gv = &vals[gamma_id];
                    for (row, ((drow, grow), xrow)) in dst
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xv.chunks_exact(d))
                        .enumerate()
                    {
                        let (mu, inv) = (mean[row], inv_std[row]);
                        let mut sum_gy = F::zero();
                        let mut sum_gy_xhat = F::zero();
                        for ((&gi, &gam), &xi) in grow.iter().zip(gv).zip(xrow) {
                            let gy = gi * gam;
                            let xhat = (xi - mu) * inv;
                            sum_gy += gy;
                            sum_gy_xhat += gy * xhat;
                        }
                        let m1 = sum_gy * inv_d;
                        let m2 = sum_gy_xhat * inv_d;
                        for ((o, (&gi, &gam)), &xi) in
                            drow.iter_mut().zip(grow.iter().zip(gv)).zip(xrow)
                        {
                            let gy = gi * gam;
                            let xhat = (xi - mu) * inv;
                            *o += inv * (gy - m1 - xhat * m2);
                        }
                    }
                });
                self.acc(gamma_id, |vals, dst| {
                    let xv = &vals[x];
                    for (row, (grow, xrow)) in
                        g.chunks_exact(d).zip(xv.chunks_exact(d)).enumerate()
                    {
                        let (mu, inv) = (mean[row], inv_std[row]);
                        for ((o, &gi), &xi) in dst.iter_mut().zip(grow).zip(xrow) {
                            *o += gi * (xi - mu) * inv;
                        }
                    }
                });
                self.acc(*beta, |_, dst| {
                    for grow in g.chunks_exact(d) {
                        for (o, &gi) in dst.iter_mut().zip(grow) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let x = *x;
                self.acc(x, |vals, d| {
                    for ((o, &gi), &xi) in d.iter_mut().zip(g).zip(&vals[x]) {
                        if xi > F::zero() {
                            *o += gi;
                        }
                    }
                });
            }
            Op::BilinearResize { x, h, w, c, h2, w2 } => {
                let (h, w, c, h2, w2) = (*h, *w, *c, *h2, *w2);
                self.acc(*x, |_, d| {
                    interp::bilinear_backward(g, h, w, c, h2, w2, d);
                });
            }
            Op::CrossEntropy { logits, probs, target, weight, inv_count } => {
                let cdim = self.shapes[*logits].last().copied().unwrap();
                let g0 = g[0];
                let inv_count = *inv_count;
                let half = F::from_f64(0.5);
                self.acc(*logits, |_, d| {
                    for (i, wi) in weight.iter().enumerate() {
                        let trow = &target[i * cdim..(i + 1) * cdim];
                        let tsum: F = trow.iter().copied().sum();
                        if tsum <= half {
                            continue; // ignored pixel
                        }
                        let prow = &probs[i * cdim..(i + 1) * cdim];
                        let coeff = g0 * *wi * inv_count;
                        for ((o, &pj), &tj) in
                            d[i * cdim..(i + 1) * cdim].iter_mut().zip(prow).zip(trow)
                        {
                            *o += coeff * (pj - tj);
                        }
                    }
                });
            }
            Op::KlRows { p, q } => {
                let eps = F::from_f64(PROB_EPS);
                let q = *q;
                self.acc(q, |vals, d| {
                    for ((o, &gi), (&pi, &qi)) in
                        d.iter_mut().zip(g).zip(p.iter().zip(&vals[q]))
                    {
                        // d/dq [p (log p - log max(q, eps))]; zero in the
                        // clamped region where the loss is flat.
                        if pi > F::zero() && qi > eps {
                            *o -= gi * pi / qi;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let g0 = g[0];
                self.acc(*x, |_, d| {
                    for o in d.iter_mut() {
                        *o += g0;
                    }
                });
            }
            Op::MeanRows { x, rows, cols } => {
                let inv = F::one() / F::from_f64(*rows as f64);
                let cols = *cols;
                self.acc(*x, |_, d| {
                    for drow in d.chunks_exact_mut(cols) {
                        for (o, &gi) in drow.iter_mut().zip(g) {
                            *o += gi * inv;
                        }
                    }
                });
            }
        }
    }
}
