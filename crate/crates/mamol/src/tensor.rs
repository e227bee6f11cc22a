//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! The tape is define-by-run: every operation appends a node holding the
//! output value plus enough saved state to replay its backward rule. Shapes
//! are lists of positive dimensions; most operations interpret a tensor as a
//! matrix whose column count is the last dimension and whose row count is the
//! product of the leading dimensions. There is no implicit broadcasting
//! beyond the explicitly row-wise operations (`add_row`, `mul_col`, ...);
//! any other shape mismatch is a hard error.

use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// A dense n-dimensional value. `grad` is populated by [`Tape::backward`]
/// for tensors with `requires_grad` set.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// `(rows, cols)` view of a shape: last dim is the column count.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        _ => {
            let cols = *shape.last().unwrap();
            let rows = shape[..shape.len() - 1].iter().product::<usize>();
            (rows, cols)
        }
    }
}

fn dim_err(op: &'static str, details: String) -> Error {
    Error::Dim { op, details }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Saved operation record. Indices refer to tape node positions.
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    AddRow { x: usize, row: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    Gelu { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: usize },
    ConcatLast { a: usize, b: usize },
    ConcatRows { parts: Vec<usize> },
    NarrowRows { x: usize, start: usize },
    NarrowCols { x: usize, start: usize },
    MeanRows { x: usize },
    RepeatRows { x: usize, times: usize },
    ScaleRows { x: usize, weights: Vec<f64> },
    SubstituteRows { x: usize, placeholder: usize, block_rows: usize, absent: Vec<bool> },
    SparsifyTopK { x: usize, selected: Vec<Vec<usize>>, sel_sums: Vec<f64> },
    MulCol { x: usize, col: usize },
    Reshape { x: usize },
    Sum { x: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

/// Recorded computation: tensors plus the operations that produced them,
/// in topological (creation) order.
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), backward_done: false }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Tensor { shape, data, requires_grad, grad: None });
        self.ops.push(op);
        TensorId(self.nodes.len() - 1)
    }

    /// Constant input: gradients do not flow into it.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> TensorId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "leaf shape/data mismatch");
        self.push(shape.to_vec(), data, false, Op::Leaf)
    }

    /// Trainable input: `backward` populates its grad.
    pub fn param(&mut self, shape: &[usize], data: Vec<f64>) -> TensorId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param shape/data mismatch");
        self.push(shape.to_vec(), data, true, Op::Leaf)
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn tensor(&self, t: TensorId) -> &Tensor {
        &self.nodes[t.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// `a [n×k] · b [k×m] -> [n×m]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, n, k, m, &mut out);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![n, m], out, rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// `x [n×m] -> [m×n]`.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(dim_err("transpose", format!("{s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = xd[i * m + j];
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![m, n], out, rg, Op::Transpose { x: x.0 }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(dim_err(
                "add",
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Adds a single row (`[m]` or `[1×m]`) to every row of `x`.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        let (rows, cols) = rows_cols(&self.nodes[x.0].shape);
        let (rrows, rcols) = rows_cols(&self.nodes[row.0].shape);
        if rrows != 1 || rcols != cols {
            return Err(dim_err(
                "add_row",
                format!("{:?} + row {:?}", self.nodes[x.0].shape, self.nodes[row.0].shape),
            ));
        }
        let mut out = self.nodes[x.0].data.clone();
        let rd = &self.nodes[row.0].data;
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += rd[c];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x.0, row.0]);
        Ok(self.push(shape, out, rg, Op::AddRow { x: x.0, row: row.0 }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(dim_err(
                "mul",
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Elementwise quotient; the divisor must be nonzero everywhere.
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(dim_err(
                "div",
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, rg, Op::Div { a: a.0, b: b.0 }))
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x.0]);
        self.push(shape, out, rg, Op::Scale { x: x.0, c })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x.0]);
        self.push(shape, out, rg, Op::Relu { x: x.0 })
    }

    /// Tanh-form GELU; the backward rule differentiates the same expression.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x.0]);
        self.push(shape, out, rg, Op::Gelu { x: x.0 })
    }

    /// Normalizes each slice along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (rows, cols) = rows_cols(&self.nodes[x.0].shape);
        let (_, gc) = rows_cols(&self.nodes[gamma.0].shape);
        let (_, bc) = rows_cols(&self.nodes[beta.0].shape);
        if gc != cols || bc != cols || self.nodes[gamma.0].numel() != cols
            || self.nodes[beta.0].numel() != cols
        {
            return Err(dim_err(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.nodes[x.0].shape, self.nodes[gamma.0].shape, self.nodes[beta.0].shape
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Validation(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut out = vec![0.0; rows * cols];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let xs = &xd[r * cols..(r + 1) * cols];
            let mean = xs.iter().sum::<f64>() / cols as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv_std;
            for c in 0..cols {
                out[r * cols + c] = (xs[c] - mean) * inv_std * gd[c] + bd[c];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean: means, inv_std: inv_stds },
        ))
    }

    /// Max-subtracted softmax along the last axis.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let (rows, cols) = rows_cols(&self.nodes[x.0].shape);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xs = &xd[r * cols..(r + 1) * cols];
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (xs[c] - max).exp();
                out[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= sum;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x.0]);
        self.push(shape, out, rg, Op::Softmax { x: x.0 })
    }

    /// Concatenation along the last axis. Rank-1 inputs stay rank-1.
    pub fn concat_last_axis(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() == 1 && sb.len() == 1 {
            let mut out = self.nodes[a.0].data.clone();
            out.extend_from_slice(&self.nodes[b.0].data);
            let shape = vec![sa[0] + sb[0]];
            let rg = self.rg(&[a.0, b.0]);
            return Ok(self.push(shape, out, rg, Op::ConcatLast { a: a.0, b: b.0 }));
        }
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(dim_err("concat_last_axis", format!("{sa:?} ++ {sb:?}")));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; rows * (ca + cb)];
        for r in 0..rows {
            out[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(&ad[r * ca..(r + 1) * ca]);
            out[r * (ca + cb) + ca..(r + 1) * (ca + cb)].copy_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![rows, ca + cb], out, rg, Op::ConcatLast { a: a.0, b: b.0 }))
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Validation("concat_rows needs at least one part".into()));
        }
        let cols = {
            let s = &self.nodes[parts[0].0].shape;
            if s.len() != 2 {
                return Err(dim_err("concat_rows", format!("{s:?}")));
            }
            s[1]
        };
        let mut rows = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[1] != cols {
                return Err(dim_err("concat_rows", format!("expected [_, {cols}], got {s:?}")));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let idxs: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&idxs);
        Ok(self.push(vec![rows, cols], out, rg, Op::ConcatRows { parts: idxs }))
    }

    /// Contiguous row slice `[start, start+len)` of a rank-2 tensor.
    pub fn narrow_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 || start + len > s[0] {
            return Err(dim_err("narrow_rows", format!("{s:?} rows [{start}, {})", start + len)));
        }
        let cols = s[1];
        let out = self.nodes[x.0].data[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![len, cols], out, rg, Op::NarrowRows { x: x.0, start }))
    }

    /// Contiguous column slice `[start, start+len)` of a rank-2 tensor.
    pub fn narrow_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 || start + len > s[1] {
            return Err(dim_err("narrow_cols", format!("{s:?} cols [{start}, {})", start + len)));
        }
        let (rows, cols) = (s[0], s[1]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![rows, len], out, rg, Op::NarrowCols { x: x.0, start }))
    }

    /// Mean over rows: `[n×d] -> [1×d]`.
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 || s[0] == 0 {
            return Err(dim_err("mean_rows", format!("{s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += xd[r * cols + c];
            }
        }
        for v in out.iter_mut() {
            *v /= rows as f64;
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![1, cols], out, rg, Op::MeanRows { x: x.0 }))
    }

    /// Repeats each row `times` consecutive times: `[n×d] -> [n·times×d]`.
    pub fn repeat_rows(&mut self, x: TensorId, times: usize) -> Result<TensorId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 || times == 0 {
            return Err(dim_err("repeat_rows", format!("{s:?} x{times}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let xd = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(&xd[r * cols..(r + 1) * cols]);
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![rows * times, cols], out, rg, Op::RepeatRows { x: x.0, times }))
    }

    /// Multiplies row `r` by the fixed coefficient `weights[r]`.
    pub fn scale_rows(&mut self, x: TensorId, weights: &[f64]) -> Result<TensorId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 || s[0] != weights.len() {
            return Err(dim_err("scale_rows", format!("{s:?} with {} weights", weights.len())));
        }
        let (rows, cols) = (s[0], s[1]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xd[r * cols + c] * weights[r];
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![rows, cols], out, rg, Op::ScaleRows { x: x.0, weights: weights.to_vec() }))
    }

    /// Block-wise substitution: `x` is `[n_blocks·block_rows × d]`; blocks
    /// flagged absent are replaced with `placeholder` (`[block_rows × d]`),
    /// present blocks pass through untouched. Gradients flow into `x` for
    /// present blocks and accumulate into `placeholder` for absent ones.
    pub fn substitute_rows(
        &mut self,
        x: TensorId,
        placeholder: TensorId,
        block_rows: usize,
        absent: &[bool],
    ) -> Result<TensorId> {
        let s = &self.nodes[x.0].shape;
        let ps = &self.nodes[placeholder.0].shape;
        if s.len() != 2 || ps.len() != 2 {
            return Err(dim_err("substitute_rows", format!("x {s:?}, placeholder {ps:?}")));
        }
        let cols = s[1];
        if ps[0] != block_rows || ps[1] != cols || s[0] != block_rows * absent.len() {
            return Err(dim_err(
                "substitute_rows",
                format!(
                    "x {s:?}, placeholder {ps:?}, block_rows {block_rows}, blocks {}",
                    absent.len()
                ),
            ));
        }
        let mut out = self.nodes[x.0].data.clone();
        let pd = &self.nodes[placeholder.0].data;
        for (blk, &abs) in absent.iter().enumerate() {
            if abs {
                let at = blk * block_rows * cols;
                out[at..at + block_rows * cols].copy_from_slice(pd);
            }
        }
        let shape = s.clone();
        let rg = self.rg(&[x.0, placeholder.0]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::SubstituteRows { x: x.0, placeholder: placeholder.0, block_rows, absent: absent.to_vec() },
        ))
    }

    /// Per-row top-K sparsification with renormalization over the selected
    /// set. Input rows must be positive (softmax outputs). Ties break toward
    /// the lower index. Gradients flow through the selected values only.
    pub fn sparsify_topk(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        self.sparsify_topk_with(x, k, None)
    }

    /// Like [`Tape::sparsify_topk`] but with an externally fixed selection,
    /// used to pin routing while finite-differencing router parameters.
    pub fn sparsify_topk_with(
        &mut self,
        x: TensorId,
        k: usize,
        forced: Option<&[Vec<usize>]>,
    ) -> Result<TensorId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 || k == 0 || k > s[1] {
            return Err(dim_err("sparsify_topk", format!("{s:?} with k={k}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(f) = forced {
            if f.len() != rows {
                return Err(dim_err(
                    "sparsify_topk",
                    format!("forced selection has {} rows, input has {rows}", f.len()),
                ));
            }
        }
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; rows * cols];
        let mut selected = Vec::with_capacity(rows);
        let mut sel_sums = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let sel: Vec<usize> = match forced {
                Some(f) => f[r].clone(),
                None => {
                    let mut idx: Vec<usize> = (0..cols).collect();
                    idx.sort_by(|&i, &j| {
                        row[j].partial_cmp(&row[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j))
                    });
                    let mut top = idx[..k].to_vec();
                    top.sort_unstable();
                    top
                }
            };
            let sum: f64 = sel.iter().map(|&j| row[j]).sum();
            debug_assert!(sum > 0.0, "sparsify_topk requires positive gate mass");
            for &j in &sel {
                out[r * cols + j] = row[j] / sum;
            }
            selected.push(sel);
            sel_sums.push(sum);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![rows, cols], out, rg, Op::SparsifyTopK { x: x.0, selected, sel_sums }))
    }

    /// Selected expert indices recorded by the most recent `sparsify_topk`
    /// on this node.
    pub fn topk_selection(&self, t: TensorId) -> Option<&[Vec<usize>]> {
        match &self.ops[t.0] {
            Op::SparsifyTopK { selected, .. } => Some(selected),
            _ => None,
        }
    }

    /// Multiplies row `r` of `x [n×d]` by the scalar `col[r]` (`col` is `[n×1]`).
    pub fn mul_col(&mut self, x: TensorId, col: TensorId) -> Result<TensorId> {
        let s = &self.nodes[x.0].shape;
        let cs = &self.nodes[col.0].shape;
        if s.len() != 2 || cs.len() != 2 || cs[1] != 1 || cs[0] != s[0] {
            return Err(dim_err("mul_col", format!("x {s:?}, col {cs:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let xd = &self.nodes[x.0].data;
        let cd = &self.nodes[col.0].data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xd[r * cols + c] * cd[r];
            }
        }
        let rg = self.rg(&[x.0, col.0]);
        Ok(self.push(vec![rows, cols], out, rg, Op::MulCol { x: x.0, col: col.0 }))
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].numel() {
            return Err(dim_err(
                "reshape",
                format!("{:?} -> {new_shape:?}", self.nodes[x.0].shape),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.rg(&[x.0]);
        Ok(self.push(new_shape.to_vec(), data, rg, Op::Reshape { x: x.0 }))
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(vec![1], vec![total], rg, Op::Sum { x: x.0 })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    /// `logits` is `[B×C]`, `labels` has length B.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let s = &self.nodes[logits.0].shape;
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let xd = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &xd[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[r * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[r * c + j] /= sum;
            }
            loss -= probs[r * c + labels[r]].ln();
        }
        loss /= b as f64;
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
        ))
    }

    /// Reverse pass from a scalar loss. Accumulates gradients additively into
    /// every `requires_grad` tensor reachable from `loss`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward called twice on the same tape".into()));
        }
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for i in 0..n {
            if self.nodes[i].requires_grad {
                if let Some(g) = grads[i].take() {
                    self.nodes[i].grad = Some(g);
                }
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], idx: usize, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let buf = grads[idx].get_or_insert_with(|| vec![0.0; self.nodes[idx].numel()]);
        add(buf);
    }

    fn apply_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (n, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let m = self.nodes[*b].shape[1];
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                self.accum(grads, *a, |da| {
                    // da[i,p] += sum_j g[i,j] * b[p,j]
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        let darow = &mut da[r * k..(r + 1) * k];
                        for p in 0..k {
                            let brow = &bd[p * m..(p + 1) * m];
                            let mut s = 0.0;
                            for (gv, bv) in grow.iter().zip(brow) {
                                s += gv * bv;
                            }
                            darow[p] += s;
                        }
                    }
                });
                self.accum(grads, *b, |db| {
                    // db[p,j] += sum_i a[i,p] * g[i,j]
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        let arow = &ad[r * k..(r + 1) * k];
                        for (p, &av) in arow.iter().enumerate() {
                            if av != 0.0 {
                                let dbrow = &mut db[p * m..(p + 1) * m];
                                for (dv, gv) in dbrow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let (n, m) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                self.accum(grads, *x, |dx| {
                    for r in 0..n {
                        for c in 0..m {
                            dx[r * m + c] += g[c * n + r];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::AddRow { x, row } => {
                let (rows, cols) = rows_cols(&self.nodes[*x].shape);
                self.accum(grads, *x, |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accum(grads, *row, |dr| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dr[c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                self.accum(grads, *a, |da| {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                });
                self.accum(grads, *b, |db| {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                });
            }
            Op::Div { a, b } => {
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                self.accum(grads, *a, |da| {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv / bv;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (((d, gv), av), bv) in db.iter_mut().zip(g).zip(ad).zip(bd) {
                        *d -= gv * av / (bv * bv);
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accum(grads, *x, |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
            Op::Relu { x } => {
                let xd = &self.nodes[*x].data;
                self.accum(grads, *x, |dx| {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xd = &self.nodes[*x].data;
                self.accum(grads, *x, |dx| {
                    for ((d, gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *d += gv * gelu_grad_scalar(xv);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let (rows, cols) = rows_cols(&self.nodes[*x].shape);
                let xd = &self.nodes[*x].data;
                let gd = &self.nodes[*gamma].data;
                self.accum(grads, *x, |dx| {
                    for r in 0..rows {
                        let (mu, istd) = (mean[r], inv_std[r]);
                        let xs = &xd[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for c in 0..cols {
                            let xh = (xs[c] - mu) * istd;
                            let dxh = gs[c] * gd[c];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let inv_n = 1.0 / cols as f64;
                        for c in 0..cols {
                            let xh = (xs[c] - mu) * istd;
                            let dxh = gs[c] * gd[c];
                            dx[r * cols + c] +=
                                istd * (dxh - inv_n * sum_dxh - xh * inv_n * sum_dxh_xh);
                        }
                    }
                });
                self.accum(grads, *gamma, |dg| {
                    for r in 0..rows {
                        let (mu, istd) = (mean[r], inv_std[r]);
                        for c in 0..cols {
                            let xh = (xd[r * cols + c] - mu) * istd;
                            dg[c] += g[r * cols + c] * xh;
                        }
                    }
                });
                self.accum(grads, *beta, |db| {
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let (rows, cols) = rows_cols(&self.nodes[*x].shape);
                let pd = &self.nodes[i].data;
                self.accum(grads, *x, |dx| {
                    for r in 0..rows {
                        let ps = &pd[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = ps.iter().zip(gs).map(|(p, gv)| p * gv).sum();
                        for c in 0..cols {
                            dx[r * cols + c] += ps[c] * (gs[c] - dot);
                        }
                    }
                });
            }
            Op::ConcatLast { a, b } => {
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                if sa.len() == 1 {
                    let (na, nb) = (sa[0], sb[0]);
                    self.accum(grads, *a, |da| {
                        for c in 0..na {
                            da[c] += g[c];
                        }
                    });
                    self.accum(grads, *b, |db| {
                        for c in 0..nb {
                            db[c] += g[na + c];
                        }
                    });
                } else {
                    let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
                    let w = ca + cb;
                    self.accum(grads, *a, |da| {
                        for r in 0..rows {
                            for c in 0..ca {
                                da[r * ca + c] += g[r * w + c];
                            }
                        }
                    });
                    self.accum(grads, *b, |db| {
                        for r in 0..rows {
                            for c in 0..cb {
                                db[r * cb + c] += g[r * w + ca + c];
                            }
                        }
                    });
                }
            }
            Op::ConcatRows { parts } => {
                let mut at = 0;
                let parts = parts.clone();
                for p in parts {
                    let len = self.nodes[p].numel();
                    self.accum(grads, p, |dp| {
                        for (d, gv) in dp.iter_mut().zip(&g[at..at + len]) {
                            *d += gv;
                        }
                    });
                    at += len;
                }
            }
            Op::NarrowRows { x, start } => {
                let cols = self.nodes[*x].shape[1];
                let at = start * cols;
                self.accum(grads, *x, |dx| {
                    for (d, gv) in dx[at..at + g.len()].iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::NarrowCols { x, start } => {
                let (rows, cols) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let len = self.nodes[i].shape[1];
                self.accum(grads, *x, |dx| {
                    for r in 0..rows {
                        for c in 0..len {
                            dx[r * cols + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::MeanRows { x } => {
                let (rows, cols) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let inv = 1.0 / rows as f64;
                self.accum(grads, *x, |dx| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += g[c] * inv;
                        }
                    }
                });
            }
            Op::RepeatRows { x, times } => {
                let (rows, cols) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let times = *times;
                self.accum(grads, *x, |dx| {
                    for r in 0..rows {
                        for t in 0..times {
                            let grow = &g[(r * times + t) * cols..(r * times + t + 1) * cols];
                            for (d, gv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(grow) {
                                *d += gv;
                            }
                        }
                    }
                });
            }
            Op::ScaleRows { x, weights } => {
                let cols = self.nodes[*x].shape[1];
                self.accum(grads, *x, |dx| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w != 0.0 {
                            for c in 0..cols {
                                dx[r * cols + c] += w * g[r * cols + c];
                            }
                        }
                    }
                });
            }
            Op::SubstituteRows { x, placeholder, block_rows, absent } => {
                let cols = self.nodes[*x].shape[1];
                let blk = block_rows * cols;
                self.accum(grads, *x, |dx| {
                    for (b, &abs) in absent.iter().enumerate() {
                        if !abs {
                            for (d, gv) in
                                dx[b * blk..(b + 1) * blk].iter_mut().zip(&g[b * blk..(b + 1) * blk])
                            {
                                *d += gv;
                            }
                        }
                    }
                });
                self.accum(grads, *placeholder, |dp| {
                    for (b, &abs) in absent.iter().enumerate() {
                        if abs {
                            for (d, gv) in dp.iter_mut().zip(&g[b * blk..(b + 1) * blk]) {
                                *d += gv;
                            }
                        }
                    }
                });
            }
            Op::SparsifyTopK { x, selected, sel_sums } => {
                let cols = self.nodes[*x].shape[1];
                let od = &self.nodes[i].data;
                self.accum(grads, *x, |dx| {
                    for (r, sel) in selected.iter().enumerate() {
                        let s = sel_sums[r];
                        let mut dot = 0.0;
                        for &j in sel {
                            dot += g[r * cols + j] * od[r * cols + j];
                        }
                        for &j in sel {
                            dx[r * cols + j] += (g[r * cols + j] - dot) / s;
                        }
                    }
                });
            }
            Op::MulCol { x, col } => {
                let (rows, cols) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let xd = &self.nodes[*x].data;
                let cd = &self.nodes[*col].data;
                self.accum(grads, *x, |dx| {
                    for r in 0..rows {
                        if cd[r] != 0.0 {
                            for c in 0..cols {
                                dx[r * cols + c] += cd[r] * g[r * cols + c];
                            }
                        }
                    }
                });
                self.accum(grads, *col, |dc| {
                    for r in 0..rows {
                        let mut s = 0.0;
                        for c in 0..cols {
                            s += g[r * cols + c] * xd[r * cols + c];
                        }
                        dc[r] += s;
                    }
                });
            }
            Op::Reshape { x } => {
                self.accum(grads, *x, |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Sum { x } => {
                let gv = g[0];
                self.accum(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.nodes[*logits].shape[1];
                let b = labels.len();
                let gv = g[0] / b as f64;
                self.accum(grads, *logits, |dl| {
                    for (r, &lbl) in labels.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == lbl { 1.0 } else { 0.0 };
                            dl[r * c + j] += gv * (probs[r * c + j] - ind);
                        }
                    }
                });
            }
        }
    }
}

/// `out += a·b` for row-major `a [n×k]`, `b [k×m]`.
fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * m..(p + 1) * m];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Combined tolerance: absolute floor 1e-9 absorbs finite-difference
    /// roundoff on true-zero gradients, relative part governs otherwise.
    fn close(a: f64, b: f64, rtol: f64) -> bool {
        (a - b).abs() < 1e-9 + rtol * a.abs().max(b.abs())
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t.leaf(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let o = t.matmul(i, b).unwrap();
        assert_eq!(t.data(o), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut t = Tape::new();
        let a = t.leaf(&[1, 2], vec![1.0, 2.0]);
        let b = t.leaf(&[2, 1], vec![3.0, 4.0]);
        let o = t.matmul(a, b).unwrap();
        assert_eq!(t.data(o), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(&[2, 3], vec![0.0; 6]);
        let b = t.leaf(&[2, 2], vec![0.0; 4]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    /// Central finite differences of `f` w.r.t. one leaf's data, compared
    /// against the analytic grad of `sum(f(...))`-style scalar losses.
    fn finite_diff_check(
        build: impl Fn(&mut Tape, &[Vec<f64>]) -> (Vec<TensorId>, TensorId),
        inputs: &[Vec<f64>],
        tol: f64,
    ) {
        let h = 1e-5;
        let mut tape = Tape::new();
        let (leaves, loss) = build(&mut tape, inputs);
        tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> =
            leaves.iter().map(|&l| tape.grad(l).expect("grad missing").to_vec()).collect();

        for (li, input) in inputs.iter().enumerate() {
            for ci in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[li][ci] += h;
                let mut minus = inputs.to_vec();
                minus[li][ci] -= h;
                let mut tp = Tape::new();
                let (_, lp) = build(&mut tp, &plus);
                let mut tm = Tape::new();
                let (_, lm) = build(&mut tm, &minus);
                let num = (tp.data(lp)[0] - tm.data(lm)[0]) / (2.0 * h);
                let ana = analytic[li][ci];
                assert!(
                    close(num, ana, tol),
                    "leaf {li} coord {ci}: numeric {num} vs analytic {ana}"
                );
            }
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_vec(&mut rng, 12);
        let b = rand_vec(&mut rng, 6);
        finite_diff_check(
            |t, ins| {
                let a = t.param(&[4, 3], ins[0].clone());
                let b = t.param(&[3, 2], ins[1].clone());
                let o = t.matmul(a, b).unwrap();
                let s = t.sum(o);
                (vec![a, b], s)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn layer_norm_constant_input_maps_to_beta() {
        let mut t = Tape::new();
        let x = t.leaf(&[1, 4], vec![2.5; 4]);
        let g = t.leaf(&[4], vec![1.0; 4]);
        let b = t.leaf(&[4], vec![0.0; 4]);
        let o = t.layer_norm(x, g, b, 1e-5).unwrap();
        for v in t.data(o) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_two_point_symmetry() {
        let mut t = Tape::new();
        let x = t.leaf(&[1, 2], vec![1.0, 3.0]);
        let g = t.leaf(&[2], vec![1.0, 1.0]);
        let b = t.leaf(&[2], vec![0.0, 0.0]);
        let o = t.layer_norm(x, g, b, 1e-12).unwrap();
        assert!((t.data(o)[0] - -1.0).abs() < 1e-5);
        assert!((t.data(o)[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_vec(&mut rng, 16);
        let g = rand_vec(&mut rng, 8);
        let b = rand_vec(&mut rng, 8);
        finite_diff_check(
            |t, ins| {
                let x = t.param(&[2, 8], ins[0].clone());
                let g = t.param(&[8], ins[1].clone());
                let b = t.param(&[8], ins[2].clone());
                let o = t.layer_norm(x, g, b, 1e-5).unwrap();
                // weighted sum makes the check sensitive to every coordinate
                let w = t.leaf(&[2, 8], (0..16).map(|i| 0.3 + 0.1 * i as f64).collect());
                let p = t.mul(o, w).unwrap();
                let s = t.sum(p);
                (vec![x, g, b], s)
            },
            &[x, g, b],
            1e-6,
        );
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut t = Tape::new();
        let x = t.leaf(&[1, 3], vec![0.0, 0.0, 0.0]);
        let o = t.softmax(x);
        for v in t.data(o) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = t.leaf(&[1, 2], vec![1000.0, 0.0]);
        let p = t.softmax(y);
        assert!((t.data(p)[0] - 1.0).abs() < 1e-12);
        assert!(t.data(p)[1] >= 0.0 && t.data(p)[1] < 1e-12);
        assert!(t.data(p).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let x = t.leaf(&[1, 5], rand_vec(&mut rng, 5));
        let o = t.softmax(x);
        let s: f64 = t.data(o).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(t.data(o).iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut t = Tape::new();
        let logits = t.leaf(&[3, 4], vec![0.7; 12]);
        let l = t.cross_entropy(logits, &[0, 2, 3]).unwrap();
        assert!((t.data(l)[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut t = Tape::new();
        let logits = t.leaf(&[1, 3], vec![0.0; 3]);
        assert!(matches!(t.cross_entropy(logits, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn relu_and_concat_trivials() {
        let mut t = Tape::new();
        let x = t.leaf(&[2], vec![-2.0, 3.0]);
        let r = t.relu(x);
        assert_eq!(t.data(r), &[0.0, 3.0]);
        let a = t.leaf(&[2], vec![1.0, 2.0]);
        let b = t.leaf(&[1], vec![3.0]);
        let c = t.concat_last_axis(a, b).unwrap();
        assert_eq!(t.data(c), &[1.0, 2.0, 3.0]);
        assert_eq!(t.shape(c), &[3]);
    }

    #[test]
    fn two_path_gradient_accumulates() {
        // y = x*x + x -> dy/dx = 2x + 1
        let mut t = Tape::new();
        let x = t.param(&[3], vec![0.5, -1.0, 2.0]);
        let sq = t.mul(x, x).unwrap();
        let y = t.add(sq, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap();
        for (gv, xv) in g.iter().zip([0.5, -1.0, 2.0]) {
            assert!((gv - (2.0 * xv + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_is_error() {
        let mut t = Tape::new();
        let x = t.param(&[1], vec![1.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_non_scalar_is_error() {
        let mut t = Tape::new();
        let x = t.param(&[2], vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sparsify_topk_selects_exactly_k_with_tiebreak() {
        let mut t = Tape::new();
        let x = t.leaf(&[1, 4], vec![0.25; 4]);
        let o = t.sparsify_topk(x, 1).unwrap();
        assert_eq!(t.data(o), &[1.0, 0.0, 0.0, 0.0]);
        let y = t.leaf(&[1, 4], vec![0.1, 0.4, 0.4, 0.1]);
        let p = t.sparsify_topk(y, 2).unwrap();
        let pd = t.data(p);
        assert_eq!(pd[0], 0.0);
        assert_eq!(pd[3], 0.0);
        assert!((pd[1] - 0.5).abs() < 1e-15 && (pd[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sparsify_topk_k_equals_n_is_identity_for_softmax_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let x = t.leaf(&[3, 4], rand_vec(&mut rng, 12));
        let p = t.softmax(x);
        let o = t.sparsify_topk(p, 4).unwrap();
        for (a, b) in t.data(o).iter().zip(t.data(p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn substitute_rows_replaces_absent_blocks_only() {
        let mut t = Tape::new();
        let x = t.leaf(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let ph = t.param(&[2, 2], vec![9.0, 9.0, 9.0, 9.0]);
        let o = t.substitute_rows(x, ph, 2, &[false, true]).unwrap();
        assert_eq!(t.data(o), &[1.0, 2.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0]);
        let s = t.sum(o);
        t.backward(s).unwrap();
        assert_eq!(t.grad(ph).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn randomized_gradient_sweep_over_all_ops() {
        // >= 100 randomized trials across the differentiable op set;
        // inputs in [-1, 1], relative tolerance 1e-4.
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for trial in 0..110 {
            let op = trial % 11;
            match op {
                0 => {
                    let a = rand_vec(&mut rng, 6);
                    let b = rand_vec(&mut rng, 8);
                    finite_diff_check(
                        |t, ins| {
                            let a = t.param(&[3, 2], ins[0].clone());
                            let b = t.param(&[2, 4], ins[1].clone());
                            let o = t.matmul(a, b).unwrap();
                            let s = t.sum(o);
                            (vec![a, b], s)
                        },
                        &[a, b],
                        1e-4,
                    );
                }
                1 => {
                    let x = rand_vec(&mut rng, 6);
                    finite_diff_check(
                        |t, ins| {
                            let x = t.param(&[2, 3], ins[0].clone());
                            let o = t.softmax(x);
                            let w = t.leaf(&[2, 3], vec![0.3, -0.7, 1.1, 0.2, 0.9, -0.4]);
                            let p = t.mul(o, w).unwrap();
                            (vec![x], t.sum(p))
                        },
                        &[x],
                        1e-4,
                    );
                }
                2 => {
                    let x = rand_vec(&mut rng, 8);
                    finite_diff_check(
                        |t, ins| {
                            let x = t.param(&[2, 4], ins[0].clone());
                            let o = t.gelu(x);
                            (vec![x], t.sum(o))
                        },
                        &[x],
                        1e-4,
                    );
                }
                3 => {
                    // keep relu inputs away from the kink
                    let x: Vec<f64> = rand_vec(&mut rng, 8)
                        .into_iter()
                        .map(|v| if v.abs() < 0.05 { v + 0.2 } else { v })
                        .collect();
                    finite_diff_check(
                        |t, ins| {
                            let x = t.param(&[2, 4], ins[0].clone());
                            let o = t.relu(x);
                            (vec![x], t.sum(o))
                        },
                        &[x],
                        1e-4,
                    );
                }
                4 => {
                    let x = rand_vec(&mut rng, 8);
                    let g = rand_vec(&mut rng, 4);
                    let b = rand_vec(&mut rng, 4);
                    finite_diff_check(
                        |t, ins| {
                            let x = t.param(&[2, 4], ins[0].clone());
                            let g = t.param(&[4], ins[1].clone());
                            let b = t.param(&[4], ins[2].clone());
                            let o = t.layer_norm(x, g, b, 1e-5).unwrap();
                            let w = t.leaf(&[2, 4], vec![1.0, -0.5, 0.25, 2.0, -1.5, 0.75, 0.1, 1.3]);
                            let p = t.mul(o, w).unwrap();
                            (vec![x, g, b], t.sum(p))
                        },
                        &[x, g, b],
                        1e-4,
                    );
                }
                5 => {
                    let a = rand_vec(&mut rng, 6);
                    let b = rand_vec(&mut rng, 6);
                    finite_diff_check(
                        |t, ins| {
                            let a = t.param(&[2, 3], ins[0].clone());
                            let b = t.param(&[2, 3], ins[1].clone());
                            let o = t.mul(a, b).unwrap();
                            (vec![a, b], t.sum(o))
                        },
                        &[a, b],
                        1e-4,
                    );
                }
                6 => {
                    let a = rand_vec(&mut rng, 4);
                    // keep divisors away from zero
                    let b: Vec<f64> =
                        rand_vec(&mut rng, 4).into_iter().map(|v| v.signum() * (v.abs() + 0.5)).collect();
                    finite_diff_check(
                        |t, ins| {
                            let a = t.param(&[2, 2], ins[0].clone());
                            let b = t.param(&[2, 2], ins[1].clone());
                            let o = t.div(a, b).unwrap();
                            (vec![a, b], t.sum(o))
                        },
                        &[a, b],
                        1e-4,
                    );
                }
                7 => {
                    let x = rand_vec(&mut rng, 6);
                    let c = rand_vec(&mut rng, 3);
                    finite_diff_check(
                        |t, ins| {
                            let x = t.param(&[3, 2], ins[0].clone());
                            let c = t.param(&[3, 1], ins[1].clone());
                            let o = t.mul_col(x, c).unwrap();
                            (vec![x, c], t.sum(o))
                        },
                        &[x, c],
                        1e-4,
                    );
                }
                8 => {
                    let x = rand_vec(&mut rng, 6);
                    let r = rand_vec(&mut rng, 3);
                    finite_diff_check(
                        |t, ins| {
                            let x = t.param(&[2, 3], ins[0].clone());
                            let r = t.param(&[3], ins[1].clone());
                            let o = t.add_row(x, r).unwrap();
                            let tr = t.transpose(o).unwrap();
                            let m = t.mean_rows(tr).unwrap();
                            (vec![x, r], t.sum(m))
                        },
                        &[x, r],
                        1e-4,
                    );
                }
                9 => {
                    let logits = rand_vec(&mut rng, 12);
                    finite_diff_check(
                        |t, ins| {
                            let l = t.param(&[3, 4], ins[0].clone());
                            let ce = t.cross_entropy(l, &[1, 0, 3]).unwrap();
                            (vec![l], ce)
                        },
                        &[logits],
                        1e-4,
                    );
                }
                _ => {
                    // structural ops chained: narrow/concat/repeat/scale_rows/reshape
                    let x = rand_vec(&mut rng, 12);
                    finite_diff_check(
                        |t, ins| {
                            let x = t.param(&[4, 3], ins[0].clone());
                            let top = t.narrow_rows(x, 0, 2).unwrap();
                            let bot = t.narrow_rows(x, 2, 2).unwrap();
                            let sum = t.add(top, bot).unwrap();
                            let rep = t.repeat_rows(sum, 2).unwrap();
                            let scaled = t.scale_rows(rep, &[1.0, 0.0, 0.5, 2.0]).unwrap();
                            let cols = t.narrow_cols(scaled, 1, 2).unwrap();
                            let back = t.concat_rows(&[cols, cols]).unwrap();
                            let r = t.reshape(back, &[16]).unwrap();
                            (vec![x], t.sum(r))
                        },
                        &[x],
                        1e-4,
                    );
                }
            }
        }
    }

    #[test]
    fn sparsify_topk_gradient_at_fixed_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let x = rand_vec(&mut rng, 8);
            finite_diff_check(
                |t, ins| {
                    let x = t.param(&[2, 4], ins[0].clone());
                    let p = t.softmax(x);
                    // fix selection so finite differences see a smooth function
                    let sel = vec![vec![0, 2], vec![1, 3]];
                    let o = t.sparsify_topk_with(p, 2, Some(&sel)).unwrap();
                    let w = t.leaf(&[2, 4], vec![0.5, 1.5, -0.25, 0.75, 1.0, -1.0, 0.3, 0.9]);
                    let m = t.mul(o, w).unwrap();
                    (vec![x], t.sum(m))
                },
                &[x],
                1e-4,
            );
        }
    }
}
