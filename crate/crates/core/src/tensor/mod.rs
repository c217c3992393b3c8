//! Dense-array engine with reverse-mode differentiation.
//!
//! Values live on a [`Tape`]: every operation appends a node holding the
//! result tensor plus enough bookkeeping to replay the computation in
//! reverse. A tape is built dynamically per forward pass, consumed by
//! [`Tape::backward`], and then discarded. Tensors are immutable after
//! creation except for gradient accumulation; a tape is confined to one
//! thread of execution.

pub mod gradcheck;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SptError};

/// Floor applied to both KL-divergence operands before taking logs, so that
/// `0 * ln 0` resolves to 0 and `ln(q)` never sees an exact zero.
pub const KL_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Plain tensor storage detached from any tape. Row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SptError::Contract(format!(
                "array shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Array {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Array::new(vec![rows, cols], data)
    }

    /// I.i.d. standard-normal entries from the given generator.
    pub fn randn<R: rand::Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Array { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// A value recorded on the tape.
///
/// `grad` is present iff `requires_grad`; after [`Tape::backward`] every
/// `requires_grad` tensor on the tape holds its fully accumulated gradient.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

/// Handle onto a tape node. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Compute precision. `F32` keeps 64-bit storage but rounds every forward
/// result through `f32`, emulating single-precision arithmetic for
/// stability studies; gradients stay in 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

// Operands are kept on every variant so the tape is a complete record of
// the executed computation, even where backward does not consult them.
#[derive(Debug, Clone)]
#[allow(dead_code)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId, f64),
    AddBias(TensorId, TensorId),
    DivByScalar(TensorId, TensorId),
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    SliceCols(TensorId, usize, usize),
    ConcatRows(TensorId, TensorId),
    ConcatCols(Vec<TensorId>),
    EmbeddingLookup(TensorId, Vec<usize>),
    Softmax1d(TensorId, f64),
    SoftmaxRows(TensorId),
    LogSoftmaxRows(TensorId),
    Gelu(TensorId),
    Relu(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Softplus(TensorId),
    MeanAxis0(TensorId),
    MeanAll(TensorId),
    SumAll(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    },
    CosineSimilarity(TensorId, TensorId),
    KlDivergence(TensorId, TensorId),
    Nll {
        log_probs: TensorId,
        targets: Vec<usize>,
        ignore_index: usize,
        effective: usize,
    },
    LogSumExpStack(Vec<TensorId>),
    StackScalars(Vec<TensorId>),
    StopGradient(TensorId),
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Reverse-mode tape: an append-only record of executed operations.
///
/// Nodes only ever reference earlier nodes, so a single reverse sweep
/// visits every recorded operation exactly once.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> TensorId {
        if self.precision == Precision::F32 && !matches!(op, Op::Leaf) {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        id
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].tensor.data.len()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.numel(id), 1, "scalar_value on non-scalar");
        self.nodes[id.0].tensor.data[0]
    }

    /// Accumulated gradient, present after `backward` for `requires_grad` nodes.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn to_array(&self, id: TensorId) -> Array {
        let t = &self.nodes[id.0].tensor;
        Array {
            shape: t.shape.clone(),
            data: t.data.clone(),
        }
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Trainable leaf: participates in gradient accumulation.
    pub fn var(&mut self, a: &Array) -> TensorId {
        self.push(a.shape.clone(), a.data.clone(), true, Op::Leaf)
    }

    /// Constant leaf: value only, no gradient.
    pub fn constant(&mut self, a: &Array) -> TensorId {
        self.push(a.shape.clone(), a.data.clone(), false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![], vec![v], false, Op::Leaf)
    }

    // ── Elementwise and arithmetic ──────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        Ok(self.push(
            self.shape(a).to_vec(),
            data,
            self.needs_grad(&[a, b]),
            Op::Add(a, b),
        ))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        Ok(self.push(
            self.shape(a).to_vec(),
            data,
            self.needs_grad(&[a, b]),
            Op::Sub(a, b),
        ))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        Ok(self.push(
            self.shape(a).to_vec(),
            data,
            self.needs_grad(&[a, b]),
            Op::Mul(a, b),
        ))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|x| -x).collect();
        self.push(
            self.shape(a).to_vec(),
            data,
            self.needs_grad(&[a]),
            Op::Neg(a),
        )
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.data(a).iter().map(|x| x * c).collect();
        self.push(
            self.shape(a).to_vec(),
            data,
            self.needs_grad(&[a]),
            Op::Scale(a, c),
        )
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.data(a).iter().map(|x| x + c).collect();
        self.push(
            self.shape(a).to_vec(),
            data,
            self.needs_grad(&[a]),
            Op::AddScalar(a, c),
        )
    }

    /// Broadcast-add a `[n]` bias over each row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.as_matrix("add_bias", x)?;
        if self.shape(bias) != [n] {
            return Err(SptError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let xd = self.data(x);
        let bd = self.data(bias);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(xd[r * n + c] + bd[c]);
            }
        }
        Ok(self.push(
            vec![m, n],
            data,
            self.needs_grad(&[x, bias]),
            Op::AddBias(x, bias),
        ))
    }

    /// Divide every element of `x` by the value of scalar tensor `s`.
    pub fn div_by_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.numel(s) != 1 {
            return Err(SptError::Contract(
                "div_by_scalar: divisor must be a scalar tensor".into(),
            ));
        }
        let sv = self.scalar_value(s);
        let data = self.data(x).iter().map(|v| v / sv).collect();
        Ok(self.push(
            self.shape(x).to_vec(),
            data,
            self.needs_grad(&[x, s]),
            Op::DivByScalar(x, s),
        ))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.as_matrix("matmul", a)?;
        let (k2, n) = self.as_matrix("matmul", b)?;
        if k != k2 {
            return Err(SptError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(
            vec![m, n],
            data,
            self.needs_grad(&[a, b]),
            Op::MatMul(a, b),
        ))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.as_matrix("transpose", a)?;
        let ad = self.data(a);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = ad[r * n + c];
            }
        }
        Ok(self.push(
            vec![n, m],
            data,
            self.needs_grad(&[a]),
            Op::Transpose(a),
        ))
    }

    /// Columns `c0..c1` of an `[m, n]` matrix.
    pub fn slice_cols(&mut self, x: TensorId, c0: usize, c1: usize) -> Result<TensorId> {
        let (m, n) = self.as_matrix("slice_cols", x)?;
        if c0 >= c1 || c1 > n {
            return Err(SptError::Contract(format!(
                "slice_cols: range {}..{} out of bounds for {} columns",
                c0, c1, n
            )));
        }
        let xd = self.data(x);
        let w = c1 - c0;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&xd[r * n + c0..r * n + c1]);
        }
        Ok(self.push(
            vec![m, w],
            data,
            self.needs_grad(&[x]),
            Op::SliceCols(x, c0, c1),
        ))
    }

    /// Stack two matrices along the sequence (row) dimension.
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ma, na) = self.as_matrix("concat_rows", a)?;
        let (mb, nb) = self.as_matrix("concat_rows", b)?;
        if na != nb {
            return Err(SptError::ShapeMismatch {
                op: "concat_rows",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = Vec::with_capacity((ma + mb) * na);
        data.extend_from_slice(self.data(a));
        data.extend_from_slice(self.data(b));
        Ok(self.push(
            vec![ma + mb, na],
            data,
            self.needs_grad(&[a, b]),
            Op::ConcatRows(a, b),
        ))
    }

    /// Concatenate matrices with equal row counts along the column dimension.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(SptError::Contract("concat_cols: empty input".into()));
        }
        let (m, _) = self.as_matrix("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.as_matrix("concat_cols", p)?;
            if mp != m {
                return Err(SptError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pd = self.data(p);
                data.extend_from_slice(&pd[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(
            vec![m, total],
            data,
            self.needs_grad(parts),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Gather rows of an embedding table `[v, d]` by token id.
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = self.as_matrix("embedding_lookup", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(SptError::Contract(format!(
                "embedding_lookup: id {} out of range for vocab {}",
                bad, v
            )));
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            data,
            self.needs_grad(&[table]),
            Op::EmbeddingLookup(table, ids.to_vec()),
        ))
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    /// Temperature softmax over a vector, computed with max subtraction.
    pub fn softmax(&mut self, x: TensorId, temperature: f64) -> Result<TensorId> {
        if self.shape(x).len() != 1 {
            return Err(SptError::Contract(format!(
                "softmax expects a vector, got shape {:?}",
                self.shape(x)
            )));
        }
        if temperature <= 0.0 {
            return Err(SptError::Contract(format!(
                "softmax temperature must be positive, got {}",
                temperature
            )));
        }
        if self.data(x).iter().any(|v| !v.is_finite()) {
            return Err(SptError::NonFinite("softmax"));
        }
        let data = softmax_raw(self.data(x), temperature);
        Ok(self.push(
            self.shape(x).to_vec(),
            data,
            self.needs_grad(&[x]),
            Op::Softmax1d(x, temperature),
        ))
    }

    /// Row-wise softmax of an `[m, n]` matrix (temperature 1).
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.as_matrix("softmax_rows", x)?;
        let xd = self.data(x);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            data.extend_from_slice(&softmax_raw(&xd[r * n..(r + 1) * n], 1.0));
        }
        Ok(self.push(
            vec![m, n],
            data,
            self.needs_grad(&[x]),
            Op::SoftmaxRows(x),
        ))
    }

    /// Row-wise log-softmax of an `[m, n]` matrix.
    pub fn log_softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.as_matrix("log_softmax_rows", x)?;
        let xd = self.data(x);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        Ok(self.push(
            vec![m, n],
            data,
            self.needs_grad(&[x]),
            Op::LogSoftmaxRows(x),
        ))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|&v| gelu_raw(v)).collect();
        self.push(
            self.shape(x).to_vec(),
            data,
            self.needs_grad(&[x]),
            Op::Gelu(x),
        )
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(
            self.shape(x).to_vec(),
            data,
            self.needs_grad(&[x]),
            Op::Relu(x),
        )
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|v| v.exp()).collect();
        self.push(
            self.shape(x).to_vec(),
            data,
            self.needs_grad(&[x]),
            Op::Exp(x),
        )
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|v| v.ln()).collect();
        self.push(
            self.shape(x).to_vec(),
            data,
            self.needs_grad(&[x]),
            Op::Log(x),
        )
    }

    /// Elementwise `ln(1 + e^x)`, overflow-safe for large `x`.
    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).iter().map(|&v| softplus_raw(v)).collect();
        self.push(
            self.shape(x).to_vec(),
            data,
            self.needs_grad(&[x]),
            Op::Softplus(x),
        )
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// Mean over the row (length) dimension of an `[m, n]` matrix, giving `[n]`.
    pub fn mean_axis0(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.as_matrix("mean_axis0", x)?;
        if m == 0 {
            return Err(SptError::DegenerateInput(
                "mean_axis0 over zero rows".into(),
            ));
        }
        let xd = self.data(x);
        let mut data = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                data[c] += xd[r * n + c];
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        Ok(self.push(
            vec![n],
            data,
            self.needs_grad(&[x]),
            Op::MeanAxis0(x),
        ))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.numel(x) as f64;
        let v = self.data(x).iter().sum::<f64>() / n;
        self.push(vec![], vec![v], self.needs_grad(&[x]), Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let v = self.data(x).iter().sum::<f64>();
        self.push(vec![], vec![v], self.needs_grad(&[x]), Op::SumAll(x))
    }

    /// Row-wise layer normalisation with learned gain and shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId> {
        let (m, n) = self.as_matrix("layer_norm", x)?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(SptError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..n {
                data.push((row[c] - mean) * inv * gd[c] + bd[c]);
            }
        }
        Ok(self.push(
            vec![m, n],
            data,
            self.needs_grad(&[x, gamma, beta]),
            Op::LayerNorm { x, gamma, beta },
        ))
    }

    // ── Scalar-producing ops ────────────────────────────────────────────

    /// Cosine similarity of two equal-length vectors; errors on zero norm.
    pub fn cosine_similarity(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(SptError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let ad = self.data(a);
        let bd = self.data(b);
        let na = norm(ad);
        let nb = norm(bd);
        if na < 1e-12 || nb < 1e-12 {
            return Err(SptError::DegenerateInput(
                "cosine_similarity of a zero-norm vector".into(),
            ));
        }
        let dot: f64 = ad.iter().zip(bd).map(|(x, y)| x * y).sum();
        let v = dot / (na * nb);
        Ok(self.push(
            vec![],
            vec![v],
            self.needs_grad(&[a, b]),
            Op::CosineSimilarity(a, b),
        ))
    }

    /// `KL(p || q) = Σ p_i ln(p_i / q_i)` with both operands floored at
    /// [`KL_FLOOR`]. Inputs must be distributions: nonnegative, sum ≈ 1.
    pub fn kl_divergence(&mut self, p: TensorId, q: TensorId) -> Result<TensorId> {
        self.validate_distribution("kl_divergence p", p)?;
        self.validate_distribution("kl_divergence q", q)?;
        self.kl_divergence_unchecked(p, q)
    }

    /// KL without the distribution preconditions. Used by noise-injection
    /// experiments where the guidance is deliberately perturbed off the
    /// simplex; both operands are still floored before logs.
    pub fn kl_divergence_unchecked(&mut self, p: TensorId, q: TensorId) -> Result<TensorId> {
        if self.shape(p).len() != 1 || self.shape(p) != self.shape(q) {
            return Err(SptError::ShapeMismatch {
                op: "kl_divergence",
                lhs: self.shape(p).to_vec(),
                rhs: self.shape(q).to_vec(),
            });
        }
        let pd = self.data(p);
        let qd = self.data(q);
        let v = pd
            .iter()
            .zip(qd)
            .map(|(&pi, &qi)| {
                let pf = pi.max(KL_FLOOR);
                let qf = qi.max(KL_FLOOR);
                pi * (pf.ln() - qf.ln())
            })
            .sum::<f64>();
        Ok(self.push(
            vec![],
            vec![v],
            self.needs_grad(&[p, q]),
            Op::KlDivergence(p, q),
        ))
    }

    /// Mean negative log-likelihood of `targets` under `log_probs [t, v]`,
    /// skipping positions whose target equals `ignore_index`.
    pub fn nll(
        &mut self,
        log_probs: TensorId,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<TensorId> {
        let (t, v) = self.as_matrix("nll", log_probs)?;
        if targets.len() != t {
            return Err(SptError::Contract(format!(
                "nll: {} targets for {} prediction rows",
                targets.len(),
                t
            )));
        }
        if let Some(&bad) = targets
            .iter()
            .find(|&&tok| tok != ignore_index && tok >= v)
        {
            return Err(SptError::Contract(format!(
                "nll: target id {} out of range for vocab {}",
                bad, v
            )));
        }
        let effective = targets.iter().filter(|&&tok| tok != ignore_index).count();
        if effective == 0 {
            return Err(SptError::DegenerateInput(
                "nll with no effective target positions".into(),
            ));
        }
        let lp = self.data(log_probs);
        let mut total = 0.0;
        for (row, &tok) in targets.iter().enumerate() {
            if tok != ignore_index {
                total -= lp[row * v + tok];
            }
        }
        let value = total / effective as f64;
        Ok(self.push(
            vec![],
            vec![value],
            self.needs_grad(&[log_probs]),
            Op::Nll {
                log_probs,
                targets: targets.to_vec(),
                ignore_index,
                effective,
            },
        ))
    }

    /// Elementwise `log Σ_i exp(x_i)` over a stack of same-shape tensors,
    /// computed stably via max subtraction.
    pub fn logsumexp_stack(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(SptError::Contract("logsumexp_stack: empty stack".into()));
        }
        let shape = self.shape(parts[0]).to_vec();
        for &p in parts {
            if self.shape(p) != shape {
                return Err(SptError::ShapeMismatch {
                    op: "logsumexp_stack",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let numel = self.numel(parts[0]);
        let mut data = vec![0.0; numel];
        for e in 0..numel {
            let mut max = f64::NEG_INFINITY;
            for &p in parts {
                max = max.max(self.data(p)[e]);
            }
            let sum: f64 = parts.iter().map(|&p| (self.data(p)[e] - max).exp()).sum();
            data[e] = max + sum.ln();
        }
        Ok(self.push(
            shape,
            data,
            self.needs_grad(parts),
            Op::LogSumExpStack(parts.to_vec()),
        ))
    }

    /// Pack scalar tensors into a vector, preserving gradient routing.
    pub fn stack_scalars(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(SptError::Contract("stack_scalars: empty stack".into()));
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.numel(p) != 1 {
                return Err(SptError::Contract(format!(
                    "stack_scalars: non-scalar input of shape {:?}",
                    self.shape(p)
                )));
            }
            data.push(self.data(p)[0]);
        }
        Ok(self.push(
            vec![parts.len()],
            data,
            self.needs_grad(parts),
            Op::StackScalars(parts.to_vec()),
        ))
    }

    /// Detach: same value bit-for-bit, contributes zero gradient upstream.
    pub fn stop_gradient(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).to_vec();
        self.push(self.shape(x).to_vec(), data, false, Op::StopGradient(x))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Afterwards every `requires_grad`
    /// tensor on the tape holds its accumulated gradient (zero where the
    /// root does not depend on it).
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.numel(root) != 1 {
            return Err(SptError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        for node in &mut self.nodes {
            if node.tensor.requires_grad {
                node.tensor.grad = Some(vec![0.0; node.tensor.data.len()]);
            } else {
                node.tensor.grad = None;
            }
        }
        if !self.nodes[root.0].tensor.requires_grad {
            return Ok(());
        }
        if let Some(g) = self.nodes[root.0].tensor.grad.as_mut() {
            g[0] = 1.0;
        }

        for i in (0..=root.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let g = match &self.nodes[i].tensor.grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::StopGradient(_) => {}
                Op::Add(a, b) => {
                    self.acc(a, &g);
                    self.acc(b, &g);
                }
                Op::Sub(a, b) => {
                    self.acc(a, &g);
                    self.acc_scaled(b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&g, self.data(b), |gi, bi| gi * bi);
                    let db = zip_map(&g, self.data(a), |gi, ai| gi * ai);
                    self.acc(a, &da);
                    self.acc(b, &db);
                }
                Op::Neg(a) => self.acc_scaled(a, &g, -1.0),
                Op::Scale(a, c) => self.acc_scaled(a, &g, c),
                Op::AddScalar(a, _) => self.acc(a, &g),
                Op::AddBias(x, bias) => {
                    self.acc(x, &g);
                    let n = self.numel(bias);
                    let m = self.numel(x) / n;
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                    self.acc(bias, &db);
                }
                Op::DivByScalar(x, s) => {
                    let sv = self.data(s)[0];
                    let dx: Vec<f64> = g.iter().map(|gi| gi / sv).collect();
                    let ds: f64 = g
                        .iter()
                        .zip(self.data(x))
                        .map(|(gi, xi)| -gi * xi / (sv * sv))
                        .sum();
                    self.acc(x, &dx);
                    self.acc(s, &[ds]);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = matrix_dims(self.shape(a));
                    let n = self.shape(b)[1];
                    // dA = g · Bᵀ, dB = Aᵀ · g
                    let bd = self.data(b);
                    let ad = self.data(a);
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * bd[c * n + j];
                            }
                            da[r * k + c] = s;
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    for r in 0..k {
                        for c in 0..n {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += ad[j * k + r] * g[j * n + c];
                            }
                            db[r * n + c] = s;
                        }
                    }
                    self.acc(a, &da);
                    self.acc(b, &db);
                }
                Op::Transpose(a) => {
                    let (m, n) = matrix_dims(self.shape(a));
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] = g[c * m + r];
                        }
                    }
                    self.acc(a, &da);
                }
                Op::SliceCols(x, c0, c1) => {
                    let (m, n) = matrix_dims(self.shape(x));
                    let w = c1 - c0;
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..w {
                            dx[r * n + c0 + c] = g[r * w + c];
                        }
                    }
                    self.acc(x, &dx);
                }
                Op::ConcatRows(a, b) => {
                    let na = self.numel(a);
                    self.acc(a, &g[..na]);
                    self.acc(b, &g[na..]);
                }
                Op::ConcatCols(parts) => {
                    let m = self.shape(parts[0])[0];
                    let widths: Vec<usize> =
                        parts.iter().map(|&p| self.shape(p)[1]).collect();
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        let mut dp = vec![0.0; m * w];
                        for r in 0..m {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.acc(p, &dp);
                        offset += w;
                    }
                }
                Op::EmbeddingLookup(table, ids) => {
                    let (v, d) = matrix_dims(self.shape(table));
                    let mut dt = vec![0.0; v * d];
                    for (row, &tok) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[tok * d + c] += g[row * d + c];
                        }
                    }
                    self.acc(table, &dt);
                }
                Op::Softmax1d(x, temp) => {
                    let y = &self.nodes[i].tensor.data;
                    let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(y)
                        .map(|(gi, yi)| yi * (gi - dot) / temp)
                        .collect();
                    self.acc(x, &dx);
                }
                Op::SoftmaxRows(x) => {
                    let (m, n) = matrix_dims(self.shape(x));
                    let y = self.nodes[i].tensor.data.clone();
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = gr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum();
                        for c in 0..n {
                            dx[r * n + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.acc(x, &dx);
                }
                Op::LogSoftmaxRows(x) => {
                    let (m, n) = matrix_dims(self.shape(x));
                    let y = self.nodes[i].tensor.data.clone();
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..n {
                            dx[r * n + c] = gr[c] - y[r * n + c].exp() * gsum;
                        }
                    }
                    self.acc(x, &dx);
                }
                Op::Gelu(x) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.data(x))
                        .map(|(gi, &xi)| gi * gelu_grad_raw(xi))
                        .collect();
                    self.acc(x, &dx);
                }
                Op::Relu(x) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.data(x))
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.acc(x, &dx);
                }
                Op::Exp(x) => {
                    let y = &self.nodes[i].tensor.data;
                    let dx = zip_map(&g, y, |gi, yi| gi * yi);
                    self.acc(x, &dx);
                }
                Op::Log(x) => {
                    let dx = zip_map(&g, self.data(x), |gi, xi| gi / xi);
                    self.acc(x, &dx);
                }
                Op::Softplus(x) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.data(x))
                        .map(|(gi, &xi)| gi * sigmoid_raw(xi))
                        .collect();
                    self.acc(x, &dx);
                }
                Op::MeanAxis0(x) => {
                    let (m, n) = matrix_dims(self.shape(x));
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] = g[c] / m as f64;
                        }
                    }
                    self.acc(x, &dx);
                }
                Op::MeanAll(x) => {
                    let n = self.numel(x) as f64;
                    let dx = vec![g[0] / n; self.numel(x)];
                    self.acc(x, &dx);
                }
                Op::SumAll(x) => {
                    let dx = vec![g[0]; self.numel(x)];
                    self.acc(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (m, n) = matrix_dims(self.shape(x));
                    let xd = self.data(x).to_vec();
                    let gd = self.data(gamma).to_vec();
                    let mut dx = vec![0.0; m * n];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for r in 0..m {
                        let row = &xd[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var =
                            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let gg: Vec<f64> =
                            gr.iter().zip(&gd).map(|(gi, gam)| gi * gam).collect();
                        let mean_gg = gg.iter().sum::<f64>() / n as f64;
                        let mean_gg_xhat =
                            gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            dx[r * n + c] =
                                inv * (gg[c] - mean_gg - xhat[c] * mean_gg_xhat);
                            dgamma[c] += gr[c] * xhat[c];
                            dbeta[c] += gr[c];
                        }
                    }
                    self.acc(x, &dx);
                    self.acc(gamma, &dgamma);
                    self.acc(beta, &dbeta);
                }
                Op::CosineSimilarity(a, b) => {
                    let ad = self.data(a);
                    let bd = self.data(b);
                    let na = norm(ad);
                    let nb = norm(bd);
                    let cos = self.nodes[i].tensor.data[0];
                    let g0 = g[0];
                    let da: Vec<f64> = ad
                        .iter()
                        .zip(bd)
                        .map(|(&ai, &bi)| g0 * (bi / (na * nb) - cos * ai / (na * na)))
                        .collect();
                    let db: Vec<f64> = ad
                        .iter()
                        .zip(bd)
                        .map(|(&ai, &bi)| g0 * (ai / (na * nb) - cos * bi / (nb * nb)))
                        .collect();
                    self.acc(a, &da);
                    self.acc(b, &db);
                }
                Op::KlDivergence(p, q) => {
                    let pd = self.data(p);
                    let qd = self.data(q);
                    let g0 = g[0];
                    let dp: Vec<f64> = pd
                        .iter()
                        .zip(qd)
                        .map(|(&pi, &qi)| {
                            let pf = pi.max(KL_FLOOR);
                            let qf = qi.max(KL_FLOOR);
                            let mut d = pf.ln() - qf.ln();
                            if pi > KL_FLOOR {
                                d += 1.0;
                            }
                            g0 * d
                        })
                        .collect();
                    let dq: Vec<f64> = pd
                        .iter()
                        .zip(qd)
                        .map(|(&pi, &qi)| {
                            if qi > KL_FLOOR {
                                -g0 * pi / qi
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.acc(p, &dp);
                    self.acc(q, &dq);
                }
                Op::Nll {
                    log_probs,
                    targets,
                    ignore_index,
                    effective,
                } => {
                    let v = self.shape(log_probs)[1];
                    let mut dlp = vec![0.0; self.numel(log_probs)];
                    let w = -g[0] / effective as f64;
                    for (row, &tok) in targets.iter().enumerate() {
                        if tok != ignore_index {
                            dlp[row * v + tok] += w;
                        }
                    }
                    self.acc(log_probs, &dlp);
                }
                Op::LogSumExpStack(parts) => {
                    let out = self.nodes[i].tensor.data.clone();
                    for &p in &parts {
                        let dp: Vec<f64> = g
                            .iter()
                            .zip(self.data(p).iter().zip(&out))
                            .map(|(gi, (xi, oi))| gi * (xi - oi).exp())
                            .collect();
                        self.acc(p, &dp);
                    }
                }
                Op::StackScalars(parts) => {
                    for (j, &p) in parts.iter().enumerate() {
                        self.acc(p, &[g[j]]);
                    }
                }
            }
        }
        Ok(())
    }

    fn acc(&mut self, id: TensorId, contribution: &[f64]) {
        let t = &mut self.nodes[id.0].tensor;
        if let Some(grad) = t.grad.as_mut() {
            for (gi, ci) in grad.iter_mut().zip(contribution) {
                *gi += ci;
            }
        }
    }

    fn acc_scaled(&mut self, id: TensorId, contribution: &[f64], scale: f64) {
        let t = &mut self.nodes[id.0].tensor;
        if let Some(grad) = t.grad.as_mut() {
            for (gi, ci) in grad.iter_mut().zip(contribution) {
                *gi += scale * ci;
            }
        }
    }

    fn as_matrix(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        let shape = self.shape(id);
        if shape.len() != 2 {
            return Err(SptError::ShapeMismatch {
                op,
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        Ok((shape[0], shape[1]))
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(SptError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn validate_distribution(&self, what: &str, id: TensorId) -> Result<()> {
        let d = self.data(id);
        if d.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(SptError::Contract(format!(
                "{}: entries must be nonnegative and finite",
                what
            )));
        }
        let sum: f64 = d.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SptError::Contract(format!(
                "{}: sums to {} instead of 1",
                what, sum
            )));
        }
        Ok(())
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            for c in 0..n {
                orow[c] += av * brow[c];
            }
        }
    }
    out
}

fn softmax_raw(x: &[f64], temperature: f64) -> Vec<f64> {
    let max = x
        .iter()
        .map(|v| v / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v / temperature - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|v| v / sum).collect()
}

fn softplus_raw(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_raw(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_raw(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad_raw(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x.powi(3));
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(&Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tape.constant(&Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_dot_product() {
        // [[1,2]]·[[3],[4]] = [[11]]
        let mut tape = Tape::new();
        let a = tape.constant(&Array::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(&Array::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Array::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(&Array::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_of_sum_is_b_transpose_rows() {
        // d sum(a·b) / d a[i,j] = sum of row j of b
        let mut tape = Tape::new();
        let a = tape.var(&Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(&Array::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let prod = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        let grad = tape.grad(a).unwrap();
        assert_eq!(grad, &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(&Array::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 1.0).unwrap();
        for &v in tape.data(y) {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
        let x2 = tape.constant(&Array::vector(vec![5.0, 5.0]));
        let y2 = tape.softmax(x2, 100.0).unwrap();
        assert_eq!(tape.data(y2), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_exponential_oracle() {
        // Oracle: exp(x_i) / sum exp(x_j) computed directly.
        let x: [f64; 2] = [-1.0, -2.0];
        let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let expected: Vec<f64> = e.iter().map(|v| v / z).collect();

        let mut tape = Tape::new();
        let xt = tape.constant(&Array::vector(x.to_vec()));
        let y = tape.softmax(xt, 1.0).unwrap();
        for (a, b) in tape.data(y).iter().zip(&expected) {
            assert!(close(*a, *b, 1e-12));
        }
        assert!(close(tape.data(y)[0], 0.7311, 5e-5));
        assert!(close(tape.data(y)[1], 0.2689, 5e-5));
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_temperature() {
        let mut tape = Tape::new();
        let x = tape.constant(&Array::vector(vec![f64::NAN, 0.0]));
        assert!(matches!(
            tape.softmax(x, 1.0),
            Err(SptError::NonFinite(_))
        ));
        let y = tape.constant(&Array::vector(vec![0.0, 0.0]));
        assert!(tape.softmax(y, 0.0).is_err());
    }

    #[test]
    fn softmax_sums_to_one_for_large_magnitudes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for round in 0..200 {
            let x = Array::randn(vec![7], &mut rng);
            // Alternate moderate and extreme scales; strict positivity is
            // only claimed where exp(x - max) cannot underflow.
            let scale = if round % 2 == 0 { 10.0 } else { 1e3 };
            let scaled: Vec<f64> = x.data.iter().map(|v| v * scale).collect();
            let mut tape = Tape::new();
            let xt = tape.constant(&Array::vector(scaled));
            let y = tape.softmax(xt, 1.0).unwrap();
            let sum: f64 = tape.data(y).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "sum {}", sum);
            if scale <= 10.0 {
                assert!(tape.data(y).iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn softplus_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(&Array::vector(vec![0.0, 1.0, -1.0]));
        let y = tape.softplus(x);
        let d = tape.data(y);
        assert!(close(d[0], 2.0_f64.ln(), 1e-12));
        assert!(close(d[1], (1.0 + 1.0_f64.exp()).ln(), 1e-12));
        assert!(close(d[2], (1.0 + (-1.0_f64).exp()).ln(), 1e-12));
        assert!(close(d[1], 1.3133, 5e-5));
        assert!(close(d[2], 0.3133, 5e-5));
    }

    #[test]
    fn softplus_is_overflow_safe() {
        let mut tape = Tape::new();
        let x = tape.constant(&Array::vector(vec![800.0, -800.0]));
        let y = tape.softplus(x);
        assert!(close(tape.data(y)[0], 800.0, 1e-9));
        assert!(close(tape.data(y)[1], 0.0, 1e-9));
        assert!(tape.data(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cosine_similarity_trivial_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(&Array::vector(vec![1.0, 2.0, 3.0]));
        let same = tape.cosine_similarity(a, a).unwrap();
        assert!(close(tape.scalar_value(same), 1.0, 1e-12));

        let x = tape.constant(&Array::vector(vec![1.0, 0.0]));
        let y = tape.constant(&Array::vector(vec![0.0, 1.0]));
        let orth = tape.cosine_similarity(x, y).unwrap();
        assert!(close(tape.scalar_value(orth), 0.0, 1e-12));

        let nx = tape.constant(&Array::vector(vec![-1.0, 0.0]));
        let opp = tape.cosine_similarity(x, nx).unwrap();
        assert!(close(tape.scalar_value(opp), -1.0, 1e-12));
    }

    #[test]
    fn cosine_similarity_rejects_zero_norm() {
        let mut tape = Tape::new();
        let a = tape.constant(&Array::vector(vec![0.0, 0.0]));
        let b = tape.constant(&Array::vector(vec![1.0, 0.0]));
        assert!(matches!(
            tape.cosine_similarity(a, b),
            Err(SptError::DegenerateInput(_))
        ));
    }

    #[test]
    fn nll_uniform_and_hand_cases() {
        // Uniform over V=4: loss = ln 4 at any target.
        let mut tape = Tape::new();
        let lp = (0.25_f64).ln();
        let x = tape.constant(&Array::matrix(2, 4, vec![lp; 8]).unwrap());
        let loss = tape.nll(x, &[1, 3], 99).unwrap();
        assert!(close(tape.scalar_value(loss), 4.0_f64.ln(), 1e-12));

        // probs [0.5, 0.5] at one step, target 0 -> ln 2.
        let mut tape = Tape::new();
        let x = tape
            .constant(&Array::matrix(1, 2, vec![0.5_f64.ln(), 0.5_f64.ln()]).unwrap());
        let loss = tape.nll(x, &[0], 99).unwrap();
        assert!(close(tape.scalar_value(loss), 2.0_f64.ln(), 1e-12));

        // Near one-hot correct prediction: loss ≈ 0.
        let mut tape = Tape::new();
        let p: f64 = 1.0 - 1e-9;
        let x = tape
            .constant(&Array::matrix(1, 2, vec![p.ln(), (1.0 - p).ln()]).unwrap());
        let loss = tape.nll(x, &[0], 99).unwrap();
        assert!(tape.scalar_value(loss).abs() < 1e-8);
    }

    #[test]
    fn nll_ignores_masked_positions_and_rejects_empty() {
        let mut tape = Tape::new();
        let x = tape
            .constant(&Array::matrix(2, 2, vec![0.9_f64.ln(), 0.1_f64.ln(), 0.5_f64.ln(), 0.5_f64.ln()]).unwrap());
        let loss = tape.nll(x, &[0, 7], 7).unwrap();
        assert!(close(tape.scalar_value(loss), -(0.9_f64.ln()), 1e-12));

        let all_masked = tape.nll(x, &[7, 7], 7);
        assert!(matches!(all_masked, Err(SptError::DegenerateInput(_))));
    }

    #[test]
    fn kl_zero_on_identical_distributions() {
        let mut tape = Tape::new();
        let p = tape.constant(&Array::vector(vec![0.5, 0.5]));
        let kl = tape.kl_divergence(p, p).unwrap();
        assert_eq!(tape.scalar_value(kl), 0.0);
    }

    #[test]
    fn kl_matches_term_by_term_oracle() {
        // Oracle: sum p_i * (ln p_i - ln q_i) computed term by term.
        let p: [f64; 2] = [0.5, 0.5];
        let q: [f64; 2] = [0.7311, 0.2689];
        let expected: f64 = p
            .iter()
            .zip(&q)
            .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
            .sum();
        assert!(close(expected, 0.1201, 5e-4));

        let mut tape = Tape::new();
        let pt = tape.constant(&Array::vector(p.to_vec()));
        let qt = tape.constant(&Array::vector(q.to_vec()));
        let kl = tape.kl_divergence(pt, qt).unwrap();
        assert!(close(tape.scalar_value(kl), expected, 1e-12));
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let mut tape = Tape::new();
            let p = random_distribution(5, &mut rng);
            let q = random_distribution(5, &mut rng);
            let pt = tape.constant(&Array::vector(p));
            let qt = tape.constant(&Array::vector(q));
            let kl = tape.kl_divergence(pt, qt).unwrap();
            assert!(tape.scalar_value(kl) >= -1e-12);
        }
    }

    #[test]
    fn kl_rejects_non_distribution() {
        let mut tape = Tape::new();
        let p = tape.constant(&Array::vector(vec![0.5, 0.6]));
        let q = tape.constant(&Array::vector(vec![0.5, 0.5]));
        assert!(matches!(
            tape.kl_divergence(p, q),
            Err(SptError::Contract(_))
        ));
    }

    fn random_distribution<R: rand::Rng>(n: usize, rng: &mut R) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = v.iter().sum();
        for x in &mut v {
            *x /= s;
        }
        v
    }

    #[test]
    fn stop_gradient_preserves_value_and_blocks_flow() {
        let mut tape = Tape::new();
        let x = tape.var(&Array::vector(vec![1.25, -3.5]));
        let detached = tape.stop_gradient(x);
        assert_eq!(tape.data(detached), tape.data(x));

        let y = tape.mul(detached, detached).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn embedding_lookup_gathers_and_scatters() {
        let mut tape = Tape::new();
        let table = tape.var(&Array::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = tape.embedding_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.data(out), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        assert!(tape.embedding_lookup(table, &[3]).is_err());
    }

    #[test]
    fn logsumexp_stack_matches_naive() {
        let mut tape = Tape::new();
        let a = tape.constant(&Array::vector(vec![-1.0, 2.0]));
        let b = tape.constant(&Array::vector(vec![0.5, -3.0]));
        let out = tape.logsumexp_stack(&[a, b]).unwrap();
        for e in 0..2 {
            let expected =
                (tape.data(a)[e].exp() + tape.data(b)[e].exp()).ln();
            assert!(close(tape.data(out)[e], expected, 1e-12));
        }
    }

    #[test]
    fn f32_precision_rounds_forward_results() {
        let v = 0.1_f64;
        let mut t64 = Tape::with_precision(Precision::F64);
        let a = t64.constant(&Array::scalar(v));
        let b = t64.constant(&Array::scalar(v));
        let s64 = t64.add(a, b).unwrap();

        let mut t32 = Tape::with_precision(Precision::F32);
        let a = t32.constant(&Array::scalar(v));
        let b = t32.constant(&Array::scalar(v));
        let s32 = t32.add(a, b).unwrap();

        assert_eq!(t32.scalar_value(s32), (v + v) as f32 as f64);
        assert_ne!(t32.scalar_value(s32), t64.scalar_value(s64));
    }

    #[test]
    fn backward_accumulates_through_shared_subexpressions() {
        // f = x*x + x*x -> df/dx = 4x
        let mut tape = Tape::new();
        let x = tape.var(&Array::vector(vec![3.0]));
        let sq = tape.mul(x, x).unwrap();
        let sum = tape.add(sq, sq).unwrap();
        let loss = tape.sum_all(sum);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }
}
