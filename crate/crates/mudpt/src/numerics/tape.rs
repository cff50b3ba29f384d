//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Every node is a matrix (rows x cols); higher-rank tensors enter with their
//! leading dimensions flattened into rows. A forward pass appends nodes, and
//! [`Tape::backward`] walks the tape once in reverse, accumulating gradients
//! for every node including leaves.

use super::tensor::Tensor;

pub const GELU_COEFF: f64 = 0.044715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Row-broadcast addition of a 1 x C bias to an R x C matrix.
    AddBias(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, gamma: Var, beta: Var, eps: f64 },
    Gelu(Var),
    Exp(Var),
    Recip(Var),
    /// Elementwise product of a matrix with a 1 x 1 scalar node.
    MulScalar(Var, Var),
    L2NormalizeRows(Var),
    SumAll(Var),
    MeanAll(Var),
    GatherRows(Var, Vec<usize>),
    CrossEntropyMean(Var, Vec<usize>),
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// C[m,n] += A[m,k] * B[k,n], accumulating over k in ascending order.
fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

pub(crate) fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = c * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { rows, cols, data, grad: Vec::new(), op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a tensor as a leaf, flattening leading dimensions into rows.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (rows, cols) = t.matrix_dims();
        self.push(rows, cols, t.data.clone(), Op::Leaf)
    }

    pub fn leaf_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf_matrix data length mismatch");
        self.push(rows, cols, data, Op::Leaf)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!(self.nodes[v.0].data.len(), 1, "scalar_value on non-scalar node");
        self.nodes[v.0].data[0]
    }

    /// Gradient of the last `backward` target with respect to this node.
    pub fn grad(&self, v: Var) -> &[f64] {
        assert!(!self.nodes[v.0].grad.is_empty(), "grad read before backward");
        &self.nodes[v.0].grad
    }

    /// Copy of a node's value as a tensor with the node's matrix shape.
    pub fn tensor_value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: vec![n.rows, n.cols],
            data: n.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    // ── Forward operations ──────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!((r, c), (self.rows(b), self.cols(b)), "add shape mismatch");
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(r, c, data, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!((r, c), (self.rows(b), self.cols(b)), "sub shape mismatch");
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        self.push(r, c, data, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!((r, c), (self.rows(b), self.cols(b)), "mul shape mismatch");
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(r, c, data, Op::Mul(a, b))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        assert_eq!(self.nodes[bias.0].data.len(), c, "bias length mismatch");
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(&self.nodes[bias.0].data) {
                *x += b;
            }
        }
        self.push(r, c, data, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let data = self.nodes[a.0].data.iter().map(|x| x * factor).collect();
        self.push(r, c, data, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul inner dimension mismatch: {k} vs {k2}");
        let mut data = vec![0.0; m * n];
        matmul_acc(&mut data, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        self.push(m, n, data, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, data, Op::Transpose(a))
    }

    /// Vertical concatenation. Zero-row inputs are skipped so an empty prompt
    /// block leaves the sequence bit-identical.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let live: Vec<Var> = parts.iter().copied().filter(|v| self.rows(*v) > 0).collect();
        assert!(!live.is_empty(), "concat_rows of all-empty parts");
        if live.len() == 1 {
            return live[0];
        }
        let c = self.cols(live[0]);
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in &live {
            assert_eq!(self.cols(v), c, "concat_rows column mismatch");
            rows += self.rows(v);
            data.extend_from_slice(&self.nodes[v.0].data);
        }
        self.push(rows, c, data, Op::ConcatRows(live))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        assert!(start + len <= r, "slice_rows out of range: {start}+{len} > {r}");
        let data = self.nodes[a.0].data[start * c..(start + len) * c].to_vec();
        self.push(len, c, data, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of empty parts");
        if parts.len() == 1 {
            return parts[0];
        }
        let r = self.rows(parts[0]);
        let total: usize = parts.iter().map(|v| self.cols(*v)).sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for &v in parts {
            assert_eq!(self.rows(v), r, "concat_cols row mismatch");
            let c = self.cols(v);
            for i in 0..r {
                data[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&self.nodes[v.0].data[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        self.push(r, total, data, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        assert!(start + len <= c, "slice_cols out of range");
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(r, len, data, Op::SliceCols(a, start))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(c) {
            softmax_row_in_place(row);
        }
        self.push(r, c, data, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with affine parameters of length `cols`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = (self.rows(x), self.cols(x));
        assert_eq!(self.nodes[gamma.0].data.len(), c, "layer_norm gamma length mismatch");
        assert_eq!(self.nodes[beta.0].data.len(), c, "layer_norm beta length mismatch");
        let gamma_data = self.nodes[gamma.0].data.clone();
        let beta_data = self.nodes[beta.0].data.clone();
        let mut data = self.nodes[x.0].data.clone();
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                row[j] = (row[j] - mean) * inv_std * gamma_data[j] + beta_data[j];
            }
        }
        self.push(r, c, data, Op::LayerNormRows { x, gamma, beta, eps })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let data = self.nodes[a.0].data.iter().map(|&x| gelu_scalar(x)).collect();
        self.push(r, c, data, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let data = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        self.push(r, c, data, Op::Exp(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let data = self.nodes[a.0].data.iter().map(|x| 1.0 / x).collect();
        self.push(r, c, data, Op::Recip(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.0].data.len(), 1, "mul_scalar needs a 1x1 scalar node");
        let (r, c) = (self.rows(a), self.cols(a));
        let sv = self.nodes[s.0].data[0];
        let data = self.nodes[a.0].data.iter().map(|x| x * sv).collect();
        self.push(r, c, data, Op::MulScalar(a, s))
    }

    /// Rows scaled to unit Euclidean norm. Zero rows are the caller's
    /// responsibility; they are rejected upstream where cosine is taken.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        self.push(r, c, data, Op::L2NormalizeRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].data.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len() as f64;
        let s = self.nodes[a.0].data.iter().sum::<f64>() / n;
        self.push(1, 1, vec![s], Op::MeanAll(a))
    }

    /// Row lookup into a table; duplicate ids accumulate gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let (r, c) = (self.rows(table), self.cols(table));
        assert!(!ids.is_empty(), "gather_rows with no ids");
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < r, "gather_rows id {id} out of range {r}");
            data.extend_from_slice(&self.nodes[table.0].data[id * c..(id + 1) * c]);
        }
        self.push(ids.len(), c, data, Op::GatherRows(table, ids.to_vec()))
    }

    /// Mean over rows of -log softmax(row)[target], computed in log-sum-exp form.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (r, c) = (self.rows(logits), self.cols(logits));
        assert_eq!(targets.len(), r, "one target per logit row");
        let mut total = 0.0;
        for (row, &t) in self.nodes[logits.0].data.chunks(c).zip(targets) {
            assert!(t < c, "target {t} out of range {c}");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
        }
        let loss = total / r as f64;
        self.push(1, 1, vec![loss], Op::CrossEntropyMean(logits, targets.to_vec()))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Accumulate d(target)/d(node) into every node's grad buffer.
    pub fn backward(&mut self, target: Var) {
        for node in &mut self.nodes {
            node.grad = vec![0.0; node.data.len()];
        }
        assert_eq!(self.nodes[target.0].data.len(), 1, "backward target must be scalar");
        self.nodes[target.0].grad[0] = 1.0;

        for i in (0..=target.0).rev() {
            let op = self.nodes[i].op.clone();
            // Operands always precede their consumers on the tape, so this
            // node's gradient is complete; move it out, apply the chain rule,
            // then put it back for callers to read.
            let grad = std::mem::take(&mut self.nodes[i].grad);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = grad.iter().zip(&self.nodes[b.0].data).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = grad.iter().zip(&self.nodes[a.0].data).map(|(g, x)| g * x).collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::AddBias(a, bias) => {
                    self.accumulate(a, &grad);
                    let c = self.nodes[bias.0].data.len();
                    let mut db = vec![0.0; c];
                    for row in grad.chunks(c) {
                        for (acc, g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    self.accumulate(bias, &db);
                }
                Op::Scale(a, factor) => {
                    let da: Vec<f64> = grad.iter().map(|g| g * factor).collect();
                    self.accumulate(a, &da);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = self.nodes[b.0].cols;
                    // dA = G * B^T
                    let mut bt = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = self.nodes[b.0].data[p * n + j];
                        }
                    }
                    let mut da = vec![0.0; m * k];
                    matmul_acc(&mut da, &grad, &bt, m, n, k);
                    // dB = A^T * G
                    let mut at = vec![0.0; k * m];
                    for ii in 0..m {
                        for p in 0..k {
                            at[p * m + ii] = self.nodes[a.0].data[ii * k + p];
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    matmul_acc(&mut db, &at, &grad, k, m, n);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.nodes[i].rows, self.nodes[i].cols);
                    let mut da = vec![0.0; r * c];
                    for ii in 0..r {
                        for j in 0..c {
                            da[j * r + ii] = grad[ii * c + j];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::ConcatRows(parts) => {
                    let c = self.nodes[i].cols;
                    let mut start = 0;
                    for v in parts {
                        let r = self.nodes[v.0].rows;
                        let piece = grad[start * c..(start + r) * c].to_vec();
                        self.accumulate(v, &piece);
                        start += r;
                    }
                }
                Op::SliceRows(a, start) => {
                    let c = self.nodes[i].cols;
                    let r = self.nodes[i].rows;
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    da[start * c..(start + r) * c].copy_from_slice(&grad);
                    self.accumulate(a, &da);
                }
                Op::ConcatCols(parts) => {
                    let r = self.nodes[i].rows;
                    let total = self.nodes[i].cols;
                    let mut offset = 0;
                    for v in parts {
                        let c = self.nodes[v.0].cols;
                        let mut piece = vec![0.0; r * c];
                        for ii in 0..r {
                            piece[ii * c..(ii + 1) * c]
                                .copy_from_slice(&grad[ii * total + offset..ii * total + offset + c]);
                        }
                        self.accumulate(v, &piece);
                        offset += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let r = self.nodes[i].rows;
                    let len = self.nodes[i].cols;
                    let full = self.nodes[a.0].cols;
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    for ii in 0..r {
                        da[ii * full + start..ii * full + start + len]
                            .copy_from_slice(&grad[ii * len..(ii + 1) * len]);
                    }
                    self.accumulate(a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let c = self.nodes[i].cols;
                    let mut da = vec![0.0; grad.len()];
                    for (row_idx, (s_row, g_row)) in
                        self.nodes[i].data.chunks(c).zip(grad.chunks(c)).enumerate()
                    {
                        let dot: f64 = s_row.iter().zip(g_row).map(|(s, g)| s * g).sum();
                        for j in 0..c {
                            da[row_idx * c + j] = s_row[j] * (g_row[j] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let c = self.nodes[i].cols;
                    let x_data = self.nodes[x.0].data.clone();
                    let gamma_data = self.nodes[gamma.0].data.clone();
                    let mut dx = vec![0.0; x_data.len()];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for (row_idx, (x_row, g_row)) in x_data.chunks(c).zip(grad.chunks(c)).enumerate() {
                        let mean = x_row.iter().sum::<f64>() / c as f64;
                        let var = x_row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = x_row.iter().map(|v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> = g_row.iter().zip(&gamma_data).map(|(g, gm)| g * gm).collect();
                        for j in 0..c {
                            dgamma[j] += g_row[j] * xhat[j];
                            dbeta[j] += g_row[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let cf = c as f64;
                        for j in 0..c {
                            dx[row_idx * c + j] =
                                inv_std / cf * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::Gelu(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| g * gelu_derivative(x))
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Exp(a) => {
                    let da: Vec<f64> = grad.iter().zip(&self.nodes[i].data).map(|(g, y)| g * y).collect();
                    self.accumulate(a, &da);
                }
                Op::Recip(a) => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, y)| -g * y * y)
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::MulScalar(a, s) => {
                    let sv = self.nodes[s.0].data[0];
                    let da: Vec<f64> = grad.iter().map(|g| g * sv).collect();
                    let ds: f64 = grad.iter().zip(&self.nodes[a.0].data).map(|(g, x)| g * x).sum();
                    self.accumulate(a, &da);
                    self.accumulate(s, &[ds]);
                }
                Op::L2NormalizeRows(a) => {
                    let c = self.nodes[i].cols;
                    let mut da = vec![0.0; grad.len()];
                    for (row_idx, (x_row, g_row)) in
                        self.nodes[a.0].data.chunks(c).zip(grad.chunks(c)).enumerate()
                    {
                        let norm = x_row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let y: Vec<f64> = x_row.iter().map(|v| v / norm).collect();
                        let dot: f64 = g_row.iter().zip(&y).map(|(g, yi)| g * yi).sum();
                        for j in 0..c {
                            da[row_idx * c + j] = (g_row[j] - y[j] * dot) / norm;
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::SumAll(a) => {
                    let da = vec![grad[0]; self.nodes[a.0].data.len()];
                    self.accumulate(a, &da);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].data.len();
                    let da = vec![grad[0] / n as f64; n];
                    self.accumulate(a, &da);
                }
                Op::GatherRows(table, ids) => {
                    let c = self.nodes[table.0].cols;
                    let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                    for (row, &id) in grad.chunks(c).zip(&ids) {
                        for (acc, g) in dt[id * c..(id + 1) * c].iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    self.accumulate(table, &dt);
                }
                Op::CrossEntropyMean(logits, targets) => {
                    let c = self.nodes[logits.0].cols;
                    let r = self.nodes[logits.0].rows;
                    let mut dl = vec![0.0; r * c];
                    for (row_idx, (row, &t)) in
                        self.nodes[logits.0].data.chunks(c).zip(&targets).enumerate()
                    {
                        let mut probs = row.to_vec();
                        softmax_row_in_place(&mut probs);
                        for j in 0..c {
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            dl[row_idx * c + j] = grad[0] * (probs[j] - indicator) / r as f64;
                        }
                    }
                    self.accumulate(logits, &dl);
                }
            }
            self.nodes[i].grad = grad;
        }
    }

    fn accumulate(&mut self, v: Var, grad: &[f64]) {
        let node = &mut self.nodes[v.0];
        debug_assert_eq!(node.data.len(), grad.len(), "gradient accumulation shape mismatch");
        if node.grad.is_empty() {
            node.grad = vec![0.0; node.data.len()];
        }
        for (acc, g) in node.grad.iter_mut().zip(grad) {
            *acc += g;
        }
    }
}
