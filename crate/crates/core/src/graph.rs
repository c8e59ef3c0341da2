//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Each forward op appends a node holding its value; `backward` replays the
//! tape in reverse and accumulates gradients. Parameter leaves remember the
//! store name they came from so gradients can be pushed back after the sweep.
//!
//! Parameters and checkpoints are f32; the tape computes in f64 so that
//! central-difference gradient checking resolves below 1e-4. Leaves convert
//! f32 -> f64 exactly, and gradients round back to f32 on accumulation.
//!
//! Every op validates shapes and checks the result for NaN/Inf; a non-finite
//! value aborts the step with a diagnostic naming the op.

use crate::store::ParameterStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub type NodeId = usize;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

/// A tape node value: row-major f64 buffer with shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Value {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Value {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Value { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Value {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Value {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Value {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
            .map(|(i, v)| (i, *v))
    }
}

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<String>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// a[m×k] · b[n×k]ᵀ → [m×n]
    MatMulNT {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Row vector broadcast over the last axis.
    AddBias {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    SoftmaxRows {
        a: NodeId,
    },
    LayerNorm {
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Gelu {
        a: NodeId,
    },
    ConcatRows {
        a: NodeId,
        b: NodeId,
    },
    SliceRows {
        a: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        a: NodeId,
        start: usize,
        len: usize,
    },
    Reshape {
        a: NodeId,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        /// Row-softmax of the logits, kept from the forward pass.
        probs: Vec<f64>,
    },
}

/// Computation tape. Single-threaded per instance.
pub struct Graph {
    vals: Vec<Value>,
    grads: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            vals: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, op_name: &str, value: Value, op: Op) -> Result<NodeId> {
        if let Some((index, v)) = value.first_non_finite() {
            return Err(Error::NonFinite {
                op: op_name.into(),
                index,
                shape: value.shape.clone(),
                value: v as f32,
            });
        }
        let n = value.numel();
        self.vals.push(value);
        self.grads.push(vec![0.0; n]);
        self.ops.push(op);
        Ok(self.vals.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.vals[id]
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.grads[id]
    }

    /// Constant leaf; receives a gradient buffer but is never pushed to a store.
    pub fn constant(&mut self, t: &Tensor) -> Result<NodeId> {
        self.push("constant", Value::from_tensor(t), Op::Leaf { param: None })
    }

    pub fn constant_value(&mut self, v: Value) -> Result<NodeId> {
        self.push("constant", v, Op::Leaf { param: None })
    }

    /// Leaf bound to a named store parameter (value copied in).
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        let t = Value::from_tensor(store.get(name)?);
        self.push(
            "param",
            t,
            Op::Leaf {
                param: Some(name.to_string()),
            },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = mat_dims(&self.vals[a]);
        let (k2, n) = mat_dims(&self.vals[b]);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul".into(),
                lhs: self.vals[a].shape.clone(),
                rhs: self.vals[b].shape.clone(),
            });
        }
        let mut out = vec![0.0f64; m * n];
        matmul_nn(&self.vals[a].data, &self.vals[b].data, &mut out, m, k, n);
        self.push(
            "matmul",
            Value::new(vec![m, n], out),
            Op::MatMul { a, b },
        )
    }

    /// a · bᵀ with b stored row-major as [n×k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = mat_dims(&self.vals[a]);
        let (n, k2) = mat_dims(&self.vals[b]);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt".into(),
                lhs: self.vals[a].shape.clone(),
                rhs: self.vals[b].shape.clone(),
            });
        }
        let av = &self.vals[a].data;
        let bv = &self.vals[b].data;
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += av[i * k + p] * bv[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
        self.push(
            "matmul_nt",
            Value::new(vec![m, n], out),
            Op::MatMulNT { a, b },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.vals[a].shape != self.vals[b].shape {
            return Err(Error::Dimension {
                op: "add".into(),
                lhs: self.vals[a].shape.clone(),
                rhs: self.vals[b].shape.clone(),
            });
        }
        let data = self.vals[a]
            .data
            .iter()
            .zip(&self.vals[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.vals[a].shape.clone();
        self.push("add", Value { shape, data }, Op::Add { a, b })
    }

    /// x[m×n] + bias[n], broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.vals[a].cols();
        if self.vals[b].numel() != n {
            return Err(Error::Dimension {
                op: "add_bias".into(),
                lhs: self.vals[a].shape.clone(),
                rhs: self.vals[b].shape.clone(),
            });
        }
        let bias = &self.vals[b].data;
        let data = self.vals[a]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias[i % n])
            .collect();
        let shape = self.vals[a].shape.clone();
        self.push("add_bias", Value { shape, data }, Op::AddBias { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.vals[a].data.iter().map(|x| x * c).collect();
        let shape = self.vals[a].shape.clone();
        self.push("scale", Value { shape, data }, Op::Scale { a, c })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = mat_dims(&self.vals[a]);
        let x = &self.vals[a].data;
        let mut data = vec![0.0f64; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0f64;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let shape = self.vals[a].shape.clone();
        self.push("softmax_rows", Value { shape, data }, Op::SoftmaxRows { a })
    }

    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, d) = mat_dims(&self.vals[a]);
        if self.vals[gamma].numel() != d || self.vals[beta].numel() != d {
            return Err(Error::Dimension {
                op: "layer_norm".into(),
                lhs: self.vals[a].shape.clone(),
                rhs: self.vals[gamma].shape.clone(),
            });
        }
        let x = &self.vals[a].data;
        let g = &self.vals[gamma].data;
        let b = &self.vals[beta].data;
        let mut data = vec![0.0f64; m * d];
        for i in 0..m {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let shape = self.vals[a].shape.clone();
        self.push(
            "layer_norm",
            Value { shape, data },
            Op::LayerNorm { a, gamma, beta, eps },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.vals[a].data.iter().map(|&x| gelu_val(x)).collect();
        let shape = self.vals[a].shape.clone();
        self.push("gelu", Value { shape, data }, Op::Gelu { a })
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, na) = mat_dims(&self.vals[a]);
        let (mb, nb) = mat_dims(&self.vals[b]);
        if na != nb {
            return Err(Error::Dimension {
                op: "concat_rows".into(),
                lhs: self.vals[a].shape.clone(),
                rhs: self.vals[b].shape.clone(),
            });
        }
        let mut data = Vec::with_capacity((ma + mb) * na);
        data.extend_from_slice(&self.vals[a].data);
        data.extend_from_slice(&self.vals[b].data);
        self.push(
            "concat_rows",
            Value::new(vec![ma + mb, na], data),
            Op::ConcatRows { a, b },
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = mat_dims(&self.vals[a]);
        if start + len > m {
            return Err(Error::Dimension {
                op: "slice_rows".into(),
                lhs: self.vals[a].shape.clone(),
                rhs: vec![start, len],
            });
        }
        let data = self.vals[a].data[start * n..(start + len) * n].to_vec();
        self.push(
            "slice_rows",
            Value::new(vec![len, n], data),
            Op::SliceRows { a, start, len },
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = mat_dims(&self.vals[a]);
        if start + len > n {
            return Err(Error::Dimension {
                op: "slice_cols".into(),
                lhs: self.vals[a].shape.clone(),
                rhs: vec![start, len],
            });
        }
        let src = &self.vals[a].data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(
            "slice_cols",
            Value::new(vec![m, len], data),
            Op::SliceCols { a, start, len },
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.vals[a].numel() {
            return Err(Error::Dimension {
                op: "reshape".into(),
                lhs: self.vals[a].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.vals[a].data.clone();
        self.push("reshape", Value { shape, data }, Op::Reshape { a })
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = mat_dims(&self.vals[table]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Dimension {
                op: "gather".into(),
                lhs: vec![rows, d],
                rhs: vec![bad],
            });
        }
        let src = &self.vals[table].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push(
            "gather",
            Value::new(vec![ids.len(), d], data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean negative log-softmax probability of targets over masked-in
    /// positions. `mask[i] == true` means position i contributes.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        let (t, v) = mat_dims(&self.vals[logits]);
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy".into(),
                lhs: vec![t, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::InvalidBatch(format!(
                "target id {bad} out of vocab range {v}"
            )));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::InvalidBatch("all positions masked out".into()));
        }
        let x = &self.vals[logits].data;
        let mut probs = vec![0.0f64; t * v];
        let mut loss = 0.0f64;
        for i in 0..t {
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0f64;
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[i * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[i * v + j] /= sum;
            }
            if mask[i] {
                loss += -(probs[i * v + targets[i]].max(f64::MIN_POSITIVE)).ln();
            }
        }
        loss /= count as f64;
        self.push(
            "cross_entropy",
            Value::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar node. Gradients accumulate on every node;
    /// call `accumulate_param_grads` to push them into a store.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.vals[loss].numel() != 1 {
            return Err(Error::Dimension {
                op: "backward".into(),
                lhs: self.vals[loss].shape.clone(),
                rhs: vec![1],
            });
        }
        self.grads[loss][0] = 1.0;
        let Graph { vals, grads, ops } = self;
        for i in (0..ops.len()).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let (g_out, _) = rest.split_first_mut().unwrap();
            match &ops[i] {
                Op::Leaf { .. } => {}
                Op::MatMul { a, b } => {
                    let (m, k) = mat_dims(&vals[*a]);
                    let n = vals[i].cols();
                    let av = &vals[*a].data;
                    let bv = &vals[*b].data;
                    // dA += dC · Bᵀ
                    {
                        let da = &mut before[*a];
                        for r in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0f64;
                                for c in 0..n {
                                    acc += g_out[r * n + c] * bv[p * n + c];
                                }
                                da[r * k + p] += acc;
                            }
                        }
                    }
                    // dB += Aᵀ · dC
                    {
                        let db = &mut before[*b];
                        for p in 0..k {
                            for c in 0..n {
                                let mut acc = 0.0f64;
                                for r in 0..m {
                                    acc += av[r * k + p] * g_out[r * n + c];
                                }
                                db[p * n + c] += acc;
                            }
                        }
                    }
                }
                Op::MatMulNT { a, b } => {
                    let (m, k) = mat_dims(&vals[*a]);
                    let n = vals[i].cols();
                    let av = &vals[*a].data;
                    let bv = &vals[*b].data;
                    // C = A·Bᵀ: dA += dC·B, dB += dCᵀ·A
                    {
                        let da = &mut before[*a];
                        for r in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0f64;
                                for c in 0..n {
                                    acc += g_out[r * n + c] * bv[c * k + p];
                                }
                                da[r * k + p] += acc;
                            }
                        }
                    }
                    {
                        let db = &mut before[*b];
                        for c in 0..n {
                            for p in 0..k {
                                let mut acc = 0.0f64;
                                for r in 0..m {
                                    acc += g_out[r * n + c] * av[r * k + p];
                                }
                                db[c * k + p] += acc;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (j, g) in g_out.iter().enumerate() {
                        before[*a][j] += g;
                    }
                    for (j, g) in g_out.iter().enumerate() {
                        before[*b][j] += g;
                    }
                }
                Op::AddBias { a, b } => {
                    let n = vals[*b].numel();
                    for (j, g) in g_out.iter().enumerate() {
                        before[*a][j] += g;
                    }
                    for (j, g) in g_out.iter().enumerate() {
                        before[*b][j % n] += g;
                    }
                }
                Op::Scale { a, c } => {
                    for (j, g) in g_out.iter().enumerate() {
                        before[*a][j] += g * c;
                    }
                }
                Op::SoftmaxRows { a } => {
                    let (m, n) = mat_dims(&vals[i]);
                    let y = &vals[i].data;
                    let da = &mut before[*a];
                    for r in 0..m {
                        let row_y = &y[r * n..(r + 1) * n];
                        let row_g = &g_out[r * n..(r + 1) * n];
                        let dot: f64 = row_y.iter().zip(row_g).map(|(y, g)| y * g).sum();
                        for c in 0..n {
                            da[r * n + c] += row_y[c] * (row_g[c] - dot);
                        }
                    }
                }
                Op::LayerNorm { a, gamma, beta, eps } => {
                    let (m, d) = mat_dims(&vals[*a]);
                    let x = &vals[*a].data;
                    let g = &vals[*gamma].data;
                    for r in 0..m {
                        let row = &x[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let gy = &g_out[r * d..(r + 1) * d];
                        let mut sum_gdy = 0.0f64;
                        let mut sum_gdy_xhat = 0.0f64;
                        let mut xhat = vec![0.0f64; d];
                        for c in 0..d {
                            xhat[c] = (row[c] - mean) * inv_std;
                            let gdy = g[c] * gy[c];
                            sum_gdy += gdy;
                            sum_gdy_xhat += gdy * xhat[c];
                        }
                        for c in 0..d {
                            let gdy = g[c] * gy[c];
                            before[*a][r * d + c] += inv_std
                                * (gdy - sum_gdy / d as f64 - xhat[c] * sum_gdy_xhat / d as f64);
                            before[*gamma][c] += gy[c] * xhat[c];
                            before[*beta][c] += gy[c];
                        }
                    }
                }
                Op::Gelu { a } => {
                    let x = &vals[*a].data;
                    for (j, g) in g_out.iter().enumerate() {
                        before[*a][j] += g * gelu_grad(x[j]);
                    }
                }
                Op::ConcatRows { a, b } => {
                    let na = vals[*a].numel();
                    for (j, g) in g_out[..na].iter().enumerate() {
                        before[*a][j] += g;
                    }
                    for (j, g) in g_out[na..].iter().enumerate() {
                        before[*b][j] += g;
                    }
                }
                Op::SliceRows { a, start, len } => {
                    let n = vals[*a].cols();
                    let off = start * n;
                    for (j, g) in g_out.iter().take(len * n).enumerate() {
                        before[*a][off + j] += g;
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let n = vals[*a].cols();
                    let m = vals[i].rows();
                    for r in 0..m {
                        for c in 0..*len {
                            before[*a][r * n + start + c] += g_out[r * len + c];
                        }
                    }
                }
                Op::Reshape { a } => {
                    for (j, g) in g_out.iter().enumerate() {
                        before[*a][j] += g;
                    }
                }
                Op::Gather { table, ids } => {
                    let d = vals[*table].cols();
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            before[*table][id * d + c] += g_out[r * d + c];
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                } => {
                    let v = vals[*logits].cols();
                    let count = mask.iter().filter(|m| **m).count() as f64;
                    let scale = g_out[0] / count;
                    let dl = &mut before[*logits];
                    for (r, (&tgt, &keep)) in targets.iter().zip(mask).enumerate() {
                        if !keep {
                            continue;
                        }
                        for c in 0..v {
                            let delta = if c == tgt { 1.0 } else { 0.0 };
                            dl[r * v + c] += scale * (probs[r * v + c] - delta);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Add every parameter leaf's gradient into the store (rounded to f32).
    pub fn accumulate_param_grads(&self, store: &mut ParameterStore) -> Result<()> {
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = op {
                let g32: Vec<f32> = self.grads[i].iter().map(|&g| g as f32).collect();
                store.accumulate_grad(name, &g32)?;
            }
        }
        Ok(())
    }
}

fn mat_dims(v: &Value) -> (usize, usize) {
    (v.rows(), v.cols())
}

fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for c in 0..n {
                orow[c] += av * brow[c];
            }
        }
    }
}

fn gelu_val(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
