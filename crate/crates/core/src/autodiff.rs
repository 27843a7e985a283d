//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied during one forward pass. Each
//! recorded node owns its output value and, for operations that need them,
//! the auxiliary values saved for the backward rule (pooling argmax, batch
//! norm statistics, dropout masks, softmax probabilities). [`Tape::backward`]
//! walks the nodes once in reverse order and accumulates gradients additively,
//! so a tensor used twice receives the sum of both contributions.
//!
//! Trainable state lives in a [`ParamStore`]. [`Tape::param`] copies a stored
//! tensor onto the tape as a leaf; after `backward`, [`ParamStore::accumulate`]
//! adds the leaf gradients into the store. Gradients are never zeroed
//! implicitly: call [`ParamStore::zero_grad`] between steps.

use std::collections::HashMap;

use crate::error::{config_err, contract_err, dim_err, Error, Result};

/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(dim_err!("shape {shape:?} has a zero dimension"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(dim_err!("ragged rows"));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(dim_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a 2-D index.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    fn rows_cols(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(dim_err!("expected a 2-D tensor, got shape {other:?}")),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named collection of parameter tensors and non-trainable buffers.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn next_store_uid() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(0);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

// Each store (including clones) gets its own uid so that several stores can
// share one tape without their parameter ids colliding.
impl Default for ParamStore {
    fn default() -> Self {
        Self {
            uid: next_store_uid(),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: next_store_uid(),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor.with_requires_grad(true))
    }

    /// Registers a non-trainable buffer (batch-norm running statistics).
    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor.with_requires_grad(false))
    }

    fn push(&mut self, name: String, tensor: Tensor) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad)
            .map(Tensor::numel)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients computed on `tape` into the stored tensors.
    pub fn accumulate(&mut self, tape: &Tape) {
        for (&(uid, id), &var) in &tape.param_vars {
            if uid != self.uid {
                continue;
            }
            if let Some(g) = tape.grads[var.0].as_ref() {
                let t = &mut self.tensors[id.0];
                if !t.requires_grad {
                    continue;
                }
                t.grad_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Forward behavior switch for dropout and batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        /// Unfolded input kept for the kernel gradient.
        cols: Option<Vec<f64>>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        pad_id: Option<usize>,
    },
    MaskedSoftmax {
        scores: Var,
        mask: Vec<bool>,
    },
    StackTime(Vec<Var>),
    WeightedSum {
        states: Var,
        weights: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<(u64, ParamId), Var>,
    fault_scale: Option<f64>,
}

pub const BN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales the matmul gradient flowing into its left operand. Used only
    /// to check that gradient verification detects a broken backward rule.
    pub fn inject_matmul_fault(&mut self, scale: f64) {
        self.fault_scale = Some(scale);
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Constant input; gradients are still computed for it when
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    /// Places a stored parameter on the tape (once per pass).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&(store.uid, id)) {
            return v;
        }
        let t = store.get(id);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: t.requires_grad,
            grad: None,
        };
        let rg = value.requires_grad;
        let v = self.push(value, Op::Leaf, rg);
        self.param_vars.insert((store.uid, id), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.values[a.0].rows_cols()?;
        let (k2, n) = self.values[b.0].rows_cols()?;
        if k != k2 {
            return Err(dim_err!("matmul inner dims {m}x{k} · {k2}x{n}"));
        }
        let out = gemm(m, k, n, &self.values[a.0].data, false, &self.values[b.0].data, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor {
            shape: self.values[a.0].shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.values[a.0].data.iter().map(|&x| f(x)).collect();
        let t = Tensor {
            shape: self.values[a.0].shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// `x[i, j] + bias[j]` for `x: [M×N]`, `bias: [N]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.values[x.0].rows_cols()?;
        if self.values[bias.0].numel() != n {
            return Err(dim_err!(
                "bias of length {} for {m}x{n} input",
                self.values[bias.0].numel()
            ));
        }
        let b = &self.values[bias.0].data;
        let mut data = self.values[x.0].data.clone();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bj)| *v += bj);
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::AddRowBias(x, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let (m, _) = self.values[first.0].rows_cols()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.values[p.0].rows_cols()?;
            if r != m {
                return Err(dim_err!("concat row mismatch {r} vs {m}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.values[p.0].data[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(&[m, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Columns `[start, start + len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.values[a.0].rows_cols()?;
        if len == 0 || start + len > n {
            return Err(dim_err!("column slice {start}+{len} of width {n}"));
        }
        let src = &self.values[a.0].data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[m, len], data)?, Op::SliceCols(a, start), ng))
    }

    /// Leading-dimension slice `[start, start + len)` of any-rank tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.values[a.0].shape.clone();
        if len == 0 || start + len > shape[0] {
            return Err(dim_err!("row slice {start}+{len} of {}", shape[0]));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.values[a.0].data[start * row..(start + len) * row].to_vec();
        let mut new_shape = shape;
        new_shape[0] = len;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&new_shape, data)?, Op::SliceRows(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[a.0].clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(
            Tensor {
                requires_grad: false,
                grad: None,
                ..t
            },
            Op::Reshape(a),
            ng,
        ))
    }

    /// Batched 2-D cross-correlation with zero padding and no bias.
    ///
    /// `input: [N×Cin×H×W]`, `kernel: [Cout×Cin×k×k]` with odd `k`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, pad)?;
        let cols = im2col_batch(&geo, &self.values[input.0].data);
        let out = conv2d_forward_cols(&geo, &cols, &self.values[kernel.0].data);
        let ng = self.ng(input) || self.ng(kernel);
        Ok(self.push(
            Tensor::new(&[geo.n, geo.cout, geo.oh, geo.ow], out)?,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
                cols: self.ng(kernel).then_some(cols),
            },
            ng,
        ))
    }

    /// 2×2 max pool with stride 2 over `[N×C×H×W]`; H and W must be even.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(contract_err!("max pool needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = &self.values[input.0].data;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(input);
        Ok(self.push(
            Tensor::new(&[n, c, oh, ow], out)?,
            Op::MaxPool2 { input, argmax },
            ng,
        ))
    }

    /// Spatial mean: `[N×C×H×W] -> [N×C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(input))?;
        let hw = h * w;
        let data = self.values[input.0]
            .data
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.ng(input);
        Ok(self.push(Tensor::new(&[n, c], data)?, Op::GlobalAvgPool(input), ng))
    }

    /// Per-channel normalization of `[N×C×...]` followed by `gamma`/`beta`.
    ///
    /// With `batch_stats = Some(..)` the batch mean and biased variance are
    /// used and returned through the slot for running-stat updates; with
    /// `running = Some((mean, var))` the given statistics are used instead.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(dim_err!("batch norm needs [N×C×...], got {shape:?}"));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.values[gamma.0].numel() != c || self.values[beta.0].numel() != c {
            return Err(dim_err!("batch norm affine params must have {c} entries"));
        }
        let x = &self.values[input.0].data;
        let (mean, var) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(dim_err!("running stats must have {c} entries"));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                if n < 2 {
                    return Err(contract_err!("train-mode batch norm needs batch size >= 2, got {n}"));
                }
                let count = (n * inner) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let p = &x[(s * c + ch) * inner..(s * c + ch + 1) * inner];
                        mean[ch] += p.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for s in 0..n {
                    for ch in 0..c {
                        let p = &x[(s * c + ch) * inner..(s * c + ch + 1) * inner];
                        var[ch] += p.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = &self.values[gamma.0].data;
        let b = &self.values[beta.0].data;
        let mut xhat = Vec::with_capacity(x.len());
        for (plane, p) in x.chunks_exact(inner).enumerate() {
            let ch = plane % c;
            xhat.extend(p.iter().map(|v| (v - mean[ch]) * inv_std[ch]));
        }
        let mut out = Vec::with_capacity(x.len());
        for (plane, p) in xhat.chunks_exact(inner).enumerate() {
            let ch = plane % c;
            out.extend(p.iter().map(|v| g[ch] * v + b[ch]));
        }
        let ng = self.ng(input) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            ng,
        );
        Ok((v, mean, var))
    }

    /// Multiplies by a fixed mask (inverted-dropout scaling already folded in).
    pub fn dropout_mask(&mut self, input: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.values[input.0].numel() {
            return Err(dim_err!("dropout mask length mismatch"));
        }
        let data = self.values[input.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.values[input.0].shape.clone();
        let ng = self.ng(input);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Dropout { input, mask }, ng))
    }

    /// Row lookup `table[ids[i]]`; the `pad_id` row never receives gradient.
    pub fn embedding(&mut self, table: Var, ids: &[usize], pad_id: Option<usize>) -> Result<Var> {
        let (v, e) = self.values[table.0].rows_cols()?;
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(contract_err!("token id {id} outside vocabulary of {v}"));
            }
            data.extend_from_slice(&self.values[table.0].data[id * e..(id + 1) * e]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), e], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                pad_id,
            },
            ng,
        ))
    }

    /// Row-wise softmax of `[B×T]` scores over positions where `mask` is true.
    /// A row with no unmasked position gets uniform weights over all `T`.
    pub fn masked_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let (b, t) = self.values[scores.0].rows_cols()?;
        if mask.len() != b * t {
            return Err(dim_err!("mask length {} for {b}x{t} scores", mask.len()));
        }
        let s = &self.values[scores.0].data;
        let mut out = vec![0.0; b * t];
        for i in 0..b {
            let row = &s[i * t..(i + 1) * t];
            let m = &mask[i * t..(i + 1) * t];
            let w = &mut out[i * t..(i + 1) * t];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                w.iter_mut().for_each(|x| *x = 1.0 / t as f64);
                continue;
            }
            let mut z = 0.0;
            for j in 0..t {
                if m[j] {
                    w[j] = (row[j] - max).exp();
                    z += w[j];
                }
            }
            w.iter_mut().for_each(|x| *x /= z);
        }
        let ng = self.ng(scores);
        Ok(self.push(
            Tensor::new(&[b, t], out)?,
            Op::MaskedSoftmax {
                scores,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Stacks `T` tensors of shape `[B×D]` into `[B×T×D]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let first = steps.first().ok_or(Error::EmptySequence)?;
        let (b, d) = self.values[first.0].rows_cols()?;
        for s in steps {
            if self.values[s.0].rows_cols()? != (b, d) {
                return Err(dim_err!("stack_time shape mismatch"));
            }
        }
        let t = steps.len();
        let mut data = vec![0.0; b * t * d];
        for (ti, s) in steps.iter().enumerate() {
            let src = &self.values[s.0].data;
            for bi in 0..b {
                data[(bi * t + ti) * d..(bi * t + ti + 1) * d]
                    .copy_from_slice(&src[bi * d..(bi + 1) * d]);
            }
        }
        let ng = steps.iter().any(|&s| self.ng(s));
        Ok(self.push(
            Tensor::new(&[b, t, d], data)?,
            Op::StackTime(steps.to_vec()),
            ng,
        ))
    }

    /// `out[b] = Σ_t weights[b, t] · states[b, t, :]`.
    pub fn weighted_sum(&mut self, states: Var, weights: Var) -> Result<Var> {
        let [b, t, d] = dims3(self.shape(states))?;
        if self.shape(weights) != [b, t] {
            return Err(dim_err!("weights {:?} for states {b}x{t}x{d}", self.shape(weights)));
        }
        let s = &self.values[states.0].data;
        let w = &self.values[weights.0].data;
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for ti in 0..t {
                let a = w[bi * t + ti];
                let row = &s[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                out[bi * d..(bi + 1) * d]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(o, x)| *o += a * x);
            }
        }
        let ng = self.ng(states) || self.ng(weights);
        Ok(self.push(
            Tensor::new(&[b, d], out)?,
            Op::WeightedSum { states, weights },
            ng,
        ))
    }

    /// Mean softmax cross-entropy of `[B×C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.values[logits.0].rows_cols()?;
        if labels.len() != b {
            return Err(dim_err!("{} labels for batch of {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(contract_err!("label {bad} outside 0..{c}"));
        }
        let z = &self.values[logits.0].data;
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Populates gradients of the scalar `loss` for every node that needs one.
    /// Calling it again recomputes from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        let Tape {
            values,
            ops,
            needs_grad,
            grads,
            fault_scale,
            ..
        } = self;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            backward_node(i, &ops[i], &g, values, needs_grad, grads, *fault_scale)?;
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn dims3(shape: &[usize]) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(shape).map_err(|_| dim_err!("expected 3-D tensor, got {shape:?}"))
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape).map_err(|_| dim_err!("expected 4-D tensor, got {shape:?}"))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Adds `src` elementwise into the gradient of `v`, or makes it the
/// gradient if there is none yet.
fn acc_iter(grads: &mut [Option<Vec<f64>>], v: Var, src: impl Iterator<Item = f64>) {
    match &mut grads[v.0] {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        slot => *slot = Some(src.collect()),
    }
}

fn acc_vec(grads: &mut [Option<Vec<f64>>], v: Var, src: Vec<f64>) {
    match &mut grads[v.0] {
        Some(d) => add_into(d, &src),
        slot => *slot = Some(src),
    }
}

fn backward_node(
    i: usize,
    op: &Op,
    g: &[f64],
    values: &[Tensor],
    needs_grad: &[bool],
    grads: &mut [Option<Vec<f64>>],
    fault_scale: Option<f64>,
) -> Result<()> {
    let ng = |v: Var| needs_grad[v.0];
    let out = &values[i];
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = values[a.0].rows_cols()?;
            let n = values[b.0].shape[1];
            if ng(*a) {
                // dA = G · Bᵀ
                let mut da = gemm(m, n, k, g, false, &values[b.0].data, true);
                if let Some(s) = fault_scale {
                    da.iter_mut().for_each(|x| *x *= s);
                }
                acc_vec(grads, *a, da);
            }
            if ng(*b) {
                // dB = Aᵀ · G
                let db = gemm(k, m, n, &values[a.0].data, true, g, false);
                acc_vec(grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if ng(*v) {
                    acc_iter(grads, *v, g.iter().copied());
                }
            }
        }
        Op::Sub(a, b) => {
            if ng(*a) {
                acc_iter(grads, *a, g.iter().copied());
            }
            if ng(*b) {
                acc_iter(grads, *b, g.iter().map(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            if ng(*a) {
                let other = &values[b.0].data;
                acc_iter(grads, *a, g.iter().zip(other).map(|(x, y)| x * y));
            }
            if ng(*b) {
                let other = &values[a.0].data;
                acc_iter(grads, *b, g.iter().zip(other).map(|(x, y)| x * y));
            }
        }
        Op::AddRowBias(x, bias) => {
            if ng(*x) {
                acc_iter(grads, *x, g.iter().copied());
            }
            if ng(*bias) {
                let n = values[bias.0].numel();
                let db = acc(grads, *bias, n);
                for row in g.chunks_exact(n) {
                    add_into(db, row);
                }
            }
        }
        Op::Scale(a, s) => {
            if ng(*a) {
                acc_iter(grads, *a, g.iter().map(|x| s * x));
            }
        }
        Op::Sigmoid(a) => {
            if ng(*a) {
                acc_iter(grads, *a, g.iter().zip(&out.data).map(|(x, y)| x * y * (1.0 - y)));
            }
        }
        Op::Tanh(a) => {
            if ng(*a) {
                acc_iter(grads, *a, g.iter().zip(&out.data).map(|(x, y)| x * (1.0 - y * y)));
            }
        }
        Op::Relu(a) => {
            if ng(*a) {
                let x = &values[a.0].data;
                acc_iter(grads, *a, g.iter().zip(x).map(|(d, y)| if *y > 0.0 { *d } else { 0.0 }));
            }
        }
        Op::Sum(a) => {
            if ng(*a) {
                let n = values[a.0].numel();
                acc(grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if ng(*a) {
                let n = values[a.0].numel();
                let s = g[0] / n as f64;
                acc(grads, *a, n).iter_mut().for_each(|d| *d += s);
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.shape[1];
            let m = out.shape[0];
            let mut off = 0;
            for p in parts {
                let w = values[p.0].shape[1];
                if ng(*p) {
                    let d = acc(grads, *p, m * w);
                    for r in 0..m {
                        add_into(
                            &mut d[r * w..(r + 1) * w],
                            &g[r * total + off..r * total + off + w],
                        );
                    }
                }
                off += w;
            }
        }
        Op::SliceCols(a, start) => {
            if ng(*a) {
                let (m, n) = values[a.0].rows_cols()?;
                let len = out.shape[1];
                let d = acc(grads, *a, m * n);
                for r in 0..m {
                    add_into(
                        &mut d[r * n + start..r * n + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            }
        }
        Op::SliceRows(a, start) => {
            if ng(*a) {
                let n = values[a.0].numel();
                let row: usize = values[a.0].shape[1..].iter().product();
                let d = acc(grads, *a, n);
                add_into(&mut d[start * row..start * row + g.len()], g);
            }
        }
        Op::Reshape(a) => {
            if ng(*a) {
                acc_iter(grads, *a, g.iter().copied());
            }
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            pad,
            cols,
        } => {
            let geo = ConvGeometry::new(
                &values[input.0].shape,
                &values[kernel.0].shape,
                *stride,
                *pad,
            )?;
            let g_wide = batch_to_channel_major(&geo, g);
            if ng(*input) {
                let n = values[input.0].numel();
                conv2d_backward_input_wide(&geo, &g_wide, &values[kernel.0].data, acc(grads, *input, n));
            }
            if let (true, Some(cols)) = (ng(*kernel), cols) {
                let n = values[kernel.0].numel();
                conv2d_backward_kernel_wide(&geo, &g_wide, cols, acc(grads, *kernel, n));
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if ng(*input) {
                let n = values[input.0].numel();
                let d = acc(grads, *input, n);
                for (&idx, &x) in argmax.iter().zip(g) {
                    d[idx] += x;
                }
            }
        }
        Op::GlobalAvgPool(input) => {
            if ng(*input) {
                let n = values[input.0].numel();
                let hw = n / g.len();
                let d = acc(grads, *input, n);
                for (p, &x) in d.chunks_exact_mut(hw).zip(g) {
                    let s = x / hw as f64;
                    p.iter_mut().for_each(|v| *v += s);
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let shape = &values[input.0].shape;
            let (n, c) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * inner;
                    for j in off..off + inner {
                        dgamma[ch] += g[j] * xhat[j];
                        dbeta[ch] += g[j];
                    }
                }
            }
            if ng(*input) {
                let gam = &values[gamma.0].data;
                let count = (n * inner) as f64;
                let mut dx = Vec::with_capacity(g.len());
                for (plane, (gp, xp)) in g.chunks_exact(inner).zip(xhat.chunks_exact(inner)).enumerate() {
                    let ch = plane % c;
                    let k = gam[ch] * inv_std[ch];
                    let (mb, mg) = if *batch_stats {
                        (dbeta[ch] / count, dgamma[ch] / count)
                    } else {
                        (0.0, 0.0)
                    };
                    dx.extend(gp.iter().zip(xp).map(|(gj, xj)| k * (gj - mb - xj * mg)));
                }
                acc_vec(grads, *input, dx);
            }
            if ng(*gamma) {
                add_into(acc(grads, *gamma, c), &dgamma);
            }
            if ng(*beta) {
                add_into(acc(grads, *beta, c), &dbeta);
            }
        }
        Op::Dropout { input, mask } => {
            if ng(*input) {
                acc_iter(grads, *input, g.iter().zip(mask).map(|(x, m)| x * m));
            }
        }
        Op::Embedding { table, ids, pad_id } => {
            if ng(*table) {
                let n = values[table.0].numel();
                let e = values[table.0].shape[1];
                let d = acc(grads, *table, n);
                for (r, &id) in ids.iter().enumerate() {
                    if Some(id) == *pad_id {
                        continue;
                    }
                    add_into(&mut d[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                }
            }
        }
        Op::MaskedSoftmax { scores, mask } => {
            if ng(*scores) {
                let (b, t) = (out.shape[0], out.shape[1]);
                let w = &out.data;
                let d = acc(grads, *scores, b * t);
                for r in 0..b {
                    // the uniform fallback for a fully masked row is constant
                    if !mask[r * t..(r + 1) * t].iter().any(|&m| m) {
                        continue;
                    }
                    let wr = &w[r * t..(r + 1) * t];
                    let gr = &g[r * t..(r + 1) * t];
                    let dot: f64 = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..t {
                        d[r * t + j] += wr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::StackTime(steps) => {
            let (b, t, d) = (out.shape[0], out.shape[1], out.shape[2]);
            for (ti, s) in steps.iter().enumerate() {
                if ng(*s) {
                    let dst = acc(grads, *s, b * d);
                    for bi in 0..b {
                        add_into(
                            &mut dst[bi * d..(bi + 1) * d],
                            &g[(bi * t + ti) * d..(bi * t + ti + 1) * d],
                        );
                    }
                }
            }
        }
        Op::WeightedSum { states, weights } => {
            let [b, t, d] = dims3(&values[states.0].shape)?;
            if ng(*states) {
                let w = &values[weights.0].data;
                let ds = acc(grads, *states, b * t * d);
                for bi in 0..b {
                    for ti in 0..t {
                        let a = w[bi * t + ti];
                        ds[(bi * t + ti) * d..(bi * t + ti + 1) * d]
                            .iter_mut()
                            .zip(&g[bi * d..(bi + 1) * d])
                            .for_each(|(x, gv)| *x += a * gv);
                    }
                }
            }
            if ng(*weights) {
                let s = &values[states.0].data;
                let dw = acc(grads, *weights, b * t);
                for bi in 0..b {
                    for ti in 0..t {
                        dw[bi * t + ti] += s[(bi * t + ti) * d..(bi * t + ti + 1) * d]
                            .iter()
                            .zip(&g[bi * d..(bi + 1) * d])
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if ng(*logits) {
                let b = labels.len();
                let c = probs.len() / b;
                let s = g[0] / b as f64;
                let d = acc(grads, *logits, b * c);
                for r in 0..b {
                    for j in 0..c {
                        let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                        d[r * c + j] += s * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `op(a) · op(b)` with `op(a): [m×k]`, `op(b): [k×n]`, as a new `[m×n]` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    // Row-major strides; a transposed operand is stored [k×m] (resp. [n×k]).
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let mut out = Vec::with_capacity(m * n);
    // SAFETY: the slices hold exactly m·k and k·n elements and the strides
    // address only those. With beta = 0 dgemm writes all m·n elements of
    // the output without reading them, so the capacity is initialized
    // before set_len.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
        out.set_len(m * n);
    }
    out
}

/// Validated shape bundle for a batched convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = dims4(input)?;
        let [cout, kcin, k, k2] = dims4(kernel)?;
        if kcin != cin {
            return Err(dim_err!("kernel expects {kcin} input channels, input has {cin}"));
        }
        if k != k2 || k % 2 == 0 {
            return Err(config_err_k(k, k2));
        }
        if stride == 0 {
            return Err(config_err!("conv stride must be positive"));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < k || span_w < k || (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
            return Err(config_err!(
                "conv output size not integral: H={h} W={w} k={k} stride={stride} pad={pad}"
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: (span_h - k) / stride + 1,
            ow: (span_w - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

fn config_err_k(k: usize, k2: usize) -> Error {
    config_err!("conv kernel must be square with odd size, got {k}x{k2}")
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` is inside
/// the image, as a half-open range.
fn valid_cols(geo: &ConvGeometry, kx: usize) -> (usize, usize) {
    let lo = (geo.pad.saturating_sub(kx) + geo.stride - 1) / geo.stride;
    let hi = if geo.w + geo.pad > kx {
        ((geo.w + geo.pad - kx - 1) / geo.stride + 1).min(geo.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Adds one image's block of a column matrix back into its gradient
/// `[Cin×H×W]`; the inverse layout of [`im2col_batch`].
fn col2im(geo: &ConvGeometry, cols: &[f64], ld: usize, off: usize, img: &mut [f64]) {
    let plane = geo.out_plane();
    for ci in 0..geo.cin {
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let row = (ci * geo.k + ky) * geo.k + kx;
                let src = &cols[row * ld + off..][..plane];
                let (lo, hi) = valid_cols(geo, kx);
                if lo == hi {
                    continue;
                }
                let first = lo * geo.stride + kx - geo.pad;
                for oy in 0..geo.oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let dst = &mut img[(ci * geo.h + iy as usize) * geo.w..][..geo.w];
                    let line = &src[oy * geo.ow + lo..oy * geo.ow + hi];
                    if geo.stride == 1 {
                        dst[first..first + hi - lo].iter_mut().zip(line).for_each(|(d, s)| *d += s);
                    } else {
                        for (j, s) in line.iter().enumerate() {
                            dst[first + j * geo.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds the whole batch into `[Cin·k·k × N·OH·OW]`, sample-major along
/// the columns.
fn im2col_batch(geo: &ConvGeometry, input: &[f64]) -> Vec<f64> {
    let img_len = geo.cin * geo.h * geo.w;
    let mut cols = Vec::with_capacity(geo.patch_len() * geo.n * geo.out_plane());
    for ci in 0..geo.cin {
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let (lo, hi) = valid_cols(geo, kx);
                for s in 0..geo.n {
                    for oy in 0..geo.oh {
                        let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                        if iy < 0 || iy >= geo.h as isize || lo == hi {
                            cols.resize(cols.len() + geo.ow, 0.0);
                            continue;
                        }
                        let src = &input[s * img_len + (ci * geo.h + iy as usize) * geo.w..][..geo.w];
                        cols.resize(cols.len() + lo, 0.0);
                        let first = lo * geo.stride + kx - geo.pad;
                        if geo.stride == 1 {
                            cols.extend_from_slice(&src[first..first + hi - lo]);
                        } else {
                            cols.extend((0..hi - lo).map(|j| src[first + j * geo.stride]));
                        }
                        cols.resize(cols.len() + geo.ow - hi, 0.0);
                    }
                }
            }
        }
    }
    cols
}

/// `[Cout × N·P]` to `[N × Cout × P]`.
fn channel_to_batch_major(geo: &ConvGeometry, wide: &[f64]) -> Vec<f64> {
    let plane = geo.out_plane();
    let ld = geo.n * plane;
    let mut out = Vec::with_capacity(wide.len());
    for s in 0..geo.n {
        for co in 0..geo.cout {
            out.extend_from_slice(&wide[co * ld + s * plane..][..plane]);
        }
    }
    out
}

/// `[N × Cout × P]` to `[Cout × N·P]`.
fn batch_to_channel_major(geo: &ConvGeometry, g: &[f64]) -> Vec<f64> {
    let plane = geo.out_plane();
    let mut out = Vec::with_capacity(g.len());
    for co in 0..geo.cout {
        for s in 0..geo.n {
            out.extend_from_slice(&g[(s * geo.cout + co) * plane..][..plane]);
        }
    }
    out
}

fn conv2d_forward_cols(geo: &ConvGeometry, cols: &[f64], kernel: &[f64]) -> Vec<f64> {
    let np = geo.n * geo.out_plane();
    let wide = gemm(geo.cout, geo.patch_len(), np, kernel, false, cols, false);
    channel_to_batch_major(geo, &wide)
}

/// im2col + GEMM forward pass.
pub fn conv2d_forward(geo: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    conv2d_forward_cols(geo, &im2col_batch(geo, input), kernel)
}

/// Direct nested-loop cross-correlation, the reference for [`conv2d_forward`].
pub fn conv2d_direct(geo: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; geo.n * geo.cout * geo.oh * geo.ow];
    for s in 0..geo.n {
        for co in 0..geo.cout {
            for oy in 0..geo.oh {
                for ox in 0..geo.ow {
                    let mut acc = 0.0;
                    for ci in 0..geo.cin {
                        for ky in 0..geo.k {
                            for kx in 0..geo.k {
                                let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                                let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                                if iy < 0 || ix < 0 || iy >= geo.h as isize || ix >= geo.w as isize
                                {
                                    continue;
                                }
                                acc += kernel[((co * geo.cin + ci) * geo.k + ky) * geo.k + kx]
                                    * input[((s * geo.cin + ci) * geo.h + iy as usize) * geo.w
                                        + ix as usize];
                            }
                        }
                    }
                    out[((s * geo.cout + co) * geo.oh + oy) * geo.ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// `g_wide` is the output gradient in `[Cout × N·P]` layout.
fn conv2d_backward_input_wide(geo: &ConvGeometry, g_wide: &[f64], kernel: &[f64], dinput: &mut [f64]) {
    let plane = geo.out_plane();
    let ld = geo.n * plane;
    let img_len = geo.cin * geo.h * geo.w;
    // dcols = Kᵀ · G
    let dcols = gemm(geo.patch_len(), geo.cout, ld, kernel, true, g_wide, false);
    for s in 0..geo.n {
        col2im(geo, &dcols, ld, s * plane, &mut dinput[s * img_len..(s + 1) * img_len]);
    }
}

fn conv2d_backward_kernel_wide(geo: &ConvGeometry, g_wide: &[f64], cols: &[f64], dkernel: &mut [f64]) {
    let plen = geo.patch_len();
    // dK = G · colsᵀ
    let dk = gemm(geo.cout, geo.n * geo.out_plane(), plen, g_wide, false, cols, true);
    add_into(dkernel, &dk);
}

#[cfg(test)]
fn conv2d_backward_input(geo: &ConvGeometry, grad_out: &[f64], kernel: &[f64], dinput: &mut [f64]) {
    conv2d_backward_input_wide(geo, &batch_to_channel_major(geo, grad_out), kernel, dinput);
}

#[cfg(test)]
fn conv2d_backward_kernel(geo: &ConvGeometry, grad_out: &[f64], input: &[f64], dkernel: &mut [f64]) {
    let g = batch_to_channel_major(geo, grad_out);
    conv2d_backward_kernel_wide(geo, &g, &im2col_batch(geo, input), dkernel);
}

/// Per-parameter outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Relative error used by [`grad_check`].
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences for every trainable element in `store`.
///
/// `f` must be deterministic. The store is restored before returning.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &mut ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let mut analytic: HashMap<ParamId, Vec<f64>> = HashMap::new();
    for id in store.ids() {
        let n = store.get(id).numel();
        let g = tape
            .param_vars
            .get(&(store.uid, id))
            .and_then(|v| tape.grads[v.0].clone())
            .unwrap_or_else(|| vec![0.0; n]);
        analytic.insert(id, g);
    }
    drop(tape);

    let mut eval = |store: &mut ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, store)?;
        Ok(t.value(l).data()[0])
    };

    let mut entries = Vec::new();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.get(id).requires_grad() {
            continue;
        }
        let n = store.get(id).numel();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + eps;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - eps;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[&id][j], numeric));
        }
        entries.push(GradCheckEntry {
            name: store.name(id).to_string(),
            numel: n,
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use proptest::prelude::*;

    fn random(shape: &[usize], rng: &mut CounterRng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    fn matmul_values(a: Tensor, b: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(a), tape.leaf(b));
        let c = tape.matmul(a, b).unwrap();
        tape.value(c).clone()
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        assert_eq!(matmul_values(a, b).data(), &[19.0, 22.0, 43.0, 50.0]);

        let mut rng = CounterRng::new(1);
        let a = random(&[3, 3], &mut rng);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        assert_eq!(matmul_values(a.clone(), eye).data(), a.data());
        let z = matmul_values(a, Tensor::zeros(&[3, 2]));
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.shape(), &[3, 2]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    fn conv_values(input: Tensor, kernel: Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (x, k) = (tape.leaf(input), tape.leaf(kernel));
        let y = tape.conv2d(x, k, stride, pad)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn conv2d_examples() {
        let mut rng = CounterRng::new(2);
        let x = random(&[1, 1, 5, 5], &mut rng);
        let one = Tensor::filled(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv_values(x.clone(), one, 1, 0).unwrap().data(), x.data());

        let ones = Tensor::filled(&[1, 1, 5, 5], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let y = conv_values(ones, k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[4], 4.0);
        assert_eq!(y.data()[24], 4.0);
        assert_eq!(y.data()[12], 9.0);
        assert_eq!(y.data()[6], 9.0);
        assert_eq!(y.data()[1], 6.0);

        let zero = Tensor::zeros(&[2, 1, 3, 3]);
        let y = conv_values(x, zero, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_rejects_bad_geometry() {
        let x = Tensor::zeros(&[1, 1, 6, 6]);
        let even = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(conv_values(x.clone(), even, 1, 0), Err(Error::Config(_))));
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        // (6 + 0 - 3) / 2 is not integral
        assert!(matches!(conv_values(x, k, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn im2col_matches_direct_loop() {
        let mut rng = CounterRng::new(3);
        for (n, cin, h, w, cout, k, stride, pad) in [
            (2, 3, 8, 8, 4, 3, 1, 1),
            (1, 2, 7, 9, 3, 3, 2, 1),
            (3, 1, 5, 5, 2, 5, 1, 2),
            (2, 4, 4, 4, 5, 1, 1, 0),
        ] {
            let x = random(&[n, cin, h, w], &mut rng);
            let kern = random(&[cout, cin, k, k], &mut rng);
            let geo = ConvGeometry::new(x.shape(), kern.shape(), stride, pad).unwrap();
            let fast = conv2d_forward(&geo, x.data(), kern.data());
            let slow = conv2d_direct(&geo, x.data(), kern.data());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);

        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::filled(&[2, 3], 0.7).with_requires_grad(true));
        let s = tape.add(a, a).unwrap();
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]).with_requires_grad(true));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_of_matmul_gradient_matches_finite_differences() {
        let mut rng = CounterRng::new(4);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&[3, 4], &mut rng));
        let b = store.add("b", random(&[4, 2], &mut rng));
        let report = grad_check(&mut store, 1e-5, |tape, ps| {
            let (va, vb) = (tape.param(ps, a), tape.param(ps, b));
            let c = tape.matmul(va, vb)?;
            Ok(tape.sum(c))
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-7, "{report:?}");

        // d/dA sum(AB) = 1 · Bᵀ: row i of the gradient is the row sums of B.
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&store, a), tape.param(&store, b));
        let c = tape.matmul(va, vb).unwrap();
        let l = tape.sum(c);
        tape.backward(l).unwrap();
        let bd = store.get(b).data();
        for i in 0..3 {
            for k in 0..4 {
                let expect = bd[k * 2] + bd[k * 2 + 1];
                assert!((tape.grad(va).unwrap()[i * 4 + k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_check_of_quadratic_is_exact() {
        let mut rng = CounterRng::new(5);
        let mut store = ParamStore::new();
        let x = store.add("x", random(&[7], &mut rng));
        let report = grad_check(&mut store, 1e-5, |tape, ps| {
            let v = tape.param(ps, x);
            let sq = tape.mul(v, v)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-7);
    }

    #[test]
    fn grad_check_detects_a_corrupted_backward_rule() {
        let mut rng = CounterRng::new(6);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&[2, 3], &mut rng));
        let b = store.add("b", random(&[3, 2], &mut rng));
        let report = grad_check(&mut store, 1e-5, |tape, ps| {
            tape.inject_matmul_fault(2.0);
            let (va, vb) = (tape.param(ps, a), tape.param(ps, b));
            let c = tape.matmul(va, vb)?;
            let t = tape.tanh(c);
            Ok(tape.sum(t))
        })
        .unwrap();
        assert!(report.max_rel_err() > 0.1);
        assert_eq!(report.worst().unwrap().name, "a");
    }

    #[test]
    fn zero_then_backward_twice_gives_identical_grads() {
        let mut rng = CounterRng::new(7);
        let mut store = ParamStore::new();
        let w = store.add("w", random(&[3, 3], &mut rng));
        let x = random(&[2, 3], &mut rng);
        let run = |store: &mut ParamStore| {
            store.zero_grad();
            let mut tape = Tape::new();
            let vx = tape.leaf(x.clone());
            let vw = tape.param(store, w);
            let y = tape.matmul(vx, vw).unwrap();
            let y = tape.sigmoid(y);
            let l = tape.sum(y);
            tape.backward(l).unwrap();
            store.accumulate(&tape);
            store.get(w).grad().unwrap().to_vec()
        };
        let g1 = run(&mut store);
        let g2 = run(&mut store);
        assert_eq!(g1, g2);

        // without zeroing, gradients accumulate
        let mut tape = Tape::new();
        let vx = tape.leaf(x.clone());
        let vw = tape.param(&store, w);
        let y = tape.matmul(vx, vw).unwrap();
        let y = tape.sigmoid(y);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        store.accumulate(&tape);
        for (a, b) in store.get(w).grad().unwrap().iter().zip(&g1) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_ops_are_deterministic() {
        let mut rng = CounterRng::new(8);
        let x = random(&[2, 2, 6, 6], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let a = conv_values(x.clone(), k.clone(), 1, 1).unwrap();
        let b = conv_values(x, k, 1, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_softmax_all_masked_row_is_uniform() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::from_rows(&[vec![1.0, 5.0, -2.0], vec![0.3, 0.1, 9.0]]).unwrap());
        let w = tape
            .masked_softmax(s, &[false, false, false, true, true, false])
            .unwrap();
        let w = tape.value(w).data();
        assert!(w[..3].iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(w[5], 0.0);
        assert!((w[3] + w[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_pad_row_gets_no_gradient() {
        let mut rng = CounterRng::new(9);
        let mut tape = Tape::new();
        let table = tape.leaf(random(&[5, 3], &mut rng).with_requires_grad(true));
        let e = tape.embedding(table, &[0, 2, 0, 4], Some(0)).unwrap();
        let l = tape.sum(e);
        tape.backward(l).unwrap();
        let g = tape.grad(table).unwrap();
        assert!(g[..3].iter().all(|&v| v == 0.0));
        assert!(g[6..9].iter().all(|&v| v == 1.0));
        assert!(matches!(
            tape.embedding(table, &[5], Some(0)),
            Err(Error::Contract(_))
        ));
    }

    /// Builds a scalar from one primitive applied to random inputs, weighted
    /// by a fixed random projection so every output element matters.
    fn primitive_check(op: usize, dims: (usize, usize, usize), seed: u64) -> f64 {
        let (m, k, n) = dims;
        let mut rng = CounterRng::new(seed);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&[m, k], &mut rng));
        let b = store.add("b", random(&[k, n], &mut rng));
        let c = store.add("c", random(&[m, k], &mut rng));
        let bias = store.add("bias", random(&[k], &mut rng));
        let proj = random(&[4 * 96 + m * k.max(n) * 4], &mut rng);
        let img = store.add("img", random(&[2, 2, 4, 6], &mut rng));
        let kern = store.add("kern", random(&[3, 2, 3, 3], &mut rng));
        let wts = store.add("wts", random(&[m, 2], &mut rng));
        let labels: Vec<usize> = (0..m).map(|i| i % k).collect();
        let mask: Vec<bool> = (0..m * k).map(|i| i % 3 != 1).collect();
        let report = grad_check(&mut store, 1e-5, |tape, ps| {
            let (va, vb, vc) = (tape.param(ps, a), tape.param(ps, b), tape.param(ps, c));
            let vbias = tape.param(ps, bias);
            let out = match op {
                0 => tape.matmul(va, vb)?,
                1 => tape.add(va, vc)?,
                2 => tape.sub(va, vc)?,
                3 => tape.mul(va, vc)?,
                4 => tape.add_row_bias(va, vbias)?,
                5 => tape.sigmoid(va),
                6 => tape.tanh(va),
                7 => {
                    let s = tape.scale(va, -1.7);
                    tape.mean(s)
                }
                8 => tape.concat_cols(&[va, vc, va])?,
                9 => tape.slice_cols(va, k / 2, k - k / 2)?,
                10 => tape.slice_rows(va, m / 2, m - m / 2)?,
                11 => {
                    let i = tape.param(ps, img);
                    let kk = tape.param(ps, kern);
                    tape.conv2d(i, kk, 1, 1)?
                }
                12 => {
                    let i = tape.param(ps, img);
                    let kk = tape.param(ps, kern);
                    let y = tape.conv2d(i, kk, 1, 1)?;
                    tape.max_pool2(y)?
                }
                13 => {
                    let i = tape.param(ps, img);
                    tape.global_avg_pool(i)?
                }
                14 => {
                    let i = tape.param(ps, img);
                    let g = tape.leaf(Tensor::new(&[2], vec![1.3, -0.4])?.with_requires_grad(true));
                    let bb = tape.leaf(Tensor::new(&[2], vec![0.2, 0.5])?.with_requires_grad(true));
                    tape.batch_norm(i, g, bb, None)?.0
                }
                15 => tape.masked_softmax(va, &mask)?,
                16 => {
                    let s = tape.stack_time(&[va, vc])?;
                    let w = tape.param(ps, wts);
                    tape.weighted_sum(s, w)?
                }
                17 => return tape.cross_entropy(va, &labels),
                18 => {
                    let r = tape.relu(va);
                    tape.mul(r, vc)?
                }
                _ => unreachable!(),
            };
            let len = tape.value(out).numel();
            let p = tape.leaf(Tensor::new(tape.shape(out), proj.data()[..len].to_vec())?);
            let weighted = tape.mul(out, p)?;
            Ok(tape.sum(weighted))
        })
        .unwrap();
        report.max_rel_err()
    }

    #[test]
    fn conv_batchnorm_and_pool_gradients() {
        for op in 11..=14 {
            let err = primitive_check(op, (3, 4, 2), 100 + op as u64);
            assert!(err < 1e-4, "op {op}: {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn every_primitive_matches_central_differences(
            op in 0usize..19,
            m in 1usize..=6,
            k in 2usize..=6,
            n in 1usize..=5,
            seed in 0u64..1000,
        ) {
            prop_assume!(!(op == 14 || (11..=13).contains(&op)));
            let err = primitive_check(op, (m, k, n), seed);
            prop_assert!(err < 1e-4, "op {} err {}", op, err);
        }

        #[test]
        fn im2col_paths_match_direct_convolution(
            (n, cin, cout) in (1usize..=2, 1usize..=3, 1usize..=3),
            (h, w) in (1usize..=7, 1usize..=7),
            k in prop::sample::select(vec![1usize, 3, 5]),
            stride in 1usize..=3,
            pad in 0usize..=2,
            seed in 0u64..1000,
        ) {
            let span = |d: usize| d + 2 * pad;
            prop_assume!(span(h) >= k && span(w) >= k);
            prop_assume!((span(h) - k) % stride == 0 && (span(w) - k) % stride == 0);
            let geo = ConvGeometry::new(&[n, cin, h, w], &[cout, cin, k, k], stride, pad).unwrap();
            let mut rng = CounterRng::new(seed);
            let mut draw = |len: usize| (0..len).map(|_| rng.uniform_range(-1.0, 1.0)).collect::<Vec<f64>>();
            let x = draw(n * cin * h * w);
            let ker = draw(cout * cin * k * k);
            let g = draw(n * cout * geo.oh * geo.ow);
            let y = conv2d_forward(&geo, &x, &ker);
            let yd = conv2d_direct(&geo, &x, &ker);
            for (a, b) in y.iter().zip(&yd) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            // adjoint identities: <conv(x, K), g> = <x, dx(g)> = <K, dK(g)>
            let lhs: f64 = yd.iter().zip(&g).map(|(a, b)| a * b).sum();
            let mut dx = vec![0.0; x.len()];
            conv2d_backward_input(&geo, &g, &ker, &mut dx);
            let mut dk = vec![0.0; ker.len()];
            conv2d_backward_kernel(&geo, &g, &x, &mut dk);
            let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            let via_k: f64 = ker.iter().zip(&dk).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - via_x).abs() < 1e-10 && (lhs - via_k).abs() < 1e-10);
        }
    }
}
