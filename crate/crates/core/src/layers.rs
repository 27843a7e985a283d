//! Network building blocks on top of the tape: dense, LSTM/BiLSTM, additive
//! attention, convolution blocks with batch norm, dropout and embeddings.
//!
//! Layers only hold [`ParamId`]s; the tensors live in a [`ParamStore`] so a
//! whole network can be checkpointed, checksummed or gradient-checked as one
//! unit.

use crate::autodiff::{Mode, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::rng::CounterRng;

pub const BN_MOMENTUM: f64 = 0.1;

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut CounterRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(shape, data).expect("non-empty shape")
}

/// Fully connected layer `y = x·W + b` with `W: [in×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut CounterRng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(&[in_dim, out_dim], bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform_tensor(&[out_dim], bound, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.in_dim {
            return Err(dim_err!(
                "linear layer expects [B×{}], got {:?}",
                self.in_dim,
                tape.shape(x)
            ));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }
}

/// LSTM cell with gate blocks packed in the order input, forget, output,
/// candidate: `W: [D×4H]`, `U: [H×4H]`, `b: [4H]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

pub const GATE_NAMES: [&str; 4] = ["input", "forget", "output", "candidate"];

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden: usize, rng: &mut CounterRng) -> Self {
        let w = store.add(
            format!("{name}.w"),
            uniform_tensor(&[input_dim, 4 * hidden], 1.0 / (input_dim as f64).sqrt(), rng),
        );
        let u = store.add(
            format!("{name}.u"),
            uniform_tensor(&[hidden, 4 * hidden], 1.0 / (hidden as f64).sqrt(), rng),
        );
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{name}.b"), Tensor::new(&[4 * hidden], bias).expect("bias"));
        Self {
            w,
            u,
            b,
            input_dim,
            hidden,
        }
    }

    /// One step on a batch: `x: [B×D]`, `h, c: [B×H]` → `(h', c')`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.input_dim {
            return Err(config_err!("LSTM input must be [B×{}], got {xs:?}", self.input_dim));
        }
        for (what, v) in [("h", h), ("c", c)] {
            if tape.shape(v) != [xs[0], hd] {
                return Err(config_err!(
                    "LSTM state {what} must be [{}×{hd}], got {:?}",
                    xs[0],
                    tape.shape(v)
                ));
            }
        }
        let w = tape.param(store, self.w);
        let u = tape.param(store, self.u);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h, u)?;
        let pre = tape.add(xw, hu)?;
        let pre = tape.add_row_bias(pre, b)?;
        let i = tape.slice_cols(pre, 0, hd)?;
        let f = tape.slice_cols(pre, hd, hd)?;
        let o = tape.slice_cols(pre, 2 * hd, hd)?;
        let g = tape.slice_cols(pre, 3 * hd, hd)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let o = tape.sigmoid(o);
        let g = tape.tanh(g);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

/// Per-row keep mask for a time step, shaped like the hidden state.
fn keep_state(tape: &mut Tape, new: Var, old: Var, valid: &[bool], hidden: usize) -> Result<Var> {
    if valid.iter().all(|&v| v) {
        return Ok(new);
    }
    let keep: Vec<f64> = valid
        .iter()
        .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, hidden))
        .collect();
    let hold: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
    let rows = valid.len();
    let keep = tape.leaf(Tensor::new(&[rows, hidden], keep)?);
    let hold = tape.leaf(Tensor::new(&[rows, hidden], hold)?);
    let a = tape.mul(new, keep)?;
    let b = tape.mul(old, hold)?;
    tape.add(a, b)
}

fn run_direction(
    tape: &mut Tape,
    store: &ParamStore,
    cell: &LstmCell,
    seq: &[Var],
    valid: Option<&[Vec<bool>]>,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<Option<Var>>> {
    let batch = tape.shape(seq[0])[0];
    let hd = cell.hidden;
    let mut h = tape.leaf(Tensor::zeros(&[batch, hd]));
    let mut c = tape.leaf(Tensor::zeros(&[batch, hd]));
    let mut out = vec![None; seq.len()];
    for t in order {
        let (hn, cn) = cell.step(tape, store, seq[t], h, c)?;
        match valid {
            Some(v) => {
                h = keep_state(tape, hn, h, &v[t], hd)?;
                c = keep_state(tape, cn, c, &v[t], hd)?;
            }
            None => {
                h = hn;
                c = cn;
            }
        }
        out[t] = Some(h);
    }
    Ok(out)
}

/// Bidirectional LSTM over `seq` (each `[B×D]`), zero initial states.
///
/// Returns one `[B×2H]` state per step: forward hidden state followed by the
/// backward hidden state computed on the reversed sequence. With `valid`
/// (indexed `[t][b]`), invalid steps leave both states untouched, so
/// trailing padding has no effect on the valid positions.
pub fn bilstm_forward(
    tape: &mut Tape,
    store: &ParamStore,
    seq: &[Var],
    fwd: &LstmCell,
    bwd: &LstmCell,
    valid: Option<&[Vec<bool>]>,
) -> Result<Vec<Var>> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    if fwd.hidden != bwd.hidden {
        return Err(config_err!("forward and backward cells differ in hidden size"));
    }
    if let Some(v) = valid {
        if v.len() != seq.len() {
            return Err(dim_err!("validity mask covers {} of {} steps", v.len(), seq.len()));
        }
    }
    let f = run_direction(tape, store, fwd, seq, valid, 0..seq.len())?;
    let b = run_direction(tape, store, bwd, seq, valid, (0..seq.len()).rev())?;
    f.into_iter()
        .zip(b)
        .map(|(hf, hb)| tape.concat_cols(&[hf.expect("visited"), hb.expect("visited")]))
        .collect()
}

/// Additive attention: `s_t = v · tanh(W_a x_t + b_a)`, `α = softmax(s)`,
/// `context = Σ α_t x_t`.
#[derive(Debug, Clone)]
pub struct AdditiveAttention {
    pub w: ParamId,
    pub b: ParamId,
    pub v: ParamId,
    pub input_dim: usize,
    pub attn_dim: usize,
}

impl AdditiveAttention {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, attn_dim: usize, rng: &mut CounterRng) -> Self {
        let w = store.add(
            format!("{name}.w"),
            uniform_tensor(&[input_dim, attn_dim], 1.0 / (input_dim as f64).sqrt(), rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[attn_dim]));
        let v = store.add(
            format!("{name}.v"),
            uniform_tensor(&[attn_dim, 1], 1.0 / (attn_dim as f64).sqrt(), rng),
        );
        Self {
            w,
            b,
            v,
            input_dim,
            attn_dim,
        }
    }

    /// Pools `states` (each `[B×D]`) into `[B×D]`. `mask` is row-major
    /// `[B×T]`; masked positions get zero weight, and a row with nothing
    /// unmasked falls back to uniform weights. Returns `(context, weights)`.
    pub fn pool(&self, tape: &mut Tape, store: &ParamStore, states: &[Var], mask: Option<&[bool]>) -> Result<(Var, Var)> {
        if states.is_empty() {
            return Err(Error::EmptySequence);
        }
        let (batch, d) = match tape.shape(states[0]) {
            [b, d] => (*b, *d),
            other => return Err(dim_err!("attention states must be 2-D, got {other:?}")),
        };
        if d != self.input_dim {
            return Err(dim_err!("attention expects width {}, got {d}", self.input_dim));
        }
        let t = states.len();
        let all = vec![true; batch * t];
        let mask = mask.unwrap_or(&all);
        let stacked = tape.stack_time(states)?;
        let flat = tape.reshape(stacked, &[batch * t, d])?;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let v = tape.param(store, self.v);
        let proj = tape.matmul(flat, w)?;
        let proj = tape.add_row_bias(proj, b)?;
        let act = tape.tanh(proj);
        let scores = tape.matmul(act, v)?;
        let scores = tape.reshape(scores, &[batch, t])?;
        let weights = tape.masked_softmax(scores, mask)?;
        let context = tape.weighted_sum(stacked, weights)?;
        Ok((context, weights))
    }
}

/// Per-channel batch normalization with running statistics kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::filled(&[channels], 1.0)),
            channels,
        }
    }

    /// `x: [N×C×...]`. Train mode normalizes by batch statistics and folds
    /// them into the running estimates (momentum 0.1, unbiased variance).
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let shape = tape.shape(x).to_vec();
                let count: usize = shape[0] * shape[2..].iter().product::<usize>();
                let (y, mean, var) = tape.batch_norm(x, g, b, None)?;
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                let rm = store.get_mut(self.running_mean).data_mut();
                rm.iter_mut()
                    .zip(&mean)
                    .for_each(|(r, m)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
                let rv = store.get_mut(self.running_var).data_mut();
                rv.iter_mut()
                    .zip(&var)
                    .for_each(|(r, v)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias);
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                Ok(tape.batch_norm(x, g, b, Some((&mean, &var)))?.0)
            }
        }
    }
}

/// conv 3×3 (stride 1, pad 1) → batch norm → ReLU → 2×2 max pool.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub bn: BatchNorm,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, rng: &mut CounterRng) -> Self {
        let fan_in = in_channels * 9;
        let kernel = store.add(
            format!("{name}.kernel"),
            uniform_tensor(&[out_channels, in_channels, 3, 3], 1.0 / (fan_in as f64).sqrt(), rng),
        );
        let bn = BatchNorm::new(store, &format!("{name}.bn"), out_channels);
        Self {
            kernel,
            bn,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(dim_err!("conv block expects [N×{}×H×W], got {shape:?}", self.in_channels));
        }
        if shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return Err(config_err!("conv block needs even spatial dims, got {}x{}", shape[2], shape[3]));
        }
        let k = tape.param(store, self.kernel);
        let y = tape.conv2d(x, k, 1, 1)?;
        let y = self.bn.forward(tape, store, y, mode)?;
        let y = tape.relu(y);
        tape.max_pool2(y)
    }
}

/// Inverted dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(config_err!("dropout rate must be in [0, 1), got {rate}"));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut CounterRng) -> Result<Var> {
        if mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - self.rate);
        let mask = (0..tape.value(x).numel())
            .map(|_| if rng.uniform() < self.rate { 0.0 } else { scale })
            .collect();
        tape.dropout_mask(x, mask)
    }
}

/// Token embedding table `[V×E]` whose pad row is pinned at zero.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
    pub pad_id: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, pad_id: usize, rng: &mut CounterRng) -> Self {
        let mut t = uniform_tensor(&[vocab, dim], 1.0 / (dim as f64).sqrt(), rng);
        t.data_mut()[pad_id * dim..(pad_id + 1) * dim]
            .iter_mut()
            .for_each(|v| *v = 0.0);
        Self {
            table: store.add(format!("{name}.table"), t),
            vocab,
            dim,
            pad_id,
        }
    }

    /// `ids` → `[len×E]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(contract_err!("token id {bad} >= vocabulary size {}", self.vocab));
        }
        let table = tape.param(store, self.table);
        tape.embedding(table, ids, Some(self.pad_id))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of `[B×C]` logits held in a flat slice.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        out.extend(row.iter().map(|x| (x - max).exp() / z));
    }
    out
}
