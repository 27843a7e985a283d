//! Two-stage training: pretrain both paths, freeze them, fit the fusion head.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, ParamStore, Tape, Tensor, Var};
use crate::datagen::Dataset;
use crate::error::{config_err, contract_err, Error, Result};
use crate::evalstat::{confusion_matrix, metric_report, MetricReport};
use crate::layers::{argmax, softmax_rows};
use crate::models::{FrameBatch, FusionInput, FusionNet, ModelBundle, ModelConfig, TextualNet, VisualNet, NUM_CLASSES};
use crate::optim::{adam_step, AdamConfig, AdamState, PlateauConfig, PlateauScheduler};
use crate::rng::{derive_seed, CounterRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_visual: usize,
    pub batch_textual: usize,
    pub batch_fusion: usize,
    pub dropout_visual: f64,
    pub dropout_textual: f64,
    pub wd_visual: f64,
    pub wd_textual: f64,
    pub wd_fusion: f64,
    pub clip_max_norm: f64,
    pub lr_init: f64,
    pub max_epochs: usize,
    pub fusion_max_epochs: usize,
    pub early_stop_patience: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub scheduler: PlateauConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_visual: 16,
            batch_textual: 32,
            batch_fusion: 32,
            dropout_visual: 0.3,
            dropout_textual: 0.5,
            wd_visual: 1e-3,
            wd_textual: 1e-2,
            wd_fusion: 0.0,
            clip_max_norm: 1.0,
            lr_init: 1e-3,
            max_epochs: 40,
            fusion_max_epochs: 40,
            early_stop_patience: 8,
            split: [0.70, 0.15, 0.15],
            scheduler: PlateauConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split.iter().any(|&f| !(f > 0.0 && f < 1.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err!(
                "train.split must hold three fractions in (0, 1) summing to 1, got {:?}",
                self.split
            ));
        }
        if self.batch_visual == 0 || self.batch_textual == 0 || self.batch_fusion == 0 {
            return Err(config_err!("train batch sizes must be positive"));
        }
        if self.batch_visual < 2 {
            return Err(config_err!("train.batch_visual must be >= 2 (batch normalization)"));
        }
        for (k, d) in [("train.dropout_visual", self.dropout_visual), ("train.dropout_textual", self.dropout_textual)] {
            if !(0.0..1.0).contains(&d) {
                return Err(config_err!("{k} must lie in [0, 1), got {d}"));
            }
        }
        for (k, w) in [
            ("train.wd_visual", self.wd_visual),
            ("train.wd_textual", self.wd_textual),
            ("train.wd_fusion", self.wd_fusion),
        ] {
            if !(w >= 0.0) {
                return Err(config_err!("{k} must be non-negative, got {w}"));
            }
        }
        if !(self.clip_max_norm > 0.0) {
            return Err(config_err!("train.clip_max_norm must be positive"));
        }
        if !(self.lr_init > 0.0) {
            return Err(config_err!("train.lr_init must be positive"));
        }
        if self.early_stop_patience == 0 {
            return Err(config_err!("train.early_stop_patience must be positive"));
        }
        self.scheduler.validate()
    }

    fn adam(&self, weight_decay: f64) -> AdamConfig {
        AdamConfig {
            lr: self.lr_init,
            weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Stratified train/validation/test index sets. Reads of the test indices
/// are counted so that training code can assert it never touched them.
#[derive(Debug)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    test: Vec<usize>,
    test_reads: AtomicUsize,
}

impl Split {
    pub fn test(&self) -> &[usize] {
        self.test_reads.fetch_add(1, Ordering::Relaxed);
        &self.test
    }

    pub fn test_reads(&self) -> usize {
        self.test_reads.load(Ordering::Relaxed)
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }
}

/// Per class: shuffle, take `floor(f_test·n)` for test and `floor(f_val·n)`
/// for validation, the rest for training. Each set is sorted.
pub fn split_dataset(labels: &[usize], fractions: [f64; 3], seed: u64) -> Result<Split> {
    let mut rng = CounterRng::new(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for class in 0..NUM_CLASSES {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let n = idx.len();
        if n < 10 {
            return Err(config_err!("class {class} has {n} samples; at least 10 are required"));
        }
        let n_val = (fractions[1] * n as f64).floor() as usize;
        let n_test = (fractions[2] * n as f64).floor() as usize;
        if n_val == 0 || n_test == 0 || n_val + n_test >= n {
            return Err(config_err!("train.split leaves an empty split for class {class}"));
        }
        rng.shuffle(&mut idx);
        test.extend_from_slice(&idx[..n_test]);
        val.extend_from_slice(&idx[n_test..n_test + n_val]);
        train.extend_from_slice(&idx[n_test + n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        train,
        val,
        test,
        test_reads: AtomicUsize::new(0),
    })
}

/// Dataset tensors in model precision, shared read-only across runs.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub frames: Vec<f64>,
    pub tokens: Vec<u32>,
    pub labels: Vec<usize>,
    pub t: usize,
    pub hw: usize,
    pub max_len: usize,
    pub vocab: usize,
}

impl PreparedData {
    pub fn new(ds: &Dataset) -> Self {
        let cfg = ds.config();
        Self {
            frames: ds.samples.iter().flat_map(|s| s.frames.iter().map(|&v| v as f64)).collect(),
            tokens: ds.samples.iter().flat_map(|s| s.tokens.iter().copied()).collect(),
            labels: ds.labels(),
            t: cfg.frames,
            hw: cfg.frame_hw,
            max_len: cfg.max_len,
            vocab: cfg.vocab(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn frame_len(&self) -> usize {
        self.t * self.hw * self.hw
    }

    pub fn frame_batch(&self, idx: &[usize]) -> FrameBatch {
        let fl = self.frame_len();
        let mut data = Vec::with_capacity(idx.len() * fl);
        for &i in idx {
            data.extend_from_slice(&self.frames[i * fl..(i + 1) * fl]);
        }
        FrameBatch::new(idx.len(), self.t, self.hw, self.hw, data).expect("sized")
    }

    pub fn token_rows(&self, idx: &[usize]) -> Vec<&[u32]> {
        idx.iter()
            .map(|&i| &self.tokens[i * self.max_len..(i + 1) * self.max_len])
            .collect()
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Checks that the model shapes fit this data.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        model.validate()?;
        if model.visual.frames != self.t || model.visual.frame_hw != self.hw {
            return Err(config_err!(
                "model.visual expects {} frames of {}², data has {} of {}²",
                model.visual.frames,
                model.visual.frame_hw,
                self.t,
                self.hw
            ));
        }
        if model.textual.vocab < self.vocab {
            return Err(config_err!(
                "model.textual.vocab {} is smaller than the data vocabulary {}",
                model.textual.vocab,
                self.vocab
            ));
        }
        if model.textual.max_len < self.max_len {
            return Err(config_err!(
                "model.textual.max_len {} is shorter than the data token length {}",
                model.textual.max_len,
                self.max_len
            ));
        }
        Ok(())
    }
}

/// A network trainable by [`fit`] on row indices of some input source.
trait Classifier<D: ?Sized> {
    fn store(&mut self) -> &mut ParamStore;
    fn logits(&mut self, tape: &mut Tape, data: &D, idx: &[usize], mode: Mode, rng: &mut CounterRng) -> Result<Var>;
}

impl Classifier<PreparedData> for VisualNet {
    fn store(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn logits(&mut self, tape: &mut Tape, data: &PreparedData, idx: &[usize], mode: Mode, rng: &mut CounterRng) -> Result<Var> {
        Ok(self.forward(tape, &data.frame_batch(idx), mode, rng)?.logits)
    }
}

impl Classifier<PreparedData> for TextualNet {
    fn store(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn logits(&mut self, tape: &mut Tape, data: &PreparedData, idx: &[usize], mode: Mode, rng: &mut CounterRng) -> Result<Var> {
        Ok(self.forward(tape, &data.token_rows(idx), mode, rng)?.logits)
    }
}

/// Fusion inputs: one row of path outputs per dataset sample.
struct FusionInputs {
    visual: Vec<f64>,
    textual: Vec<f64>,
    dv: usize,
    dt: usize,
}

impl FusionInputs {
    fn rows(src: &[f64], d: usize, idx: &[usize]) -> Tensor {
        let data = idx.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect();
        Tensor::new(&[idx.len(), d], data).expect("sized")
    }
}

impl Classifier<FusionInputs> for FusionNet {
    fn store(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn logits(&mut self, tape: &mut Tape, data: &FusionInputs, idx: &[usize], _: Mode, _: &mut CounterRng) -> Result<Var> {
        let v = tape.leaf(FusionInputs::rows(&data.visual, data.dv, idx));
        let t = tape.leaf(FusionInputs::rows(&data.textual, data.dt, idx));
        self.forward(tape, v, t)
    }
}

/// Per-epoch record of one training stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub lr: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub epochs: usize,
}

struct FitSettings {
    batch: usize,
    adam: AdamConfig,
    clip: f64,
    scheduler: PlateauConfig,
    max_epochs: usize,
    patience: usize,
    seed: u64,
}

const EVAL_BATCH: usize = 64;

/// Mean cross-entropy and accuracy in eval mode.
fn evaluate<D: ?Sized, M: Classifier<D>>(model: &mut M, data: &D, idx: &[usize], labels: &[usize]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    let mut rng = CounterRng::new(0);
    for (chunk, lab) in idx.chunks(EVAL_BATCH).zip(labels.chunks(EVAL_BATCH)) {
        let mut tape = Tape::new();
        let z = model.logits(&mut tape, data, chunk, Mode::Eval, &mut rng)?;
        let l = tape.cross_entropy(z, lab)?;
        loss += tape.value(l).data()[0] * chunk.len() as f64;
        let zs = tape.value(z).data();
        correct += lab
            .iter()
            .enumerate()
            .filter(|&(r, &y)| argmax(&zs[r * NUM_CLASSES..(r + 1) * NUM_CLASSES]) == y)
            .count();
    }
    Ok((loss / idx.len() as f64, correct as f64 / idx.len() as f64))
}

/// Eval-mode logits (or features) for the given rows.
fn collect_rows<F>(idx: &[usize], width: usize, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut out = Vec::with_capacity(idx.len() * width);
    for chunk in idx.chunks(EVAL_BATCH) {
        out.extend(f(chunk)?);
    }
    Ok(out)
}

/// Minibatch Adam with clipping, plateau schedule and early stopping on
/// validation loss. The best-validation parameters are restored at the end.
fn fit<D: ?Sized, M: Classifier<D>>(model: &mut M, data: &D, labels: &[usize], train: &[usize], val: &[usize], s: &FitSettings) -> Result<Curve> {
    let mut state = AdamState::new(model.store(), s.adam.clone())?;
    let mut sched = PlateauScheduler::new(s.scheduler.clone(), s.adam.lr)?;
    let val_labels: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    let mut curve = Curve::default();
    let mut best = f64::INFINITY;
    let mut best_params: Option<ParamStore> = None;
    let mut since_best = 0;
    let mut order = train.to_vec();

    for epoch in 0..s.max_epochs {
        let mut rng = CounterRng::new(derive_seed(s.seed, epoch as u64));
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(s.batch) {
            // a singleton tail batch cannot be batch-normalized; skip it
            if batch.len() < 2 && order.len() >= 2 {
                continue;
            }
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let z = model.logits(&mut tape, data, batch, Mode::Train, &mut rng)?;
            let loss = tape.cross_entropy(z, &y)?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("training loss {lv} at epoch {}", epoch + 1)));
            }
            tape.backward(loss)?;
            let store = model.store();
            store.zero_grad();
            store.accumulate(&tape);
            adam_step(store, &mut state, Some(s.clip))?;
            epoch_loss += lv * batch.len() as f64;
        }
        let (vl, va) = evaluate(model, data, val, &val_labels)?;
        if vl.is_nan() {
            return Err(Error::Divergence(format!("validation loss is NaN at epoch {}", epoch + 1)));
        }
        curve.train_loss.push(epoch_loss / order.len() as f64);
        curve.val_loss.push(vl);
        curve.val_accuracy.push(va);
        curve.lr.push(state.lr());
        curve.epochs = epoch + 1;
        log::debug!("epoch {} train {:.4} val {:.4} acc {:.3}", epoch + 1, epoch_loss / order.len() as f64, vl, va);

        if vl < best {
            best = vl;
            best_params = Some(model.store().clone());
            curve.best_epoch = Some(epoch + 1);
            since_best = 0;
        } else {
            since_best += 1;
        }
        let lr = sched.step(vl)?;
        state.set_lr(lr);
        if since_best >= s.patience {
            break;
        }
    }
    if let Some(p) = best_params {
        *model.store() = p;
    }
    Ok(curve)
}

fn argmax_rows(logits: &[f64]) -> Vec<usize> {
    logits.chunks_exact(NUM_CLASSES).map(argmax).collect()
}

pub fn train_visual(data: &PreparedData, model: &ModelConfig, cfg: &TrainConfig, split: &Split, seed: u64) -> Result<(VisualNet, Curve)> {
    let mut net = VisualNet::new(model.visual.clone(), cfg.dropout_visual, derive_seed(seed, 0))?;
    let settings = FitSettings {
        batch: cfg.batch_visual,
        adam: cfg.adam(cfg.wd_visual),
        clip: cfg.clip_max_norm,
        scheduler: cfg.scheduler.clone(),
        max_epochs: cfg.max_epochs,
        patience: cfg.early_stop_patience,
        seed: derive_seed(seed, 1),
    };
    let curve = fit(&mut net, data, &data.labels, &split.train, &split.val, &settings)?;
    Ok((net, curve))
}

pub fn train_textual(data: &PreparedData, model: &ModelConfig, cfg: &TrainConfig, split: &Split, seed: u64) -> Result<(TextualNet, Curve)> {
    let mut net = TextualNet::new(model.textual.clone(), cfg.dropout_textual, derive_seed(seed, 0))?;
    let settings = FitSettings {
        batch: cfg.batch_textual,
        adam: cfg.adam(cfg.wd_textual),
        clip: cfg.clip_max_norm,
        scheduler: cfg.scheduler.clone(),
        max_epochs: cfg.max_epochs,
        patience: cfg.early_stop_patience,
        seed: derive_seed(seed, 1),
    };
    let curve = fit(&mut net, data, &data.labels, &split.train, &split.val, &settings)?;
    Ok((net, curve))
}

/// Eval-mode path outputs for `idx`: `(visual, textual)` rows as consumed
/// by the fusion head.
fn path_outputs(visual: &mut VisualNet, textual: &mut TextualNet, input: FusionInput, data: &PreparedData, idx: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let pick = |o: crate::models::PathOutput| match input {
        FusionInput::Logits => o.logits,
        FusionInput::Features => o.features,
    };
    let mut rng = CounterRng::new(0);
    let dv = match input {
        FusionInput::Logits => NUM_CLASSES,
        FusionInput::Features => 2 * visual.config.lstm_hidden,
    };
    let dt = match input {
        FusionInput::Logits => NUM_CLASSES,
        FusionInput::Features => textual.config.fc_dims[0],
    };
    let v = collect_rows(idx, dv, |chunk| {
        let mut tape = Tape::new();
        let o = visual.forward(&mut tape, &data.frame_batch(chunk), Mode::Eval, &mut rng)?;
        Ok(tape.value(pick(o)).data().to_vec())
    })?;
    let t = collect_rows(idx, dt, |chunk| {
        let mut tape = Tape::new();
        let o = textual.forward(&mut tape, &data.token_rows(chunk), Mode::Eval, &mut rng)?;
        Ok(tape.value(pick(o)).data().to_vec())
    })?;
    Ok((v, t))
}

/// Scatters per-row outputs for `idx` into a table indexed by sample id.
fn scatter(rows: &[f64], idx: &[usize], d: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for (r, &i) in idx.iter().enumerate() {
        out[i * d..(i + 1) * d].copy_from_slice(&rows[r * d..(r + 1) * d]);
    }
    out
}

/// SHA-256 parameter checksums of the frozen paths before and after stage 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeCheck {
    pub visual_before: String,
    pub visual_after: String,
    pub textual_before: String,
    pub textual_after: String,
    pub intact: bool,
}

/// Trains the fusion head on eval-mode outputs of the frozen paths. The
/// paths are only read; their checksums are compared before and after.
pub fn train_fusion(
    visual: &mut VisualNet,
    textual: &mut TextualNet,
    data: &PreparedData,
    model: &ModelConfig,
    cfg: &TrainConfig,
    split: &Split,
    seed: u64,
) -> Result<(FusionNet, Curve, FreezeCheck)> {
    let visual_before = visual.params.checksum();
    let textual_before = textual.params.checksum();

    let input = model.fusion.input;
    let seen: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
    let (v, t) = path_outputs(visual, textual, input, data, &seen)?;
    let dv = v.len() / seen.len();
    let dt = t.len() / seen.len();
    let inputs = FusionInputs {
        visual: scatter(&v, &seen, dv, data.len()),
        textual: scatter(&t, &seen, dt, data.len()),
        dv,
        dt,
    };
    let mut net = FusionNet::new(model.fusion.clone(), dv + dt, derive_seed(seed, 0))?;
    let settings = FitSettings {
        batch: cfg.batch_fusion,
        adam: cfg.adam(cfg.wd_fusion),
        clip: cfg.clip_max_norm,
        scheduler: cfg.scheduler.clone(),
        max_epochs: cfg.fusion_max_epochs,
        patience: cfg.early_stop_patience,
        seed: derive_seed(seed, 1),
    };
    let curve = fit(&mut net, &inputs, &data.labels, &split.train, &split.val, &settings)?;

    let visual_after = visual.params.checksum();
    let textual_after = textual.params.checksum();
    let intact = visual_before == visual_after && textual_before == textual_after;
    if !intact {
        return Err(contract_err!("stage-2 training modified a frozen submodel"));
    }
    Ok((
        net,
        curve,
        FreezeCheck {
            visual_before,
            visual_after,
            textual_before,
            textual_after,
            intact,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEpochs {
    pub visual: usize,
    pub textual: usize,
    pub fusion: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCurves {
    pub visual: Curve,
    pub textual: Curve,
    pub fusion: Curve,
}

/// Outcome of one seeded replication, evaluated on the held-out test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    /// Fusion test accuracy.
    pub accuracy: f64,
    pub fusion: MetricReport,
    pub visual: MetricReport,
    pub textual: MetricReport,
    pub epochs: StageEpochs,
    pub split_sizes: [usize; 3],
    pub freeze: FreezeCheck,
    pub curves: RunCurves,
}

pub struct RunOutput {
    pub result: RunResult,
    pub bundle: ModelBundle,
}

/// Split, pretrain both paths, fit the fusion head and evaluate all three
/// models on the test split.
pub fn run_once(data: &PreparedData, model: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    data.check_model(model)?;
    let split = split_dataset(&data.labels, cfg.split, derive_seed(seed, 0))?;

    let (mut visual, vcurve) = train_visual(data, model, cfg, &split, derive_seed(seed, 1))?;
    let (mut textual, tcurve) = train_textual(data, model, cfg, &split, derive_seed(seed, 2))?;
    let (mut fusion, fcurve, freeze) = train_fusion(&mut visual, &mut textual, data, model, cfg, &split, derive_seed(seed, 3))?;
    debug_assert_eq!(split.test_reads(), 0, "test split read before final evaluation");

    let test = split.test().to_vec();
    let labels = data.labels_of(&test);
    let (vl, tl) = path_outputs(&mut visual, &mut textual, FusionInput::Logits, data, &test)?;
    let fused = match model.fusion.input {
        FusionInput::Logits => fusion_logits(&fusion, &vl, &tl, NUM_CLASSES, NUM_CLASSES)?,
        FusionInput::Features => {
            let (vf, tf) = path_outputs(&mut visual, &mut textual, FusionInput::Features, data, &test)?;
            let (dv, dt) = (vf.len() / test.len(), tf.len() / test.len());
            fusion_logits(&fusion, &vf, &tf, dv, dt)?
        }
    };
    let report = |logits: &[f64]| -> Result<MetricReport> { metric_report(&confusion_matrix(&labels, &argmax_rows(logits))?) };
    let fusion_report = report(&fused)?;
    let result = RunResult {
        seed,
        accuracy: fusion_report.accuracy,
        fusion: fusion_report,
        visual: report(&vl)?,
        textual: report(&tl)?,
        epochs: StageEpochs {
            visual: vcurve.epochs,
            textual: tcurve.epochs,
            fusion: fcurve.epochs,
        },
        split_sizes: split.sizes(),
        freeze,
        curves: RunCurves {
            visual: vcurve,
            textual: tcurve,
            fusion: fcurve,
        },
    };
    // keep a consistent head even if nothing else touched it
    fusion.params.zero_grad();
    Ok(RunOutput {
        result,
        bundle: ModelBundle { visual, textual, fusion },
    })
}

fn fusion_logits(fusion: &FusionNet, v: &[f64], t: &[f64], dv: usize, dt: usize) -> Result<Vec<f64>> {
    let n = v.len() / dv;
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(&[n, dv], v.to_vec())?);
    let b = tape.leaf(Tensor::new(&[n, dt], t.to_vec())?);
    let z = fusion.forward(&mut tape, a, b)?;
    Ok(tape.value(z).data().to_vec())
}

/// Class probabilities for logits rows, for reporting.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    softmax_rows(logits, NUM_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::GenConfig;

    #[test]
    fn split_example_and_contracts() {
        let labels: Vec<usize> = (0..360).map(|i| i % 3).collect();
        let s = split_dataset(&labels, [0.7, 0.15, 0.15], 3).unwrap();
        for class in 0..3 {
            let count = |v: &[usize]| v.iter().filter(|&&i| labels[i] == class).count();
            assert_eq!((count(&s.train), count(&s.val), count(&s.test)), (84, 18, 18));
        }
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(s.test()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..360).collect::<Vec<_>>());
        assert_eq!(s.test_reads(), 1);

        let t = split_dataset(&labels, [0.7, 0.15, 0.15], 3).unwrap();
        assert_eq!((&s.train, &s.val), (&t.train, &t.val));
        assert!(matches!(split_dataset(&labels[..27], [0.7, 0.15, 0.15], 1), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation_names_the_key() {
        let c = TrainConfig {
            split: [0.8, 0.15, 0.15],
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("train.split")));
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn tiny_setup() -> (PreparedData, ModelConfig) {
        let gen = GenConfig {
            per_class: 10,
            frames: 3,
            frame_hw: 16,
            max_len: 12,
            ..GenConfig::default()
        };
        let data = PreparedData::new(&Dataset::generate(&gen, 11).unwrap());
        let mut model = ModelConfig::default();
        model.visual.frames = 3;
        model.visual.frame_hw = 16;
        model.visual.conv_channels = [2, 4, 4, 4];
        model.visual.lstm_hidden = 4;
        model.textual.embed_dim = 4;
        model.textual.lstm_hidden = 4;
        model.textual.fc_dims = [8, 3];
        (data, model)
    }

    #[test]
    fn textual_path_overfits_eight_samples() {
        let (data, model) = tiny_setup();
        let cfg = TrainConfig {
            max_epochs: 400,
            early_stop_patience: 10_000,
            batch_textual: 8,
            lr_init: 1e-2,
            scheduler: PlateauConfig {
                patience: 10_000,
                ..PlateauConfig::default()
            },
            ..TrainConfig::default()
        };
        let split = split_dataset(&data.labels, cfg.split, 1).unwrap();
        let subset = Split {
            train: split.train[..8].to_vec(),
            val: split.train[..8].to_vec(),
            test: vec![],
            test_reads: AtomicUsize::new(0),
        };
        let (mut net, _) = train_textual(&data, &model, &cfg, &subset, 5).unwrap();
        let labels = data.labels_of(&subset.train);
        let (_, acc) = evaluate(&mut net, &data, &subset.train, &labels).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn run_is_deterministic_and_respects_contracts() {
        let (data, model) = tiny_setup();
        let cfg = TrainConfig {
            max_epochs: 2,
            fusion_max_epochs: 2,
            ..TrainConfig::default()
        };
        let a = run_once(&data, &model, &cfg, 21).unwrap();
        let b = run_once(&data, &model, &cfg, 21).unwrap();
        assert_eq!(a.result, b.result);
        assert_eq!(a.bundle.visual.params.checksum(), b.bundle.visual.params.checksum());
        let r = &a.result;
        assert!(r.freeze.intact);
        for m in [&r.fusion, &r.visual, &r.textual] {
            let rows: Vec<u64> = m.confusion.iter().map(|row| row.iter().sum()).collect();
            assert_eq!(rows, vec![1, 1, 1]);
        }
        assert_eq!(r.split_sizes, [24, 3, 3]);
    }

    #[test]
    fn zero_fusion_epochs_leave_the_head_at_init() {
        let (data, model) = tiny_setup();
        let cfg = TrainConfig {
            max_epochs: 1,
            fusion_max_epochs: 0,
            ..TrainConfig::default()
        };
        let out = run_once(&data, &model, &cfg, 4).unwrap();
        let init = FusionNet::new(model.fusion.clone(), 6, derive_seed(derive_seed(4, 3), 0)).unwrap();
        assert_eq!(out.bundle.fusion.params.checksum(), init.params.checksum());
        assert_eq!(out.result.epochs.fusion, 0);
    }
}
