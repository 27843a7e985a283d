//! Finite-difference checks over every layer type and the full models at
//! tiny shapes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckReport, Mode, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::layers::{bilstm_forward, AdditiveAttention, BatchNorm, ConvBlock, Dropout, Embedding, Linear, LstmCell};
use crate::models::{FrameBatch, FusionConfig, FusionNet, TextualConfig, TextualNet, VisualConfig, VisualNet};
use crate::rng::CounterRng;

pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub layer: String,
    pub params: usize,
    pub max_rel_err: f64,
    /// Parameter block with the largest error.
    pub worst_block: Option<String>,
    pub pass: bool,
}

fn random(shape: &[usize], rng: &mut CounterRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).expect("sized")
}

/// Weighted sum with fixed random weights, so every output element matters.
fn project(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let p = tape.leaf(Tensor::new(tape.shape(y), weights.data()[..tape.value(y).numel()].to_vec())?);
    let z = tape.mul(y, p)?;
    Ok(tape.sum(z))
}

fn check<F>(layer: &str, store: &mut ParamStore, eps: f64, fault: bool, mut f: F) -> Result<SuiteRow>
where
    F: FnMut(&mut Tape, &mut ParamStore) -> Result<Var>,
{
    let report: GradCheckReport = grad_check(store, eps, |tape, ps| {
        if fault {
            tape.inject_matmul_fault(2.0);
        }
        f(tape, ps)
    })?;
    let max = report.max_rel_err();
    Ok(SuiteRow {
        layer: layer.to_string(),
        params: report.entries.iter().map(|e| e.numel).sum(),
        max_rel_err: max,
        worst_block: report.worst().map(|e| e.name.clone()),
        pass: max < GRAD_TOL,
    })
}

/// Runs the suite. With `fault`, matmul backward is deliberately scaled so
/// that rows depending on it must fail.
pub fn gradient_suite(fault: bool) -> Result<Vec<SuiteRow>> {
    let mut rng = CounterRng::new(2024);
    let weights = random(&[4096], &mut rng);
    let mut rows = Vec::new();

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "dense", 4, 3, &mut rng);
    let x = random(&[5, 4], &mut rng);
    rows.push(check("dense", &mut store, 1e-5, fault, |tape, ps| {
        let vx = tape.leaf(x.clone());
        let y = lin.forward(tape, ps, vx)?;
        project(tape, y, &weights)
    })?);

    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "embedding", 7, 3, 0, &mut rng);
    let proj = Linear::new(&mut store, "proj", 3, 2, &mut rng);
    rows.push(check("embedding", &mut store, 1e-5, fault, |tape, ps| {
        let e = emb.forward(tape, ps, &[1, 4, 6, 2, 4])?;
        let y = proj.forward(tape, ps, e)?;
        let y = tape.tanh(y);
        project(tape, y, &weights)
    })?);

    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng);
    let (x, h, c) = (random(&[2, 3], &mut rng), random(&[2, 4], &mut rng), random(&[2, 4], &mut rng));
    rows.push(check("lstm_cell", &mut store, 1e-5, fault, |tape, ps| {
        let (vx, vh, vc) = (tape.leaf(x.clone()), tape.leaf(h.clone()), tape.leaf(c.clone()));
        let (hn, cn) = cell.step(tape, ps, vx, vh, vc)?;
        let both = tape.concat_cols(&[hn, cn])?;
        project(tape, both, &weights)
    })?);

    let mut store = ParamStore::new();
    let fwd = LstmCell::new(&mut store, "fwd", 3, 2, &mut rng);
    let bwd = LstmCell::new(&mut store, "bwd", 3, 2, &mut rng);
    let xs: Vec<Tensor> = (0..4).map(|_| random(&[2, 3], &mut rng)).collect();
    let valid: Vec<Vec<bool>> = (0..4).map(|t| vec![true, t < 3]).collect();
    rows.push(check("bilstm", &mut store, 1e-5, fault, |tape, ps| {
        let seq: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let states = bilstm_forward(tape, ps, &seq, &fwd, &bwd, Some(&valid))?;
        let all = tape.concat_cols(&states)?;
        project(tape, all, &weights)
    })?);

    let mut store = ParamStore::new();
    let att = AdditiveAttention::new(&mut store, "attention", 4, 3, &mut rng);
    let states: Vec<Tensor> = (0..5).map(|_| random(&[2, 4], &mut rng)).collect();
    let mask: Vec<bool> = (0..2).flat_map(|b| (0..5).map(move |t| b == 0 || t < 3)).collect();
    rows.push(check("attention", &mut store, 1e-5, fault, |tape, ps| {
        let s: Vec<Var> = states.iter().map(|x| tape.leaf(x.clone())).collect();
        let (ctx, _) = att.pool(tape, ps, &s, Some(&mask))?;
        project(tape, ctx, &weights)
    })?);

    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "batch_norm", 3);
    let x = random(&[4, 3, 2, 2], &mut rng);
    rows.push(check("batch_norm", &mut store, 1e-6, fault, |tape, ps| {
        let vx = tape.leaf(x.clone());
        let y = bn.forward(tape, ps, vx, Mode::Train)?;
        project(tape, y, &weights)
    })?);

    let mut store = ParamStore::new();
    let block = ConvBlock::new(&mut store, "conv_block", 2, 3, &mut rng);
    let x = random(&[2, 2, 6, 4], &mut rng);
    let mut worst: Option<SuiteRow> = None;
    for mode in [Mode::Train, Mode::Eval] {
        let row = check("conv_block", &mut store, 1e-6, fault, |tape, ps| {
            let vx = tape.leaf(x.clone());
            let y = block.forward(tape, ps, vx, mode)?;
            project(tape, y, &weights)
        })?;
        if worst.as_ref().is_none_or(|w| row.max_rel_err > w.max_rel_err) {
            worst = Some(row);
        }
    }
    rows.extend(worst);

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "pre_dropout", 4, 6, &mut rng);
    let drop = Dropout::new(0.5)?;
    let x = random(&[3, 4], &mut rng);
    rows.push(check("dropout", &mut store, 1e-5, fault, |tape, ps| {
        let vx = tape.leaf(x.clone());
        let y = lin.forward(tape, ps, vx)?;
        let y = drop.forward(tape, y, Mode::Train, &mut CounterRng::new(3))?;
        project(tape, y, &weights)
    })?);

    let mut store = ParamStore::new();
    let id = store.add("logits", random(&[5, 3], &mut rng));
    rows.push(check("cross_entropy", &mut store, 1e-5, fault, |tape, ps| {
        let z = tape.param(ps, id);
        tape.cross_entropy(z, &[2, 0, 1, 1, 0])
    })?);

    let vcfg = VisualConfig {
        frames: 2,
        frame_hw: 16,
        conv_channels: [2, 3, 3, 4],
        lstm_hidden: 3,
        num_classes: 3,
    };
    let mut net = VisualNet::new(vcfg.clone(), 0.0, 5)?;
    let n = 2 * vcfg.frames * 16 * 16;
    let frames = FrameBatch::new(2, vcfg.frames, 16, 16, (0..n).map(|_| rng.uniform()).collect())?;
    let arch = net.arch.clone();
    rows.push(check("visual_model", &mut net.params, 1e-6, fault, |tape, ps| {
        let out = arch.forward(&vcfg, tape, ps, &frames, Mode::Train, &mut CounterRng::new(0))?;
        tape.cross_entropy(out.logits, &[0, 2])
    })?);

    let tcfg = TextualConfig {
        vocab: 7,
        embed_dim: 3,
        lstm_hidden: 3,
        fc_dims: [4, 3],
        pad_id: 0,
        max_len: 6,
    };
    let mut net = TextualNet::new(tcfg.clone(), 0.0, 6)?;
    let arch = net.arch.clone();
    let toks: [&[u32]; 2] = [&[3, 5, 1, 2, 6, 0], &[4, 4, 2, 0, 0, 0]];
    // attention-bias gradients are ~1e-8 here, so use the widest allowed step
    rows.push(check("textual_model", &mut net.params, 1e-4, fault, |tape, ps| {
        let out = arch.forward(&tcfg, tape, ps, &toks, Mode::Train, &mut CounterRng::new(0))?;
        tape.cross_entropy(out.logits, &[1, 2])
    })?);

    let mut net = FusionNet::new(FusionConfig::default(), 6, 7)?;
    let arch = net.arch.clone();
    let (v, t) = (random(&[4, 3], &mut rng), random(&[4, 3], &mut rng));
    rows.push(check("fusion_head", &mut net.params, 1e-5, fault, |tape, ps| {
        let (a, b) = (tape.leaf(v.clone()), tape.leaf(t.clone()));
        let z = arch.forward(tape, ps, a, b)?;
        tape.cross_entropy(z, &[0, 1, 2, 1])
    })?);

    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes_and_fault_is_caught() {
        let rows = gradient_suite(false).unwrap();
        assert_eq!(rows.len(), 12);
        for r in &rows {
            assert!(r.pass, "{r:?}");
        }
        let faulty = gradient_suite(true).unwrap();
        let failed: Vec<&str> = faulty.iter().filter(|r| !r.pass).map(|r| r.layer.as_str()).collect();
        for layer in ["visual_model", "textual_model", "fusion_head"] {
            assert!(failed.contains(&layer), "{failed:?}");
        }
        assert!(faulty.iter().any(|r| r.layer == "cross_entropy" && r.pass));
    }
}
