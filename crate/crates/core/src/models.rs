//! The visual path, the textual path and the late-fusion head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, ParamStore, Tape, Tensor, Var};
use crate::error::{config_err, contract_err, dim_err, Result};
use crate::layers::{
    argmax, bilstm_forward, AdditiveAttention, ConvBlock, Dropout, Embedding, Linear, LstmCell,
};
use crate::rng::CounterRng;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualConfig {
    pub frames: usize,
    pub frame_hw: usize,
    pub conv_channels: [usize; 4],
    pub lstm_hidden: usize,
    pub num_classes: usize,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            frames: 12,
            frame_hw: 32,
            conv_channels: [8, 16, 32, 64],
            lstm_hidden: 64,
            num_classes: NUM_CLASSES,
        }
    }
}

impl VisualConfig {
    /// Full-size input: 60 frames at 128×128.
    pub fn full_size() -> Self {
        Self {
            frames: 60,
            frame_hw: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_hw == 0 || self.frame_hw % 16 != 0 {
            return Err(config_err!(
                "model.visual.frame_hw must be a positive multiple of 16 (four pooling stages), got {}",
                self.frame_hw
            ));
        }
        if self.frames < 2 {
            return Err(config_err!("model.visual.frames must be >= 2, got {}", self.frames));
        }
        if self.conv_channels.contains(&0) || self.lstm_hidden == 0 {
            return Err(config_err!("model.visual layer widths must be positive"));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(config_err!("model.visual.num_classes must be {NUM_CLASSES}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextualConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub fc_dims: [usize; 2],
    pub pad_id: usize,
    pub max_len: usize,
}

impl Default for TextualConfig {
    fn default() -> Self {
        Self {
            vocab: 24,
            embed_dim: 32,
            lstm_hidden: 64,
            fc_dims: [64, NUM_CLASSES],
            pad_id: 0,
            max_len: 40,
        }
    }
}

impl TextualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(config_err!("model.textual.vocab must be >= 4, got {}", self.vocab));
        }
        if self.fc_dims[1] != NUM_CLASSES {
            return Err(config_err!("model.textual.fc_dims must end in {NUM_CLASSES}"));
        }
        if self.pad_id != 0 {
            return Err(config_err!("model.textual.pad_id must be 0"));
        }
        if self.embed_dim == 0 || self.lstm_hidden == 0 || self.fc_dims[0] == 0 || self.max_len == 0 {
            return Err(config_err!("model.textual sizes must be positive"));
        }
        Ok(())
    }
}

/// What the fusion head consumes from each path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionInput {
    /// Class logits (3 + 3).
    Logits,
    /// Penultimate representations (BiLSTM summary, textual hidden layer).
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub input: FusionInput,
    pub hidden: usize,
    pub out: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            input: FusionInput::Logits,
            hidden: 16,
            out: NUM_CLASSES,
        }
    }
}

impl FusionConfig {
    pub fn in_dim(&self, visual: &VisualConfig, textual: &TextualConfig) -> usize {
        match self.input {
            FusionInput::Logits => 2 * NUM_CLASSES,
            FusionInput::Features => 2 * visual.lstm_hidden + textual.fc_dims[0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out != NUM_CLASSES {
            return Err(config_err!("model.fusion.out must be {NUM_CLASSES}"));
        }
        if self.hidden == 0 {
            return Err(config_err!("model.fusion.hidden must be positive"));
        }
        Ok(())
    }
}

/// Architecture of all three networks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub visual: VisualConfig,
    pub textual: TextualConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.textual.validate()?;
        self.fusion.validate()
    }
}

/// Logits plus the representation feeding the final layer.
#[derive(Debug, Clone, Copy)]
pub struct PathOutput {
    pub logits: Var,
    pub features: Var,
}

/// A batch of frame sequences, `[B×T×1×H×W]`, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub batch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FrameBatch {
    pub fn new(batch: usize, frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * frames * height * width || batch == 0 {
            return Err(dim_err!(
                "frame batch {batch}x{frames}x1x{height}x{width} with {} values",
                data.len()
            ));
        }
        Ok(Self {
            batch,
            frames,
            height,
            width,
            data,
        })
    }

    /// Stacks per-sample `[T×H×W]` sequences.
    pub fn stack(samples: &[&[f64]], frames: usize, height: usize, width: usize) -> Result<Self> {
        let data = samples.concat();
        Self::new(samples.len(), frames, height, width, data)
    }

    /// Time-major `[T·B×1×H×W]` layout used by the per-frame CNN.
    fn time_major(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len());
        for t in 0..self.frames {
            for b in 0..self.batch {
                let off = (b * self.frames + t) * plane;
                out.extend_from_slice(&self.data[off..off + plane]);
            }
        }
        Tensor::new(&[self.frames * self.batch, 1, self.height, self.width], out).expect("sized")
    }
}

#[derive(Debug, Clone)]
pub struct VisualArch {
    pub convs: Vec<ConvBlock>,
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub dropout: Dropout,
    pub head: Linear,
}

/// Per-frame CNN, BiLSTM over time, dense projection to class logits.
#[derive(Debug, Clone)]
pub struct VisualNet {
    pub config: VisualConfig,
    pub arch: VisualArch,
    pub params: ParamStore,
}

impl VisualNet {
    pub fn new(config: VisualConfig, dropout: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = CounterRng::new(seed);
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &cout) in config.conv_channels.iter().enumerate() {
            convs.push(ConvBlock::new(&mut params, &format!("visual.conv{i}"), cin, cout, &mut rng));
            cin = cout;
        }
        let h = config.lstm_hidden;
        let fwd = LstmCell::new(&mut params, "visual.lstm_fwd", cin, h, &mut rng);
        let bwd = LstmCell::new(&mut params, "visual.lstm_bwd", cin, h, &mut rng);
        let head = Linear::new(&mut params, "visual.head", 2 * h, config.num_classes, &mut rng);
        Ok(Self {
            arch: VisualArch {
                convs,
                fwd,
                bwd,
                dropout: Dropout::new(dropout)?,
                head,
            },
            config,
            params,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, frames: &FrameBatch, mode: Mode, rng: &mut CounterRng) -> Result<PathOutput> {
        self.arch.forward(&self.config, tape, &mut self.params, frames, mode, rng)
    }
}

impl VisualArch {
    pub fn forward(
        &self,
        cfg: &VisualConfig,
        tape: &mut Tape,
        store: &mut ParamStore,
        frames: &FrameBatch,
        mode: Mode,
        rng: &mut CounterRng,
    ) -> Result<PathOutput> {
        if frames.frames != cfg.frames || frames.height != cfg.frame_hw || frames.width != cfg.frame_hw {
            return Err(config_err!(
                "visual input {}x{}x{} does not match config {}x{}x{}",
                frames.frames,
                frames.height,
                frames.width,
                cfg.frames,
                cfg.frame_hw,
                cfg.frame_hw
            ));
        }
        let b = frames.batch;
        let mut x = tape.leaf(frames.time_major());
        for block in &self.convs {
            x = block.forward(tape, store, x, mode)?;
        }
        let feats = tape.global_avg_pool(x)?;
        let seq = (0..cfg.frames)
            .map(|t| tape.slice_rows(feats, t * b, b))
            .collect::<Result<Vec<_>>>()?;
        let states = bilstm_forward(tape, store, &seq, &self.fwd, &self.bwd, None)?;
        let h = cfg.lstm_hidden;
        let last_fwd = tape.slice_cols(states[cfg.frames - 1], 0, h)?;
        let first_bwd = tape.slice_cols(states[0], h, h)?;
        let summary = tape.concat_cols(&[last_fwd, first_bwd])?;
        let dropped = self.dropout.forward(tape, summary, mode, rng)?;
        let logits = self.head.forward(tape, store, dropped)?;
        Ok(PathOutput {
            logits,
            features: summary,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TextualArch {
    pub embedding: Embedding,
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub attention: AdditiveAttention,
    pub dropout: Dropout,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Token embedding, masked BiLSTM, additive attention, two dense layers.
#[derive(Debug, Clone)]
pub struct TextualNet {
    pub config: TextualConfig,
    pub arch: TextualArch,
    pub params: ParamStore,
}

impl TextualNet {
    pub fn new(config: TextualConfig, dropout: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = CounterRng::new(seed);
        let mut params = ParamStore::new();
        let h = config.lstm_hidden;
        let embedding = Embedding::new(
            &mut params,
            "textual.embedding",
            config.vocab,
            config.embed_dim,
            config.pad_id,
            &mut rng,
        );
        let fwd = LstmCell::new(&mut params, "textual.lstm_fwd", config.embed_dim, h, &mut rng);
        let bwd = LstmCell::new(&mut params, "textual.lstm_bwd", config.embed_dim, h, &mut rng);
        let attention = AdditiveAttention::new(&mut params, "textual.attention", 2 * h, 2 * h, &mut rng);
        let fc1 = Linear::new(&mut params, "textual.fc1", 2 * h, config.fc_dims[0], &mut rng);
        let fc2 = Linear::new(&mut params, "textual.fc2", config.fc_dims[0], config.fc_dims[1], &mut rng);
        Ok(Self {
            arch: TextualArch {
                embedding,
                fwd,
                bwd,
                attention,
                dropout: Dropout::new(dropout)?,
                fc1,
                fc2,
            },
            config,
            params,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, tokens: &[&[u32]], mode: Mode, rng: &mut CounterRng) -> Result<PathOutput> {
        self.arch.forward(&self.config, tape, &self.params, tokens, mode, rng)
    }
}

impl TextualArch {
    pub fn forward(
        &self,
        cfg: &TextualConfig,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[&[u32]],
        mode: Mode,
        rng: &mut CounterRng,
    ) -> Result<PathOutput> {
        let b = tokens.len();
        let len = tokens.first().map_or(0, |t| t.len());
        if b == 0 || len == 0 {
            return Err(crate::error::Error::EmptySequence);
        }
        if tokens.iter().any(|t| t.len() != len) {
            return Err(dim_err!("token rows must share one padded length"));
        }
        if let Some(bad) = tokens.iter().flat_map(|t| t.iter()).find(|&&id| id as usize >= cfg.vocab) {
            return Err(contract_err!("token id {bad} >= vocabulary size {}", cfg.vocab));
        }
        let pad = cfg.pad_id as u32;
        let ids: Vec<usize> = (0..len)
            .flat_map(|t| tokens.iter().map(move |row| row[t] as usize))
            .collect();
        let emb = self.embedding.forward(tape, store, &ids)?;
        let seq = (0..len)
            .map(|t| tape.slice_rows(emb, t * b, b))
            .collect::<Result<Vec<_>>>()?;
        let valid: Vec<Vec<bool>> = (0..len)
            .map(|t| tokens.iter().map(|row| row[t] != pad).collect())
            .collect();
        let states = bilstm_forward(tape, store, &seq, &self.fwd, &self.bwd, Some(&valid))?;
        let mask: Vec<bool> = tokens
            .iter()
            .flat_map(|row| row.iter().map(|&id| id != pad))
            .collect();
        let (context, _) = self.attention.pool(tape, store, &states, Some(&mask))?;
        let x = self.dropout.forward(tape, context, mode, rng)?;
        let hidden = self.fc1.forward(tape, store, x)?;
        let hidden = tape.relu(hidden);
        let x = self.dropout.forward(tape, hidden, mode, rng)?;
        let logits = self.fc2.forward(tape, store, x)?;
        Ok(PathOutput {
            logits,
            features: hidden,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FusionArch {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Two dense layers over the concatenated path outputs.
#[derive(Debug, Clone)]
pub struct FusionNet {
    pub config: FusionConfig,
    pub in_dim: usize,
    pub arch: FusionArch,
    pub params: ParamStore,
}

impl FusionNet {
    pub fn new(config: FusionConfig, in_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if in_dim % 2 != 0 {
            return Err(config_err!("fusion input width {in_dim} is not a two-path concatenation"));
        }
        let mut rng = CounterRng::new(seed);
        let mut params = ParamStore::new();
        let fc1 = Linear::new(&mut params, "fusion.fc1", in_dim, config.hidden, &mut rng);
        let fc2 = Linear::new(&mut params, "fusion.fc2", config.hidden, config.out, &mut rng);
        Ok(Self {
            config,
            in_dim,
            arch: FusionArch { fc1, fc2 },
            params,
        })
    }

    pub fn forward(&self, tape: &mut Tape, visual: Var, textual: Var) -> Result<Var> {
        self.arch.forward(tape, &self.params, visual, textual)
    }
}

impl FusionArch {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, visual: Var, textual: Var) -> Result<Var> {
        let (vb, tb) = (tape.shape(visual)[0], tape.shape(textual)[0]);
        if vb != tb {
            return Err(contract_err!("fusion inputs come from batches of {vb} and {tb}"));
        }
        let x = tape.concat_cols(&[visual, textual])?;
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// The deployed classifier: both frozen paths and the fusion head.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub visual: VisualNet,
    pub textual: TextualNet,
    pub fusion: FusionNet,
}

/// Logits from all three networks for one batch, eval mode.
#[derive(Debug, Clone)]
pub struct BundleLogits {
    pub visual: Vec<f64>,
    pub textual: Vec<f64>,
    pub fusion: Vec<f64>,
}

impl ModelBundle {
    pub fn logits(&mut self, frames: &FrameBatch, tokens: &[&[u32]]) -> Result<BundleLogits> {
        let mut rng = CounterRng::new(0);
        let mut tape = Tape::new();
        let v = self.visual.forward(&mut tape, frames, Mode::Eval, &mut rng)?;
        let t = self.textual.forward(&mut tape, tokens, Mode::Eval, &mut rng)?;
        let (fv, ft) = match self.fusion.config.input {
            FusionInput::Logits => (v.logits, t.logits),
            FusionInput::Features => (v.features, t.features),
        };
        let f = self.fusion.forward(&mut tape, fv, ft)?;
        Ok(BundleLogits {
            visual: tape.value(v.logits).data().to_vec(),
            textual: tape.value(t.logits).data().to_vec(),
            fusion: tape.value(f).data().to_vec(),
        })
    }

    /// Predicted class for one session.
    pub fn predict(&mut self, frames: &[f64], tokens: &[u32]) -> Result<usize> {
        let cfg = &self.visual.config;
        let batch = FrameBatch::new(1, cfg.frames, cfg.frame_hw, cfg.frame_hw, frames.to_vec())?;
        let out = self.logits(&batch, &[tokens])?;
        Ok(predict_from_logits(&out.fusion))
    }
}

/// Argmax with ties toward the lowest class index.
pub fn predict_from_logits(logits: &[f64]) -> usize {
    argmax(logits)
}

/// `(name, shape)` for every tensor, for `model-info`.
pub fn param_shapes(store: &ParamStore) -> Vec<(String, Vec<usize>)> {
    store
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect()
}
