//! Multimodal late-fusion strategy classification.
//!
//! A visual path (per-frame CNN feeding a BiLSTM) and a textual path (token
//! embedding, BiLSTM and additive attention) are pretrained separately,
//! frozen, and combined by a small dense fusion head. Accuracy across many
//! independently seeded runs is aggregated until its confidence interval is
//! narrow enough.

pub mod autodiff;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod evalstat;
pub mod gradsuite;
pub mod layers;
pub mod models;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
