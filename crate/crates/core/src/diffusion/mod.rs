//! Pixel-space conditional diffusion: schedule, forward process, the
//! ε-prediction network with its own reverse-mode differentiation, training
//! and (masked) ancestral sampling.

pub mod autodiff;
mod checkpoint;
mod model;
mod sample;
mod schedule;
pub mod tensor;
mod text;
mod train;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{
    encode_sketch, encoder_features, predict_noise, sketch_tensor, time_encoding, DenoiserParams, ModelConfig,
    SketchCondition,
};
pub use sample::{sample, sample_batch, Inpaint, SampleRequest};
pub use schedule::{forward_diffuse, make_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T};
pub use tensor::Tensor;
pub use text::{encode_text, TextCondition, LEXICON, LEXICON_SIZE};
pub use train::{loss_and_gradients, training_step, AdamState, TrainItem, Trainer, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::imaging::{BinarySketch, ColorImage};

pub const DEFAULT_SAMPLING_STEPS: usize = 50;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("step {t} outside 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("invalid sampling steps {steps}: must be in 1..={t_max}")]
    InvalidSteps { steps: usize, t_max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sketch is {width}x{height}, model resolution is {expected}")]
    ResolutionMismatch { expected: usize, width: usize, height: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(String),
}

/// Channel-planar image in model space (nominally `[-1, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl LatentImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, DiffusionError> {
        if data.len() != channels * height * width {
            return Err(DiffusionError::ShapeMismatch(format!(
                "{} values for {channels}×{height}×{width}",
                data.len()
            )));
        }
        Ok(LatentImage { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        LatentImage { channels, height, width, data: vec![v; channels * height * width] }
    }

    pub fn check_same_shape(&self, o: &LatentImage) -> Result<(), DiffusionError> {
        if (self.channels, self.height, self.width) == (o.channels, o.height, o.width) {
            Ok(())
        } else {
            Err(DiffusionError::ShapeMismatch(format!(
                "{}×{}×{} vs {}×{}×{}",
                self.channels, self.height, self.width, o.channels, o.height, o.width
            )))
        }
    }

    /// Maps `[0, 1]` samples to `[-1, 1]`.
    pub fn from_color(img: &ColorImage) -> Self {
        LatentImage {
            channels: img.channels,
            height: img.height,
            width: img.width,
            data: img.data.iter().map(|v| 2.0 * v - 1.0).collect(),
        }
    }

    /// Clamps to `[-1, 1]` and maps to `[0, 1]`, quantized to 8 bits.
    pub fn to_color(&self) -> ColorImage {
        let data = self.data.iter().map(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0).collect();
        ColorImage::new(self.width, self.height, self.channels, data).expect("shape is consistent").quantized()
    }

    /// One channel: ink `1`, paper `-1`.
    pub fn from_sketch(s: &BinarySketch) -> Self {
        LatentImage {
            channels: 1,
            height: s.height(),
            width: s.width(),
            data: s.ink().iter().map(|&b| if b { 1.0 } else { -1.0 }).collect(),
        }
    }

    /// Ink where the first channel is positive.
    pub fn to_sketch(&self) -> BinarySketch {
        let ink = self.data[..self.width * self.height].iter().map(|&v| v > 0.0).collect();
        BinarySketch::from_ink(self.width, self.height, ink).expect("shape is consistent")
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, self.channels, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor_item(t: &Tensor, n: usize) -> Self {
        LatentImage { channels: t.c(), height: t.h(), width: t.w(), data: t.item(n).to_vec() }
    }
}
