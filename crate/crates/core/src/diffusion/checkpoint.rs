//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` metadata length, UTF-8
//! JSON metadata, then every parameter tensor as little-endian `f64` in slot
//! order, followed by the Adam first and second moments when present.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DenoiserParams, ModelConfig};
use super::schedule::{make_schedule, NoiseSchedule};
use super::tensor::Tensor;
use super::train::{AdamState, Trainer};
use super::DiffusionError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ARCHSKCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: ModelConfig,
    schedule: ScheduleMeta,
    names: Vec<String>,
    shapes: Vec<[usize; 4]>,
    step: u64,
    seed: u64,
    lr: f64,
    batch_size: usize,
    /// ChaCha stream position, decimal.
    rng_word_pos: String,
    has_optimizer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleMeta {
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
}

/// Everything needed to sample from a model or resume its training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub adam: Option<AdamState>,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub rng_word_pos: u128,
}

impl PartialEq for Checkpoint {
    fn eq(&self, o: &Self) -> bool {
        self.params == o.params
            && self.schedule == o.schedule
            && self.adam == o.adam
            && self.seed == o.seed
            && self.lr.to_bits() == o.lr.to_bits()
            && self.batch_size == o.batch_size
            && self.rng_word_pos == o.rng_word_pos
    }
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            params: t.params.clone(),
            schedule: t.schedule.clone(),
            adam: Some(t.adam.clone()),
            seed: t.seed,
            lr: t.lr,
            batch_size: t.batch_size,
            rng_word_pos: t.rng.get_word_pos(),
        }
    }

    /// Rebuilds the trainer exactly as it was when saved.
    pub fn into_trainer(self) -> Trainer {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.rng_word_pos);
        let adam = self.adam.unwrap_or_else(|| AdamState::new(&self.params));
        Trainer {
            params: self.params,
            adam,
            schedule: self.schedule,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            rng,
            threads: 1,
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.as_ref().map_or(0, |a| a.t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            config: self.params.config.clone(),
            schedule: ScheduleMeta {
                t_max: self.schedule.t_max,
                beta_start: self.schedule.beta_start,
                beta_end: self.schedule.beta_end,
            },
            names: self.params.names.clone(),
            shapes: self.params.tensors.iter().map(|t| t.shape).collect(),
            step: self.step(),
            seed: self.seed,
            lr: self.lr,
            batch_size: self.batch_size,
            rng_word_pos: self.rng_word_pos.to_string(),
            has_optimizer: self.adam.is_some(),
        };
        let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |ts: &[Tensor]| {
            for t in ts {
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        put(&self.params.tensors);
        if let Some(a) = &self.adam {
            put(&a.m);
            put(&a.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiffusionError> {
        let bad = |m: &str| DiffusionError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(DiffusionError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let meta_bytes = body.get(..meta_len).ok_or_else(|| bad("truncated metadata"))?;
        let meta: Meta =
            serde_json::from_slice(meta_bytes).map_err(|e| DiffusionError::Checkpoint(format!("metadata: {e}")))?;
        let mut rest = &body[meta_len..];
        if meta.names.len() != meta.shapes.len() {
            return Err(bad("names and shapes differ in length"));
        }
        let mut take = |shapes: &[[usize; 4]]| -> Result<Vec<Tensor>, DiffusionError> {
            shapes
                .iter()
                .map(|&shape| {
                    let n: usize = shape.iter().product();
                    let chunk = rest.get(..n * 8).ok_or_else(|| bad("truncated tensor data"))?;
                    rest = &rest[n * 8..];
                    let data =
                        chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    Ok(Tensor::from_vec(shape, data))
                })
                .collect()
        };
        let tensors = take(&meta.shapes)?;
        let adam = if meta.has_optimizer {
            let m = take(&meta.shapes)?;
            let v = take(&meta.shapes)?;
            Some(AdamState { m, v, t: meta.step })
        } else {
            None
        };
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let params = DenoiserParams::from_parts(meta.config, meta.names, tensors);
        params.check_layout()?;
        let schedule = make_schedule(meta.schedule.t_max, meta.schedule.beta_start, meta.schedule.beta_end)?;
        let rng_word_pos = meta.rng_word_pos.parse().map_err(|_| bad("rng_word_pos is not an integer"))?;
        Ok(Checkpoint {
            params,
            schedule,
            adam,
            seed: meta.seed,
            lr: meta.lr,
            batch_size: meta.batch_size,
            rng_word_pos,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DiffusionError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| DiffusionError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DiffusionError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| DiffusionError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::text::encode_text;
    use crate::diffusion::train::TrainItem;
    use crate::diffusion::LatentImage;
    use crate::imaging::BinarySketch;

    fn config() -> ModelConfig {
        ModelConfig {
            resolution: 8,
            image_channels: 1,
            channels: vec![2, 4],
            encoder_channels: vec![2, 2],
            time_dim: 4,
            embed_dim: 4,
        }
    }

    fn data() -> Vec<TrainItem> {
        (0..3)
            .map(|i| {
                let mut sketch = BinarySketch::blank(8, 8);
                sketch.draw_rect(i, i, 7 - i, 7 - i);
                TrainItem {
                    x0: LatentImage::filled(1, 8, 8, i as f64 / 3.0),
                    text: encode_text("a modern school building"),
                    sketch,
                }
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut t = Trainer::new(DenoiserParams::init(&config(), 1).unwrap(), NoiseSchedule::default(), 1e-3, 2, 5);
        for _ in 0..3 {
            t.step_on(&data()).unwrap();
        }
        let ck = Checkpoint::from_trainer(&t);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let fresh = || Trainer::new(DenoiserParams::init(&config(), 1).unwrap(), NoiseSchedule::default(), 1e-3, 2, 5);
        let mut full = fresh();
        let straight: Vec<u64> = (0..10).map(|_| full.step_on(&data()).unwrap().to_bits()).collect();
        let mut first = fresh();
        let mut resumed: Vec<u64> = (0..4).map(|_| first.step_on(&data()).unwrap().to_bits()).collect();
        let mut second = Checkpoint::from_bytes(&Checkpoint::from_trainer(&first).to_bytes()).unwrap().into_trainer();
        resumed.extend((0..6).map(|_| second.step_on(&data()).unwrap().to_bits()));
        assert_eq!(resumed, straight);
        assert_eq!(second.params, full.params);
    }

    #[test]
    fn rejects_corruption() {
        let t = Trainer::new(DenoiserParams::init(&config(), 1).unwrap(), NoiseSchedule::default(), 1e-3, 2, 5);
        let bytes = Checkpoint::from_trainer(&t).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
