use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::autodiff::Var;
use super::model::{sketch_tensor, DenoiserParams, Net};
use super::schedule::{mix, NoiseSchedule};
use super::tensor::Tensor;
use super::text::{TextCondition, LEXICON_SIZE};
use super::{DiffusionError, LatentImage};
use crate::imaging::BinarySketch;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One training example: clean image, prompt keywords and sketch condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub x0: LatentImage,
    pub text: TextCondition,
    pub sketch: BinarySketch,
}

/// Adaptive-moment state, one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &DenoiserParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape)).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn update(&mut self, params: &mut DenoiserParams, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
                v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Batch tensors for one forward pass.
pub(crate) struct Prepared {
    pub x_t: Tensor,
    pub steps: Vec<usize>,
    pub text: Tensor,
    pub sketch: Tensor,
    pub eps: Tensor,
}

pub(crate) fn check_item(params: &DenoiserParams, item: &TrainItem) -> Result<(), DiffusionError> {
    let c = &params.config;
    let r = c.resolution;
    if (item.x0.channels, item.x0.height, item.x0.width) != (c.image_channels, r, r) {
        return Err(DiffusionError::ShapeMismatch(format!(
            "training image is {}×{}×{}, model expects {}×{r}×{r}",
            item.x0.channels, item.x0.height, item.x0.width, c.image_channels
        )));
    }
    if (item.sketch.width(), item.sketch.height()) != (r, r) {
        return Err(DiffusionError::ResolutionMismatch {
            expected: r,
            width: item.sketch.width(),
            height: item.sketch.height(),
        });
    }
    if item.text.multi_hot.len() != LEXICON_SIZE {
        return Err(DiffusionError::ShapeMismatch("text condition length".into()));
    }
    Ok(())
}

/// Draws `t ~ U{1..T}` and then `ε ~ N(0, I)` per item, in item order.
pub(crate) fn prepare(batch: &[TrainItem], s: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Prepared {
    let mut steps = Vec::with_capacity(batch.len());
    let mut xs = Vec::with_capacity(batch.len());
    let mut noises = Vec::with_capacity(batch.len());
    for item in batch {
        let t = rng.random_range(1..=s.t_max);
        let data: Vec<f64> = (0..item.x0.data.len()).map(|_| StandardNormal.sample(rng)).collect();
        let eps = LatentImage { data, ..item.x0.clone() };
        xs.push(mix(&item.x0, &eps, s.alpha_bar(t)).expect("same shape").to_tensor());
        noises.push(eps.to_tensor());
        steps.push(t);
    }
    let text: Vec<f64> = batch.iter().flat_map(|i| i.text.multi_hot.iter().copied()).collect();
    let sketches: Vec<Tensor> = batch.iter().map(|i| sketch_tensor(&i.sketch)).collect();
    Prepared {
        x_t: Tensor::stack(&xs),
        steps,
        text: Tensor::from_vec([batch.len(), LEXICON_SIZE, 1, 1], text),
        sketch: Tensor::stack(&sketches),
        eps: Tensor::stack(&noises),
    }
}

/// Mean squared ε-prediction error and its gradient for every parameter.
pub(crate) fn loss_and_grads(params: &DenoiserParams, b: &Prepared) -> (f64, Vec<Tensor>) {
    let mut net = Net::new(params);
    let x = net.g.input(b.x_t.clone());
    let sk = net.g.input(b.sketch.clone());
    let emb = net.embedding(&b.steps, &b.text);
    let feats: Vec<Var> = net.building_encoder(sk);
    let out = net.denoiser(x, emb, &feats);
    let pred = net.g.value(out);
    let n = pred.numel() as f64;
    let mut loss = 0.0;
    let mut seed = Tensor::zeros(pred.shape);
    for ((s, p), e) in seed.data.iter_mut().zip(&pred.data).zip(&b.eps.data) {
        let d = p - e;
        loss += d * d;
        *s = 2.0 * d / n;
    }
    let grads = net.g.backward(out, seed, params.tensors.len());
    let grads = grads
        .grads
        .into_iter()
        .zip(&params.tensors)
        .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape)))
        .collect();
    (loss / n, grads)
}

fn item_tensor(t: &Tensor, n: usize) -> Tensor {
    Tensor::from_vec([1, t.shape[1], t.shape[2], t.shape[3]], t.item(n).to_vec())
}

impl Prepared {
    fn item(&self, n: usize) -> Prepared {
        Prepared {
            x_t: item_tensor(&self.x_t, n),
            steps: vec![self.steps[n]],
            text: item_tensor(&self.text, n),
            sketch: item_tensor(&self.sketch, n),
            eps: item_tensor(&self.eps, n),
        }
    }
}

/// Per-item passes spread over `threads` workers, reduced in item order so
/// the result does not depend on the thread count. Agrees with
/// [`loss_and_grads`] up to floating-point summation order.
fn loss_and_grads_per_item(params: &DenoiserParams, b: &Prepared, threads: usize) -> (f64, Vec<Tensor>) {
    let n = b.steps.len();
    let mut results: Vec<Option<(f64, Vec<Tensor>)>> = vec![None; n];
    let per = n.div_ceil(threads.max(1));
    std::thread::scope(|scope| {
        for (c, chunk) in results.chunks_mut(per).enumerate() {
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(loss_and_grads(params, &b.item(c * per + k)));
                }
            });
        }
    });
    let mut loss = 0.0;
    let mut grads: Vec<Tensor> = params.tensors.iter().map(|p| Tensor::zeros(p.shape)).collect();
    for (l, g) in results.into_iter().map(|r| r.expect("every item computed")) {
        loss += l / n as f64;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, v) in acc.data.iter_mut().zip(&gi.data) {
                *a += v / n as f64;
            }
        }
    }
    (loss, grads)
}

/// Loss and per-parameter gradients on `batch` without updating anything.
/// Timesteps and noise are drawn from `rng` exactly as in [`training_step`].
pub fn loss_and_gradients(
    params: &DenoiserParams,
    batch: &[TrainItem],
    s: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Tensor>), DiffusionError> {
    if batch.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    for item in batch {
        check_item(params, item)?;
    }
    Ok(loss_and_grads(params, &prepare(batch, s, rng)))
}

/// One optimizer step on `batch`; returns the pre-update loss.
pub fn training_step(
    params: &mut DenoiserParams,
    adam: &mut AdamState,
    batch: &[TrainItem],
    s: &NoiseSchedule,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, DiffusionError> {
    step_with(params, adam, batch, s, lr, rng, 1)
}

/// `threads > 1` takes the per-item path.
fn step_with(
    params: &mut DenoiserParams,
    adam: &mut AdamState,
    batch: &[TrainItem],
    s: &NoiseSchedule,
    lr: f64,
    rng: &mut ChaCha8Rng,
    threads: usize,
) -> Result<f64, DiffusionError> {
    if batch.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    for item in batch {
        check_item(params, item)?;
    }
    let prepared = prepare(batch, s, rng);
    let (loss, grads) = if threads > 1 {
        loss_and_grads_per_item(params, &prepared, threads)
    } else {
        loss_and_grads(params, &prepared)
    };
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(DiffusionError::Divergence { step: adam.t + 1, loss });
    }
    adam.update(params, &grads, lr);
    Ok(loss)
}

/// Parameters, optimizer state, schedule and RNG of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: DenoiserParams,
    pub adam: AdamState,
    pub schedule: NoiseSchedule,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub rng: ChaCha8Rng,
    /// Gradient workers; 1 runs the whole batch as one pass. Not saved in
    /// checkpoints.
    pub threads: usize,
}

impl Trainer {
    pub fn new(params: DenoiserParams, schedule: NoiseSchedule, lr: f64, batch_size: usize, seed: u64) -> Self {
        Trainer {
            adam: AdamState::new(&params),
            params,
            schedule,
            lr,
            batch_size,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            threads: 1,
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.t
    }

    /// Draws `batch_size` items uniformly with replacement and takes a step.
    pub fn step_on(&mut self, data: &[TrainItem]) -> Result<f64, DiffusionError> {
        if data.is_empty() || self.batch_size == 0 {
            return Err(DiffusionError::EmptyBatch);
        }
        let idx: Vec<usize> = (0..self.batch_size).map(|_| self.rng.random_range(0..data.len())).collect();
        let batch: Vec<TrainItem> = idx.iter().map(|&i| data[i].clone()).collect();
        step_with(&mut self.params, &mut self.adam, &batch, &self.schedule, self.lr, &mut self.rng, self.threads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::ModelConfig;
    use crate::diffusion::text::encode_text;
    use rand_distr::Normal;

    fn micro() -> ModelConfig {
        ModelConfig {
            resolution: 4,
            image_channels: 1,
            channels: vec![2],
            encoder_channels: vec![2],
            time_dim: 4,
            embed_dim: 3,
        }
    }

    fn item(r: usize, c: usize, seed: u64) -> TrainItem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = LatentImage::new(c, r, r, (0..c * r * r).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut sketch = BinarySketch::blank(r, r);
        sketch.draw_rect(0, 0, r as i64 - 1, r as i64 / 2);
        sketch.set(r / 2, r - 1, true);
        TrainItem { x0, text: encode_text("a classic school building with 2 floors, wood facade"), sketch }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut p = DenoiserParams::init(&micro(), 2).unwrap();
        // Move every tensor, including the zero-initialized ones, off zero.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = Normal::new(0.0, 0.3).unwrap();
        for t in &mut p.tensors {
            t.data.iter_mut().for_each(|v| *v += d.sample(&mut rng));
        }
        assert!(p.param_count() <= 500);
        let batch = vec![item(4, 1, 1), item(4, 1, 2)];
        let prepared = prepare(&batch, &NoiseSchedule::default(), &mut ChaCha8Rng::seed_from_u64(3));
        let (_, grads) = loss_and_grads(&p, &prepared);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for slot in 0..p.tensors.len() {
            for i in 0..p.tensors[slot].numel() {
                let orig = p.tensors[slot].data[i];
                p.tensors[slot].data[i] = orig + h;
                let lp = loss_and_grads(&p, &prepared).0;
                p.tensors[slot].data[i] = orig - h;
                let lm = loss_and_grads(&p, &prepared).0;
                p.tensors[slot].data[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a = grads[slot].data[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel <= 1e-3, "{}[{i}]: analytic {a}, numeric {fd}", p.names[slot]);
            }
        }
        assert!(worst <= 1e-3);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let p0 = DenoiserParams::init(&micro(), 1).unwrap();
        let mut p = p0.clone();
        let mut adam = AdamState::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss =
            training_step(&mut p, &mut adam, &[item(4, 1, 0)], &NoiseSchedule::default(), 0.0, &mut rng).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(p, p0);
        assert!(matches!(
            training_step(&mut p, &mut adam, &[], &NoiseSchedule::default(), 0.0, &mut rng),
            Err(DiffusionError::EmptyBatch)
        ));
    }

    #[test]
    fn initial_loss_is_near_one() {
        let p = DenoiserParams::init(&ModelConfig::desk(), 4).unwrap();
        let batch: Vec<TrainItem> = (0..64).map(|s| item(32, 3, s)).collect();
        let prepared = prepare(&batch, &NoiseSchedule::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let (loss, _) = loss_and_grads(&p, &prepared);
        assert!((0.5..=2.0).contains(&loss), "{loss}");
    }

    #[test]
    fn overfitting_one_item_drops_loss_tenfold() {
        let config = ModelConfig {
            resolution: 8,
            image_channels: 1,
            channels: vec![4, 8],
            encoder_channels: vec![2, 4],
            ..micro()
        };
        let mut trainer = Trainer::new(DenoiserParams::init(&config, 0).unwrap(), NoiseSchedule::default(), 1e-2, 1, 0);
        let data = vec![item(8, 1, 5)];
        // Fix t and ε so the objective is a deterministic regression target.
        let prepared = prepare(&data, &trainer.schedule, &mut ChaCha8Rng::seed_from_u64(2));
        let initial = loss_and_grads(&trainer.params, &prepared).0;
        let mut last = initial;
        for _ in 0..200 {
            let (l, g) = loss_and_grads(&trainer.params, &prepared);
            trainer.adam.update(&mut trainer.params, &g, trainer.lr);
            last = l;
        }
        assert!(last * 10.0 <= initial, "{initial} -> {last}");
    }

    #[test]
    fn fixed_seed_training_is_deterministic() {
        let run = || {
            let mut t = Trainer::new(DenoiserParams::init(&micro(), 0).unwrap(), NoiseSchedule::default(), 1e-3, 2, 11);
            let data = vec![item(4, 1, 0), item(4, 1, 1), item(4, 1, 2)];
            (0..20).map(|_| t.step_on(&data).unwrap().to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn per_item_path_is_thread_count_independent() {
        let data = vec![item(4, 1, 0), item(4, 1, 1), item(4, 1, 2)];
        let run = |threads| {
            let mut t = Trainer::new(DenoiserParams::init(&micro(), 0).unwrap(), NoiseSchedule::default(), 1e-3, 5, 11);
            t.threads = threads;
            let losses: Vec<f64> = (0..10).map(|_| t.step_on(&data).unwrap()).collect();
            (losses, t.params)
        };
        let (batched, pb) = run(1);
        let (two, p2) = run(2);
        let (four, p4) = run(4);
        assert_eq!(
            two.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
            four.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(p2, p4);
        for (a, b) in batched.iter().zip(&two) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
        for (a, b) in pb.tensors.iter().zip(&p2.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
            }
        }
    }
}
