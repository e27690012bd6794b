use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{predict_batch, DenoiserParams, SketchCondition};
use super::schedule::NoiseSchedule;
use super::tensor::Tensor;
use super::text::{TextCondition, LEXICON_SIZE};
use super::{DiffusionError, LatentImage};
use crate::imaging::RegionMask;

/// Known content for inpainting: pixels in `known` are re-imposed from `x0`
/// (forward-diffused to the current step) after every reverse step.
#[derive(Debug, Clone, Copy)]
pub struct Inpaint<'a> {
    pub known: &'a RegionMask,
    pub x0: &'a LatentImage,
}

/// One generation request within a batch.
#[derive(Debug, Clone)]
pub struct SampleRequest<'a> {
    pub text: &'a TextCondition,
    pub sketch: &'a SketchCondition,
    pub seed: u64,
    pub inpaint: Option<Inpaint<'a>>,
}

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn impose(x: &mut [f64], inp: &Inpaint<'_>, alpha_bar: f64, rng: &mut ChaCha8Rng) {
    let hw = inp.known.width() * inp.known.height();
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let z = if alpha_bar < 1.0 { noise(rng, x.len()) } else { vec![0.0; x.len()] };
    for (i, v) in x.iter_mut().enumerate() {
        if inp.known.members()[i % hw] {
            *v = if alpha_bar < 1.0 { a * inp.x0.data[i] + b * z[i] } else { inp.x0.data[i] };
        }
    }
}

/// Ancestral sampling over the strided sub-schedule, one independent RNG
/// stream per request. Item `i` of the result equals what [`sample`] returns
/// for request `i` alone.
pub fn sample_batch(
    params: &DenoiserParams,
    s: &NoiseSchedule,
    requests: &[SampleRequest<'_>],
    steps: usize,
) -> Result<Vec<LatentImage>, DiffusionError> {
    let taus = s.strided(steps)?;
    let c = &params.config;
    let (ch, r) = (c.image_channels, c.resolution);
    let len = ch * r * r;
    for q in requests {
        if q.sketch.features.len() != c.levels() || q.text.multi_hot.len() != LEXICON_SIZE {
            return Err(DiffusionError::ShapeMismatch("condition does not match the model".into()));
        }
        if let Some(inp) = &q.inpaint {
            let shape_ok = (inp.x0.channels, inp.x0.height, inp.x0.width) == (ch, r, r)
                && (inp.known.width(), inp.known.height()) == (r, r);
            if !shape_ok {
                return Err(DiffusionError::ShapeMismatch("inpainting mask or known image size".into()));
            }
        }
    }
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let n = requests.len();
    let mut rngs: Vec<ChaCha8Rng> = requests.iter().map(|q| ChaCha8Rng::seed_from_u64(q.seed)).collect();
    let text: Vec<f64> = requests.iter().flat_map(|q| q.text.multi_hot.iter().copied()).collect();
    let text = Tensor::from_vec([n, LEXICON_SIZE, 1, 1], text);
    let features: Vec<Tensor> = (0..c.levels())
        .map(|l| Tensor::stack(&requests.iter().map(|q| q.sketch.features[l].clone()).collect::<Vec<_>>()))
        .collect();

    let mut x = Tensor::zeros([n, ch, r, r]);
    let top = s.alpha_bar(*taus.last().expect("steps ≥ 1"));
    for (i, q) in requests.iter().enumerate() {
        let z = noise(&mut rngs[i], len);
        x.item_mut(i).copy_from_slice(&z);
        if let Some(inp) = &q.inpaint {
            impose(x.item_mut(i), inp, top, &mut rngs[i]);
        }
    }

    for k in (0..taus.len()).rev() {
        let t = taus[k];
        let ab = s.alpha_bar(t);
        let ab_prev = if k == 0 { 1.0 } else { s.alpha_bar(taus[k - 1]) };
        let beta = 1.0 - ab / ab_prev;
        let eps = predict_batch(params, &x, &vec![t; n], &text, &features);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        for (i, q) in requests.iter().enumerate() {
            let z = if k > 0 { noise(&mut rngs[i], len) } else { vec![0.0; len] };
            let e = eps.item(i);
            for (j, v) in x.item_mut(i).iter_mut().enumerate() {
                let x0_hat = ((*v - (1.0 - ab).sqrt() * e[j]) / ab.sqrt()).clamp(-1.0, 1.0);
                *v = c0 * x0_hat + ct * *v + sigma * z[j];
            }
            if let Some(inp) = &q.inpaint {
                impose(x.item_mut(i), inp, ab_prev, &mut rngs[i]);
            }
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut img = LatentImage::from_tensor_item(&x, i);
            img.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            img
        })
        .collect())
}

pub fn sample(
    params: &DenoiserParams,
    s: &NoiseSchedule,
    c_t: &TextCondition,
    c_s: &SketchCondition,
    steps: usize,
    seed: u64,
    inpaint: Option<Inpaint<'_>>,
) -> Result<LatentImage, DiffusionError> {
    let req = SampleRequest { text: c_t, sketch: c_s, seed, inpaint };
    Ok(sample_batch(params, s, &[req], steps)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::{encode_sketch, ModelConfig};
    use crate::diffusion::text::encode_text;
    use crate::imaging::{BBox, BinarySketch};

    fn setup() -> (DenoiserParams, SketchCondition, TextCondition) {
        let config =
            ModelConfig { resolution: 8, channels: vec![4, 4], encoder_channels: vec![2, 2], ..ModelConfig::desk() };
        let p = DenoiserParams::init(&config, 1).unwrap();
        let mut sk = BinarySketch::blank(8, 8);
        sk.draw_rect(1, 1, 6, 6);
        let c = encode_sketch(&sk, &p).unwrap();
        (p, c, encode_text("a modern school building with 1 floors"))
    }

    #[test]
    fn full_known_region_returns_known_image() {
        let (p, c, t) = setup();
        let s = NoiseSchedule::default();
        let mut x0 = LatentImage::filled(3, 8, 8, 0.25);
        x0.data[0] = 1.7;
        let known = RegionMask::full(8, 8);
        let out = sample(&p, &s, &t, &c, s.t_max, 3, Some(Inpaint { known: &known, x0: &x0 })).unwrap();
        assert_eq!(out.data[0], 1.0);
        assert!(out.data[1..].iter().all(|&v| v == 0.25));
    }

    #[test]
    fn deterministic_and_batch_consistent() {
        let (p, c, t) = setup();
        let s = NoiseSchedule::default();
        let a = sample(&p, &s, &t, &c, 20, 7, None).unwrap();
        assert_eq!(a, sample(&p, &s, &t, &c, 20, 7, None).unwrap());
        assert_ne!(a, sample(&p, &s, &t, &c, 20, 8, None).unwrap());
        assert!(a.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        let known = RegionMask::from_rect(8, 8, BBox::new(0, 0, 4, 8));
        let x0 = LatentImage::filled(3, 8, 8, -0.5);
        let inp = Some(Inpaint { known: &known, x0: &x0 });
        let reqs = [
            SampleRequest { text: &t, sketch: &c, seed: 7, inpaint: None },
            SampleRequest { text: &t, sketch: &c, seed: 9, inpaint: inp },
        ];
        let batch = sample_batch(&p, &s, &reqs, 20).unwrap();
        assert_eq!(batch[0], a);
        let single = sample(&p, &s, &t, &c, 20, 9, inp).unwrap();
        assert_eq!(batch[1], single);
        for y in 0..8 {
            for x in 0..4 {
                assert_eq!(single.data[y * 8 + x], -0.5);
            }
        }
    }

    #[test]
    fn invalid_steps() {
        let (p, c, t) = setup();
        let s = NoiseSchedule::default();
        assert!(matches!(sample(&p, &s, &t, &c, 0, 0, None), Err(DiffusionError::InvalidSteps { .. })));
        assert!(sample(&p, &s, &t, &c, 1001, 0, None).is_err());
    }
}
