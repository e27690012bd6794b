//! The ε-prediction network.
//!
//! A convolutional encoder–decoder over `levels = channels.len()` scales
//! (stride-2 downsampling, nearest upsampling, concatenated skips). Time and
//! text enter through a shared embedding that drives per-channel affine
//! modulation after every convolution. A separate building encoder turns the
//! sketch into one feature map per scale; each map is added to the decoder
//! stage of its scale through a 1×1 projection that starts at exactly zero.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::autodiff::{Graph, Var};
use super::tensor::Tensor;
use super::text::{TextCondition, LEXICON_SIZE};
use super::{DiffusionError, LatentImage};
use crate::imaging::BinarySketch;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub resolution: usize,
    /// Channels of `x_t` and of the predicted noise.
    pub image_channels: usize,
    /// Denoiser width per scale, finest first.
    pub channels: Vec<usize>,
    /// Building-encoder width per scale; same length as `channels`.
    pub encoder_channels: Vec<usize>,
    /// Length of the sinusoidal step encoding.
    pub time_dim: usize,
    /// Width of the joint time/text embedding.
    pub embed_dim: usize,
}

impl ModelConfig {
    /// 32×32 color renders.
    pub fn desk() -> Self {
        ModelConfig {
            resolution: 32,
            image_channels: 3,
            channels: vec![16, 32, 32],
            encoder_channels: vec![8, 16, 32],
            time_dim: 16,
            embed_dim: 16,
        }
    }

    /// Single-channel sketch refinement at `resolution`.
    pub fn refine(resolution: usize) -> Self {
        ModelConfig { resolution, image_channels: 1, ..Self::desk() }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: String| Err(DiffusionError::InvalidConfig(m));
        if self.channels.is_empty() || self.channels.len() != self.encoder_channels.len() {
            return bad("channels and encoder_channels must be non-empty and equally long".into());
        }
        if self.channels.iter().chain(&self.encoder_channels).any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        if self.image_channels == 0 || self.embed_dim == 0 || self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad("image_channels, embed_dim must be positive and time_dim even".into());
        }
        let div = 1 << (self.levels() - 1);
        if self.resolution == 0 || !self.resolution.is_multiple_of(div) {
            return bad(format!("resolution {} is not divisible by {div}", self.resolution));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// `N(0, gain² / fan_in)`.
    Normal {
        gain: f64,
    },
    Zero,
}

/// Parameter slot names and shapes in storage order.
fn layout(c: &ModelConfig) -> Vec<(String, [usize; 4], Init)> {
    let e = c.embed_dim;
    let he = Init::Normal { gain: 2f64.sqrt() };
    let unit = Init::Normal { gain: 1.0 };
    let film_gain = Init::Normal { gain: 0.5 };
    let mut v = vec![
        ("time.w".to_string(), [e, c.time_dim, 1, 1], unit),
        ("time.b".to_string(), [e, 1, 1, 1], Init::Zero),
        ("text.w".to_string(), [e, LEXICON_SIZE, 1, 1], unit),
        ("emb.w".to_string(), [e, e, 1, 1], unit),
        ("emb.b".to_string(), [e, 1, 1, 1], Init::Zero),
    ];
    let conv = |v: &mut Vec<_>, name: String, cout: usize, cin: usize, k: usize, init: Init| {
        v.push((format!("{name}.w"), [cout, cin, k, k], init));
        v.push((format!("{name}.b"), [cout, 1, 1, 1], Init::Zero));
    };
    let film = |v: &mut Vec<_>, name: String, ch: usize| {
        for p in ["gamma", "beta"] {
            v.push((format!("{name}.{p}.w"), [ch, e, 1, 1], film_gain));
            v.push((format!("{name}.{p}.b"), [ch, 1, 1, 1], Init::Zero));
        }
    };
    let levels = c.levels();
    for l in 0..levels {
        let cin = if l == 0 { c.image_channels } else { c.channels[l - 1] };
        conv(&mut v, format!("enc{l}.a"), c.channels[l], cin, 3, he);
        film(&mut v, format!("enc{l}.a.film"), c.channels[l]);
        conv(&mut v, format!("enc{l}.b"), c.channels[l], c.channels[l], 3, he);
        film(&mut v, format!("enc{l}.b.film"), c.channels[l]);
    }
    for l in (0..levels - 1).rev() {
        conv(&mut v, format!("dec{l}"), c.channels[l], c.channels[l + 1] + c.channels[l], 3, he);
        film(&mut v, format!("dec{l}.film"), c.channels[l]);
    }
    conv(&mut v, "out".into(), c.image_channels, c.channels[0], 3, Init::Normal { gain: 0.1 });
    for l in 0..levels {
        let cin = if l == 0 { 1 } else { c.encoder_channels[l - 1] };
        conv(&mut v, format!("cond{l}"), c.encoder_channels[l], cin, 3, he);
    }
    for l in 0..levels {
        conv(&mut v, format!("inject{l}"), c.channels[l], c.encoder_channels[l], 1, Init::Zero);
    }
    v
}

/// All learnable weights of the denoiser, the building encoder, the
/// embeddings and the injection projections.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl DenoiserParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, DiffusionError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(config) {
            let mut t = Tensor::zeros(shape);
            if let Init::Normal { gain } = init {
                let fan_in = shape[1] * shape[2] * shape[3];
                let dist = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
                t.data.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::from_parts(config.clone(), names, tensors))
    }

    pub(crate) fn from_parts(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        DenoiserParams { config, names, tensors, index }
    }

    /// Checks that names and shapes match the layout of `config`.
    pub(crate) fn check_layout(&self) -> Result<(), DiffusionError> {
        self.config.validate()?;
        let want = layout(&self.config);
        let ok = want.len() == self.tensors.len()
            && want.iter().zip(&self.names).zip(&self.tensors).all(|(((n, s, _), name), t)| n == name && *s == t.shape);
        if ok {
            Ok(())
        } else {
            Err(DiffusionError::InvalidConfig("parameter tensors do not match the model layout".into()))
        }
    }

    pub fn slot(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.slot(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let s = self.slot(name);
        &mut self.tensors[s]
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Names of the zero-initialized injection projections.
    pub fn injection_names(&self) -> Vec<&str> {
        self.names.iter().filter(|n| n.starts_with("inject")).map(String::as_str).collect()
    }
}

/// Building-encoder features, one map per denoiser scale, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchCondition {
    pub features: Vec<Tensor>,
}

/// Sketch as encoder input: ink 1, paper 0.
pub fn sketch_tensor(sketch: &BinarySketch) -> Tensor {
    let data = sketch.ink().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec([1, 1, sketch.height(), sketch.width()], data)
}

/// Sinusoidal encoding of step `t`: `[sin(t·f_i), cos(t·f_i)]` with
/// `f_i = 10000^(−i/half)`.
pub fn time_encoding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * f).sin();
        out[half + i] = (t as f64 * f).cos();
    }
    out
}

pub(crate) struct Net<'a> {
    pub p: &'a DenoiserParams,
    pub g: Graph,
}

impl<'a> Net<'a> {
    pub fn new(p: &'a DenoiserParams) -> Self {
        Net { p, g: Graph::new() }
    }

    fn param(&mut self, name: &str) -> Var {
        let slot = self.p.slot(name);
        self.g.param(slot, self.p.tensors[slot].clone())
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize) -> Var {
        let w = self.param(&format!("{name}.w"));
        let b = self.param(&format!("{name}.b"));
        self.g.conv(x, w, Some(b), stride)
    }

    fn linear(&mut self, name: &str, x: Var, bias: bool) -> Var {
        let w = self.param(&format!("{name}.w"));
        let b = bias.then(|| self.param(&format!("{name}.b")));
        self.g.linear(x, w, b)
    }

    /// `silu(film(conv(x)))`.
    fn block(&mut self, name: &str, x: Var, emb: Var, stride: usize) -> Var {
        let h = self.conv(name, x, stride);
        let gamma = self.linear(&format!("{name}.film.gamma"), emb, true);
        let beta = self.linear(&format!("{name}.film.beta"), emb, true);
        let m = self.g.film(h, gamma, beta);
        self.g.silu(m)
    }

    pub fn embedding(&mut self, steps: &[usize], text: &Tensor) -> Var {
        let dim = self.p.config.time_dim;
        let enc: Vec<f64> = steps.iter().flat_map(|&t| time_encoding(t, dim)).collect();
        let te = self.g.input(Tensor::from_vec([steps.len(), dim, 1, 1], enc));
        let tx = self.g.input(text.clone());
        let h = self.linear("time", te, true);
        let h = self.g.silu(h);
        let c = self.linear("text", tx, false);
        let s = self.g.add(h, c);
        let e = self.linear("emb", s, true);
        self.g.silu(e)
    }

    pub fn building_encoder(&mut self, sketch: Var) -> Vec<Var> {
        let mut feats = Vec::new();
        let mut h = sketch;
        for l in 0..self.p.config.levels() {
            let c = self.conv(&format!("cond{l}"), h, if l == 0 { 1 } else { 2 });
            h = self.g.silu(c);
            feats.push(h);
        }
        feats
    }

    pub fn denoiser(&mut self, x: Var, emb: Var, feats: &[Var]) -> Var {
        let levels = self.p.config.levels();
        let mut skips = Vec::with_capacity(levels);
        let mut h = x;
        for l in 0..levels {
            h = self.block(&format!("enc{l}.a"), h, emb, if l == 0 { 1 } else { 2 });
            h = self.block(&format!("enc{l}.b"), h, emb, 1);
            skips.push(h);
        }
        let inj = self.conv(&format!("inject{}", levels - 1), feats[levels - 1], 1);
        let mut d = self.g.add(skips[levels - 1], inj);
        for l in (0..levels - 1).rev() {
            let up = self.g.upsample(d);
            let cat = self.g.concat(up, skips[l]);
            let h = self.block(&format!("dec{l}"), cat, emb, 1);
            let inj = self.conv(&format!("inject{l}"), feats[l], 1);
            d = self.g.add(h, inj);
        }
        self.conv("out", d, 1)
    }
}

fn check_sketch(p: &DenoiserParams, sketch: &BinarySketch) -> Result<(), DiffusionError> {
    let r = p.config.resolution;
    if (sketch.width(), sketch.height()) != (r, r) {
        return Err(DiffusionError::ResolutionMismatch { expected: r, width: sketch.width(), height: sketch.height() });
    }
    Ok(())
}

pub fn encode_sketch(sketch: &BinarySketch, params: &DenoiserParams) -> Result<SketchCondition, DiffusionError> {
    check_sketch(params, sketch)?;
    Ok(SketchCondition { features: encoder_features(params, &sketch_tensor(sketch)) })
}

/// Building-encoder feature maps for an arbitrary `n × 1 × R × R` input.
pub fn encoder_features(params: &DenoiserParams, input: &Tensor) -> Vec<Tensor> {
    let mut net = Net::new(params);
    let s = net.g.input(input.clone());
    let feats = net.building_encoder(s);
    feats.iter().map(|&f| net.g.value(f).clone()).collect()
}

/// Batched ε̂ for `x` (`n × C × R × R`) at per-item steps, with per-item text
/// multi-hots (`n × 15 × 1 × 1`) and stacked sketch features.
pub(crate) fn predict_batch(
    params: &DenoiserParams,
    x: &Tensor,
    steps: &[usize],
    text: &Tensor,
    features: &[Tensor],
) -> Tensor {
    let mut net = Net::new(params);
    let xv = net.g.input(x.clone());
    let emb = net.embedding(steps, text);
    let feats: Vec<Var> = features.iter().map(|f| net.g.input(f.clone())).collect();
    let out = net.denoiser(xv, emb, &feats);
    net.g.into_value(out)
}

pub fn predict_noise(
    params: &DenoiserParams,
    x_t: &LatentImage,
    t: usize,
    c_t: &TextCondition,
    c_s: &SketchCondition,
) -> Result<LatentImage, DiffusionError> {
    let c = &params.config;
    if (x_t.channels, x_t.height, x_t.width) != (c.image_channels, c.resolution, c.resolution) {
        return Err(DiffusionError::ShapeMismatch(format!(
            "x_t is {}×{}×{}, model expects {}×{}×{}",
            x_t.channels, x_t.height, x_t.width, c.image_channels, c.resolution, c.resolution
        )));
    }
    if c_s.features.len() != c.levels() {
        return Err(DiffusionError::ShapeMismatch("sketch condition has the wrong number of scales".into()));
    }
    if c_t.multi_hot.len() != LEXICON_SIZE {
        return Err(DiffusionError::ShapeMismatch("text condition length".into()));
    }
    let text = Tensor::from_vec([1, LEXICON_SIZE, 1, 1], c_t.multi_hot.clone());
    let out = predict_batch(params, &x_t.to_tensor(), &[t], &text, &c_s.features);
    Ok(LatentImage::from_tensor_item(&out, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::text::encode_text;
    use crate::imaging::BBox;

    /// One scale, two channels, 4×4 inputs.
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

    fn perturbed(config: &ModelConfig, seed: u64) -> DenoiserParams {
        let mut p = DenoiserParams::init(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let d = Normal::new(0.0, 0.3).unwrap();
        for t in &mut p.tensors {
            t.data.iter_mut().for_each(|v| *v += d.sample(&mut rng));
        }
        p
    }

    // --- Independent forward oracle: plain loops over nested vectors. ---

    type Map = Vec<Vec<Vec<f64>>>; // [c][y][x]

    fn o_conv(x: &Map, w: &Tensor, b: &Tensor) -> Map {
        let [cout, cin, k, _] = w.shape;
        let (h, wd) = (x[0].len(), x[0][0].len());
        let r = (k / 2) as isize;
        let mut out = vec![vec![vec![0.0; wd]; h]; cout];
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = b.data[co];
                    for ci in 0..cin {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (sy, sx) = (y as isize + dy, xx as isize + dx);
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    let wi = ((co * cin + ci) * k + (dy + r) as usize) * k + (dx + r) as usize;
                                    s += w.data[wi] * x[ci][sy as usize][sx as usize];
                                }
                            }
                        }
                    }
                    out[co][y][xx] = s;
                }
            }
        }
        out
    }

    fn o_silu(v: f64) -> f64 {
        v / (1.0 + (-v).exp())
    }

    fn o_lin(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
        (0..w.shape[0])
            .map(|o| {
                b.map_or(0.0, |b| b.data[o]) + (0..w.shape[1]).map(|i| w.data[o * w.shape[1] + i] * x[i]).sum::<f64>()
            })
            .collect()
    }

    fn o_block(p: &DenoiserParams, name: &str, x: &Map, emb: &[f64]) -> Map {
        let h = o_conv(x, p.get(&format!("{name}.w")), p.get(&format!("{name}.b")));
        let g = o_lin(p.get(&format!("{name}.film.gamma.w")), Some(p.get(&format!("{name}.film.gamma.b"))), emb);
        let bt = o_lin(p.get(&format!("{name}.film.beta.w")), Some(p.get(&format!("{name}.film.beta.b"))), emb);
        h.iter()
            .enumerate()
            .map(|(c, plane)| {
                plane.iter().map(|row| row.iter().map(|v| o_silu(v * (1.0 + g[c]) + bt[c])).collect()).collect()
            })
            .collect()
    }

    fn oracle_forward(p: &DenoiserParams, x: &Map, t: usize, text: &[f64], sketch: &Map) -> Map {
        let half = p.config.time_dim / 2;
        let mut te = vec![0.0; 2 * half];
        for i in 0..half {
            let f = 10000f64.powf(-(i as f64) / half as f64);
            te[i] = (t as f64 * f).sin();
            te[half + i] = (t as f64 * f).cos();
        }
        let h: Vec<f64> = o_lin(p.get("time.w"), Some(p.get("time.b")), &te).into_iter().map(o_silu).collect();
        let c = o_lin(p.get("text.w"), None, text);
        let s: Vec<f64> = h.iter().zip(&c).map(|(a, b)| a + b).collect();
        let emb: Vec<f64> = o_lin(p.get("emb.w"), Some(p.get("emb.b")), &s).into_iter().map(o_silu).collect();

        let a = o_block(p, "enc0.a", x, &emb);
        let b = o_block(p, "enc0.b", &a, &emb);
        let f: Map = o_conv(sketch, p.get("cond0.w"), p.get("cond0.b"))
            .into_iter()
            .map(|pl| pl.into_iter().map(|r| r.into_iter().map(o_silu).collect()).collect())
            .collect();
        let inj = o_conv(&f, p.get("inject0.w"), p.get("inject0.b"));
        let d: Map = b
            .iter()
            .zip(&inj)
            .map(|(p1, p2)| p1.iter().zip(p2).map(|(r1, r2)| r1.iter().zip(r2).map(|(u, v)| u + v).collect()).collect())
            .collect();
        o_conv(&d, p.get("out.w"), p.get("out.b"))
    }

    fn to_map(l: &LatentImage) -> Map {
        (0..l.channels)
            .map(|c| {
                (0..l.height)
                    .map(|y| (0..l.width).map(|x| l.data[(c * l.height + y) * l.width + x]).collect())
                    .collect()
            })
            .collect()
    }

    fn sample_inputs(r: usize, seed: u64) -> (LatentImage, BinarySketch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        let x = LatentImage::new(1, r, r, (0..r * r).map(|_| d.sample(&mut rng)).collect()).unwrap();
        let mut s = BinarySketch::blank(r, r);
        s.draw_rect(0, 1, r as i64 - 1, r as i64 - 2);
        (x, s)
    }

    #[test]
    fn micro_net_matches_oracle() {
        let p = perturbed(&micro(), 5);
        assert!(p.param_count() <= 500, "{}", p.param_count());
        let (x, s) = sample_inputs(4, 1);
        let text = encode_text("a modern school building with 2 floors, glass facade");
        for t in [1, 37, 1000] {
            let got = predict_noise(&p, &x, t, &text, &encode_sketch(&s, &p).unwrap()).unwrap();
            let sk: Map =
                vec![(0..4).map(|y| (0..4).map(|xx| if s.get(xx, y) { 1.0 } else { 0.0 }).collect()).collect()];
            let want = oracle_forward(&p, &to_map(&x), t, &text.multi_hot, &sk);
            let got = to_map(&got);
            for ((a, b), _) in got.iter().flatten().flatten().zip(want.iter().flatten().flatten()).zip(0..) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_init_ignores_sketch() {
        let p = DenoiserParams::init(&ModelConfig::desk(), 3).unwrap();
        for name in p.injection_names() {
            assert!(p.get(name).data.iter().all(|&v| v == 0.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Normal::new(0.0, 1.0).unwrap();
        let x = LatentImage::new(3, 32, 32, (0..3 * 32 * 32).map(|_| d.sample(&mut rng)).collect()).unwrap();
        let text = encode_text("a classic school building with 1 floors");
        let blank = BinarySketch::blank(32, 32);
        let mut busy = BinarySketch::blank(32, 32);
        busy.draw_rect(2, 4, 29, 30);
        busy.fill_rect(BBox::new(10, 10, 20, 20));
        let a = predict_noise(&p, &x, 500, &text, &encode_sketch(&blank, &p).unwrap()).unwrap();
        let b = predict_noise(&p, &x, 500, &text, &encode_sketch(&busy, &p).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(encode_sketch(&blank, &p).unwrap(), encode_sketch(&busy, &p).unwrap());
        let again = predict_noise(&p, &x, 500, &text, &encode_sketch(&busy, &p).unwrap()).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn encoder_is_shift_equivariant_at_total_stride() {
        let config = ModelConfig::desk();
        let p = DenoiserParams::init(&config, 8).unwrap();
        let stride = 1 << (config.levels() - 1);
        let mut a = BinarySketch::blank(32, 32);
        a.set(12, 12, true);
        let mut b = BinarySketch::blank(32, 32);
        b.set(12 + stride, 12, true);
        let fa = encode_sketch(&a, &p).unwrap();
        let fb = encode_sketch(&b, &p).unwrap();
        let (ca, cb) = (fa.features.last().unwrap(), fb.features.last().unwrap());
        let (h, w) = (ca.h(), ca.w());
        for c in 0..ca.c() {
            for y in 1..h - 1 {
                for x in 1..w - 2 {
                    let va = ca.data[(c * h + y) * w + x];
                    let vb = cb.data[(c * h + y) * w + x + 1];
                    assert!((va - vb).abs() < 1e-12, "c{c} ({x},{y})");
                }
            }
        }
        assert!(check_sketch(&p, &BinarySketch::blank(16, 16)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { resolution: 30, ..ModelConfig::desk() }.validate().is_err());
        assert!(ModelConfig { encoder_channels: vec![8], ..ModelConfig::desk() }.validate().is_err());
        assert!(ModelConfig { time_dim: 3, ..ModelConfig::desk() }.validate().is_err());
        assert!(ModelConfig::refine(64).validate().is_ok());
    }
}
