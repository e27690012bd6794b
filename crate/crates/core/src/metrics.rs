//! Full-reference image quality: PSNR, SSIM and a feature-space proxy
//! distance, plus tabular reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{encoder_features, DenoiserParams, Tensor};
use crate::imaging::ColorImage;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image is {width}x{height}, SSIM needs at least {min} in each dimension")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("max_value must be positive, got {0}")]
    InvalidMaxValue(f64),
    #[error("no model supplied for the proxy distance")]
    NoModel,
    #[error("no image pairs")]
    EmptyInput,
}

fn check_shape(a: &ColorImage, b: &ColorImage) -> Result<(), MetricsError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(MetricsError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )))
    }
}

pub fn psnr(a: &ColorImage, b: &ColorImage, max_value: f64) -> Result<f64, MetricsError> {
    check_shape(a, b)?;
    if max_value.is_nan() || max_value <= 0.0 {
        return Err(MetricsError::InvalidMaxValue(max_value));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(p: &[f64], width: usize, height: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (width - SSIM_WINDOW + 1, height - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let line = &p[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11×11 windows and channels, dynamic range 1.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64, MetricsError> {
    check_shape(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { width: a.width, height: a.height, min: SSIM_WINDOW });
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let taps = gaussian_taps();
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        let (pa, pb) = (a.plane(c), b.plane(c));
        let prod = |f: fn(f64, f64) -> f64| pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
        let mu_a = filter_valid(pa, w, h, &taps);
        let mu_b = filter_valid(pb, w, h, &taps);
        let aa = filter_valid(&prod(|x, _| x * x), w, h, &taps);
        let bb = filter_valid(&prod(|_, y| y * y), w, h, &taps);
        let ab = filter_valid(&prod(|x, y| x * y), w, h, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

/// Encoder input for an image: darkness `1 − luminance`, so strokes read as ink.
fn proxy_input(img: &ColorImage) -> Tensor {
    let lum = img.luminance();
    Tensor::from_vec([1, 1, img.height, img.width], lum.pixels().iter().map(|v| 1.0 - v).collect())
}

/// Scales every spatial feature vector to unit length (zero vectors stay zero).
fn channel_normalized(t: &Tensor) -> Tensor {
    let (c, hw) = (t.c(), t.h() * t.w());
    let mut out = t.clone();
    for i in 0..hw {
        let norm = (0..c).map(|k| t.data[k * hw + i].powi(2)).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for k in 0..c {
                out.data[k * hw + i] /= norm;
            }
        }
    }
    out
}

/// Proxy perceptual distance: mean squared difference of channel-normalized
/// building-encoder features, averaged over scales.
pub fn perceptual_proxy(a: &ColorImage, b: &ColorImage, model: &DenoiserParams) -> Result<f64, MetricsError> {
    check_shape(a, b)?;
    let r = model.config.resolution;
    if (a.width, a.height) != (r, r) {
        return Err(MetricsError::ShapeMismatch(format!(
            "images are {}x{}, model resolution is {r}",
            a.width, a.height
        )));
    }
    let fa = encoder_features(model, &proxy_input(a));
    let fb = encoder_features(model, &proxy_input(b));
    let mut sum = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (x, y) = (channel_normalized(x), channel_normalized(y));
        sum += x.data.iter().zip(&y.data).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.data.len() as f64;
    }
    Ok(sum / fa.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
    pub proxy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub pairs: usize,
}

/// Display precision shared by the text and JSON renderings.
fn round_to(v: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (v * s).round() / s
}

impl MetricReport {
    pub fn new(pairs: usize) -> Self {
        MetricReport { rows: Vec::new(), pairs }
    }

    pub fn has_proxy(&self) -> bool {
        self.rows.iter().any(|r| r.proxy.is_some())
    }

    /// Aligned table, columns PSNR, SSIM, proxy.
    pub fn to_text(&self) -> String {
        let lw = self.rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(5);
        let proxy = self.has_proxy();
        let mut out = format!("{:<lw$}  {:>8}  {:>8}", "Model", "PSNR ↑", "SSIM ↑");
        if proxy {
            out.push_str(&format!("  {:>8}", "Proxy ↓"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<lw$}  {:>8.2}  {:>8.2}", r.label, r.psnr, r.ssim));
            if proxy {
                match r.proxy {
                    Some(p) => out.push_str(&format!("  {p:>8.2}")),
                    None => out.push_str(&format!("  {:>8}", "n/a")),
                }
            }
            out.push('\n');
        }
        out.push_str(&format!("pairs: {}\n", self.pairs));
        out
    }

    /// JSON with the same rounded values the table shows.
    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<_> = self
            .rows
            .iter()
            .map(|r| {
                let mut v = serde_json::json!({
                    "label": r.label,
                    "psnr": round_to(r.psnr, 2),
                    "ssim": round_to(r.ssim, 2),
                });
                if let Some(p) = r.proxy {
                    v["proxy"] = serde_json::json!(round_to(p, 2));
                }
                v
            })
            .collect();
        serde_json::json!({ "columns": ["psnr", "ssim", "proxy"], "pairs": self.pairs, "rows": rows })
    }
}

/// Per-pair metrics on `(generated, reference)` images in `[0, 1]`, averaged.
pub fn eval_report(
    pairs: &[(ColorImage, ColorImage)],
    label: &str,
    model: Option<&DenoiserParams>,
) -> Result<MetricReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let (mut p, mut s, mut d) = (0.0, 0.0, 0.0);
    for (g, r) in pairs {
        p += psnr(g, r, 1.0)?;
        s += ssim(g, r)?;
        if let Some(m) = model {
            d += perceptual_proxy(g, r, m)?;
        }
    }
    let n = pairs.len() as f64;
    let mut report = MetricReport::new(pairs.len());
    report.rows.push(MetricRow { label: label.to_string(), psnr: p / n, ssim: s / n, proxy: model.map(|_| d / n) });
    Ok(report)
}
