use serde::{Deserialize, Serialize};

use super::{DiffusionError, LatentImage};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear β schedule with cumulative products. Steps are 1-based:
/// `beta(t)` for `t ∈ 1..=T`, and `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if (1..=self.t_max).contains(&t) {
            Ok(())
        } else {
            Err(DiffusionError::StepOutOfRange { t, t_max: self.t_max })
        }
    }

    /// `steps` evenly spaced timesteps `τ_i = round(i·T/steps)`, `i = 1..=steps`.
    pub fn strided(&self, steps: usize) -> Result<Vec<usize>, DiffusionError> {
        if steps == 0 || steps > self.t_max {
            return Err(DiffusionError::InvalidSteps { steps, t_max: self.t_max });
        }
        Ok((1..=steps).map(|i| ((i * self.t_max) as f64 / steps as f64).round() as usize).collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    let valid = t_max >= 1 && beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0;
    if !valid {
        return Err(DiffusionError::InvalidSchedule(format!("T={t_max}, beta {beta_start}..{beta_end}")));
    }
    let betas: Vec<f64> =
        (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { t_max, beta_start, beta_end, betas, alphas, alpha_bars })
}

/// `x_t = √ᾱ_t · x_0 + √(1 − ᾱ_t) · ε`.
pub fn forward_diffuse(
    x0: &LatentImage,
    t: usize,
    eps: &LatentImage,
    s: &NoiseSchedule,
) -> Result<LatentImage, DiffusionError> {
    s.check_step(t)?;
    mix(x0, eps, s.alpha_bar(t))
}

pub(crate) fn mix(x0: &LatentImage, eps: &LatentImage, alpha_bar: f64) -> Result<LatentImage, DiffusionError> {
    x0.check_same_shape(eps)?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0.data.iter().zip(&eps.data).map(|(x, e)| a * x + b * e).collect();
    Ok(LatentImage { channels: x0.channels, height: x0.height, width: x0.width, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_schedules() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_ends_near_zero() {
        let s = NoiseSchedule::default();
        let oracle: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        assert!((s.alpha_bar(1000) - oracle).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 1e-4);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn invalid_bounds() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn closed_form_examples() {
        let x0 = LatentImage::filled(1, 2, 2, 1.0);
        let eps = LatentImage::filled(1, 2, 2, 0.0);
        let xt = mix(&x0, &eps, 0.25).unwrap();
        assert!(xt.data.iter().all(|&v| v == 0.5));
        assert_eq!(mix(&x0, &eps, 1.0).unwrap(), x0);
        let s = NoiseSchedule::default();
        assert!(forward_diffuse(&x0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 1001, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 1, &LatentImage::filled(1, 3, 2, 0.0), &s).is_err());
    }

    #[test]
    fn strided_steps() {
        let s = NoiseSchedule::default();
        assert_eq!(s.strided(4).unwrap(), vec![250, 500, 750, 1000]);
        assert_eq!(s.strided(1000).unwrap(), (1..=1000).collect::<Vec<_>>());
        assert!(s.strided(0).is_err());
        assert!(s.strided(1001).is_err());
    }
}
