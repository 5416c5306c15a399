//! The denoising substrate shared by every distillation rule.
//!
//! * [`NoiseSchedule`] and [`add_noise`] implement the forward process
//!   `z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps`.
//! * [`Codec`] maps rendered images to latents and back.
//! * [`Denoiser`] is the one interface behind which the pretrained,
//!   view-conditioned, and image-prompt-conditioned noise predictors live.
//!   [`oracles`] provides closed-form implementations, [`residual`] the
//!   trainable score model used by variational distillation, and [`bridge`]
//!   a client for denoisers served over HTTP.

pub mod bridge;
pub mod oracles;
pub mod residual;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::ImagePromptEmbedding;
use crate::render_volume::{CameraPose, Image, RelativePose};

pub use bridge::RemoteDenoiser;
pub use oracles::{AnalyticScene, DeltaTargetDenoiser, ImagePromptOracle, PatchDecoder, Zero123Oracle};
pub use residual::ResidualScoreModel;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape { expected: [usize; 3], actual: [usize; 3] },
    #[error("codec avgpool-{k} does not divide image size {width}x{height}")]
    Codec { k: usize, width: usize, height: usize },
    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("condition is missing `{0}` required by this denoiser")]
    MissingCondition(&'static str),
    #[error("bridge transport error: {0}")]
    Transport(String),
    #[error("bridge protocol error: {0}")]
    Protocol(String),
    #[error("bridge server rejected request ({code}): {detail}")]
    Server { code: String, detail: String },
}

/// Discrete-time variance schedule with 1-based timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.len() < 2 {
            return Err(DiffusionError::Schedule("at least two steps are required".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(DiffusionError::Schedule("betas must lie in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `abar_t` for `t` in `1..=num_steps`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.num_steps() {
            return Err(DiffusionError::Timestep { t, max: self.num_steps() });
        }
        Ok(())
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end`.
pub fn linear_schedule(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    if num_steps < 2 {
        return Err(DiffusionError::Schedule(format!("num_steps must be >= 2, got {num_steps}")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(DiffusionError::Schedule(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let step = (beta_end - beta_start) / (num_steps - 1) as f64;
    let betas = (0..num_steps).map(|i| beta_start + step * i as f64).collect();
    NoiseSchedule::from_betas(betas)
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        linear_schedule(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }
}

/// Fixed linear map between images and latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    Identity,
    /// `k × k` block means.
    AvgPool(usize),
}

/// Channels-first latent tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(shape: [usize; 3], value: f64) -> Self {
        Self {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            data: vec![value; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_data(shape: [usize; 3], data: Vec<f64>) -> Result<Self, DiffusionError> {
        let n = shape[0] * shape[1] * shape[2];
        if data.len() != n {
            return Err(DiffusionError::Protocol(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_shape(&self, other: &Latent) -> Result<(), DiffusionError> {
        if self.shape() != other.shape() {
            return Err(DiffusionError::Shape {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mse(&self, other: &Latent) -> f64 {
        assert_eq!(self.shape(), other.shape(), "latent shapes differ");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / self.len() as f64
    }

    pub fn dot(&self, other: &Latent) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

impl Codec {
    pub fn latent_shape(&self, width: usize, height: usize) -> Result<[usize; 3], DiffusionError> {
        match *self {
            Codec::Identity => Ok([3, height, width]),
            Codec::AvgPool(k) => {
                if k == 0 || width % k != 0 || height % k != 0 {
                    return Err(DiffusionError::Codec { k, width, height });
                }
                Ok([3, height / k, width / k])
            }
        }
    }

    fn factor(&self) -> usize {
        match *self {
            Codec::Identity => 1,
            Codec::AvgPool(k) => k,
        }
    }

    pub fn encode(&self, image: &Image) -> Result<Latent, DiffusionError> {
        let shape = self.latent_shape(image.width, image.height)?;
        let k = self.factor();
        let mut latent = Latent::zeros(shape[0], shape[1], shape[2]);
        let inv = 1.0 / (k * k) as f64;
        for y in 0..image.height {
            for x in 0..image.width {
                let px = image.get(x, y);
                let (ly, lx) = (y / k, x / k);
                for c in 0..3 {
                    latent.data[(c * shape[1] + ly) * shape[2] + lx] += px[c] * inv;
                }
            }
        }
        Ok(latent)
    }

    /// Right inverse of [`Codec::encode`] (nearest upsampling), clamped into
    /// `[0, 1]`.
    pub fn decode(&self, latent: &Latent) -> Image {
        let k = self.factor();
        let (w, h) = (latent.width * k, latent.height * k);
        Image::from_fn(w, h, |x, y| {
            let (lx, ly) = (x / k, y / k);
            let v = |c: usize| latent.data[(c * latent.height + ly) * latent.width + lx].clamp(0.0, 1.0);
            [v(0), v(1), v(2)]
        })
    }

    /// Transpose of the encoder: maps a latent-shaped gradient to image
    /// layout (rows, interleaved channels).
    pub fn encode_adjoint(&self, grad: &Latent) -> Vec<f64> {
        let k = self.factor();
        let (w, h) = (grad.width * k, grad.height * k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let (lx, ly) = (x / k, y / k);
                for c in 0..3 {
                    let g = grad.data[(c * grad.height + ly) * grad.width + lx];
                    out[(y * w + x) * 3 + c] = g * inv;
                }
            }
        }
        out
    }
}

/// Timestep weighting `w(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Unit,
    #[default]
    OneMinusAlphaBar,
    /// `(1 - abar_t) / sqrt(abar_t)`
    NoiseOverSignal,
}

impl Weighting {
    pub fn weight(&self, alpha_bar: f64) -> f64 {
        match self {
            Weighting::Unit => 1.0,
            Weighting::OneMinusAlphaBar => 1.0 - alpha_bar,
            Weighting::NoiseOverSignal => (1.0 - alpha_bar) / alpha_bar.sqrt(),
        }
    }
}

/// Range and weighting of sampled timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimestepConfig {
    pub t_min: usize,
    pub t_max: usize,
    pub weighting: Weighting,
}

impl Default for TimestepConfig {
    fn default() -> Self {
        Self::for_schedule(1000)
    }
}

impl TimestepConfig {
    /// `[0.02 T, 0.98 T]` with the default weighting.
    pub fn for_schedule(num_steps: usize) -> Self {
        Self {
            t_min: ((0.02 * num_steps as f64).round() as usize).max(1),
            t_max: ((0.98 * num_steps as f64).round() as usize).max(1),
            weighting: Weighting::default(),
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<(), DiffusionError> {
        if self.t_min == 0 || self.t_min > self.t_max || self.t_max > schedule.num_steps() {
            return Err(DiffusionError::Schedule(format!(
                "timestep range [{}, {}] invalid for {} steps",
                self.t_min,
                self.t_max,
                schedule.num_steps()
            )));
        }
        Ok(())
    }
}

/// One draw of `(t, eps, w(t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepSample {
    pub t: usize,
    pub eps: Latent,
    pub weight: f64,
}

impl TimestepSample {
    pub fn draw(rng: &mut impl Rng, shape: [usize; 3], config: &TimestepConfig, schedule: &NoiseSchedule) -> Self {
        let t = rng.random_range(config.t_min..=config.t_max);
        let n = shape[0] * shape[1] * shape[2];
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self {
            t,
            eps: Latent {
                channels: shape[0],
                height: shape[1],
                width: shape[2],
                data,
            },
            weight: config.weighting.weight(schedule.alpha_bar(t)),
        }
    }
}

/// `z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps`.
pub fn add_noise(clean: &Latent, sample: &TimestepSample, schedule: &NoiseSchedule) -> Result<Latent, DiffusionError> {
    schedule.check_t(sample.t)?;
    add_noise_with_alpha_bar(clean, &sample.eps, schedule.alpha_bar(sample.t))
}

pub fn add_noise_with_alpha_bar(clean: &Latent, eps: &Latent, alpha_bar: f64) -> Result<Latent, DiffusionError> {
    clean.check_shape(eps)?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(Latent {
        data: clean.data.iter().zip(&eps.data).map(|(z, e)| a * z + b * e).collect(),
        ..*clean
    })
}

impl Clone for Box<dyn Denoiser> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

/// Which pretrained role a denoiser plays; also the bridge `kind` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    Pretrain,
    Zero123,
    ImagePrompt,
}

impl DenoiserKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DenoiserKind::Pretrain => "pretrain",
            DenoiserKind::Zero123 => "zero123",
            DenoiserKind::ImagePrompt => "image_prompt",
        }
    }
}

/// Everything a conditional noise predictor may look at besides `z_t` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserCondition {
    pub text_embedding: Vec<f64>,
    pub image_prompt: Option<ImagePromptEmbedding>,
    pub relative_pose: Option<RelativePose>,
    pub reference_image: Option<Image>,
    pub camera: Option<CameraPose>,
    pub guidance_scale: f64,
}

impl Default for DenoiserCondition {
    fn default() -> Self {
        Self {
            text_embedding: Vec::new(),
            image_prompt: None,
            relative_pose: None,
            reference_image: None,
            camera: None,
            guidance_scale: 1.0,
        }
    }
}

impl DenoiserCondition {
    pub fn text(embedding: Vec<f64>) -> Self {
        Self {
            text_embedding: embedding,
            ..Self::default()
        }
    }
}

/// Conditional noise predictor `eps_hat(z_t; cond, t)`.
///
/// Implementations must be deterministic functions of their inputs.
pub trait Denoiser: Send + Sync {
    fn kind(&self) -> DenoiserKind;

    fn predict(&self, noisy: &Latent, t: usize, cond: &DenoiserCondition) -> Result<Latent, DiffusionError>;

    /// Digest of any parameters. Distillation must leave it unchanged.
    fn state_hash(&self) -> u64 {
        0
    }

    fn boxed_clone(&self) -> Box<dyn Denoiser>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_schedule_first_alpha_bar() {
        let s = NoiseSchedule::default();
        assert_eq!(s.num_steps(), 1000);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        assert!((1..1000).all(|t| s.alpha_bar(t + 1) < s.alpha_bar(t)));
        assert!(s.alpha_bar(1000) > 0.0);
    }

    #[test]
    fn schedule_validation() {
        assert!(linear_schedule(1, 1e-4, 2e-2).is_err());
        assert!(linear_schedule(10, 2e-2, 1e-4).is_err());
        assert!(linear_schedule(10, 0.0, 1e-2).is_err());
        assert!(linear_schedule(10, 1e-3, 1.0).is_err());
    }

    #[test]
    fn add_noise_limits() {
        let z = Latent::filled([3, 2, 2], 0.4);
        let eps = Latent::filled([3, 2, 2], -1.3);
        assert_eq!(add_noise_with_alpha_bar(&z, &eps, 1.0).unwrap(), z);
        let zero = Latent::zeros(3, 2, 2);
        assert_eq!(add_noise_with_alpha_bar(&zero, &zero, 0.3).unwrap(), zero);
        assert!(add_noise_with_alpha_bar(&z, &Latent::zeros(3, 1, 2), 0.5).is_err());
    }

    #[test]
    fn add_noise_moments_monte_carlo() {
        let schedule = NoiseSchedule::default();
        let t = 400;
        let ab = schedule.alpha_bar(t);
        let z = Latent::filled([1, 1, 1], 0.7);
        let zero = Latent::zeros(1, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let cfg = TimestepConfig {
            t_min: t,
            t_max: t,
            ..Default::default()
        };
        let (mut sum, mut sum_sq_zero) = (0.0, 0.0);
        for _ in 0..n {
            let s = TimestepSample::draw(&mut rng, [1, 1, 1], &cfg, &schedule);
            sum += add_noise(&z, &s, &schedule).unwrap().data[0];
            sum_sq_zero += add_noise(&zero, &s, &schedule).unwrap().data[0].powi(2);
        }
        let sigma = (1.0 - ab).sqrt();
        let mean = sum / n as f64;
        assert!((mean - ab.sqrt() * 0.7).abs() < 3.0 * sigma / (n as f64).sqrt());
        // Var of a chi-square-like estimator: 2 sigma^4 / n
        let var = sum_sq_zero / n as f64;
        assert!((var - (1.0 - ab)).abs() < 3.0 * (2.0f64).sqrt() * (1.0 - ab) / (n as f64).sqrt());
    }

    #[test]
    fn codec_round_trips() {
        let img = Image::from_fn(8, 4, |x, y| [x as f64 / 8.0, y as f64 / 4.0, 0.25]);
        let id = Codec::Identity;
        assert_eq!(id.decode(&id.encode(&img).unwrap()), img);
        let c = Image::filled(8, 4, [0.3, 0.6, 0.9]);
        let lat = Codec::AvgPool(2).encode(&c).unwrap();
        assert_eq!(lat.shape(), [3, 2, 4]);
        for (i, v) in lat.data.iter().enumerate() {
            assert!((v - [0.3, 0.6, 0.9][i / 8]).abs() < 1e-12);
        }
        assert!(matches!(Codec::AvgPool(3).encode(&c), Err(DiffusionError::Codec { k: 3, .. })));
        // right inverse
        let z = Codec::AvgPool(2).encode(&img).unwrap();
        let back = Codec::AvgPool(2).encode(&Codec::AvgPool(2).decode(&z)).unwrap();
        for (a, b) in z.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn codec_adjoint_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for codec in [Codec::Identity, Codec::AvgPool(2), Codec::AvgPool(4)] {
            let img = Image::from_fn(8, 8, |_, _| [rng.random(), rng.random(), rng.random()]);
            let shape = codec.latent_shape(8, 8).unwrap();
            let u = Latent::from_data(shape, (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let lhs = codec.encode(&img).unwrap().dot(&u);
            let rhs: f64 = img.pixels.iter().zip(codec.encode_adjoint(&u)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-5);
        }
    }

    #[test]
    fn weighting_rules() {
        assert_eq!(Weighting::Unit.weight(0.64), 1.0);
        assert!((Weighting::OneMinusAlphaBar.weight(0.64) - 0.36).abs() < 1e-15);
        assert!((Weighting::NoiseOverSignal.weight(0.64) - 0.45).abs() < 1e-15);
        let cfg = TimestepConfig::default();
        assert_eq!((cfg.t_min, cfg.t_max), (20, 980));
    }
}
