//! Trainable residual score model used by variational score distillation.
//!
//! `eps_phi(z_t; y, t, c) = eps_base(z_t; y, t) + W2 tanh(W1 [z_t, emb(t), emb(c)] + b1) + b2`
//! with `W2` and `b2` starting at zero, so the model initially reproduces the
//! base denoiser bit-exactly.

use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{add_noise, Denoiser, DenoiserCondition, DenoiserKind, DiffusionError, Latent, NoiseSchedule, TimestepConfig, TimestepSample};
use crate::math;
use crate::optim::Adam;
use crate::render_volume::CameraPose;

pub const TIME_EMBEDDING: usize = 16;
pub const CAMERA_EMBEDDING: usize = 6;

/// Sinusoidal embedding of `t / num_steps`.
pub fn time_embedding(t: usize, num_steps: usize) -> [f64; TIME_EMBEDDING] {
    let s = t as f64 / num_steps as f64;
    let mut out = [0.0; TIME_EMBEDDING];
    for k in 0..TIME_EMBEDDING / 2 {
        let freq = std::f64::consts::PI * (1u32 << k) as f64 / 2.0;
        out[2 * k] = (freq * s).sin();
        out[2 * k + 1] = (freq * s).cos();
    }
    out
}

/// Unit direction to the camera and its viewing direction; zeros without a camera.
pub fn camera_embedding(camera: Option<&CameraPose>) -> [f64; CAMERA_EMBEDDING] {
    match camera {
        None => [0.0; CAMERA_EMBEDDING],
        Some(c) => {
            let p = math::normalize(c.position);
            let f = c.forward();
            [p[0], p[1], p[2], f[0], f[1], f[2]]
        }
    }
}

#[derive(Clone)]
pub struct ResidualScoreModel {
    base: Box<dyn Denoiser>,
    shape: [usize; 3],
    hidden: usize,
    num_steps: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    optimizer: Adam,
    pub timesteps: TimestepConfig,
}

struct Activations {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl ResidualScoreModel {
    /// `W1` is drawn from `N(0, 1/fan_in)` with the given seed.
    pub fn new(base: Box<dyn Denoiser>, shape: [usize; 3], hidden: usize, num_steps: usize, lr: f64, seed: u64) -> Self {
        let out = shape.iter().product::<usize>();
        let input = out + TIME_EMBEDDING + CAMERA_EMBEDDING;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input as f64).sqrt();
        let w1 = (0..hidden * input).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
        let params = hidden * input + hidden + out * hidden + out;
        Self {
            base,
            shape,
            hidden,
            num_steps,
            w1,
            b1: vec![0.0; hidden],
            w2: vec![0.0; out * hidden],
            b2: vec![0.0; out],
            optimizer: Adam::new(params, lr),
            timesteps: TimestepConfig::for_schedule(num_steps),
        }
    }

    pub fn base(&self) -> &dyn Denoiser {
        self.base.as_ref()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn parameter_count(&self) -> usize {
        self.optimizer.len()
    }

    pub fn learning_rate(&self) -> f64 {
        self.optimizer.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.optimizer.lr = lr;
    }

    fn check(&self, noisy: &Latent) -> Result<(), DiffusionError> {
        if noisy.shape() != self.shape {
            return Err(DiffusionError::Shape {
                expected: self.shape,
                actual: noisy.shape(),
            });
        }
        Ok(())
    }

    fn forward(&self, noisy: &Latent, t: usize, cond: &DenoiserCondition) -> (Activations, Vec<f64>) {
        let mut input = Vec::with_capacity(noisy.len() + TIME_EMBEDDING + CAMERA_EMBEDDING);
        input.extend_from_slice(&noisy.data);
        input.extend_from_slice(&time_embedding(t, self.num_steps));
        input.extend_from_slice(&camera_embedding(cond.camera.as_ref()));
        let n_in = input.len();
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let row = &self.w1[h * n_in..(h + 1) * n_in];
                (row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>() + self.b1[h]).tanh()
            })
            .collect();
        let out: Vec<f64> = (0..self.b2.len())
            .map(|o| {
                let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
                row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>() + self.b2[o]
            })
            .collect();
        (Activations { input, hidden }, out)
    }

    /// The residual term alone.
    pub fn residual(&self, noisy: &Latent, t: usize, cond: &DenoiserCondition) -> Result<Latent, DiffusionError> {
        self.check(noisy)?;
        let (_, out) = self.forward(noisy, t, cond);
        Latent::from_data(self.shape, out)
    }

    /// One Adam step on `||eps_phi(z_t; y, t, c) - eps||^2` with fresh
    /// `(t, eps)` applied to the (detached) render latent. Returns the loss
    /// before the update.
    pub fn train_residual_step(
        &mut self,
        render: &Latent,
        cond: &DenoiserCondition,
        schedule: &NoiseSchedule,
        rng: &mut impl Rng,
    ) -> Result<f64, DiffusionError> {
        self.check(render)?;
        let sample = TimestepSample::draw(rng, self.shape, &self.timesteps, schedule);
        let noisy = add_noise(render, &sample, schedule)?;
        let base = self.base.predict(&noisy, sample.t, cond)?;
        let (act, out) = self.forward(&noisy, sample.t, cond);
        let diff: Vec<f64> = (0..out.len()).map(|i| base.data[i] + out[i] - sample.eps.data[i]).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>();

        let (n_in, n_h) = (act.input.len(), self.hidden);
        let g_out: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
        let mut grads = vec![0.0; self.optimizer.len()];
        let (g_w1, rest) = grads.split_at_mut(n_h * n_in);
        let (g_b1, rest) = rest.split_at_mut(n_h);
        let (g_w2, g_b2) = rest.split_at_mut(out.len() * n_h);
        let mut g_hidden = vec![0.0; n_h];
        for (o, g) in g_out.iter().enumerate() {
            g_b2[o] = *g;
            let row = &self.w2[o * n_h..(o + 1) * n_h];
            for h in 0..n_h {
                g_w2[o * n_h + h] = g * act.hidden[h];
                g_hidden[h] += g * row[h];
            }
        }
        for h in 0..n_h {
            let g_pre = g_hidden[h] * (1.0 - act.hidden[h] * act.hidden[h]);
            g_b1[h] = g_pre;
            if g_pre != 0.0 {
                for (gw, x) in g_w1[h * n_in..(h + 1) * n_in].iter_mut().zip(&act.input) {
                    *gw = g_pre * x;
                }
            }
        }

        let mut params: Vec<f64> = [&self.w1[..], &self.b1, &self.w2, &self.b2].concat();
        self.optimizer.update(&mut params, &grads);
        let (w1, rest) = params.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.b1.len());
        let (w2, b2) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2.copy_from_slice(b2);
        Ok(loss)
    }
}

impl std::fmt::Debug for ResidualScoreModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ResidualScoreModel")
            .field("base", &self.base.kind())
            .field("shape", &self.shape)
            .field("hidden", &self.hidden)
            .finish_non_exhaustive()
    }
}

impl Denoiser for ResidualScoreModel {
    fn kind(&self) -> DenoiserKind {
        self.base.kind()
    }

    fn predict(&self, noisy: &Latent, t: usize, cond: &DenoiserCondition) -> Result<Latent, DiffusionError> {
        self.check(noisy)?;
        let mut eps = self.base.predict(noisy, t, cond)?;
        let (_, out) = self.forward(noisy, t, cond);
        for (e, r) in eps.data.iter_mut().zip(out) {
            *e += r;
        }
        Ok(eps)
    }

    fn state_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.base.state_hash().hash(&mut h);
        for v in self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2) {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn boxed_clone(&self) -> Box<dyn Denoiser> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DeltaTargetDenoiser;

    fn model(lr: f64) -> ResidualScoreModel {
        let base = DeltaTargetDenoiser::new(Latent::filled([3, 4, 4], 0.5), NoiseSchedule::default());
        ResidualScoreModel::new(Box::new(base), [3, 4, 4], 32, 1000, lr, 7)
    }

    #[test]
    fn init_matches_base_exactly() {
        let m = model(1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Latent::from_data([3, 4, 4], (0..48).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let cond = DenoiserCondition::default();
        assert_eq!(m.predict(&z, 400, &cond).unwrap(), m.base().predict(&z, 400, &cond).unwrap());
        assert!(m.residual(&z, 400, &cond).unwrap().data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn initial_loss_is_base_loss() {
        let mut m = model(1e-3);
        let render = Latent::filled([3, 4, 4], 0.2);
        let schedule = NoiseSchedule::default();
        let cond = DenoiserCondition::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut replay = rng.clone();
        let loss = m.train_residual_step(&render, &cond, &schedule, &mut rng).unwrap();
        let s = TimestepSample::draw(&mut replay, [3, 4, 4], &m.timesteps, &schedule);
        let noisy = add_noise(&render, &s, &schedule).unwrap();
        let base = m.base().predict(&noisy, s.t, &cond).unwrap();
        let expected: f64 = base.data.iter().zip(&s.eps.data).map(|(a, b)| (a - b) * (a - b)).sum();
        assert_eq!(loss, expected);
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let mut m = model(0.0);
        let before = m.state_hash();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            m.train_residual_step(&Latent::filled([3, 4, 4], 0.1), &DenoiserCondition::default(), &NoiseSchedule::default(), &mut rng)
                .unwrap();
        }
        assert_eq!(m.state_hash(), before);
    }

    #[test]
    fn embeddings_are_bounded() {
        for t in [1, 20, 500, 1000] {
            assert!(time_embedding(t, 1000).iter().all(|v| v.abs() <= 1.0));
        }
        assert_eq!(camera_embedding(None), [0.0; 6]);
    }
}
