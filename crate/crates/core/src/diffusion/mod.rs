//! DDPM machinery in the epsilon parameterisation.
//!
//! Timesteps index the schedule arrays, `t` in `[0, T-1]`. A reverse
//! trajectory starts from `x_{T-1} ~ N(0, I)` and applies
//! [`ancestral_step`] for `t = T-1, ..., 1`; the last step adds no noise and
//! its output `x_0` is the generated sample. The posterior at step `t` uses
//! `alpha_bar_{t-1}`, with `alpha_bar_{-1} = 1`.

mod checkpoint;
mod gmm;
mod net;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, standard_normal, stream};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gmm::GaussianMixture;
pub use net::{time_embedding, train_denoiser, Activation, EpsNet, NetConfig, Optimizer, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 200, beta_start: 1e-4, beta_end: 0.04 }
    }
}

/// Linear beta schedule with cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::BadSchedule(format!("need at least 2 timesteps, got {timesteps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::BadSchedule(format!(
                "betas must satisfy 0 < start < end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let step = (beta_end - beta_start) / (timesteps - 1) as f64;
        let beta: Vec<f64> = (0..timesteps).map(|t| beta_start + step * t as f64).collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let last = alpha_bar[timesteps - 1];
        if last >= 0.05 {
            return Err(Error::BadSchedule(format!(
                "alpha_bar[T-1] = {last:.4} leaves too much signal (must be < 0.05)"
            )));
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::BadTimestep { t, min: 0, max: self.timesteps() - 1 });
        }
        Ok(())
    }

    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior variance `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta[t] * (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar[t])
    }
}

/// A (flattened) latent at timestep `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub values: Vec<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(values: Vec<f64>, t: usize) -> Self {
        Self { values, t }
    }
}

/// Pluggable noise predictor.
#[derive(Clone, Debug, PartialEq)]
pub enum DenoiserBackend {
    GmmOracle(GaussianMixture),
    TrainedNet(EpsNet),
}

impl DenoiserBackend {
    pub fn latent_dim(&self) -> usize {
        match self {
            Self::GmmOracle(g) => g.latent_dim(),
            Self::TrainedNet(n) => n.latent_dim(),
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Self::GmmOracle(_) => "gmm_oracle",
            Self::TrainedNet(_) => "trained_net",
        }
    }
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps` with a supplied `eps`.
pub fn forward_diffuse_with_noise(x0: &[f64], t: usize, schedule: &NoiseSchedule, eps: &[f64]) -> Result<LatentState> {
    schedule.check(t)?;
    if eps.len() != x0.len() {
        return Err(Error::DimMismatch(format!("noise length {} vs latent {}", eps.len(), x0.len())));
    }
    let ab = schedule.alpha_bar[t];
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect();
    Ok(LatentState { values, t })
}

/// Forward process sample with `eps ~ N(0, I)` drawn from `seed`.
pub fn forward_diffuse(x0: &[f64], t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<LatentState> {
    let eps = standard_normal(&mut seeded(seed), x0.len());
    forward_diffuse_with_noise(x0, t, schedule, &eps)
}

/// `x0_hat = (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`.
pub fn predict_x0(x_t: &LatentState, eps_hat: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check(x_t.t)?;
    let ab = schedule.alpha_bar[x_t.t];
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.values.iter().zip(eps_hat).map(|(x, e)| (x - n * e) / s).collect())
}

/// Noise prediction for `x_t`.
pub fn denoise_eps(backend: &DenoiserBackend, x_t: &LatentState, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check(x_t.t)?;
    if x_t.values.len() != backend.latent_dim() {
        return Err(Error::DimMismatch(format!(
            "latent length {} vs backend {}",
            x_t.values.len(),
            backend.latent_dim()
        )));
    }
    Ok(match backend {
        DenoiserBackend::GmmOracle(g) => g.eps(&x_t.values, schedule.alpha_bar[x_t.t]),
        DenoiserBackend::TrainedNet(n) => n.predict(&x_t.values, x_t.t),
    })
}

/// Posterior mean `(x_t - beta_t / sqrt(1 - ab_t) eps_hat) / sqrt(alpha_t)`.
pub fn posterior_mean(x_t: &LatentState, eps_hat: &[f64], schedule: &NoiseSchedule) -> Vec<f64> {
    let t = x_t.t;
    let coef = schedule.beta[t] / (1.0 - schedule.alpha_bar[t]).sqrt();
    let inv = 1.0 / schedule.alpha[t].sqrt();
    x_t.values.iter().zip(eps_hat).map(|(x, e)| inv * (x - coef * e)).collect()
}

/// One reverse step `x_t -> x_{t-1}`; deterministic at `t = 1`.
pub fn ancestral_step(backend: &DenoiserBackend, x_t: &LatentState, schedule: &NoiseSchedule, seed: u64) -> Result<LatentState> {
    if x_t.t < 1 {
        return Err(Error::BadTimestep { t: x_t.t, min: 1, max: schedule.timesteps() - 1 });
    }
    let eps_hat = denoise_eps(backend, x_t, schedule)?;
    let mut values = posterior_mean(x_t, &eps_hat, schedule);
    if x_t.t > 1 {
        let sigma = schedule.posterior_variance(x_t.t).sqrt();
        let z = standard_normal(&mut seeded(seed), values.len());
        values.iter_mut().zip(&z).for_each(|(v, z)| *v += sigma * z);
    }
    Ok(LatentState { values, t: x_t.t - 1 })
}

/// Initial state `x_{T-1} ~ N(0, I)` of a trajectory seeded with `seed`.
pub fn initial_state(latent_dim: usize, schedule: &NoiseSchedule, seed: u64) -> LatentState {
    let values = standard_normal(&mut seeded(derive_seed(seed, stream::INIT, 0)), latent_dim);
    LatentState { values, t: schedule.timesteps() - 1 }
}

/// Seed of the ancestral noise drawn when stepping away from `t`.
pub fn step_seed(seed: u64, t: usize) -> u64 {
    derive_seed(seed, stream::ANCESTRAL, t as u64)
}

/// Full unguided reverse trajectory; returns `x_0`.
pub fn sample(backend: &DenoiserBackend, schedule: &NoiseSchedule, seed: u64) -> Result<Vec<f64>> {
    let mut x = initial_state(backend.latent_dim(), schedule, seed);
    while x.t > 0 {
        x = ancestral_step(backend, &x, schedule, step_seed(seed, x.t))?;
    }
    Ok(x.values)
}
