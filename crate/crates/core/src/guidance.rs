//! Anatomical guidance: loss-guided reverse diffusion toward a target shape
//! latent and a target Curvature Index.
//!
//! At each step inside the guidance window the sampler estimates the clean
//! latent `x0_hat` from `x_t`, evaluates
//!
//! ```text
//! L_AG = lambda1 |x0_hat - s_target|^2 + lambda2 (CI(decode(x0_hat)) - ci_target)^2
//! ```
//!
//! averaged over Monte Carlo draws around `x0_hat`, and moves
//! `x~_t = x_t - eta_t grad_{x_t} L_AG` before the ancestral step. The noise
//! prediction is held constant when differentiating, so
//! `d x0_hat / d x_t = 1 / sqrt(alpha_bar_t)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ancestral_step, denoise_eps, initial_state, predict_x0, step_seed, DenoiserBackend, LatentState, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::latent::LatentCodec;
use crate::rng::{derive_seed, seeded, standard_normal, stream};
use crate::sdf::{
    binarize, curvature_index, curvature_index_with, refine, BandSelection, BinaryMask, SdfGrid, DEFAULT_EPS_GRAD,
};

/// How the guidance step size follows the noise level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// `scale_t = scale0 * (1 - alpha_bar_t)`
    NoiseScaled,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonteCarloMode {
    /// A single draw at `x0_hat` itself.
    Deterministic,
    /// `mc_samples` draws `x0_hat + mc_jitter * sqrt((1 - ab) / ab) * z`.
    Stochastic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub eta0: f64,
    pub gamma0: f64,
    pub mc_samples: usize,
    pub mc_mode: MonteCarloMode,
    pub mc_jitter: f64,
    pub s_target: Option<Vec<f64>>,
    pub ci_target: Option<f64>,
    pub si_target: Option<f64>,
    /// Latest (noisiest) guided timestep; defaults to `0.8 T`.
    pub guidance_start_t: Option<usize>,
    /// Earliest guided timestep; defaults to `0.1 T`.
    pub guidance_end_t: Option<usize>,
    pub step_schedule: StepSchedule,
    /// Narrow band half-width for the Curvature Index, in voxels.
    pub ci_band: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            eta0: 0.0,
            gamma0: 0.0,
            mc_samples: 4,
            mc_mode: MonteCarloMode::Stochastic,
            mc_jitter: 0.1,
            s_target: None,
            ci_target: None,
            si_target: None,
            guidance_start_t: None,
            guidance_end_t: None,
            step_schedule: StepSchedule::NoiseScaled,
            ci_band: crate::sdf::DEFAULT_BAND_FACTOR,
        }
    }
}

impl GuidanceConfig {
    /// Guided timesteps `[end, start]` for a schedule of `timesteps` steps.
    pub fn window(&self, timesteps: usize) -> (usize, usize) {
        let start = self.guidance_start_t.unwrap_or((0.8 * timesteps as f64).round() as usize);
        let end = self.guidance_end_t.unwrap_or((0.1 * timesteps as f64).round() as usize);
        (end, start)
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        let (end, start) = self.window(timesteps);
        if start > timesteps || end > start {
            return Err(Error::Config(format!("guidance window [{end}, {start}] outside [0, {timesteps}]")));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("eta0", self.eta0), ("gamma0", self.gamma0), ("mc_jitter", self.mc_jitter)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        if !(self.ci_band > 0.0) {
            return Err(Error::Config("ci_band must be positive".into()));
        }
        self.check_targets()
    }

    pub fn check_targets(&self) -> Result<()> {
        if self.lambda1 > 0.0 && self.s_target.is_none() {
            return Err(Error::MissingTarget("s_target"));
        }
        if self.lambda2 > 0.0 && self.ci_target.is_none() {
            return Err(Error::MissingTarget("ci_target"));
        }
        Ok(())
    }

    fn scaled(&self, scale0: f64, t: usize, schedule: &NoiseSchedule) -> f64 {
        let (end, start) = self.window(schedule.timesteps());
        if scale0 == 0.0 || t < end || t > start {
            return 0.0;
        }
        match self.step_schedule {
            StepSchedule::NoiseScaled => scale0 * (1.0 - schedule.alpha_bar[t]),
            StepSchedule::Constant => scale0,
        }
    }

    /// Anatomical step size `eta_t`; zero outside the window.
    pub fn eta(&self, t: usize, schedule: &NoiseSchedule) -> f64 {
        self.scaled(self.eta0, t, schedule)
    }

    /// Textural step size `gamma_t`; zero outside the window.
    pub fn gamma(&self, t: usize, schedule: &NoiseSchedule) -> f64 {
        self.scaled(self.gamma0, t, schedule)
    }

    fn band(&self, spacing: f64) -> f64 {
        self.ci_band * spacing
    }

    fn draws(&self) -> usize {
        match self.mc_mode {
            MonteCarloMode::Deterministic => 1,
            MonteCarloMode::Stochastic => self.mc_samples,
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn shape_term(x0_hat: &[f64], cfg: &GuidanceConfig) -> Result<f64> {
    if cfg.lambda1 == 0.0 {
        return Ok(0.0);
    }
    let target = cfg.s_target.as_ref().ok_or(Error::MissingTarget("s_target"))?;
    if target.len() != x0_hat.len() {
        return Err(Error::DimMismatch(format!("s_target length {} vs latent {}", target.len(), x0_hat.len())));
    }
    Ok(cfg.lambda1 * squared_distance(x0_hat, target))
}

/// `L_AG` at a clean-latent estimate.
pub fn ag_loss(x0_hat: &[f64], cfg: &GuidanceConfig, codec: &LatentCodec) -> Result<f64> {
    cfg.check_targets()?;
    let mut loss = shape_term(x0_hat, cfg)?;
    if cfg.lambda2 > 0.0 {
        let grid = codec.decode(x0_hat)?;
        let ci = curvature_index(&grid, cfg.band(grid.spacing))?;
        loss += cfg.lambda2 * (ci - cfg.ci_target.expect("checked")).powi(2);
    }
    Ok(loss)
}

/// `L_AG` with the Curvature Index evaluated over a fixed band selection.
pub fn ag_loss_with_band(x0_hat: &[f64], cfg: &GuidanceConfig, codec: &LatentCodec, band: &BandSelection) -> Result<f64> {
    cfg.check_targets()?;
    let mut loss = shape_term(x0_hat, cfg)?;
    if cfg.lambda2 > 0.0 {
        let grid = codec.decode(x0_hat)?;
        let ci = curvature_index_with(&grid, band);
        loss += cfg.lambda2 * (ci - cfg.ci_target.expect("checked")).powi(2);
    }
    Ok(loss)
}

/// `grad_{x0_hat} L_AG`. A decoded grid without a valid narrow band
/// contributes no curvature gradient.
pub fn ag_loss_grad_x0(x0_hat: &[f64], cfg: &GuidanceConfig, codec: &LatentCodec) -> Result<Vec<f64>> {
    cfg.check_targets()?;
    let mut grad = vec![0.0; x0_hat.len()];
    if cfg.lambda1 > 0.0 {
        let target = cfg.s_target.as_ref().expect("checked");
        if target.len() != x0_hat.len() {
            return Err(Error::DimMismatch(format!("s_target length {} vs latent {}", target.len(), x0_hat.len())));
        }
        for ((g, x), s) in grad.iter_mut().zip(x0_hat).zip(target) {
            *g = 2.0 * cfg.lambda1 * (x - s);
        }
    }
    if cfg.lambda2 > 0.0 {
        let grid = codec.decode(x0_hat)?;
        match BandSelection::new(&grid, cfg.band(grid.spacing), DEFAULT_EPS_GRAD) {
            Ok(band) => {
                let ci = curvature_index_with(&grid, &band);
                let outer = 2.0 * cfg.lambda2 * (ci - cfg.ci_target.expect("checked"));
                let grid_grad = crate::sdf::curvature_index_grad_with(&grid, &band);
                let latent_grad = codec.decode_transpose(&grid_grad.values)?;
                grad.iter_mut().zip(latent_grad).for_each(|(g, d)| *g += outer * d);
            }
            Err(Error::EmptyBand { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(grad)
}

/// Monte Carlo clean-latent draws around `x0_hat` at timestep `t`.
pub fn mc_draws(x0_hat: &[f64], t: usize, cfg: &GuidanceConfig, schedule: &NoiseSchedule, seed: u64) -> Vec<Vec<f64>> {
    match cfg.mc_mode {
        MonteCarloMode::Deterministic => vec![x0_hat.to_vec()],
        MonteCarloMode::Stochastic => {
            let ab = schedule.alpha_bar[t];
            let spread = cfg.mc_jitter * ((1.0 - ab) / ab).sqrt();
            (0..cfg.draws())
                .map(|k| {
                    let z = standard_normal(&mut seeded(derive_seed(seed, stream::MONTE_CARLO, k as u64)), x0_hat.len());
                    x0_hat.iter().zip(z).map(|(x, z)| x + spread * z).collect()
                })
                .collect()
        }
    }
}

/// Monte Carlo estimate of `grad_{x_t} E[L_AG(x0_hat)]` under the
/// stop-gradient chain.
pub fn ag_loss_grad(
    x_t: &LatentState,
    backend: &DenoiserBackend,
    cfg: &GuidanceConfig,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    let eps_hat = denoise_eps(backend, x_t, schedule)?;
    let x0_hat = predict_x0(x_t, &eps_hat, schedule)?;
    let draws = mc_draws(&x0_hat, x_t.t, cfg, schedule, seed);
    let chain = 1.0 / schedule.alpha_bar[x_t.t].sqrt() / draws.len() as f64;
    let mut grad = vec![0.0; x0_hat.len()];
    for draw in &draws {
        let g = ag_loss_grad_x0(draw, cfg, codec)?;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += chain * b);
    }
    Ok(grad)
}

/// `x~_t = x_t - step_size * grad(x_t)`, then one ancestral step from `x~_t`.
/// The gradient is not evaluated when `step_size` is zero.
pub fn guided_step<F>(
    backend: &DenoiserBackend,
    x_t: &LatentState,
    schedule: &NoiseSchedule,
    step_size: f64,
    loss_grad: F,
    seed: u64,
) -> Result<LatentState>
where
    F: FnOnce(&LatentState) -> Result<Vec<f64>>,
{
    if x_t.t < 1 {
        return Err(Error::BadTimestep { t: x_t.t, min: 1, max: schedule.timesteps() - 1 });
    }
    if step_size == 0.0 {
        return ancestral_step(backend, x_t, schedule, seed);
    }
    let grad = loss_grad(x_t)?;
    let adjusted = LatentState {
        values: x_t.values.iter().zip(&grad).map(|(x, g)| x - step_size * g).collect(),
        t: x_t.t,
    };
    ancestral_step(backend, &adjusted, schedule, seed)
}

/// Full anatomically guided trajectory; returns the final latent `x_0`.
pub fn sample_guided(
    backend: &DenoiserBackend,
    cfg: &GuidanceConfig,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate(schedule.timesteps())?;
    if codec.latent_dim() != backend.latent_dim() {
        return Err(Error::DimMismatch(format!(
            "codec latent {} vs backend {}",
            codec.latent_dim(),
            backend.latent_dim()
        )));
    }
    let guided = cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0;
    let mut x = initial_state(backend.latent_dim(), schedule, seed);
    while x.t > 0 {
        let t = x.t;
        let eta = if guided { cfg.eta(t, schedule) } else { 0.0 };
        let mc_seed = derive_seed(seed, stream::MONTE_CARLO, t as u64);
        x = guided_step(
            backend,
            &x,
            schedule,
            eta,
            |s| ag_loss_grad(s, backend, cfg, codec, schedule, mc_seed),
            step_seed(seed, t),
        )?;
    }
    Ok(x.values)
}

/// One synthesized lesion mask with its intermediate fields.
#[derive(Clone, Debug)]
pub struct MaskSample {
    pub latent: Vec<f64>,
    /// Decoded field before re-distancing.
    pub decoded: SdfGrid,
    /// Refined signed distance field.
    pub sdf: SdfGrid,
    pub mask: BinaryMask,
    /// Curvature Index of the decoded field.
    pub achieved_ci: f64,
    /// `L_AG` at the final latent, when any guidance term is active.
    pub final_loss: Option<f64>,
}

/// Guided trajectory, decode, refine and binarize.
///
/// An empty (or full) final shape is reported as an error, never retried.
pub fn synthesize_mask(
    backend: &DenoiserBackend,
    cfg: &GuidanceConfig,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    seed: u64,
    refine_passes: usize,
) -> Result<MaskSample> {
    let latent = sample_guided(backend, cfg, codec, schedule, seed)?;
    let decoded = codec.decode(&latent)?;
    let sdf = refine(&decoded, refine_passes)?;
    let mask = binarize(&sdf, 0.0);
    let achieved_ci = curvature_index(&decoded, cfg.band(decoded.spacing))?;
    let final_loss = if cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0 { ag_loss(&latent, cfg, codec).ok() } else { None };
    Ok(MaskSample { latent, decoded, sdf, mask, achieved_ci, final_loss })
}

/// Independent syntheses with seeds `seed_base + i`, fanned out over `jobs`
/// worker threads. Results are in index order and independent of `jobs`.
pub fn synthesize_masks(
    backend: &DenoiserBackend,
    cfg: &GuidanceConfig,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    seed_base: u64,
    count: usize,
    refine_passes: usize,
    jobs: usize,
) -> Result<Vec<Result<MaskSample>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| synthesize_mask(backend, cfg, codec, schedule, seed_base + i as u64, refine_passes))
            .collect()
    }))
}
