//! Textural guidance and masked repaint for intensity patches.
//!
//! Texture latents are flattened intensity patches in normalized units. The
//! sampler steers the mean in-mask intensity toward a target and, at every
//! reverse step, replaces the outside-mask voxels with a forward-noised copy
//! of the clean background.

use serde::{Deserialize, Serialize};

use crate::diffusion::{
    denoise_eps, forward_diffuse, initial_state, predict_x0, step_seed, DenoiserBackend, LatentState, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::guidance::{guided_step, GuidanceConfig};
use crate::rng::{derive_seed, seeded, standard_normal, stream};
use crate::sdf::{binarize, make_shape, voxel_count, BinaryMask, Dims, ShapeParams};

const RANGE_TOL: f64 = 1e-6;

/// Normalized intensity patch, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub dims: Dims,
    pub spacing: f64,
    pub values: Vec<f64>,
    /// Raw-unit window the normalization maps from, if known.
    pub window_center: Option<f64>,
    pub window_width: Option<f64>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != voxel_count(dims) {
            return Err(Error::DimMismatch(format!("{} values for dims {dims:?}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(v.abs() <= 1.0 + RANGE_TOL)) {
            return Err(Error::Config(format!("intensity {v} outside [-1, 1]")));
        }
        Ok(Self { dims, spacing, values, window_center: None, window_width: None })
    }

    pub fn with_window(mut self, center: f64, width: f64) -> Self {
        self.window_center = Some(center);
        self.window_width = Some(width);
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A denoiser over flattened patches of a fixed size.
#[derive(Clone, Debug, PartialEq)]
pub struct TexturePrior {
    pub backend: DenoiserBackend,
    pub patch_dims: Dims,
}

impl TexturePrior {
    pub fn new(backend: DenoiserBackend, patch_dims: Dims) -> Result<Self> {
        if backend.latent_dim() != voxel_count(patch_dims) {
            return Err(Error::DimMismatch(format!(
                "backend latent {} vs patch {:?}",
                backend.latent_dim(),
                patch_dims
            )));
        }
        Ok(Self { backend, patch_dims })
    }
}

fn check_mask(len: usize, mask: &BinaryMask) -> Result<usize> {
    if mask.len() != len {
        return Err(Error::DimMismatch(format!("mask has {} voxels, field has {len}", mask.len())));
    }
    match mask.count() {
        0 => Err(Error::EmptyMask),
        n => Ok(n),
    }
}

/// Mean of `values` over the mask voxels.
pub fn masked_mean(values: &[f64], mask: &BinaryMask) -> Result<f64> {
    let n = check_mask(values.len(), mask)?;
    let sum: f64 = values.iter().zip(&mask.values).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    Ok(sum / n as f64)
}

/// Signal intensity: mean normalized intensity inside the mask.
pub fn signal_intensity(x: &Volume, mask: &BinaryMask) -> Result<f64> {
    if x.dims != mask.dims {
        return Err(Error::DimMismatch(format!("volume {:?} vs mask {:?}", x.dims, mask.dims)));
    }
    masked_mean(&x.values, mask)
}

/// `(SI(x0_hat) - si_target)^2`.
pub fn tg_loss(x0_hat: &[f64], mask: &BinaryMask, si_target: f64) -> Result<f64> {
    Ok((masked_mean(x0_hat, mask)? - si_target).powi(2))
}

/// `grad_{x0_hat}` of [`tg_loss`]: `2 (SI - target) / |M|` on the mask.
pub fn tg_loss_grad_x0(x0_hat: &[f64], mask: &BinaryMask, si_target: f64) -> Result<Vec<f64>> {
    let n = check_mask(x0_hat.len(), mask)?;
    let si = masked_mean(x0_hat, mask)?;
    let g = 2.0 * (si - si_target) / n as f64;
    Ok(mask.values.iter().map(|&m| if m { g } else { 0.0 }).collect())
}

/// `grad_{x_t}` of the TG loss with the noise prediction held fixed.
pub fn tg_loss_grad(
    x_t: &LatentState,
    mask: &BinaryMask,
    si_target: f64,
    schedule: &NoiseSchedule,
    backend: &DenoiserBackend,
) -> Result<Vec<f64>> {
    check_mask(x_t.values.len(), mask)?;
    let eps = denoise_eps(backend, x_t, schedule)?;
    let x0_hat = predict_x0(x_t, &eps, schedule)?;
    let chain = 1.0 / schedule.alpha_bar[x_t.t].sqrt();
    let mut g = tg_loss_grad_x0(&x0_hat, mask, si_target)?;
    g.iter_mut().for_each(|v| *v *= chain);
    Ok(g)
}

/// Keep `x_fg` on the mask and a background noised to `x_fg.t` elsewhere.
/// At `t = 0` the background branch is the clean background.
pub fn repaint_blend(
    x_fg: &LatentState,
    background: &Volume,
    mask: &BinaryMask,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<LatentState> {
    if x_fg.values.len() != background.len() || mask.len() != background.len() {
        return Err(Error::DimMismatch(format!(
            "foreground {}, background {}, mask {}",
            x_fg.values.len(),
            background.len(),
            mask.len()
        )));
    }
    let bg = if x_fg.t == 0 {
        background.values.clone()
    } else {
        forward_diffuse(&background.values, x_fg.t, schedule, seed)?.values
    };
    let values = x_fg
        .values
        .iter()
        .zip(bg)
        .zip(&mask.values)
        .map(|((&f, b), &m)| if m { f } else { b })
        .collect();
    Ok(LatentState { values, t: x_fg.t })
}

/// One forward transition `x_{t-1} -> x_t`.
fn renoise_one_step(x: &LatentState, schedule: &NoiseSchedule, seed: u64) -> LatentState {
    let t = x.t + 1;
    let a = schedule.alpha[t];
    let z = standard_normal(&mut seeded(seed), x.values.len());
    let values = x.values.iter().zip(z).map(|(v, z)| a.sqrt() * v + (1.0 - a).sqrt() * z).collect();
    LatentState { values, t }
}

/// Guided texture synthesis inside `mask` over a preserved background.
///
/// With `si_target = None` (or `gamma0 = 0`) no textural guidance is applied.
/// `n_resample > 1` repeats each step after jumping one step forward again.
pub fn synthesize_texture(
    prior: &TexturePrior,
    background: &Volume,
    mask: &BinaryMask,
    si_target: Option<f64>,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    n_resample: usize,
) -> Result<Volume> {
    if background.dims != prior.patch_dims || mask.dims != prior.patch_dims {
        return Err(Error::DimMismatch(format!(
            "patch {:?}, background {:?}, mask {:?}",
            prior.patch_dims, background.dims, mask.dims
        )));
    }
    check_mask(background.len(), mask)?;
    if n_resample == 0 {
        return Err(Error::Config("n_resample must be at least 1".into()));
    }
    cfg.validate(schedule.timesteps())?;
    let backend = &prior.backend;
    let mut x = initial_state(backend.latent_dim(), schedule, seed);
    while x.t > 0 {
        let t = x.t;
        let gamma = si_target.map_or(0.0, |_| cfg.gamma(t, schedule));
        let mut round = 0;
        loop {
            let (s_seed, bg_seed) = if round == 0 {
                (step_seed(seed, t), derive_seed(seed, stream::BACKGROUND, t as u64 - 1))
            } else {
                let r = derive_seed(seed, stream::RESAMPLE, t as u64);
                (derive_seed(r, stream::ANCESTRAL, round), derive_seed(r, stream::BACKGROUND, round))
            };
            let stepped = guided_step(
                backend,
                &x,
                schedule,
                gamma,
                |s| tg_loss_grad(s, mask, si_target.expect("gamma > 0 implies a target"), schedule, backend),
                s_seed,
            )?;
            let blended = repaint_blend(&stepped, background, mask, schedule, bg_seed)?;
            round += 1;
            if round as usize >= n_resample {
                x = blended;
                break;
            }
            let jump = derive_seed(derive_seed(seed, stream::RESAMPLE, t as u64), stream::INIT, round);
            x = renoise_one_step(&blended, schedule, jump);
        }
    }
    let values = x
        .values
        .iter()
        .zip(&background.values)
        .zip(&mask.values)
        .map(|((&v, &b), &m)| if m { v.clamp(-1.0, 1.0) } else { b })
        .collect();
    Ok(Volume { values, ..background.clone() })
}

/// Procedural stand-in for a CT patch: smooth base, band-limited noise and a
/// darker tube running along z, min-max normalized to `[-1, 1]`.
pub fn make_toy_background(dims: Dims, spacing: f64, seed: u64) -> Result<Volume> {
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::Config(format!("background dims {dims:?} below 8^3")));
    }
    use rand::Rng as _;
    let mut rng = seeded(derive_seed(seed, stream::BACKGROUND, u64::MAX));
    let ext: Vec<f64> = dims.iter().map(|&d| d as f64).collect();
    let tau = std::f64::consts::TAU;

    let mut waves = Vec::new();
    // low-frequency base
    for _ in 0..3 {
        let k: [f64; 3] = std::array::from_fn(|a| rng.random_range(-1.0..1.0) * tau / ext[a]);
        waves.push((k, rng.random_range(0.0..tau), 0.5));
    }
    // band-limited texture
    for _ in 0..24 {
        let f = rng.random_range(2.0..5.0);
        let dir = standard_normal(&mut rng, 3);
        let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
        let k: [f64; 3] = std::array::from_fn(|a| dir[a] / n * f * tau / ext[a]);
        waves.push((k, rng.random_range(0.0..tau), 0.08));
    }
    let cx = ext[0] * rng.random_range(0.3..0.7);
    let cy = ext[1] * rng.random_range(0.3..0.7);
    let radius = ext[0].min(ext[1]) / 8.0;
    let wobble = rng.random_range(0.0..tau);

    let mut values = Vec::with_capacity(voxel_count(dims));
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let mut v: f64 =
                    waves.iter().map(|(k, phase, amp)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos()).sum();
                let sway = 0.1 * ext[0] * (tau * p[2] / ext[2] + wobble).sin();
                let r2 = (p[0] - cx - sway).powi(2) + (p[1] - cy).powi(2);
                v -= 1.2 * (-r2 / (radius * radius)).exp();
                values.push(v);
            }
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    values.iter_mut().for_each(|v| *v = (2.0 * (*v - lo) / span - 1.0).clamp(-1.0, 1.0));
    Ok(Volume::new(dims, spacing, values)?.with_window(40.0, 400.0))
}

/// Training patch: a toy background with a lesion of mean level `level`
/// (plus mild texture) painted inside `mask`.
pub fn make_toy_lesion_patch(mask: &BinaryMask, level: f64, seed: u64) -> Result<Volume> {
    let mut v = make_toy_background(mask.dims, mask.spacing, seed)?;
    let noise = standard_normal(&mut seeded(derive_seed(seed, stream::BACKGROUND, 0x1e5)), v.len());
    for ((val, &m), n) in v.values.iter_mut().zip(&mask.values).zip(noise) {
        if m {
            *val = (level + 0.05 * n).clamp(-1.0, 1.0);
        }
    }
    Ok(v)
}

/// Crops `mask` to its bounding box and places it inside a patch of
/// `patch_dims` at `offset`, or at a seeded uniform offset within
/// `offset_box` (inclusive, default: every position that fits).
pub fn place_mask(
    mask: &BinaryMask,
    patch_dims: Dims,
    offset: Option<[usize; 3]>,
    offset_box: Option<[[usize; 3]; 2]>,
    seed: u64,
) -> Result<(BinaryMask, [usize; 3])> {
    let crop = mask.crop_to_content().ok_or(Error::EmptyMask)?;
    let mut room = [0usize; 3];
    for a in 0..3 {
        if crop.dims[a] > patch_dims[a] {
            return Err(Error::ShapeTooLarge);
        }
        room[a] = patch_dims[a] - crop.dims[a];
    }
    let offset = match offset {
        Some(o) => o,
        None => {
            use rand::Rng as _;
            let [lo, hi] = offset_box.unwrap_or([[0; 3], room]);
            let mut rng = seeded(derive_seed(seed, stream::PLACEMENT, 0));
            let mut o = [0; 3];
            for a in 0..3 {
                let (l, h) = (lo[a].min(room[a]), hi[a].min(room[a]));
                if l > h {
                    return Err(Error::Config(format!("empty offset range on axis {a}")));
                }
                o[a] = rng.random_range(l..=h);
            }
            o
        }
    };
    if (0..3).any(|a| offset[a] > room[a]) {
        return Err(Error::Config(format!("offset {offset:?} does not fit a {:?} mask in {patch_dims:?}", crop.dims)));
    }
    let mut placed = BinaryMask::empty(patch_dims, mask.spacing);
    for z in 0..crop.dims[2] {
        for y in 0..crop.dims[1] {
            for x in 0..crop.dims[0] {
                if crop.get(x, y, z) {
                    placed.set(x + offset[0], y + offset[1], z + offset[2], true);
                }
            }
        }
    }
    Ok((placed, offset))
}

/// Where a lesion mask goes inside the background patch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Placement {
    pub offset: Option<[usize; 3]>,
    /// Inclusive `[min, max]` corner range for seeded offsets.
    pub offset_box: Option<[[usize; 3]; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub volume: Volume,
    /// The lesion mask in patch coordinates.
    pub mask: BinaryMask,
    pub offset: [usize; 3],
}

/// Places `mask` in the background patch and synthesizes its texture.
pub fn synthesize_volume(
    prior: &TexturePrior,
    background: &Volume,
    mask: &BinaryMask,
    placement: &Placement,
    si_target: Option<f64>,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    n_resample: usize,
) -> Result<VolumeSample> {
    let (placed, offset) = place_mask(mask, background.dims, placement.offset, placement.offset_box, seed)?;
    let volume = synthesize_texture(prior, background, &placed, si_target, cfg, schedule, seed, n_resample)?;
    Ok(VolumeSample { volume, mask: placed, offset })
}

/// Lesion-bearing training patches: toy backgrounds with a small random
/// ellipsoidal lesion at a uniform level in `levels`.
pub fn toy_lesion_dataset(count: usize, patch_dims: Dims, levels: [f64; 2], seed: u64) -> Result<Vec<Volume>> {
    use rand::Rng as _;
    (0..count)
        .map(|i| {
            let item = derive_seed(seed, stream::BACKGROUND, i as u64);
            let mut rng = seeded(item);
            let n = patch_dims.iter().copied().min().unwrap_or(0) as f64;
            let semi_axes: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.12..=0.25) * n);
            let center: [f64; 3] = std::array::from_fn(|a| {
                let r = semi_axes[a] + 2.0;
                rng.random_range(r..=(patch_dims[a] as f64 - 1.0 - r).max(r))
            });
            let sdf = make_shape(&ShapeParams::Ellipsoid { center, semi_axes }, patch_dims, 1.0, 0)?;
            let level = rng.random_range(levels[0]..=levels[1]);
            make_toy_lesion_patch(&binarize(&sdf, 0.0), level, item)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample, GaussianMixture, ScheduleConfig};
    use proptest::prelude::*;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap()
    }

    fn ball(dims: Dims, r: f64) -> BinaryMask {
        let c = [(dims[0] as f64 - 1.0) / 2.0, (dims[1] as f64 - 1.0) / 2.0, (dims[2] as f64 - 1.0) / 2.0];
        BinaryMask::from_fn(dims, 1.0, |x, y, z| {
            (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2) <= r * r
        })
    }

    #[test]
    fn si_examples() {
        let dims = [4, 4, 4];
        let v = Volume::new(dims, 1.0, vec![0.3; 64]).unwrap();
        assert!((signal_intensity(&v, &ball(dims, 1.5)).unwrap() - 0.3).abs() < 1e-15);
        let mut vals = vec![0.0; 64];
        vals[0] = -1.0;
        vals[5] = 1.0;
        let mut m = BinaryMask::empty(dims, 1.0);
        m.values[0] = true;
        m.values[5] = true;
        assert_eq!(signal_intensity(&Volume::new(dims, 1.0, vals).unwrap(), &m).unwrap(), 0.0);
        assert!(matches!(signal_intensity(&v, &BinaryMask::empty(dims, 1.0)), Err(Error::EmptyMask)));
        assert!(matches!(signal_intensity(&v, &BinaryMask::empty([4, 4, 5], 1.0)), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn tg_gradient_support_and_zero() {
        let dims = [6, 6, 6];
        let mask = ball(dims, 2.0);
        let x: Vec<f64> = (0..216).map(|i| (i as f64 * 0.1).sin()).collect();
        let g = tg_loss_grad_x0(&x, &mask, 0.7).unwrap();
        for (gi, &m) in g.iter().zip(&mask.values) {
            assert_eq!(*gi != 0.0, m);
        }
        let si = masked_mean(&x, &mask).unwrap();
        assert!(tg_loss_grad_x0(&x, &mask, si).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn repaint_partitions() {
        let s = schedule();
        let dims = [8, 8, 8];
        let bg = make_toy_background(dims, 1.0, 3).unwrap();
        let fg = LatentState::new(standard_normal(&mut seeded(1), 512), 0);
        let full = BinaryMask::from_fn(dims, 1.0, |_, _, _| true);
        assert_eq!(repaint_blend(&fg, &bg, &full, &s, 5).unwrap(), fg);
        let none = BinaryMask::empty(dims, 1.0);
        assert_eq!(repaint_blend(&fg, &bg, &none, &s, 5).unwrap().values, bg.values);
        let mask = ball(dims, 2.5);
        let noisy = LatentState::new(fg.values.clone(), 40);
        let out = repaint_blend(&noisy, &bg, &mask, &s, 5).unwrap();
        let bg40 = forward_diffuse(&bg.values, 40, &s, 5).unwrap().values;
        for i in 0..512 {
            assert_eq!(out.values[i], if mask.values[i] { fg.values[i] } else { bg40[i] });
        }
    }

    fn tiny_prior(dims: Dims, mask: &BinaryMask) -> TexturePrior {
        let patches: Vec<Vec<f64>> = (0..6)
            .map(|i| make_toy_lesion_patch(mask, -0.5 + 0.25 * i as f64, 100 + i).unwrap().values)
            .collect();
        let g = GaussianMixture::from_samples(patches, 0.02).unwrap();
        TexturePrior::new(DenoiserBackend::GmmOracle(g), dims).unwrap()
    }

    #[test]
    fn background_preserved_and_deterministic() {
        let s = NoiseSchedule::linear(40, 1e-3, 0.2).unwrap();
        let dims = [8, 8, 8];
        let mask = ball(dims, 2.5);
        let prior = tiny_prior(dims, &mask);
        let bg = make_toy_background(dims, 1.0, 77).unwrap();
        let cfg = GuidanceConfig { gamma0: 5.0, ..Default::default() };
        for n_resample in [1, 3] {
            let a = synthesize_texture(&prior, &bg, &mask, Some(0.4), &cfg, &s, 9, n_resample).unwrap();
            let b = synthesize_texture(&prior, &bg, &mask, Some(0.4), &cfg, &s, 9, n_resample).unwrap();
            assert_eq!(a, b);
            for i in 0..a.len() {
                if !mask.values[i] {
                    assert_eq!(a.values[i].to_bits(), bg.values[i].to_bits());
                }
                assert!(a.values[i].abs() <= 1.0);
            }
        }
    }

    #[test]
    fn full_mask_without_guidance_is_plain_sampling() {
        let s = NoiseSchedule::linear(40, 1e-3, 0.2).unwrap();
        let dims = [8, 8, 8];
        let mask = ball(dims, 2.5);
        let prior = tiny_prior(dims, &mask);
        let full = BinaryMask::from_fn(dims, 1.0, |_, _, _| true);
        let bg = make_toy_background(dims, 1.0, 1).unwrap();
        let cfg = GuidanceConfig::default();
        let out = synthesize_texture(&prior, &bg, &full, Some(0.2), &cfg, &s, 4, 1).unwrap();
        let plain = sample(&prior.backend, &s, 4).unwrap();
        let clamped: Vec<f64> = plain.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        assert_eq!(out.values, clamped);
    }

    #[test]
    fn toy_background_properties() {
        let a = make_toy_background([16, 16, 16], 1.0, 5).unwrap();
        assert_eq!(a, make_toy_background([16, 16, 16], 1.0, 5).unwrap());
        assert_ne!(a.values, make_toy_background([16, 16, 16], 1.0, 6).unwrap().values);
        assert!(a.values.iter().all(|v| v.abs() <= 1.0));
        assert!(make_toy_background([4, 16, 16], 1.0, 5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn si_is_masked_mean(seed in 0u64..1000, density in 0.05f64..0.95) {
            use rand::Rng as _;
            let dims = [6, 5, 4];
            let mut rng = seeded(seed);
            let values: Vec<f64> = (0..120).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut mask = BinaryMask::from_fn(dims, 1.0, |_, _, _| rng.random_bool(density));
            mask.values[0] = true;
            let v = Volume::new(dims, 1.0, values.clone()).unwrap();
            let (mut sum, mut n) = (0.0, 0);
            for i in 0..120 {
                if mask.values[i] { sum += values[i]; n += 1; }
            }
            prop_assert!((signal_intensity(&v, &mask).unwrap() - sum / n as f64).abs() < 1e-12);
        }
    }
}
