use forge_core::diffusion::*;
use forge_core::guidance::*;
use forge_core::latent::{CodecConfig, LatentCodec};
use forge_core::rng::{seeded, standard_normal};
use forge_core::sdf::{BandSelection, SdfGrid, DEFAULT_EPS_GRAD};
use forge_core::Error;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap()
}

fn identity(dims: [usize; 3]) -> LatentCodec {
    LatentCodec::from_config(&CodecConfig::Identity { dims, spacing: 1.0, scale: 1.0 }).unwrap()
}

fn sphere(n: usize, r: f64) -> SdfGrid {
    let c = (n as f64 - 1.0) / 2.0;
    SdfGrid::from_fn([n; 3], 1.0, |p| ((p[0] - c).powi(2) + (p[1] - c).powi(2) + (p[2] - c).powi(2)).sqrt() - r)
}

#[test]
fn sphere_latent_curvature_term_is_small() {
    for r in [6.0, 10.0] {
        let grid = sphere(40, r);
        let codec = identity([40; 3]);
        let target = 2f64.sqrt() / r;
        let cfg = GuidanceConfig { lambda2: 1.0, ci_target: Some(target), ..Default::default() };
        let loss = ag_loss(&codec.encode(&grid).unwrap(), &cfg, &codec).unwrap();
        assert!(loss <= (0.05 * target).powi(2), "r={r}: {loss}");
    }
}

#[test]
fn zero_loss_gives_zero_gradient() {
    let s = schedule();
    let dim = 12;
    let mu = standard_normal(&mut seeded(1), dim);
    let backend = DenoiserBackend::GmmOracle(GaussianMixture::new(vec![mu.clone()], 0.2, vec![1.0]).unwrap());
    let codec = identity([dim, 1, 1]);
    let x_t = forward_diffuse(&mu, 70, &s, 3).unwrap();
    let x0_hat = predict_x0(&x_t, &denoise_eps(&backend, &x_t, &s).unwrap(), &s).unwrap();
    let cfg = GuidanceConfig {
        lambda1: 2.0,
        s_target: Some(x0_hat),
        mc_mode: MonteCarloMode::Deterministic,
        ..Default::default()
    };
    let g = ag_loss_grad(&x_t, &backend, &cfg, &codec, &s, 9).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
    let off = GuidanceConfig::default();
    assert!(ag_loss_grad(&x_t, &backend, &off, &codec, &s, 9).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_gradient_is_closed_form_chain() {
    let s = schedule();
    let dim = 10;
    let g = GaussianMixture::new(vec![vec![1.0; dim], vec![-1.0; dim]], 0.1, vec![0.3, 0.7]).unwrap();
    let backend = DenoiserBackend::GmmOracle(g);
    let codec = identity([dim, 1, 1]);
    let target = standard_normal(&mut seeded(5), dim);
    let cfg = GuidanceConfig {
        lambda1: 0.7,
        s_target: Some(target.clone()),
        mc_mode: MonteCarloMode::Deterministic,
        ..Default::default()
    };
    for t in [1usize, 50, 199] {
        let x_t = LatentState::new(standard_normal(&mut seeded(t as u64), dim), t);
        let x0_hat = predict_x0(&x_t, &denoise_eps(&backend, &x_t, &s).unwrap(), &s).unwrap();
        let grad = ag_loss_grad(&x_t, &backend, &cfg, &codec, &s, 0).unwrap();
        let ab = s.alpha_bar[t];
        for j in 0..dim {
            let exact = 2.0 * 0.7 / ab.sqrt() * (x0_hat[j] - target[j]);
            assert!((grad[j] - exact).abs() <= 1e-10 * exact.abs().max(1.0));
        }
    }
}

#[test]
fn curvature_guidance_matches_frozen_finite_differences() {
    let s = schedule();
    let n = 16;
    let codec = identity([n; 3]);
    let x0 = codec.encode(&sphere(n, 4.6)).unwrap();
    let backend = DenoiserBackend::GmmOracle(GaussianMixture::new(vec![x0.clone()], 0.02, vec![1.0]).unwrap());
    let cfg = GuidanceConfig {
        lambda2: 2.0,
        ci_target: Some(0.1),
        mc_samples: 4,
        mc_mode: MonteCarloMode::Stochastic,
        mc_jitter: 0.02,
        ..Default::default()
    };
    let t = 20;
    let x_t = forward_diffuse(&x0, t, &s, 17).unwrap();
    let grad = ag_loss_grad(&x_t, &backend, &cfg, &codec, &s, 23).unwrap();

    let eps = denoise_eps(&backend, &x_t, &s).unwrap();
    let x0_hat = predict_x0(&x_t, &eps, &s).unwrap();
    let draws = mc_draws(&x0_hat, t, &cfg, &s, 23);
    assert_eq!(draws.len(), 4);
    let offsets: Vec<Vec<f64>> =
        draws.iter().map(|d| d.iter().zip(&x0_hat).map(|(a, b)| a - b).collect()).collect();
    let bands: Vec<BandSelection> = draws
        .iter()
        .map(|d| BandSelection::new(&codec.decode(d).unwrap(), cfg.ci_band, DEFAULT_EPS_GRAD).unwrap())
        .collect();
    let ab = s.alpha_bar[t];
    let mean_loss = |xt: &[f64]| -> f64 {
        let base: Vec<f64> = xt.iter().zip(&eps).map(|(x, e)| (x - (1.0 - ab).sqrt() * e) / ab.sqrt()).collect();
        offsets
            .iter()
            .zip(&bands)
            .map(|(o, b)| {
                let d: Vec<f64> = base.iter().zip(o).map(|(a, b)| a + b).collect();
                ag_loss_with_band(&d, &cfg, &codec, b).unwrap()
            })
            .sum::<f64>()
            / offsets.len() as f64
    };
    let h = 1e-5;
    let mut probe = x_t.values.clone();
    let mut fd = vec![0.0; probe.len()];
    for i in 0..probe.len() {
        let v = probe[i];
        probe[i] = v + h;
        let up = mean_loss(&probe);
        probe[i] = v - h;
        let dn = mean_loss(&probe);
        probe[i] = v;
        fd[i] = (up - dn) / (2.0 * h);
    }
    let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = fd.iter().map(|b| b * b).sum();
    assert!(den > 0.0);
    let err = (num / den).sqrt();
    assert!(err <= 1e-3, "rel L2 {err}");
}

#[test]
fn zero_step_is_unguided_and_steps_descend() {
    let s = schedule();
    let dim = 8;
    let backend = DenoiserBackend::GmmOracle(GaussianMixture::new(vec![vec![0.5; dim]], 0.3, vec![1.0]).unwrap());
    let codec = identity([dim, 1, 1]);
    let target = vec![-1.0; dim];
    let cfg = GuidanceConfig { lambda1: 1.0, s_target: Some(target), ..Default::default() };
    let x = LatentState::new(standard_normal(&mut seeded(2), dim), 90);
    let plain = ancestral_step(&backend, &x, &s, 4).unwrap();
    let zero = guided_step(&backend, &x, &s, 0.0, |_| -> forge_core::Result<Vec<f64>> { panic!("not called") }, 4).unwrap();
    assert_eq!(plain, zero);

    let grad = ag_loss_grad(&x, &backend, &cfg, &codec, &s, 1).unwrap();
    let eta = 0.3;
    let adjusted: Vec<f64> = x.values.iter().zip(&grad).map(|(a, g)| a - eta * g).collect();
    let inner: f64 = adjusted.iter().zip(&x.values).zip(&grad).map(|((a, b), g)| (a - b) * g).sum();
    assert!(inner <= 0.0);
    let stepped = guided_step(&backend, &x, &s, eta, |_| Ok(grad.clone()), 4).unwrap();
    let expect = ancestral_step(&backend, &LatentState::new(adjusted, 90), &s, 4).unwrap();
    assert_eq!(stepped, expect);
}

#[test]
fn config_errors() {
    let s = schedule();
    let codec = identity([4, 1, 1]);
    let backend = DenoiserBackend::GmmOracle(GaussianMixture::new(vec![vec![0.0; 4]], 1.0, vec![1.0]).unwrap());
    let cfg = GuidanceConfig { lambda2: 1.0, ..Default::default() };
    assert!(matches!(ag_loss(&[0.0; 4], &cfg, &codec), Err(Error::MissingTarget(_))));
    assert!(sample_guided(&backend, &cfg, &codec, &s, 0).is_err());
    let wrong = identity([5, 1, 1]);
    assert!(matches!(
        sample_guided(&backend, &GuidanceConfig::default(), &wrong, &s, 0),
        Err(Error::DimMismatch(_))
    ));
    let json = serde_json::to_value(GuidanceConfig::default()).unwrap();
    let back: GuidanceConfig = serde_json::from_value(json).unwrap();
    assert_eq!(back, GuidanceConfig::default());
}
