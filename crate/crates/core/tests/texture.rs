use forge_core::diffusion::*;
use forge_core::guidance::GuidanceConfig;
use forge_core::rng::{seeded, standard_normal};
use forge_core::sdf::{BinaryMask, Dims};
use forge_core::texture::*;
use forge_core::Error;
use rand::Rng as _;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap()
}

fn random_mask(dims: Dims, seed: u64) -> BinaryMask {
    let mut rng = seeded(seed);
    let mut m = BinaryMask::from_fn(dims, 1.0, |_, _, _| rng.random_bool(0.2));
    m.values[3] = true;
    m
}

fn random_volume(dims: Dims, seed: u64) -> Volume {
    let mut rng = seeded(seed);
    let n = dims.iter().product();
    Volume::new(dims, 1.0, (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()).unwrap()
}

#[test]
fn signal_intensity_matches_direct_sum() {
    for seed in 0..5 {
        let v = random_volume([16; 3], seed);
        let m = random_mask([16; 3], 100 + seed);
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..v.len() {
            if m.values[i] {
                sum += v.values[i];
                count += 1;
            }
        }
        let si = signal_intensity(&v, &m).unwrap();
        assert!((si - sum / count as f64).abs() <= 1e-12);
    }
}

#[test]
fn tg_gradient_matches_finite_differences() {
    let s = schedule();
    let dims = [16; 3];
    for seed in 0..3u64 {
        let mask = random_mask(dims, seed);
        let mu = random_volume(dims, 50 + seed).values;
        let backend = DenoiserBackend::GmmOracle(GaussianMixture::new(vec![mu.clone()], 0.1, vec![1.0]).unwrap());
        let t = 40 + 30 * seed as usize;
        let x_t = forward_diffuse(&mu, t, &s, seed).unwrap();
        let target = 0.35;
        let grad = tg_loss_grad(&x_t, &mask, target, &s, &backend).unwrap();
        assert!(grad.iter().zip(&mask.values).all(|(g, &m)| m || *g == 0.0));

        let eps = denoise_eps(&backend, &x_t, &s).unwrap();
        let loss = |xt: &[f64]| {
            let x0 = predict_x0(&LatentState::new(xt.to_vec(), t), &eps, &s).unwrap();
            tg_loss(&x0, &mask, target).unwrap()
        };
        let h = 1e-3;
        let mut probe = x_t.values.clone();
        let mut fd = vec![0.0; probe.len()];
        for i in 0..probe.len() {
            let v = probe[i];
            probe[i] = v + h;
            let up = loss(&probe);
            probe[i] = v - h;
            let dn = loss(&probe);
            probe[i] = v;
            fd[i] = (up - dn) / (2.0 * h);
        }
        let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = fd.iter().map(|b| b * b).sum();
        let err = (num / den).sqrt();
        assert!(err <= 1e-6, "seed {seed}: rel L2 {err}");
    }
}

#[test]
fn repaint_partitions_voxels() {
    let s = schedule();
    let dims = [10, 9, 8];
    for seed in 0..5 {
        let mask = random_mask(dims, seed);
        let bg = random_volume(dims, seed + 10);
        let n = bg.len();
        let fg = LatentState::new(standard_normal(&mut seeded(seed), n), (seed as usize) * 20);
        let out = repaint_blend(&fg, &bg, &mask, &s, seed).unwrap();
        let noised = if fg.t == 0 { bg.values.clone() } else { forward_diffuse(&bg.values, fg.t, &s, seed).unwrap().values };
        for i in 0..n {
            let want = if mask.values[i] { fg.values[i] } else { noised[i] };
            assert_eq!(out.values[i].to_bits(), want.to_bits());
        }
    }
}

#[test]
fn toy_background_spread() {
    let mut mean_std = 0.0;
    for seed in 0..100 {
        let v = make_toy_background([16; 3], 1.0, seed).unwrap();
        let n = v.len() as f64;
        let mean = v.values.iter().sum::<f64>() / n;
        let std = (v.values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(std >= 0.05, "seed {seed}: std {std}");
        assert!(v.values.iter().all(|x| (-1.0..=1.0).contains(x)));
        mean_std += std / 100.0;
    }
    assert!(mean_std > 0.1);
    assert!(make_toy_background([7, 16, 16], 1.0, 0).is_err());
}

#[test]
fn placement() {
    let mut lesion = BinaryMask::empty([20; 3], 1.0);
    for (x, y, z) in [(5, 5, 5), (6, 5, 5), (6, 6, 5), (6, 6, 7)] {
        lesion.set(x, y, z, true);
    }
    let (placed, offset) = place_mask(&lesion, [12; 3], Some([1, 2, 3]), None, 0).unwrap();
    assert_eq!(offset, [1, 2, 3]);
    assert_eq!(placed.count(), 4);
    assert!(placed.get(1, 2, 3) && placed.get(2, 3, 5));

    for seed in 0..20 {
        let box_ = [[2, 2, 2], [4, 5, 6]];
        let (p, o) = place_mask(&lesion, [12; 3], None, Some(box_), seed).unwrap();
        assert!((0..3).all(|a| o[a] >= box_[0][a] && o[a] <= box_[1][a]));
        assert_eq!(p.count(), 4);
        assert_eq!(place_mask(&lesion, [12; 3], None, Some(box_), seed).unwrap().1, o);
    }
    assert!(matches!(place_mask(&lesion, [1, 12, 12], None, None, 0), Err(Error::ShapeTooLarge)));
    assert!(place_mask(&lesion, [12; 3], Some([11, 0, 0]), None, 0).is_err());
    assert!(matches!(place_mask(&BinaryMask::empty([4; 3], 1.0), [4; 3], None, None, 0), Err(Error::EmptyMask)));
}

fn small_prior(dims: Dims) -> TexturePrior {
    let data = toy_lesion_dataset(20, dims, [-0.5, 0.5], 3).unwrap();
    let g = GaussianMixture::from_samples(data.into_iter().map(|v| v.values).collect(), 0.05).unwrap();
    TexturePrior::new(DenoiserBackend::GmmOracle(g), dims).unwrap()
}

#[test]
fn volume_synthesis_preserves_background() {
    let s = NoiseSchedule::linear(40, 1e-3, 0.2).unwrap();
    let dims = [10; 3];
    let prior = small_prior(dims);
    let bg = make_toy_background(dims, 1.0, 77).unwrap();
    let mut lesion = BinaryMask::empty(dims, 1.0);
    for i in 0..27 {
        lesion.set(3 + i % 3, 3 + (i / 3) % 3, 3 + i / 9, true);
    }
    let cfg = GuidanceConfig { gamma0: 20.0, ..Default::default() };
    for seed in 0..4 {
        let out = synthesize_volume(&prior, &bg, &lesion, &Placement::default(), Some(0.5), &cfg, &s, seed, 2).unwrap();
        for i in 0..bg.len() {
            if !out.mask.values[i] {
                assert_eq!(out.volume.values[i].to_bits(), bg.values[i].to_bits());
            } else {
                assert!(out.volume.values[i].abs() <= 1.0);
            }
        }
        let again = synthesize_volume(&prior, &bg, &lesion, &Placement::default(), Some(0.5), &cfg, &s, seed, 2).unwrap();
        assert_eq!(out, again);
    }
}

#[test]
fn texture_io_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = make_toy_background([9, 8, 8], 0.5, 1).unwrap();
    let stem = dir.path().join("case.img");
    forge_core::io::write_volume(&stem, &v).unwrap();
    let back = forge_core::io::read_volume(&stem).unwrap();
    assert_eq!(back.values, v.values.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>());
    assert_eq!((back.window_center, back.window_width), (v.window_center, v.window_width));
}
