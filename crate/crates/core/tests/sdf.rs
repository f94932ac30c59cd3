use forge_core::rng::{seeded, standard_normal};
use forge_core::sdf::*;
use forge_core::Error;
use proptest::prelude::*;
use rand::Rng as _;

/// Distance from each voxel centre to the nearest inside/outside face centre,
/// by exhaustive search over all interface faces.
fn brute_force_sdt(mask: &BinaryMask) -> Vec<f64> {
    let d = mask.dims;
    let mut faces = Vec::new();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let here = mask.get(x, y, z);
                let c = [x, y, z];
                for axis in 0..3 {
                    let mut n = c;
                    n[axis] += 1;
                    if n[axis] < d[axis] && mask.get(n[0], n[1], n[2]) != here {
                        let mut f = [2 * x as i64, 2 * y as i64, 2 * z as i64];
                        f[axis] += 1;
                        faces.push(f);
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(mask.len());
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let p = [2 * x as i64, 2 * y as i64, 2 * z as i64];
                let d2 = faces
                    .iter()
                    .map(|f| (0..3).map(|a| (p[a] - f[a]).pow(2)).sum::<i64>())
                    .min()
                    .unwrap();
                let dist = (d2 as f64).sqrt() * 0.5 * mask.spacing;
                out.push(if mask.get(x, y, z) { -dist } else { dist });
            }
        }
    }
    out
}

fn random_mask(dims: Dims, density: f64, seed: u64) -> BinaryMask {
    let mut rng = seeded(seed);
    let mut m = BinaryMask::from_fn(dims, 1.0, |_, _, _| rng.random_bool(density));
    m.values[0] = true;
    let last = m.len() - 1;
    m.values[last] = false;
    m
}

#[test]
fn full_minus_one_negates_single_voxel() {
    let mut single = BinaryMask::empty([9; 3], 1.0);
    single.set(4, 4, 4, true);
    let mut holed = BinaryMask::from_fn([9; 3], 1.0, |_, _, _| true);
    holed.set(4, 4, 4, false);
    let a = signed_distance_transform(&single).unwrap();
    let b = signed_distance_transform(&holed).unwrap();
    assert_eq!(a.get(4, 4, 4), -0.5);
    assert_eq!(a.get(5, 4, 4), 0.5);
    for (x, y) in a.values.iter().zip(&b.values) {
        assert_eq!(*x, -*y);
    }
}

#[test]
fn cube_matches_brute_force() {
    let mask = BinaryMask::from_fn([32; 3], 1.0, |x, y, z| [x, y, z].iter().all(|&c| (13..18).contains(&c)));
    let sdt = signed_distance_transform(&mask).unwrap();
    assert_eq!(sdt.values, brute_force_sdt(&mask));
    // outside a corner is farther than outside a face at the same offset
    assert!(sdt.get(19, 19, 19) > sdt.get(19, 15, 15));
    assert_eq!(sdt.get(19, 15, 15), 1.5);
}

#[test]
fn sdt_matches_brute_force_at_16() {
    for seed in 0..3 {
        let mask = random_mask([16, 16, 16], 0.3, seed);
        assert_eq!(signed_distance_transform(&mask).unwrap().values, brute_force_sdt(&mask));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sdt_brute_force_and_round_trip(
        nx in 2usize..9, ny in 2usize..9, nz in 1usize..9,
        density in 0.05f64..0.95, seed in any::<u64>(), spacing in 0.25f64..2.0,
    ) {
        let mut mask = random_mask([nx, ny, nz], density, seed);
        mask.spacing = spacing;
        let sdt = signed_distance_transform(&mask).unwrap();
        prop_assert_eq!(&sdt.values, &brute_force_sdt(&mask));
        prop_assert_eq!(binarize(&sdt, 0.0), mask);
        prop_assert!(sdt.min_value() < 0.0 && sdt.max_value() > 0.0);
    }
}

#[test]
fn sdt_errors() {
    assert!(matches!(signed_distance_transform(&BinaryMask::empty([4; 3], 1.0)), Err(Error::EmptyMask)));
    let full = BinaryMask::from_fn([4; 3], 1.0, |_, _, _| true);
    assert!(matches!(signed_distance_transform(&full), Err(Error::FullMask)));
}

fn smooth_random_sdf(seed: u64) -> SdfGrid {
    let mut rng = seeded(seed);
    let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(7.0..8.5));
    let r = rng.random_range(4.0..5.5);
    let waves: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let k = standard_normal(&mut rng, 3);
            ([k[0] * 0.4, k[1] * 0.4, k[2] * 0.4], rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.1..0.4))
        })
        .collect();
    SdfGrid::from_fn([16; 3], 1.0, |p| {
        let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt() - r;
        d + waves.iter().map(|(k, ph, a)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).sum::<f64>()
    })
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn curvature_gradient_matches_finite_differences() {
    let band = DEFAULT_BAND_FACTOR;
    for seed in 0..3 {
        let sdf = smooth_random_sdf(seed);
        let grad = curvature_index_grad(&sdf, band).unwrap();
        let sel = BandSelection::new(&sdf, band, DEFAULT_EPS_GRAD).unwrap();
        let h = 1e-4;
        let mut fd = vec![0.0; sdf.len()];
        let mut probe = sdf.clone();
        for i in 0..sdf.len() {
            let v = sdf.values[i];
            probe.values[i] = v + h;
            let up = curvature_index_with(&probe, &sel);
            probe.values[i] = v - h;
            let dn = curvature_index_with(&probe, &sel);
            probe.values[i] = v;
            fd[i] = (up - dn) / (2.0 * h);
        }
        let err = rel_l2(&grad.values, &fd);
        assert!(err <= 1e-4, "seed {seed}: rel L2 {err}");
    }
}

#[test]
fn plane_gradient_vanishes() {
    let plane = SdfGrid::from_fn([12; 3], 1.0, |p| p[0] - 5.3);
    let g = curvature_index_grad(&plane, 1.5).unwrap();
    assert!(g.values.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn sphere_gradient_has_octahedral_symmetry() {
    let n = 16;
    let c = (n as f64 - 1.0) / 2.0;
    let sdf = SdfGrid::from_fn([n; 3], 1.0, |p| ((p[0] - c).powi(2) + (p[1] - c).powi(2) + (p[2] - c).powi(2)).sqrt() - 5.0);
    let g = curvature_index_grad(&sdf, 1.5).unwrap();
    let m = n - 1;
    let scale = g.values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    assert!(scale > 0.0);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let v = g.get(x, y, z);
                for w in [g.get(y, x, z), g.get(z, y, x), g.get(x, z, y), g.get(m - x, y, z), g.get(x, m - y, z), g.get(x, y, m - z)] {
                    assert!((v - w).abs() <= 1e-10, "({x},{y},{z}) {v} vs {w}");
                }
            }
        }
    }
}

fn permute_xz(sdf: &SdfGrid) -> SdfGrid {
    let d = sdf.dims;
    let nd = [d[2], d[1], d[0]];
    let mut values = vec![0.0; sdf.len()];
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                values[linear_index(nd, z, y, x)] = sdf.get(x, y, z);
            }
        }
    }
    SdfGrid::new(nd, sdf.spacing, values).unwrap()
}

#[test]
fn ci_invariant_under_axis_permutation() {
    let params = ShapeParams::Ellipsoid { center: [10.0, 9.0, 8.0], semi_axes: [6.0, 4.5, 3.5] };
    let sdf = make_shape(&params, [20, 18, 16], 1.0, 0).unwrap();
    let a = curvature_index(&sdf, 1.5).unwrap();
    let b = curvature_index(&permute_xz(&sdf), 1.5).unwrap();
    assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn ci_increases_with_bump_amplitude() {
    let mut last = -1.0;
    for amplitude in [0.0, 0.5, 1.0, 1.5] {
        let params =
            ShapeParams::Bumpy { center: [15.5; 3], semi_axes: [9.0, 8.0, 7.0], amplitude, waves: 6, frequency: 5.0 };
        let ci = curvature_index(&make_shape(&params, [32; 3], 1.0, 3).unwrap(), 1.5).unwrap();
        assert!(ci > last, "amplitude {amplitude}: {ci} <= {last}");
        last = ci;
    }
}

#[test]
fn refine_examples() {
    let sphere = binarize(
        &make_shape(&ShapeParams::Sphere { center: [15.5; 3], radius: 10.0 }, [32; 3], 1.0, 0).unwrap(),
        0.0,
    );
    let sdt = signed_distance_transform(&sphere).unwrap();
    assert!(sdt.satisfies_eikonal());
    assert_eq!(refine(&sdt, 0).unwrap(), sdt);

    let noise = standard_normal(&mut seeded(4), sdt.len());
    let noisy = SdfGrid::new(sdt.dims, 1.0, sdt.values.iter().zip(&noise).map(|(v, n)| v + 0.5 * n).collect()).unwrap();
    assert!(!noisy.satisfies_eikonal());
    let cleaned = refine(&noisy, 4).unwrap();
    assert!(cleaned.satisfies_eikonal(), "fraction {}", cleaned.eikonal_fraction(3.0));

    let bumpy = make_shape(
        &ShapeParams::Bumpy { center: [15.5; 3], semi_axes: [9.0, 8.0, 7.0], amplitude: 1.5, waves: 6, frequency: 5.0 },
        [32; 3],
        1.0,
        1,
    )
    .unwrap();
    let before = curvature_index(&refine(&bumpy, 0).unwrap(), 1.5).unwrap();
    let after = curvature_index(&refine(&bumpy, 5).unwrap(), 1.5).unwrap();
    assert!(after < before, "{after} >= {before}");

    let tiny = SdfGrid::from_fn([12; 3], 1.0, |p| ((p[0] - 6.0).powi(2) + (p[1] - 6.0).powi(2) + (p[2] - 6.0).powi(2)).sqrt() - 0.4);
    assert!(matches!(refine(&tiny, 3), Err(Error::EmptyMask)));
}

#[test]
fn sphere_voxel_volume() {
    let sdf = make_shape(&ShapeParams::Sphere { center: [15.5; 3], radius: 6.0 }, [32; 3], 1.0, 0).unwrap();
    let n = binarize(&sdf, 0.0).count() as f64;
    let exact = 4.0 / 3.0 * std::f64::consts::PI * 216.0;
    assert!((n - exact).abs() / exact < 0.05);
}

#[test]
fn shape_distribution_draws_fit() {
    let dist = ShapeDistribution::default();
    for seed in 0..50 {
        let p = dist.sample([32; 3], 1.0, seed);
        assert!(make_shape(&p, [32; 3], 1.0, seed).is_ok(), "{p:?}");
        assert_eq!(p, dist.sample([32; 3], 1.0, seed));
    }
}
