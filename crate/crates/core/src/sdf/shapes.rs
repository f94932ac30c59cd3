//! Procedural lesion-like shapes sampled as signed distance grids.

use std::f64::consts::TAU;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, standard_normal};

use super::{Dims, SdfGrid};

/// Shape description in world units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeParams {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Ellipsoid {
        center: [f64; 3],
        semi_axes: [f64; 3],
    },
    /// Ellipsoid whose surface is displaced radially by a seeded sum of
    /// plane waves over the direction sphere.
    Bumpy {
        center: [f64; 3],
        semi_axes: [f64; 3],
        amplitude: f64,
        #[serde(default = "default_waves")]
        waves: usize,
        #[serde(default = "default_frequency")]
        frequency: f64,
    },
}

fn default_waves() -> usize {
    6
}

fn default_frequency() -> f64 {
    5.0
}

impl ShapeParams {
    fn center(&self) -> [f64; 3] {
        match self {
            Self::Sphere { center, .. } | Self::Ellipsoid { center, .. } | Self::Bumpy { center, .. } => *center,
        }
    }

    fn extent(&self) -> [f64; 3] {
        match self {
            Self::Sphere { radius, .. } => [*radius; 3],
            Self::Ellipsoid { semi_axes, .. } => *semi_axes,
            Self::Bumpy { semi_axes, amplitude, .. } => semi_axes.map(|a| a + amplitude.abs()),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Sphere { radius, .. } => *radius > 0.0,
            Self::Ellipsoid { semi_axes, .. } => semi_axes.iter().all(|&a| a > 0.0),
            Self::Bumpy { semi_axes, waves, frequency, .. } => {
                semi_axes.iter().all(|&a| a > 0.0) && *waves > 0 && frequency.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid shape parameters {self:?}")))
        }
    }
}

struct Waves {
    directions: Vec<[f64; 3]>,
    phases: Vec<f64>,
    frequency: f64,
}

impl Waves {
    fn new(count: usize, frequency: f64, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut directions = Vec::with_capacity(count);
        let mut phases = Vec::with_capacity(count);
        for _ in 0..count {
            let g = loop {
                let g = standard_normal(&mut rng, 3);
                let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                if n > 1e-6 {
                    break [g[0] / n, g[1] / n, g[2] / n];
                }
            };
            directions.push(g);
            phases.push(rng.random::<f64>() * TAU);
        }
        Self { directions, phases, frequency }
    }

    /// Displacement profile in [-1, 1] over unit directions.
    fn profile(&self, dir: [f64; 3]) -> f64 {
        let sum: f64 = self
            .directions
            .iter()
            .zip(&self.phases)
            .map(|(w, ph)| (self.frequency * (w[0] * dir[0] + w[1] * dir[1] + w[2] * dir[2]) + ph).sin())
            .sum();
        sum / self.directions.len() as f64
    }
}

/// Samples the signed distance of a procedural shape on a grid.
///
/// Deterministic given `seed`; only the bumpy kind consumes randomness.
pub fn make_shape(params: &ShapeParams, dims: Dims, spacing: f64, seed: u64) -> Result<SdfGrid> {
    params.validate()?;
    let center = params.center();
    let extent = params.extent();
    for a in 0..3 {
        let lo = center[a] - extent[a];
        let hi = center[a] + extent[a];
        let max = (dims[a] as f64 - 3.0) * spacing;
        if lo < 2.0 * spacing || hi > max {
            return Err(Error::ShapeTooLarge);
        }
    }

    let grid = match params {
        ShapeParams::Sphere { center, radius } => SdfGrid::from_fn(dims, spacing, |p| {
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - radius
        }),
        ShapeParams::Ellipsoid { center, semi_axes } => SdfGrid::from_fn(dims, spacing, |p| {
            ellipsoid_distance(*semi_axes, [p[0] - center[0], p[1] - center[1], p[2] - center[2]])
        }),
        ShapeParams::Bumpy { center, semi_axes, amplitude, waves, frequency } => {
            let field = Waves::new(*waves, *frequency, seed);
            SdfGrid::from_fn(dims, spacing, |p| {
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                let base = ellipsoid_distance(*semi_axes, d);
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if r == 0.0 {
                    base
                } else {
                    base - amplitude * field.profile([d[0] / r, d[1] / r, d[2] / r])
                }
            })
        }
    };
    Ok(grid)
}

/// Signed distance from `point` (relative to the centre) to the axis-aligned
/// ellipsoid with the given semi-axes, negative inside.
///
/// Closest-point projection by bisection on the Lagrange multiplier, iterated
/// until the bracket stops shrinking in floating point.
pub fn ellipsoid_distance(semi_axes: [f64; 3], point: [f64; 3]) -> f64 {
    // sort axes descending, working in the first octant
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| semi_axes[b].total_cmp(&semi_axes[a]));
    let e = order.map(|i| semi_axes[i]);
    let y = order.map(|i| point[i].abs());
    let dist = unsigned_distance_3d(e, y);
    let level: f64 = (0..3).map(|i| (y[i] / e[i]).powi(2)).sum();
    if level < 1.0 {
        -dist
    } else {
        dist
    }
}

fn robust_length(v: &[f64]) -> f64 {
    let m = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if m == 0.0 {
        return 0.0;
    }
    m * v.iter().map(|x| (x / m).powi(2)).sum::<f64>().sqrt()
}

fn bisect(mut lo: f64, mut hi: f64, g: impl Fn(f64) -> f64) -> f64 {
    let mut s = 0.5 * (lo + hi);
    for _ in 0..2048 {
        s = 0.5 * (lo + hi);
        if s == lo || s == hi {
            break;
        }
        let v = g(s);
        if v > 0.0 {
            lo = s;
        } else if v < 0.0 {
            hi = s;
        } else {
            break;
        }
    }
    s
}

fn unsigned_distance_2d(e: [f64; 2], y: [f64; 2]) -> f64 {
    if y[1] > 0.0 {
        if y[0] > 0.0 {
            let z = [y[0] / e[0], y[1] / e[1]];
            let g = z[0] * z[0] + z[1] * z[1] - 1.0;
            if g == 0.0 {
                return 0.0;
            }
            let r0 = (e[0] / e[1]).powi(2);
            let n0 = r0 * z[0];
            let s0 = z[1] - 1.0;
            let s1 = if g < 0.0 { 0.0 } else { robust_length(&[n0, z[1]]) - 1.0 };
            let s = bisect(s0, s1, |s| (n0 / (s + r0)).powi(2) + (z[1] / (s + 1.0)).powi(2) - 1.0);
            let x0 = r0 * y[0] / (s + r0);
            let x1 = y[1] / (s + 1.0);
            ((x0 - y[0]).powi(2) + (x1 - y[1]).powi(2)).sqrt()
        } else {
            (y[1] - e[1]).abs()
        }
    } else {
        let numer0 = e[0] * y[0];
        let denom0 = e[0] * e[0] - e[1] * e[1];
        if numer0 < denom0 {
            let xde0 = numer0 / denom0;
            let x0 = e[0] * xde0;
            let x1 = e[1] * (1.0 - xde0 * xde0).sqrt();
            ((x0 - y[0]).powi(2) + x1 * x1).sqrt()
        } else {
            (y[0] - e[0]).abs()
        }
    }
}

fn unsigned_distance_3d(e: [f64; 3], y: [f64; 3]) -> f64 {
    if y[2] > 0.0 {
        if y[1] > 0.0 {
            if y[0] > 0.0 {
                let z = [y[0] / e[0], y[1] / e[1], y[2] / e[2]];
                let g = z[0] * z[0] + z[1] * z[1] + z[2] * z[2] - 1.0;
                if g == 0.0 {
                    return 0.0;
                }
                let r0 = (e[0] / e[2]).powi(2);
                let r1 = (e[1] / e[2]).powi(2);
                let n0 = r0 * z[0];
                let n1 = r1 * z[1];
                let s0 = z[2] - 1.0;
                let s1 = if g < 0.0 { 0.0 } else { robust_length(&[n0, n1, z[2]]) - 1.0 };
                let s = bisect(s0, s1, |s| {
                    (n0 / (s + r0)).powi(2) + (n1 / (s + r1)).powi(2) + (z[2] / (s + 1.0)).powi(2) - 1.0
                });
                let x = [r0 * y[0] / (s + r0), r1 * y[1] / (s + r1), y[2] / (s + 1.0)];
                ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt()
            } else {
                unsigned_distance_2d([e[1], e[2]], [y[1], y[2]])
            }
        } else if y[0] > 0.0 {
            unsigned_distance_2d([e[0], e[2]], [y[0], y[2]])
        } else {
            (y[2] - e[2]).abs()
        }
    } else {
        let denom = [e[0] * e[0] - e[2] * e[2], e[1] * e[1] - e[2] * e[2]];
        let numer = [e[0] * y[0], e[1] * y[1]];
        if numer[0] < denom[0] && numer[1] < denom[1] {
            let xde = [numer[0] / denom[0], numer[1] / denom[1]];
            let discr = 1.0 - xde[0] * xde[0] - xde[1] * xde[1];
            if discr > 0.0 {
                let x = [e[0] * xde[0], e[1] * xde[1], e[2] * discr.sqrt()];
                return ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + x[2] * x[2]).sqrt();
            }
        }
        unsigned_distance_2d([e[0], e[1]], [y[0], y[1]])
    }
}

/// Distribution of the toy training shapes. Lengths are in voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeDistribution {
    /// Semi-axis range as a fraction of the smallest grid dimension.
    pub semi_axis_fraction: [f64; 2],
    pub amplitude: [f64; 2],
    pub bumpy_fraction: f64,
    pub center_jitter: f64,
}

impl Default for ShapeDistribution {
    fn default() -> Self {
        Self { semi_axis_fraction: [0.14, 0.34], amplitude: [0.4, 1.4], bumpy_fraction: 0.5, center_jitter: 1.0 }
    }
}

impl ShapeDistribution {
    /// Seeded draw of shape parameters for a grid.
    pub fn sample(&self, dims: Dims, spacing: f64, seed: u64) -> ShapeParams {
        let mut rng = seeded(seed);
        let n = dims.iter().copied().min().unwrap_or(0) as f64;
        let [lo, hi] = self.semi_axis_fraction;
        let semi_axes: [f64; 3] = std::array::from_fn(|_| rng.random_range(lo..=hi) * n * spacing);
        let center: [f64; 3] = std::array::from_fn(|a| {
            ((dims[a] as f64 - 1.0) / 2.0 + rng.random_range(-1.0..=1.0) * self.center_jitter) * spacing
        });
        if rng.random::<f64>() < self.bumpy_fraction {
            let amplitude = rng.random_range(self.amplitude[0]..=self.amplitude[1]) * spacing;
            ShapeParams::Bumpy { center, semi_axes, amplitude, waves: default_waves(), frequency: default_frequency() }
        } else {
            ShapeParams::Ellipsoid { center, semi_axes }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_center_value() {
        let g = make_shape(&ShapeParams::Sphere { center: [16.0; 3], radius: 6.0 }, [32; 3], 1.0, 0).unwrap();
        assert_eq!(g.get(16, 16, 16), -6.0);
    }

    #[test]
    fn degenerate_ellipsoid_is_sphere() {
        let s = make_shape(&ShapeParams::Sphere { center: [15.3; 3], radius: 7.0 }, [32; 3], 1.0, 0).unwrap();
        let e = make_shape(
            &ShapeParams::Ellipsoid { center: [15.3; 3], semi_axes: [7.0; 3] },
            [32; 3],
            1.0,
            0,
        )
        .unwrap();
        for (a, b) in s.values.iter().zip(&e.values) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn ellipsoid_distance_against_projection() {
        // the returned distance is attained: x on the surface at that distance
        let axes = [7.0, 4.0, 2.5];
        for p in [[9.0, 1.0, 0.5], [1.0, 6.0, 3.0], [0.5, 0.3, 0.2], [3.0, 0.0, 4.0], [0.0, 0.0, 0.0]] {
            let d = ellipsoid_distance(axes, p);
            // brute-force the minimum over a fine surface parametrisation
            let mut best = f64::INFINITY;
            let n = 600;
            for i in 0..=n {
                let th = std::f64::consts::PI * i as f64 / n as f64;
                for j in 0..(2 * n) {
                    let ph = std::f64::consts::PI * j as f64 / n as f64;
                    let x = [axes[0] * th.sin() * ph.cos(), axes[1] * th.sin() * ph.sin(), axes[2] * th.cos()];
                    let dd = ((x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2) + (x[2] - p[2]).powi(2)).sqrt();
                    best = best.min(dd);
                }
            }
            assert!((d.abs() - best).abs() < 2e-2, "{p:?}: {d} vs {best}");
            assert!(d.abs() <= best + 1e-9);
        }
    }

    #[test]
    fn bumpy_is_deterministic() {
        let params = ShapeParams::Bumpy {
            center: [16.0; 3],
            semi_axes: [8.0, 6.0, 5.0],
            amplitude: 1.0,
            waves: 6,
            frequency: 5.0,
        };
        let a = make_shape(&params, [32; 3], 1.0, 11).unwrap();
        let b = make_shape(&params, [32; 3], 1.0, 11).unwrap();
        let c = make_shape(&params, [32; 3], 1.0, 12).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn too_large_rejected() {
        let r = make_shape(&ShapeParams::Sphere { center: [16.0; 3], radius: 14.5 }, [32; 3], 1.0, 0);
        assert!(matches!(r, Err(Error::ShapeTooLarge)));
    }
}
