//! Unit normals and the Curvature Index functional.
//!
//! Per voxel, the Curvature Index is the Frobenius norm of the Jacobian of
//! the unit normal field, `sqrt(sum_ij (d n_i / d x_j)^2)`. The scalar CI of
//! a grid is its mean over the narrow band `|s| <= band`.

use crate::error::{Error, Result};

use super::{axis_stencil, grid_coords, SdfGrid};

/// Gradient norms below this leave the normal undefined.
pub const DEFAULT_EPS_GRAD: f64 = 1e-8;
/// Narrow band half-width in units of grid spacing.
pub const DEFAULT_BAND_FACTOR: f64 = 1.5;

#[derive(Clone, Debug)]
pub struct NormalField {
    pub dims: super::Dims,
    /// Unit normal per voxel; zero where undefined.
    pub normals: Vec<[f64; 3]>,
    pub defined: Vec<bool>,
}

impl NormalField {
    pub fn undefined_count(&self) -> usize {
        self.defined.iter().filter(|d| !**d).count()
    }
}

fn gradients(sdf: &SdfGrid) -> Vec<[f64; 3]> {
    (0..sdf.len())
        .map(|i| {
            let c = grid_coords(sdf.dims, i);
            let mut g = [0.0; 3];
            for (axis, ga) in g.iter_mut().enumerate() {
                let st = axis_stencil(sdf.dims, c, i, axis, sdf.spacing);
                *ga = (sdf.values[st.plus] - sdf.values[st.minus]) * st.scale;
            }
            g
        })
        .collect()
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `n = grad s / |grad s|` by finite differences; undefined where
/// `|grad s| < eps_grad`.
pub fn normals(sdf: &SdfGrid, eps_grad: f64) -> NormalField {
    let grads = gradients(sdf);
    let mut normals = Vec::with_capacity(grads.len());
    let mut defined = Vec::with_capacity(grads.len());
    for g in grads {
        let m = norm3(g);
        if m < eps_grad {
            normals.push([0.0; 3]);
            defined.push(false);
        } else {
            normals.push(g.map(|c| c / m));
            defined.push(true);
        }
    }
    NormalField { dims: sdf.dims, normals, defined }
}

/// Voxels contributing to the band mean: inside the band, with a defined
/// normal everywhere on their Jacobian stencil.
///
/// Holding a selection fixed makes CI a smooth function of the grid values,
/// which is what the gradient differentiates.
#[derive(Clone, Debug, PartialEq)]
pub struct BandSelection {
    pub band: f64,
    pub voxels: Vec<usize>,
}

impl BandSelection {
    pub fn new(sdf: &SdfGrid, band: f64, eps_grad: f64) -> Result<Self> {
        let field = normals(sdf, eps_grad);
        let mut voxels = Vec::new();
        'voxel: for (i, &v) in sdf.values.iter().enumerate() {
            if v.abs() > band || !field.defined[i] {
                continue;
            }
            let c = grid_coords(sdf.dims, i);
            for axis in 0..3 {
                let st = axis_stencil(sdf.dims, c, i, axis, sdf.spacing);
                if !field.defined[st.minus] || !field.defined[st.plus] {
                    continue 'voxel;
                }
            }
            voxels.push(i);
        }
        if voxels.is_empty() {
            return Err(Error::EmptyBand { band });
        }
        Ok(Self { band, voxels })
    }
}

fn unit_normals(sdf: &SdfGrid) -> (Vec<[f64; 3]>, Vec<f64>) {
    let grads = gradients(sdf);
    let mags: Vec<f64> = grads.iter().map(|&g| norm3(g)).collect();
    let normals = grads
        .iter()
        .zip(&mags)
        .map(|(g, &m)| if m > 0.0 { g.map(|c| c / m) } else { [0.0; 3] })
        .collect();
    (normals, mags)
}

fn normal_jacobian(sdf: &SdfGrid, normals: &[[f64; 3]], i: usize) -> [[f64; 3]; 3] {
    let c = grid_coords(sdf.dims, i);
    let mut jac = [[0.0; 3]; 3];
    for j in 0..3 {
        let st = axis_stencil(sdf.dims, c, i, j, sdf.spacing);
        for (n, row) in jac.iter_mut().enumerate() {
            row[j] = (normals[st.plus][n] - normals[st.minus][n]) * st.scale;
        }
    }
    jac
}

fn frobenius(jac: &[[f64; 3]; 3]) -> f64 {
    jac.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Band-mean Curvature Index over a fixed voxel selection.
pub fn curvature_index_with(sdf: &SdfGrid, selection: &BandSelection) -> f64 {
    let (normals, _) = unit_normals(sdf);
    let total: f64 = selection
        .voxels
        .iter()
        .map(|&i| frobenius(&normal_jacobian(sdf, &normals, i)))
        .sum();
    total / selection.voxels.len() as f64
}

/// Mean Curvature Index over the narrow band `|s| <= band`.
pub fn curvature_index(sdf: &SdfGrid, band: f64) -> Result<f64> {
    let selection = BandSelection::new(sdf, band, DEFAULT_EPS_GRAD)?;
    Ok(curvature_index_with(sdf, &selection))
}

/// Gradient of [`curvature_index`] with respect to every grid value.
///
/// Reverse accumulation through the stencil chain: differences, normalisation,
/// normal Jacobian, Frobenius norm, band mean. The band selection is held
/// fixed.
pub fn curvature_index_grad(sdf: &SdfGrid, band: f64) -> Result<SdfGrid> {
    let selection = BandSelection::new(sdf, band, DEFAULT_EPS_GRAD)?;
    Ok(curvature_index_grad_with(sdf, &selection))
}

pub fn curvature_index_grad_with(sdf: &SdfGrid, selection: &BandSelection) -> SdfGrid {
    let n = sdf.len();
    let (normals, mags) = unit_normals(sdf);
    let weight = 1.0 / selection.voxels.len() as f64;

    // adjoint of the normals
    let mut d_normals = vec![[0.0f64; 3]; n];
    for &i in &selection.voxels {
        let jac = normal_jacobian(sdf, &normals, i);
        let c = frobenius(&jac);
        if c == 0.0 {
            continue;
        }
        let coords = grid_coords(sdf.dims, i);
        for j in 0..3 {
            let st = axis_stencil(sdf.dims, coords, i, j, sdf.spacing);
            for k in 0..3 {
                let d_jac = weight * jac[k][j] / c * st.scale;
                d_normals[st.plus][k] += d_jac;
                d_normals[st.minus][k] -= d_jac;
            }
        }
    }

    // through n = g / |g| into the adjoint of the values
    let mut d_values = vec![0.0f64; n];
    for u in 0..n {
        let dn = d_normals[u];
        if dn == [0.0; 3] || mags[u] == 0.0 {
            continue;
        }
        let nu = normals[u];
        let proj = nu[0] * dn[0] + nu[1] * dn[1] + nu[2] * dn[2];
        let coords = grid_coords(sdf.dims, u);
        for axis in 0..3 {
            let dg = (dn[axis] - nu[axis] * proj) / mags[u];
            let st = axis_stencil(sdf.dims, coords, u, axis, sdf.spacing);
            d_values[st.plus] += dg * st.scale;
            d_values[st.minus] -= dg * st.scale;
        }
    }
    SdfGrid { dims: sdf.dims, spacing: sdf.spacing, values: d_values }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(n: usize, r: f64) -> SdfGrid {
        let c = (n as f64 - 1.0) / 2.0;
        SdfGrid::from_fn([n, n, n], 1.0, |p| {
            ((p[0] - c).powi(2) + (p[1] - c).powi(2) + (p[2] - c).powi(2)).sqrt() - r
        })
    }

    #[test]
    fn plane_normals_and_zero_ci() {
        let g = SdfGrid::from_fn([12, 12, 12], 1.0, |p| p[0] - 5.3);
        let f = normals(&g, DEFAULT_EPS_GRAD);
        for (n, d) in f.normals.iter().zip(&f.defined) {
            assert!(*d);
            assert!((n[0] - 1.0).abs() < 1e-12 && n[1].abs() < 1e-12 && n[2].abs() < 1e-12);
        }
        let ci = curvature_index(&g, 1.5).unwrap();
        assert!(ci.abs() < 1e-12);
        let grad = curvature_index_grad(&g, 1.5).unwrap();
        assert!(grad.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constant_grid_is_undefined_everywhere() {
        let g = SdfGrid::constant([5, 5, 5], 1.0, 0.3);
        let f = normals(&g, DEFAULT_EPS_GRAD);
        assert_eq!(f.undefined_count(), g.len());
        assert!(matches!(curvature_index(&g, 1.0), Err(Error::EmptyBand { .. })));
    }

    #[test]
    fn sphere_normals_are_radial() {
        let g = sphere(32, 8.0);
        let f = normals(&g, DEFAULT_EPS_GRAD);
        let c = 15.5;
        let mut worst: f64 = 0.0;
        for i in 0..g.len() {
            let p = grid_coords(g.dims, i);
            let d = [p[0] as f64 - c, p[1] as f64 - c, p[2] as f64 - c];
            let r = norm3(d);
            let interior = p.iter().all(|&q| q > 0 && q < 31);
            if r < 2.0 || !interior {
                continue;
            }
            let n = f.normals[i];
            let cos = (n[0] * d[0] + n[1] * d[1] + n[2] * d[2]) / r;
            worst = worst.max(cos.min(1.0).acos().to_degrees());
        }
        assert!(worst <= 2.0, "max angular error {worst} deg");
    }

    #[test]
    fn sphere_ci_matches_analytic() {
        for r in [6.0, 10.0, 14.0] {
            let ci = curvature_index(&sphere(64, r), 1.5).unwrap();
            let expected = 2f64.sqrt() / r;
            assert!((ci - expected).abs() / expected <= 0.05, "r={r}: {ci} vs {expected}");
        }
    }
}
