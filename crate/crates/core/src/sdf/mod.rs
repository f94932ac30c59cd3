//! Signed distance grids and the geometric operators built on them.
//!
//! Grids are dense, isotropic and stored flat with x varying fastest:
//! `index = (z * ny + y) * nx + x`. Grid point `(x, y, z)` sits at world
//! position `(x, y, z) * spacing`.

mod curvature;
mod mesh;
mod refine;
mod shapes;
mod transform;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use curvature::{
    curvature_index, curvature_index_grad, curvature_index_grad_with, curvature_index_with, normals, BandSelection,
    NormalField, DEFAULT_BAND_FACTOR, DEFAULT_EPS_GRAD,
};
pub use mesh::{export_mesh, extract_surface, write_obj, TriangleMesh};
pub use refine::{laplacian_smooth, refine};
pub use shapes::{ellipsoid_distance, make_shape, ShapeDistribution, ShapeParams};
pub use transform::signed_distance_transform;

/// Voxels per axis, `[nx, ny, nz]`.
pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (z * dims[1] + y) * dims[0] + x
}

#[inline]
pub fn grid_coords(dims: Dims, index: usize) -> [usize; 3] {
    let x = index % dims[0];
    let yz = index / dims[0];
    [x, yz % dims[1], yz / dims[1]]
}

#[inline]
pub(crate) fn strides(dims: Dims) -> [usize; 3] {
    [1, dims[0], dims[0] * dims[1]]
}

/// Finite-difference stencil along one axis: `(v[plus] - v[minus]) * scale`.
///
/// Central in the interior, one-sided on the grid faces, zero on a
/// single-voxel axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub minus: usize,
    pub plus: usize,
    pub scale: f64,
}

#[inline]
pub(crate) fn axis_stencil(dims: Dims, coords: [usize; 3], index: usize, axis: usize, spacing: f64) -> Stencil {
    let n = dims[axis];
    let c = coords[axis];
    let stride = strides(dims)[axis];
    if n < 2 {
        Stencil { minus: index, plus: index, scale: 0.0 }
    } else if c == 0 {
        Stencil { minus: index, plus: index + stride, scale: 1.0 / spacing }
    } else if c == n - 1 {
        Stencil { minus: index - stride, plus: index, scale: 1.0 / spacing }
    } else {
        Stencil { minus: index - stride, plus: index + stride, scale: 0.5 / spacing }
    }
}

fn check_dims(dims: Dims, spacing: f64, len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::DimMismatch(format!("dims {dims:?} must be positive")));
    }
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(Error::Config(format!("spacing {spacing} must be positive")));
    }
    if voxel_count(dims) != len {
        return Err(Error::DimMismatch(format!(
            "dims {dims:?} hold {} voxels, got {len} values",
            voxel_count(dims)
        )));
    }
    Ok(())
}

/// Dense signed distance field, negative inside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdfGrid {
    pub dims: Dims,
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl SdfGrid {
    pub fn new(dims: Dims, spacing: f64, values: Vec<f64>) -> Result<Self> {
        check_dims(dims, spacing, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("sdf values must be finite".into()));
        }
        Ok(Self { dims, spacing, values })
    }

    /// Samples `f` at every grid point's world position.
    pub fn from_fn(dims: Dims, spacing: f64, mut f: impl FnMut([f64; 3]) -> f64) -> Self {
        let mut values = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    values.push(f([x as f64 * spacing, y as f64 * spacing, z as f64 * spacing]));
                }
            }
        }
        Self { dims, spacing, values }
    }

    pub fn constant(dims: Dims, spacing: f64, value: f64) -> Self {
        Self { dims, spacing, values: vec![value; voxel_count(dims)] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[linear_index(self.dims, x, y, z)]
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Central-difference gradient magnitude at every voxel.
    pub fn gradient_norms(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let c = grid_coords(self.dims, i);
                let mut sq = 0.0;
                for axis in 0..3 {
                    let st = axis_stencil(self.dims, c, i, axis, self.spacing);
                    let d = (self.values[st.plus] - self.values[st.minus]) * st.scale;
                    sq += d * d;
                }
                sq.sqrt()
            })
            .collect()
    }

    /// Fraction of voxels in the band `|s| <= band_voxels * spacing` whose
    /// gradient norm is within 0.25 of one. Returns 1 for an empty band.
    pub fn eikonal_fraction(&self, band_voxels: f64) -> f64 {
        let limit = band_voxels * self.spacing;
        let norms = self.gradient_norms();
        let mut total = 0usize;
        let mut good = 0usize;
        for (v, g) in self.values.iter().zip(&norms) {
            if v.abs() <= limit {
                total += 1;
                if (g - 1.0).abs() <= 0.25 {
                    good += 1;
                }
            }
        }
        if total == 0 {
            1.0
        } else {
            good as f64 / total as f64
        }
    }

    /// The SDT eikonal invariant: at least 95% of the 3-voxel band passes.
    pub fn satisfies_eikonal(&self) -> bool {
        self.eikonal_fraction(3.0) >= 0.95
    }
}

/// Voxel set iff `value < iso`.
pub fn binarize(sdf: &SdfGrid, iso: f64) -> BinaryMask {
    BinaryMask {
        dims: sdf.dims,
        spacing: sdf.spacing,
        values: sdf.values.iter().map(|&v| v < iso).collect(),
    }
}

/// Dense boolean voxel mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub dims: Dims,
    pub spacing: f64,
    pub values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, spacing: f64, values: Vec<bool>) -> Result<Self> {
        check_dims(dims, spacing, values.len())?;
        Ok(Self { dims, spacing, values })
    }

    pub fn empty(dims: Dims, spacing: f64) -> Self {
        Self { dims, spacing, values: vec![false; voxel_count(dims)] }
    }

    pub fn from_fn(dims: Dims, spacing: f64, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    values.push(f(x, y, z));
                }
            }
        }
        Self { dims, spacing, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.values[linear_index(self.dims, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = linear_index(self.dims, x, y, z);
        self.values[i] = on;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn same_geometry(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    /// Mean voxel coordinate of the set voxels, `None` for an empty mask.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for (i, _) in self.values.iter().enumerate().filter(|(_, &v)| v) {
            let c = grid_coords(self.dims, i);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
            n += 1;
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }

    /// Copy shifted by an integer voxel offset; voxels leaving the grid are dropped.
    pub fn translated(&self, offset: [i64; 3]) -> BinaryMask {
        let mut out = BinaryMask::empty(self.dims, self.spacing);
        for (i, _) in self.values.iter().enumerate().filter(|(_, &v)| v) {
            let c = grid_coords(self.dims, i);
            let mut target = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let p = c[a] as i64 + offset[a];
                if p < 0 || p >= self.dims[a] as i64 {
                    inside = false;
                    break;
                }
                target[a] = p as usize;
            }
            if inside {
                out.set(target[0], target[1], target[2], true);
            }
        }
        out
    }

    /// Inclusive bounding box `(min, max)` of the set voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, _) in self.values.iter().enumerate().filter(|(_, &v)| v) {
            let c = grid_coords(self.dims, i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            any = true;
        }
        any.then_some((lo, hi))
    }

    /// Sub-mask covering the bounding box of the set voxels.
    pub fn crop_to_content(&self) -> Option<BinaryMask> {
        let (lo, hi) = self.bounding_box()?;
        let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        Some(BinaryMask::from_fn(dims, self.spacing, |x, y, z| {
            self.get(x + lo[0], y + lo[1], z + lo[2])
        }))
    }

    /// Number of 6-connected components of the set voxels.
    pub fn connected_components(&self) -> usize {
        let mut seen = vec![false; self.len()];
        let st = strides(self.dims);
        let mut queue = VecDeque::new();
        let mut components = 0;
        for start in 0..self.len() {
            if !self.values[start] || seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                let c = grid_coords(self.dims, i);
                for axis in 0..3 {
                    if c[axis] > 0 {
                        let j = i - st[axis];
                        if self.values[j] && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                    if c[axis] + 1 < self.dims[axis] {
                        let j = i + st[axis];
                        if self.values[j] && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        components
    }
}
