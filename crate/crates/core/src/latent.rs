//! Codecs between SDF grids and flat diffusion latents.
//!
//! Every decoder is affine in the latent, so the guidance chain rule only
//! needs [`LatentCodec::decode_transpose`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::sdf::{voxel_count, Dims, SdfGrid};

#[derive(Clone, Debug, PartialEq)]
pub enum LatentCodec {
    /// Latent is the grid itself, divided by `scale`.
    Identity { dims: Dims, spacing: f64, scale: f64 },
    /// Block-average pooling by `factor` on encode, trilinear upsampling on
    /// decode. Latent = (block mean - offset) / scale; an empty offset is zero.
    Pooled { fine_dims: Dims, spacing: f64, factor: usize, scale: f64, offset: Vec<f64> },
    /// Whitened principal components fitted by least squares.
    LinearAe(LinearAe),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearAe {
    pub dims: Dims,
    pub spacing: f64,
    pub mean: Vec<f64>,
    /// Orthonormal directions, one per latent coordinate.
    pub directions: Vec<Vec<f64>>,
    /// Standard deviation of the data along each direction.
    pub scales: Vec<f64>,
}

/// Serializable description of a codec; fitted weights travel separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CodecConfig {
    Identity { dims: Dims, spacing: f64, scale: f64 },
    Pooled {
        fine_dims: Dims,
        spacing: f64,
        factor: usize,
        scale: f64,
        /// Whether a fitted per-cell offset travels with the codec.
        #[serde(default)]
        fitted: bool,
    },
    LinearAe { dims: Dims, spacing: f64, components: usize },
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig::LinearAe { dims: [32; 3], spacing: 1.0, components: 32 }
    }
}

struct Axis1d {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w: Vec<f64>,
}

/// Cell-centred linear interpolation weights from `coarse` to `coarse * factor`.
fn interpolation_axis(coarse: usize, factor: usize) -> Axis1d {
    let fine = coarse * factor;
    let mut a = Axis1d { lo: Vec::with_capacity(fine), hi: Vec::with_capacity(fine), w: Vec::with_capacity(fine) };
    for i in 0..fine {
        let u = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (coarse - 1) as f64);
        let lo = (u.floor() as usize).min(coarse.saturating_sub(2));
        let hi = (lo + 1).min(coarse - 1);
        a.lo.push(lo);
        a.hi.push(hi);
        a.w.push(if hi == lo { 0.0 } else { u - lo as f64 });
    }
    a
}

impl LatentCodec {
    pub fn from_config(cfg: &CodecConfig) -> Result<Self> {
        match *cfg {
            CodecConfig::Identity { dims, spacing, scale } => {
                if !(scale > 0.0) {
                    return Err(Error::Config("codec scale must be positive".into()));
                }
                Ok(Self::Identity { dims, spacing, scale })
            }
            CodecConfig::Pooled { fine_dims, spacing, factor, scale, fitted } => {
                if fitted {
                    return Err(Error::Config("a fitted pooled codec needs its offset array".into()));
                }
                if factor == 0 || fine_dims.iter().any(|&d| d % factor != 0 || d == 0) {
                    return Err(Error::Config(format!("dims {fine_dims:?} not divisible by factor {factor}")));
                }
                if !(scale > 0.0) {
                    return Err(Error::Config("codec scale must be positive".into()));
                }
                Ok(Self::Pooled { fine_dims, spacing, factor, scale, offset: Vec::new() })
            }
            CodecConfig::LinearAe { .. } => {
                Err(Error::Config("a linear autoencoder must be fitted to data first".into()))
            }
        }
    }

    pub fn config(&self) -> CodecConfig {
        match self {
            Self::Identity { dims, spacing, scale } => CodecConfig::Identity { dims: *dims, spacing: *spacing, scale: *scale },
            Self::Pooled { fine_dims, spacing, factor, scale, offset } => CodecConfig::Pooled {
                fine_dims: *fine_dims,
                spacing: *spacing,
                factor: *factor,
                scale: *scale,
                fitted: !offset.is_empty(),
            },
            Self::LinearAe(ae) => CodecConfig::LinearAe { dims: ae.dims, spacing: ae.spacing, components: ae.scales.len() },
        }
    }

    /// Fitted arrays, in the order [`LatentCodec::from_parts`] expects.
    pub fn arrays(&self) -> Vec<Vec<f64>> {
        match self {
            Self::LinearAe(ae) => {
                let mut out = vec![ae.mean.clone(), ae.scales.clone()];
                out.push(ae.directions.iter().flatten().copied().collect());
                out
            }
            Self::Pooled { offset, .. } if !offset.is_empty() => vec![offset.clone()],
            _ => Vec::new(),
        }
    }

    pub fn from_parts(cfg: &CodecConfig, arrays: &[Vec<f64>]) -> Result<Self> {
        match *cfg {
            CodecConfig::LinearAe { dims, spacing, components } => {
                let n = voxel_count(dims);
                let [mean, scales, flat] = arrays else {
                    return Err(Error::Config("linear autoencoder needs three arrays".into()));
                };
                if mean.len() != n || scales.len() != components || flat.len() != n * components {
                    return Err(Error::DimMismatch("linear autoencoder arrays".into()));
                }
                let directions = flat.chunks(n).map(<[f64]>::to_vec).collect();
                Ok(Self::LinearAe(LinearAe { dims, spacing, mean: mean.clone(), directions, scales: scales.clone() }))
            }
            CodecConfig::Pooled { fine_dims, spacing, factor, scale, fitted: true } => {
                let mut codec =
                    Self::from_config(&CodecConfig::Pooled { fine_dims, spacing, factor, scale, fitted: false })?;
                let [offset] = arrays else {
                    return Err(Error::Config("fitted pooled codec needs one array".into()));
                };
                if offset.len() != codec.latent_dim() {
                    return Err(Error::DimMismatch("pooled offset length".into()));
                }
                if let Self::Pooled { offset: o, .. } = &mut codec {
                    *o = offset.clone();
                }
                Ok(codec)
            }
            _ => Self::from_config(cfg),
        }
    }

    /// Pooled codec standardized on `data`: the offset is the mean block
    /// average and the scale makes the mean per-cell variance one.
    pub fn fit_pooled(data: &[SdfGrid], factor: usize) -> Result<Self> {
        let first = data.first().ok_or(Error::EmptyDataset)?;
        if data.iter().any(|g| g.dims != first.dims || g.spacing != first.spacing) {
            return Err(Error::DimMismatch("training grids must share dims and spacing".into()));
        }
        let raw = Self::from_config(&CodecConfig::Pooled {
            fine_dims: first.dims,
            spacing: first.spacing,
            factor,
            scale: 1.0,
            fitted: false,
        })?;
        let pooled: Vec<Vec<f64>> = data.iter().map(|g| raw.encode(g)).collect::<Result<_>>()?;
        let n = pooled.len() as f64;
        let l = raw.latent_dim();
        let offset: Vec<f64> = (0..l).map(|j| pooled.iter().map(|p| p[j]).sum::<f64>() / n).collect();
        let var = pooled.iter().flat_map(|p| p.iter().zip(&offset).map(|(v, m)| (v - m).powi(2))).sum::<f64>() / (n * l as f64);
        if !(var > 0.0) {
            return Err(Error::Config("training grids have no variance".into()));
        }
        Ok(Self::Pooled { fine_dims: first.dims, spacing: first.spacing, factor, scale: var.sqrt(), offset })
    }

    /// Least-squares linear autoencoder: the top `components` principal
    /// directions of `data`, whitened so every latent coordinate has unit
    /// variance over the training set.
    pub fn fit_linear_ae(data: &[SdfGrid], components: usize) -> Result<Self> {
        let first = data.first().ok_or(Error::EmptyDataset)?;
        if data.iter().any(|g| g.dims != first.dims || g.spacing != first.spacing) {
            return Err(Error::DimMismatch("training grids must share dims and spacing".into()));
        }
        let n = data.len();
        let d = first.len();
        let mut mean = vec![0.0; d];
        for g in data {
            mean.iter_mut().zip(&g.values).for_each(|(m, v)| *m += v / n as f64);
        }
        let centered = DMatrix::from_fn(n, d, |i, j| data[i].values[j] - mean[j]);
        let gram = &centered * centered.transpose();
        let eig = gram.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let mut directions = Vec::new();
        let mut scales = Vec::new();
        for &k in order.iter().take(components) {
            let lambda = eig.eigenvalues[k];
            if lambda <= top * 1e-12 {
                break;
            }
            let v = eig.eigenvectors.column(k);
            let u = centered.transpose() * v / lambda.sqrt();
            directions.push(u.iter().copied().collect());
            scales.push((lambda / n as f64).sqrt());
        }
        if directions.is_empty() {
            return Err(Error::Config("training grids have no variance".into()));
        }
        Ok(Self::LinearAe(LinearAe { dims: first.dims, spacing: first.spacing, mean, directions, scales }))
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Self::Identity { dims, .. } => voxel_count(*dims),
            Self::Pooled { fine_dims, factor, .. } => voxel_count(fine_dims.map(|d| d / factor)),
            Self::LinearAe(ae) => ae.scales.len(),
        }
    }

    /// Geometry of decoded grids.
    pub fn grid_dims(&self) -> Dims {
        match self {
            Self::Identity { dims, .. } => *dims,
            Self::Pooled { fine_dims, .. } => *fine_dims,
            Self::LinearAe(ae) => ae.dims,
        }
    }

    pub fn spacing(&self) -> f64 {
        match self {
            Self::Identity { spacing, .. } | Self::Pooled { spacing, .. } => *spacing,
            Self::LinearAe(ae) => ae.spacing,
        }
    }

    pub fn encode(&self, sdf: &SdfGrid) -> Result<Vec<f64>> {
        if sdf.dims != self.grid_dims() {
            return Err(Error::DimMismatch(format!("grid {:?} vs codec {:?}", sdf.dims, self.grid_dims())));
        }
        Ok(match self {
            Self::Identity { scale, .. } => sdf.values.iter().map(|v| v / scale).collect(),
            Self::Pooled { fine_dims, factor, scale, offset, .. } => {
                let coarse = fine_dims.map(|d| d / factor);
                let mut out = vec![0.0; voxel_count(coarse)];
                let norm = 1.0 / (factor * factor * factor) as f64;
                for (i, v) in sdf.values.iter().enumerate() {
                    let c = crate::sdf::grid_coords(*fine_dims, i);
                    let k = crate::sdf::linear_index(coarse, c[0] / factor, c[1] / factor, c[2] / factor);
                    out[k] += v * norm;
                }
                if !offset.is_empty() {
                    out.iter_mut().zip(offset).for_each(|(o, m)| *o -= m);
                }
                out.iter_mut().for_each(|o| *o /= scale);
                out
            }
            Self::LinearAe(ae) => ae
                .directions
                .iter()
                .zip(&ae.scales)
                .map(|(u, s)| u.iter().zip(&sdf.values).zip(&ae.mean).map(|((u, v), m)| u * (v - m)).sum::<f64>() / s)
                .collect(),
        })
    }

    pub fn decode(&self, latent: &[f64]) -> Result<SdfGrid> {
        if latent.len() != self.latent_dim() {
            return Err(Error::DimMismatch(format!("latent {} vs codec {}", latent.len(), self.latent_dim())));
        }
        let dims = self.grid_dims();
        let values = match self {
            Self::Identity { scale, .. } => latent.iter().map(|v| v * scale).collect(),
            Self::Pooled { fine_dims, factor, scale, offset, .. } => {
                let coarse = fine_dims.map(|d| d / factor);
                let axes = [0, 1, 2].map(|a| interpolation_axis(coarse[a], *factor));
                let cells: Vec<f64> = if offset.is_empty() {
                    latent.iter().map(|z| z * scale).collect()
                } else {
                    latent.iter().zip(offset).map(|(z, m)| z * scale + m).collect()
                };
                let mut out = vec![0.0; voxel_count(*fine_dims)];
                for (i, o) in out.iter_mut().enumerate() {
                    let c = crate::sdf::grid_coords(*fine_dims, i);
                    for_each_corner(&axes, c, coarse, |k, w| *o += w * cells[k]);
                }
                out
            }
            Self::LinearAe(ae) => {
                let mut out = ae.mean.clone();
                for ((u, s), z) in ae.directions.iter().zip(&ae.scales).zip(latent) {
                    let a = s * z;
                    out.iter_mut().zip(u).for_each(|(o, u)| *o += a * u);
                }
                out
            }
        };
        Ok(SdfGrid { dims, spacing: self.spacing(), values })
    }

    /// Maps a gradient over decoded grid values back onto the latent
    /// (the transpose of the decoder's linear part).
    pub fn decode_transpose(&self, grid_grad: &[f64]) -> Result<Vec<f64>> {
        if grid_grad.len() != voxel_count(self.grid_dims()) {
            return Err(Error::DimMismatch("gradient length vs decoded grid".into()));
        }
        Ok(match self {
            Self::Identity { scale, .. } => grid_grad.iter().map(|g| g * scale).collect(),
            Self::Pooled { fine_dims, factor, scale, .. } => {
                let coarse = fine_dims.map(|d| d / factor);
                let axes = [0, 1, 2].map(|a| interpolation_axis(coarse[a], *factor));
                let mut out = vec![0.0; voxel_count(coarse)];
                for (i, g) in grid_grad.iter().enumerate() {
                    if *g == 0.0 {
                        continue;
                    }
                    let c = crate::sdf::grid_coords(*fine_dims, i);
                    for_each_corner(&axes, c, coarse, |k, w| out[k] += w * g * scale);
                }
                out
            }
            Self::LinearAe(ae) => ae
                .directions
                .iter()
                .zip(&ae.scales)
                .map(|(u, s)| s * u.iter().zip(grid_grad).map(|(u, g)| u * g).sum::<f64>())
                .collect(),
        })
    }

    pub fn describe(&self) -> Value {
        serde_json::to_value(self.config()).unwrap_or(Value::Null)
    }
}

fn for_each_corner(axes: &[Axis1d; 3], c: [usize; 3], coarse: Dims, mut f: impl FnMut(usize, f64)) {
    let (ax, ay, az) = (&axes[0], &axes[1], &axes[2]);
    let xs = [(ax.lo[c[0]], 1.0 - ax.w[c[0]]), (ax.hi[c[0]], ax.w[c[0]])];
    let ys = [(ay.lo[c[1]], 1.0 - ay.w[c[1]]), (ay.hi[c[1]], ay.w[c[1]])];
    let zs = [(az.lo[c[2]], 1.0 - az.w[c[2]]), (az.hi[c[2]], az.w[c[2]])];
    for &(z, wz) in &zs {
        for &(y, wy) in &ys {
            for &(x, wx) in &xs {
                let w = wx * wy * wz;
                if w != 0.0 {
                    f(crate::sdf::linear_index(coarse, x, y, z), w);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normal};
    use crate::sdf::{make_shape, ShapeParams};

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn transpose_is_adjoint() {
        // <decode_linear(z), g> == <z, decode_transpose(g)>
        let codecs = [
            LatentCodec::from_config(&CodecConfig::Identity { dims: [4, 5, 6], spacing: 1.0, scale: 3.0 }).unwrap(),
            LatentCodec::from_config(&CodecConfig::Pooled { fine_dims: [8, 12, 8], spacing: 1.0, factor: 4, scale: 2.0, fitted: false }).unwrap(),
        ];
        for codec in codecs {
            let mut rng = seeded(1);
            let z = standard_normal(&mut rng, codec.latent_dim());
            let g = standard_normal(&mut rng, voxel_count(codec.grid_dims()));
            let lhs = dot(&codec.decode(&z).unwrap().values, &g);
            let rhs = dot(&z, &codec.decode_transpose(&g).unwrap());
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn pooled_reproduces_constants() {
        let codec = LatentCodec::default_pooled();
        let g = SdfGrid::constant([32; 3], 1.0, 3.5);
        let back = codec.decode(&codec.encode(&g).unwrap()).unwrap();
        assert!(back.values.iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn linear_ae_reconstructs_training_span() {
        let shapes: Vec<SdfGrid> = (0..6)
            .map(|i| {
                let r = 3.0 + i as f64 * 0.4;
                make_shape(&ShapeParams::Sphere { center: [8.0; 3], radius: r }, [16; 3], 1.0, 0).unwrap()
            })
            .collect();
        let codec = LatentCodec::fit_linear_ae(&shapes, 16).unwrap();
        assert!(codec.latent_dim() <= 5);
        for s in &shapes {
            let back = codec.decode(&codec.encode(s).unwrap()).unwrap();
            for (a, b) in back.values.iter().zip(&s.values) {
                assert!((a - b).abs() < 1e-8);
            }
        }
        // whitened coordinates: unit variance over the training set
        let lat: Vec<Vec<f64>> = shapes.iter().map(|s| codec.encode(s).unwrap()).collect();
        for k in 0..codec.latent_dim() {
            let var = lat.iter().map(|z| z[k] * z[k]).sum::<f64>() / lat.len() as f64;
            assert!((var - 1.0).abs() < 1e-8, "{var}");
        }
        let rebuilt = LatentCodec::from_parts(&codec.config(), &codec.arrays()).unwrap();
        assert_eq!(rebuilt, codec);
    }

    #[test]
    fn fitted_pooled_standardizes() {
        let shapes: Vec<SdfGrid> = (0..5)
            .map(|i| {
                let c = 7.0 + i as f64 * 0.5;
                make_shape(&ShapeParams::Sphere { center: [c, 8.0, 8.0], radius: 4.0 }, [16; 3], 1.0, 0).unwrap()
            })
            .collect();
        let codec = LatentCodec::fit_pooled(&shapes, 4).unwrap();
        let lat: Vec<Vec<f64>> = shapes.iter().map(|s| codec.encode(s).unwrap()).collect();
        let l = codec.latent_dim() as f64;
        let mean: f64 = lat.iter().flatten().sum::<f64>() / (5.0 * l);
        let var: f64 = lat.iter().flatten().map(|v| v * v).sum::<f64>() / (5.0 * l);
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        // offset travels with the codec; decoding the zero latent gives the upsampled mean
        let rebuilt = LatentCodec::from_parts(&codec.config(), &codec.arrays()).unwrap();
        assert_eq!(rebuilt, codec);
        let LatentCodec::Pooled { offset, .. } = &codec else { unreachable!() };
        let up = LatentCodec::from_config(&CodecConfig::Pooled { fine_dims: [16; 3], spacing: 1.0, factor: 4, scale: 1.0, fitted: false })
            .unwrap()
            .decode(offset)
            .unwrap();
        assert_eq!(codec.decode(&vec![0.0; 64]).unwrap(), up);
        assert!(LatentCodec::from_config(&codec.config()).is_err());
    }

    impl LatentCodec {
        fn default_pooled() -> Self {
            LatentCodec::from_config(&CodecConfig::Pooled {
                fine_dims: [32; 3],
                spacing: 1.0,
                factor: 4,
                scale: 8.0,
                fitted: false,
            })
            .unwrap()
        }
    }
}
