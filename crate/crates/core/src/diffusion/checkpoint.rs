//! Model checkpoint files.
//!
//! Layout: magic `CAFM`, format version (u32 LE), config length in bytes
//! (u32 LE), the config block as JSON, then little-endian f32 arrays in
//! declaration order:
//!
//! * gmm_oracle: weights `[K]`, means `[K * L]`
//! * trained_net: for each layer, weight `[in * out]` (row-major, `in x out`)
//!   then bias `[out]`
//! * followed by the caller's extra arrays, lengths listed in the config.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

use super::{DenoiserBackend, EpsNet, GaussianMixture, NetConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CAFM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
enum BackendHeader {
    GmmOracle { latent_dim: usize, components: usize, variance: f64 },
    TrainedNet { latent_dim: usize, net: NetConfig },
}

#[derive(Serialize, Deserialize)]
struct Header {
    backend: BackendHeader,
    #[serde(default)]
    metadata: Value,
    #[serde(default)]
    extra_arrays: Vec<usize>,
}

/// A backend plus caller metadata and auxiliary arrays (e.g. codec weights).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub backend: DenoiserBackend,
    pub metadata: Value,
    pub extra_arrays: Vec<Vec<f64>>,
}

fn push_array(buf: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let backend = match &checkpoint.backend {
        DenoiserBackend::GmmOracle(g) => BackendHeader::GmmOracle {
            latent_dim: g.latent_dim(),
            components: g.means().len(),
            variance: g.variance(),
        },
        DenoiserBackend::TrainedNet(n) => BackendHeader::TrainedNet { latent_dim: n.latent_dim(), net: n.config().clone() },
    };
    let header = Header {
        backend,
        metadata: checkpoint.metadata.clone(),
        extra_arrays: checkpoint.extra_arrays.iter().map(Vec::len).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    match &checkpoint.backend {
        DenoiserBackend::GmmOracle(g) => {
            push_array(&mut buf, g.weights().iter().copied());
            push_array(&mut buf, g.means().iter().flatten().copied());
        }
        DenoiserBackend::TrainedNet(n) => {
            for layer in n.layers() {
                push_array(&mut buf, layer.weight.iter().copied());
                push_array(&mut buf, layer.bias.iter().copied());
            }
        }
    }
    for extra in &checkpoint.extra_arrays {
        push_array(&mut buf, extra.iter().copied());
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn array(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.fail("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| r.fail(e.to_string()))?;
    let backend = match header.backend {
        BackendHeader::GmmOracle { latent_dim, components, variance } => {
            let weights = r.array(components)?;
            let flat = r.array(components * latent_dim)?;
            let means = flat.chunks(latent_dim.max(1)).map(<[f64]>::to_vec).collect();
            // f32 storage perturbs the weight sum; renormalise
            let total: f64 = weights.iter().sum();
            let weights = weights.iter().map(|w| w / total).collect();
            DenoiserBackend::GmmOracle(GaussianMixture::new(means, variance, weights)?)
        }
        BackendHeader::TrainedNet { latent_dim, net } => {
            let zeros = EpsNet::zeros(latent_dim, net.clone())?;
            let mut layers = Vec::new();
            for layer in zeros.layers() {
                let (i, o) = layer.weight.dim();
                let w = Array2::from_shape_vec((i, o), r.array(i * o)?).expect("shape");
                let b = Array1::from_vec(r.array(o)?);
                layers.push(super::net::Dense { weight: w, bias: b });
            }
            DenoiserBackend::TrainedNet(EpsNet::from_layers(latent_dim, net, layers)?)
        }
    };
    let mut extra_arrays = Vec::new();
    for n in header.extra_arrays {
        extra_arrays.push(r.array(n)?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(Checkpoint { backend, metadata: header.metadata, extra_arrays })
}
