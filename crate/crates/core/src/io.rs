//! Volume files: flat little-endian raw data (`<stem>.raw`, x fastest) with a
//! JSON sidecar (`<stem>.json`).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sdf::{voxel_count, BinaryMask, Dims, SdfGrid};
use crate::texture::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Sdf,
    Mask,
    Intensity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: Dims,
    pub spacing: f64,
    pub dtype: Dtype,
    pub kind: VolumeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_center: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_width: Option<f64>,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// `(<stem>.raw, <stem>.json)`.
pub fn volume_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (with_suffix(stem, ".raw"), with_suffix(stem, ".json"))
}

fn write_files(stem: &Path, sidecar: &Sidecar, raw: &[u8]) -> Result<()> {
    let (raw_path, json_path) = volume_paths(stem);
    fs::write(raw_path, raw)?;
    fs::write(json_path, serde_json::to_string_pretty(sidecar)? + "\n")?;
    Ok(())
}

fn read_files(stem: &Path, kind: VolumeKind) -> Result<(Sidecar, Vec<u8>)> {
    let (raw_path, json_path) = volume_paths(stem);
    let fail = |reason: String| Error::Format { path: json_path.clone(), reason };
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&json_path)?).map_err(|e| fail(e.to_string()))?;
    if sidecar.kind != kind {
        return Err(fail(format!("expected kind {kind:?}, found {:?}", sidecar.kind)));
    }
    let want = match kind {
        VolumeKind::Mask => Dtype::U8,
        _ => Dtype::F32,
    };
    if sidecar.dtype != want {
        return Err(fail(format!("kind {kind:?} requires dtype {want:?}")));
    }
    if !(sidecar.spacing > 0.0) || sidecar.dims.contains(&0) {
        return Err(fail("dims and spacing must be positive".into()));
    }
    let raw = fs::read(&raw_path)?;
    let width = if want == Dtype::U8 { 1 } else { 4 };
    let expected = voxel_count(sidecar.dims) * width;
    if raw.len() != expected {
        return Err(Error::Format { path: raw_path, reason: format!("{} bytes, expected {expected}", raw.len()) });
    }
    Ok((sidecar, raw))
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn f32_values(stem: &Path, raw: &[u8]) -> Result<Vec<f64>> {
    let values: Vec<f64> =
        raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format { path: volume_paths(stem).0, reason: "non-finite value".into() });
    }
    Ok(values)
}

pub fn write_sdf(stem: &Path, sdf: &SdfGrid) -> Result<()> {
    let sidecar = Sidecar {
        dims: sdf.dims,
        spacing: sdf.spacing,
        dtype: Dtype::F32,
        kind: VolumeKind::Sdf,
        window_center: None,
        window_width: None,
    };
    write_files(stem, &sidecar, &f32_bytes(&sdf.values))
}

pub fn read_sdf(stem: &Path) -> Result<SdfGrid> {
    let (sc, raw) = read_files(stem, VolumeKind::Sdf)?;
    SdfGrid::new(sc.dims, sc.spacing, f32_values(stem, &raw)?)
}

pub fn write_mask(stem: &Path, mask: &BinaryMask) -> Result<()> {
    let sidecar = Sidecar {
        dims: mask.dims,
        spacing: mask.spacing,
        dtype: Dtype::U8,
        kind: VolumeKind::Mask,
        window_center: None,
        window_width: None,
    };
    let raw: Vec<u8> = mask.values.iter().map(|&b| b as u8).collect();
    write_files(stem, &sidecar, &raw)
}

pub fn read_mask(stem: &Path) -> Result<BinaryMask> {
    let (sc, raw) = read_files(stem, VolumeKind::Mask)?;
    if raw.iter().any(|&b| b > 1) {
        return Err(Error::Format { path: volume_paths(stem).0, reason: "mask bytes must be 0 or 1".into() });
    }
    BinaryMask::new(sc.dims, sc.spacing, raw.iter().map(|&b| b == 1).collect())
}

pub fn write_volume(stem: &Path, volume: &Volume) -> Result<()> {
    let sidecar = Sidecar {
        dims: volume.dims,
        spacing: volume.spacing,
        dtype: Dtype::F32,
        kind: VolumeKind::Intensity,
        window_center: volume.window_center,
        window_width: volume.window_width,
    };
    write_files(stem, &sidecar, &f32_bytes(&volume.values))
}

pub fn read_volume(stem: &Path) -> Result<Volume> {
    let (sc, raw) = read_files(stem, VolumeKind::Intensity)?;
    let mut v = Volume::new(sc.dims, sc.spacing, f32_values(stem, &raw)?)?;
    v.window_center = sc.window_center;
    v.window_width = sc.window_width;
    Ok(v)
}
