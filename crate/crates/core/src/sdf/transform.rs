use crate::error::{Error, Result};

use super::{grid_coords, strides, BinaryMask, Dims, SdfGrid};

/// Exact Euclidean signed distance to the inside/outside face interface.
///
/// The surface is the set of voxel faces separating a set voxel from an unset
/// neighbour; each voxel gets the distance from its centre to the nearest such
/// face centre, negative inside. Faces on the outer grid boundary are not part
/// of the surface.
///
/// Runs the separable lower-envelope transform on a doubled lattice where
/// voxel centres sit at even and face centres at odd coordinates, so every
/// squared distance stays an exact integer until the final square root.
pub fn signed_distance_transform(mask: &BinaryMask) -> Result<SdfGrid> {
    let set = mask.count();
    if set == 0 {
        return Err(Error::EmptyMask);
    }
    if set == mask.len() {
        return Err(Error::FullMask);
    }

    let dims = mask.dims;
    let fine: Dims = dims.map(|n| 2 * n - 1);
    let fine_len = fine[0] * fine[1] * fine[2];
    let mut field = vec![f64::INFINITY; fine_len];

    let st = strides(dims);
    let fst = strides(fine);
    for i in 0..mask.len() {
        let c = grid_coords(dims, i);
        for axis in 0..3 {
            if c[axis] + 1 < dims[axis] && mask.values[i] != mask.values[i + st[axis]] {
                let mut f = [2 * c[0], 2 * c[1], 2 * c[2]];
                f[axis] += 1;
                field[f[0] * fst[0] + f[1] * fst[1] + f[2] * fst[2]] = 0.0;
            }
        }
    }

    let mut scratch = EnvelopeScratch::default();
    for axis in 0..3 {
        transform_axis(&mut field, fine, axis, &mut scratch);
    }

    let half = 0.5 * mask.spacing;
    let values = (0..mask.len())
        .map(|i| {
            let c = grid_coords(dims, i);
            let d2 = field[2 * c[0] * fst[0] + 2 * c[1] * fst[1] + 2 * c[2] * fst[2]];
            let d = d2.sqrt() * half;
            if mask.values[i] {
                -d
            } else {
                d
            }
        })
        .collect();
    Ok(SdfGrid { dims, spacing: mask.spacing, values })
}

#[derive(Default)]
struct EnvelopeScratch {
    line: Vec<f64>,
    out: Vec<f64>,
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

fn transform_axis(field: &mut [f64], dims: Dims, axis: usize, scratch: &mut EnvelopeScratch) {
    let st = strides(dims);
    let n = dims[axis];
    let (a1, a2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    scratch.line.resize(n, 0.0);
    scratch.out.resize(n, 0.0);
    for j in 0..dims[a2] {
        for i in 0..dims[a1] {
            let base = i * st[a1] + j * st[a2];
            for k in 0..n {
                scratch.line[k] = field[base + k * st[axis]];
            }
            lower_envelope(&scratch.line, &mut scratch.out, &mut scratch.sites, &mut scratch.bounds);
            for k in 0..n {
                field[base + k * st[axis]] = scratch.out[k];
            }
        }
    }
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas rooted at finite samples).
fn lower_envelope(f: &[f64], out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        while let Some(&p) = sites.last() {
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= *bounds.last().unwrap() {
                sites.pop();
                bounds.pop();
            } else {
                sites.push(q);
                bounds.push(s);
                break;
            }
        }
        if sites.is_empty() {
            sites.push(q);
            bounds.push(f64::NEG_INFINITY);
        }
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < sites.len() && bounds[k + 1] < q as f64 {
            k += 1;
        }
        let p = sites[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}
