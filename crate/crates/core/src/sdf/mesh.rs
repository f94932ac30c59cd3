//! Iso-surface extraction at level 0 and Wavefront OBJ export.
//!
//! Each grid cube is split into six tetrahedra around its main diagonal
//! (the Kuhn subdivision). Neighbouring cubes then agree on every shared face
//! diagonal, so the extracted surface is closed wherever it stays inside the
//! grid, with no ambiguous cases to resolve.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{linear_index, SdfGrid};

#[derive(Clone, Debug, Default)]
pub struct TriangleMesh {
    /// World-space positions.
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    /// Every undirected edge used by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        !counts.is_empty() && counts.values().all(|&c| c == 2)
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

// corner ids are dx + 2 dy + 4 dz; each tet walks 0 -> 7 along one axis order
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

struct Builder<'a> {
    sdf: &'a SdfGrid,
    mesh: TriangleMesh,
    edge_vertex: HashMap<(usize, usize), u32>,
}

impl Builder<'_> {
    fn position(&self, index: usize) -> [f64; 3] {
        let c = super::grid_coords(self.sdf.dims, index);
        c.map(|v| v as f64 * self.sdf.spacing)
    }

    fn vertex(&mut self, a: usize, b: usize) -> u32 {
        let key = (a.min(b), a.max(b));
        if let Some(&v) = self.edge_vertex.get(&key) {
            return v;
        }
        let (va, vb) = (self.sdf.values[key.0], self.sdf.values[key.1]);
        let t = va / (va - vb);
        let pa = self.position(key.0);
        let pb = self.position(key.1);
        let p = [0, 1, 2].map(|k| pa[k] + t * (pb[k] - pa[k]));
        let id = self.mesh.vertices.len() as u32;
        self.mesh.vertices.push(p);
        self.edge_vertex.insert(key, id);
        id
    }

    /// Adds a triangle oriented so its normal points along `outward`.
    fn triangle(&mut self, mut tri: [u32; 3], outward: [f64; 3]) {
        let v = tri.map(|i| self.mesh.vertices[i as usize]);
        let e1 = [v[1][0] - v[0][0], v[1][1] - v[0][1], v[1][2] - v[0][2]];
        let e2 = [v[2][0] - v[0][0], v[2][1] - v[0][1], v[2][2] - v[0][2]];
        let n = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        if n[0] * outward[0] + n[1] * outward[1] + n[2] * outward[2] < 0.0 {
            tri.swap(1, 2);
        }
        self.mesh.triangles.push(tri);
    }

    fn direction(&self, from: &[usize], to: &[usize]) -> [f64; 3] {
        let mean = |ids: &[usize]| {
            let mut m = [0.0; 3];
            for &i in ids {
                let p = self.position(i);
                for k in 0..3 {
                    m[k] += p[k] / ids.len() as f64;
                }
            }
            m
        };
        let (a, b) = (mean(from), mean(to));
        [b[0] - a[0], b[1] - a[1], b[2] - a[2]]
    }

    fn tetrahedron(&mut self, ids: [usize; 4]) {
        let (inside, outside): (Vec<usize>, Vec<usize>) =
            ids.iter().partition(|&&i| self.sdf.values[i] < 0.0);
        let outward = self.direction(&inside, &outside);
        match inside.len() {
            1 => {
                let i = inside[0];
                let tri = [self.vertex(i, outside[0]), self.vertex(i, outside[1]), self.vertex(i, outside[2])];
                self.triangle(tri, outward);
            }
            3 => {
                let o = outside[0];
                let tri = [self.vertex(inside[0], o), self.vertex(inside[1], o), self.vertex(inside[2], o)];
                self.triangle(tri, outward);
            }
            2 => {
                let (i1, i2) = (inside[0], inside[1]);
                let (o1, o2) = (outside[0], outside[1]);
                let q = [self.vertex(i1, o1), self.vertex(i1, o2), self.vertex(i2, o2), self.vertex(i2, o1)];
                self.triangle([q[0], q[1], q[2]], outward);
                self.triangle([q[0], q[2], q[3]], outward);
            }
            _ => {}
        }
    }
}

/// Triangulated zero level set (inside is `s < 0`).
pub fn extract_surface(sdf: &SdfGrid) -> Result<TriangleMesh> {
    let has_in = sdf.values.iter().any(|&v| v < 0.0);
    let has_out = sdf.values.iter().any(|&v| v >= 0.0);
    if !(has_in && has_out) {
        return Err(Error::NoSurface);
    }
    let dims = sdf.dims;
    let mut b = Builder { sdf, mesh: TriangleMesh::default(), edge_vertex: HashMap::new() };
    for z in 0..dims[2].saturating_sub(1) {
        for y in 0..dims[1].saturating_sub(1) {
            for x in 0..dims[0].saturating_sub(1) {
                let corner = CORNERS.map(|d| linear_index(dims, x + d[0], y + d[1], z + d[2]));
                for tet in TETS {
                    b.tetrahedron(tet.map(|k| corner[k]));
                }
            }
        }
    }
    if b.mesh.triangles.is_empty() {
        return Err(Error::NoSurface);
    }
    Ok(b.mesh)
}

pub fn write_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# {} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len())?;
    for v in &mesh.vertices {
        writeln!(w, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

/// Extracts the zero iso-surface and writes it as OBJ; returns the triangle count.
pub fn export_mesh(sdf: &SdfGrid, path: &Path) -> Result<usize> {
    let mesh = extract_surface(sdf)?;
    write_obj(&mesh, path)?;
    Ok(mesh.triangles.len())
}
