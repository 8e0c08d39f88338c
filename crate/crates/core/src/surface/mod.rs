//! Triangle meshes and cortical surface extraction: isosurface meshing,
//! two-stage deformable refinement, pial generation and inflation.

mod tables;
pub mod marching;
pub mod ply;
pub mod deform;
pub mod inflate;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{cross, dot, norm, scale, sub, Point3};

pub use deform::{deform_mesh, pial_from_white, DeformConfig, DeformStage, DeformTarget};
pub use inflate::inflate;
pub use marching::extract_isosurface;

/// Channel name for the accumulated signed normal displacement written by
/// [`inflate`].
pub const INFLATION_CHANNEL: &str = "inflation_displacement";

/// Vertex/triangle surface in physical millimeters with named per-vertex
/// scalar channels. Triangles are counter-clockwise seen from outside.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
    pub channels: BTreeMap<String, Vec<f64>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let mesh = Self {
            vertices,
            triangles,
            channels: BTreeMap::new(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for t in &self.triangles {
            if t.iter().any(|&i| i >= n) {
                return Err(Error::TopologyMismatch(format!(
                    "triangle {t:?} references a vertex past {n}"
                )));
            }
        }
        for (name, data) in &self.channels {
            if data.len() != self.vertices.len() {
                return Err(Error::TopologyMismatch(format!(
                    "channel {name:?} has {} values for {} vertices",
                    data.len(),
                    self.vertices.len()
                )));
            }
        }
        Ok(())
    }

    pub fn triangle_points(&self, t: usize) -> [Point3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        norm(cross(sub(b, a), sub(c, a))) / 2.0
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Signed enclosed volume; positive when normals point outward.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&[a, b, c]| {
                let pa = self.vertices[a as usize];
                let pb = self.vertices[b as usize];
                let pc = self.vertices[c as usize];
                dot(pa, cross(pb, pc)) / 6.0
            })
            .sum()
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        for v in &self.vertices {
            c = crate::geometry::add(c, *v);
        }
        scale(c, 1.0 / self.vertices.len() as f64)
    }

    /// Area-weighted outward vertex normals.
    pub fn vertex_normals(&self) -> Vec<Point3> {
        let mut normals = vec![[0.0; 3]; self.vertices.len()];
        for &[a, b, c] in &self.triangles {
            let pa = self.vertices[a as usize];
            let pb = self.vertices[b as usize];
            let pc = self.vertices[c as usize];
            let n = cross(sub(pb, pa), sub(pc, pa)); // magnitude = 2 * area
            for &i in &[a, b, c] {
                normals[i as usize] = crate::geometry::add(normals[i as usize], n);
            }
        }
        for n in normals.iter_mut() {
            let len = norm(*n);
            if len > 1e-30 {
                *n = scale(*n, 1.0 / len);
            }
        }
        normals
    }

    /// One-ring vertex adjacency.
    pub fn vertex_neighbors(&self) -> Vec<Vec<u32>> {
        let mut nbrs: Vec<Vec<u32>> = vec![Vec::new(); self.vertices.len()];
        for &[a, b, c] in &self.triangles {
            for (u, v) in [(a, b), (b, c), (c, a)] {
                if !nbrs[u as usize].contains(&v) {
                    nbrs[u as usize].push(v);
                }
                if !nbrs[v as usize].contains(&u) {
                    nbrs[v as usize].push(u);
                }
            }
        }
        nbrs
    }

    /// Triangles incident to each vertex.
    pub fn vertex_triangles(&self) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); self.vertices.len()];
        for (t, &[a, b, c]) in self.triangles.iter().enumerate() {
            out[a as usize].push(t as u32);
            out[b as usize].push(t as u32);
            out[c as usize].push(t as u32);
        }
        out
    }

    /// Undirected edge -> incident triangle count.
    pub fn edge_counts(&self) -> BTreeMap<(u32, u32), u32> {
        let mut edges = BTreeMap::new();
        for &[a, b, c] in &self.triangles {
            for (u, v) in [(a, b), (b, c), (c, a)] {
                let key = (u.min(v), u.max(v));
                *edges.entry(key).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Every edge shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    /// V - E + F.
    pub fn euler_characteristic(&self) -> i64 {
        let v = self.vertices.len() as i64;
        let e = self.edge_counts().len() as i64;
        let f = self.triangles.len() as i64;
        v - e + f
    }

    pub fn set_channel(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        if data.len() != self.vertices.len() {
            return Err(Error::TopologyMismatch(format!(
                "channel {name:?} length {} != vertex count {}",
                data.len(),
                self.vertices.len()
            )));
        }
        self.channels.insert(name.to_string(), data);
        Ok(())
    }

    pub fn channel(&self, name: &str) -> Result<&[f64]> {
        self.channels
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::MissingChannel(name.to_string()))
    }

    /// Mean edge length, a resolution proxy for step-size defaults.
    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edge_counts();
        if edges.is_empty() {
            return 0.0;
        }
        let sum: f64 = edges
            .keys()
            .map(|&(a, b)| norm(sub(self.vertices[a as usize], self.vertices[b as usize])))
            .sum();
        sum / edges.len() as f64
    }
}

/// Regular icosahedron subdivided onto a sphere; handy for analytic tests
/// and as a deformable seed.
pub fn icosphere(center: Point3, radius: f64, subdivisions: u32) -> TriangleMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<Point3> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let mut triangles: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for &[a, b, c] in &triangles {
            let mut mid = |u: u32, v: u32, vertices: &mut Vec<Point3>| -> u32 {
                let key = (u.min(v), u.max(v));
                *midpoint.entry(key).or_insert_with(|| {
                    let m = scale(
                        crate::geometry::add(vertices[u as usize], vertices[v as usize]),
                        0.5,
                    );
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                })
            };
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        triangles = next;
    }
    for v in vertices.iter_mut() {
        let len = norm(*v);
        *v = [
            center[0] + v[0] / len * radius,
            center[1] + v[1] / len * radius,
            center[2] + v[2] / len * radius,
        ];
    }
    TriangleMesh {
        vertices,
        triangles,
        channels: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_is_watertight_sphere() {
        let m = icosphere([1.0, -2.0, 3.0], 10.0, 3);
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.signed_volume() > 0.0, "outward winding expected");
        let analytic = 4.0 * std::f64::consts::PI * 100.0;
        let rel = (m.total_area() - analytic).abs() / analytic;
        assert!(rel < 0.02, "area off by {:.2}%", rel * 100.0);
    }

    #[test]
    fn vertex_normals_point_outward_on_sphere() {
        let center = [5.0, 5.0, 5.0];
        let m = icosphere(center, 8.0, 2);
        for (v, n) in m.vertices.iter().zip(m.vertex_normals()) {
            let radial = sub(*v, center);
            assert!(dot(radial, n) > 0.0);
        }
    }

    #[test]
    fn channel_length_checked() {
        let mut m = icosphere([0.0; 3], 1.0, 0);
        assert!(m.set_channel("x", vec![0.0; 3]).is_err());
        assert!(m.set_channel("x", vec![0.0; m.vertices.len()]).is_ok());
        assert!(matches!(m.channel("missing"), Err(Error::MissingChannel(_))));
    }
}
