//! Isosurface extraction with the classic 15-case marching-cubes tables.
//! Ambiguous faces use the fixed table resolution (no asymptotic decider);
//! crossing vertices are shared per grid edge, so the mesh is watertight
//! whenever the iso-region stays off the volume boundary.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::surface::tables::{EDGE_CORNERS, EDGE_TABLE, TRIANGLE_TABLE};
use crate::surface::TriangleMesh;
use crate::volume::Volume;

const CORNER_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Extract the `iso` level set of a scalar field as a triangle mesh in
/// physical millimeters. Values above `iso` count as inside; normals point
/// out of the enclosed region.
pub fn extract_isosurface(field: &Volume, iso: f32) -> Result<TriangleMesh> {
    let geom = field.geometry();
    let [nx, ny, nz] = geom.dims;
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    // one interpolated vertex per crossing grid edge, shared by all cells:
    // key = (corner linear index, axis)
    let mut edge_vertex: HashMap<(usize, usize, usize, usize), u32> = HashMap::new();

    for z in 0..nz.saturating_sub(1) {
        for y in 0..ny.saturating_sub(1) {
            for x in 0..nx.saturating_sub(1) {
                let mut values = [0.0f32; 8];
                let mut config = 0usize;
                for (c, off) in CORNER_OFFSETS.iter().enumerate() {
                    let v = field.at(x + off[0], y + off[1], z + off[2]);
                    values[c] = v;
                    if v < iso {
                        config |= 1 << c;
                    }
                }
                if EDGE_TABLE[config] == 0 {
                    continue;
                }
                let mut cell_edges = [u32::MAX; 12];
                for (e, corners) in EDGE_CORNERS.iter().enumerate() {
                    if EDGE_TABLE[config] & (1 << e) == 0 {
                        continue;
                    }
                    let [c0, c1] = *corners;
                    let o0 = CORNER_OFFSETS[c0];
                    let o1 = CORNER_OFFSETS[c1];
                    let p0 = [x + o0[0], y + o0[1], z + o0[2]];
                    let p1 = [x + o1[0], y + o1[1], z + o1[2]];
                    // canonical key: lexicographically smaller endpoint + axis
                    let axis = (0..3).find(|&a| p0[a] != p1[a]).expect("distinct corners");
                    let lo = if p0 <= p1 { p0 } else { p1 };
                    let key = (lo[0], lo[1], lo[2], axis);
                    let idx = *edge_vertex.entry(key).or_insert_with(|| {
                        let (v0, v1) = (values[c0], values[c1]);
                        let t = if (v1 - v0).abs() < 1e-12 {
                            0.5
                        } else {
                            ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0) as f64
                        };
                        let a = [p0[0] as f64, p0[1] as f64, p0[2] as f64];
                        let b = [p1[0] as f64, p1[1] as f64, p1[2] as f64];
                        let voxel = [
                            a[0] + t * (b[0] - a[0]),
                            a[1] + t * (b[1] - a[1]),
                            a[2] + t * (b[2] - a[2]),
                        ];
                        vertices.push(geom.voxel_to_world(voxel));
                        (vertices.len() - 1) as u32
                    });
                    cell_edges[e] = idx;
                }
                let row = &TRIANGLE_TABLE[config];
                let mut i = 0;
                while i + 2 < row.len() && row[i] >= 0 {
                    let a = cell_edges[row[i] as usize];
                    let b = cell_edges[row[i + 1] as usize];
                    let c = cell_edges[row[i + 2] as usize];
                    // degenerate (zero-area) emissions can occur when a
                    // crossing sits exactly on a corner; drop them
                    if a != b && b != c && a != c {
                        triangles.push([a, b, c]);
                    }
                    i += 3;
                }
            }
        }
    }
    if triangles.is_empty() {
        return Err(Error::EmptySurface);
    }
    let mesh = TriangleMesh {
        vertices,
        triangles,
        channels: Default::default(),
    };
    mesh.validate()?;
    Ok(mesh)
}
