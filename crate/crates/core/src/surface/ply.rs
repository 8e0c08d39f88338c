//! ASCII PLY mesh I/O. Vertex elements carry x, y, z plus one float
//! property per named scalar channel; faces are triangle index lists.
//! Write-then-read preserves channels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::surface::TriangleMesh;

pub fn encode_ply(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", mesh.vertices.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    for name in mesh.channels.keys() {
        out.push_str(&format!("property float {name}\n"));
    }
    out.push_str(&format!("element face {}\n", mesh.triangles.len()));
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for (i, v) in mesh.vertices.iter().enumerate() {
        out.push_str(&format!("{} {} {}", v[0], v[1], v[2]));
        for data in mesh.channels.values() {
            out.push_str(&format!(" {}", data[i]));
        }
        out.push('\n');
    }
    for t in &mesh.triangles {
        out.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    out
}

pub fn write_ply<P: AsRef<Path>>(mesh: &TriangleMesh, path: P) -> Result<()> {
    Ok(fs::write(path, encode_ply(mesh))?)
}

/// Per-file limits keeping hostile headers from forcing huge allocations.
const MAX_ELEMENTS: usize = 50_000_000;

pub fn parse_ply(text: &str) -> Result<TriangleMesh> {
    let mut lines = text.lines();
    let bad = |msg: &str| Error::MalformedFile(format!("PLY: {msg}"));

    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    if lines.next().map(str::trim) != Some("format ascii 1.0") {
        return Err(bad("only format ascii 1.0 is supported"));
    }

    #[derive(PartialEq)]
    enum Section {
        None,
        Vertex,
        Face,
    }
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut channel_names: Vec<String> = Vec::new();
    let mut vertex_props = 0usize;
    let mut section = Section::None;

    loop {
        let line = lines.next().ok_or_else(|| bad("unterminated header"))?;
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        if line.starts_with("comment") || line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        match words.next() {
            Some("element") => {
                let kind = words.next().ok_or_else(|| bad("element without a name"))?;
                let count: usize = words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| bad("element without a count"))?;
                if count > MAX_ELEMENTS {
                    return Err(bad("element count exceeds limit"));
                }
                match kind {
                    "vertex" => {
                        n_vertices = count;
                        section = Section::Vertex;
                    }
                    "face" => {
                        n_faces = count;
                        section = Section::Face;
                    }
                    _ => section = Section::None,
                }
            }
            Some("property") => match section {
                Section::Vertex => {
                    let ty = words.next().ok_or_else(|| bad("property without a type"))?;
                    if ty == "list" {
                        return Err(bad("list property on vertices is not supported"));
                    }
                    let name = words.next().ok_or_else(|| bad("property without a name"))?;
                    vertex_props += 1;
                    if !matches!(name, "x" | "y" | "z") {
                        channel_names.push(name.to_string());
                    }
                }
                Section::Face => {}
                Section::None => return Err(bad("property outside an element")),
            },
            _ => return Err(bad("unrecognized header line")),
        }
    }
    if vertex_props < 3 {
        return Err(bad("vertex element must carry x, y, z"));
    }

    let mut vertices = Vec::with_capacity(n_vertices.min(1 << 20));
    let mut channels: BTreeMap<String, Vec<f64>> = channel_names
        .iter()
        .map(|n| (n.clone(), Vec::new()))
        .collect();
    for _ in 0..n_vertices {
        let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(|w| w.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("non-numeric vertex value"))?;
        if nums.len() != vertex_props {
            return Err(bad("vertex row width differs from header"));
        }
        if nums[..3].iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite vertex position"));
        }
        vertices.push([nums[0], nums[1], nums[2]]);
        for (k, name) in channel_names.iter().enumerate() {
            channels.get_mut(name).expect("declared").push(nums[3 + k]);
        }
    }

    let mut triangles = Vec::with_capacity(n_faces.min(1 << 20));
    for _ in 0..n_faces {
        let line = lines.next().ok_or_else(|| bad("truncated face list"))?;
        let nums: Vec<i64> = line
            .split_whitespace()
            .map(|w| w.parse::<i64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("non-integer face value"))?;
        let (count, rest) = nums.split_first().ok_or_else(|| bad("empty face row"))?;
        if *count != 3 || rest.len() != 3 {
            return Err(bad("only triangle faces are supported"));
        }
        let mut tri = [0u32; 3];
        for (o, &v) in tri.iter_mut().zip(rest) {
            if v < 0 || v as usize >= vertices.len() {
                return Err(bad("face index out of range"));
            }
            *o = v as u32;
        }
        triangles.push(tri);
    }

    let mesh = TriangleMesh {
        vertices,
        triangles,
        channels,
    };
    mesh.validate()?;
    Ok(mesh)
}

pub fn read_ply<P: AsRef<Path>>(path: P) -> Result<TriangleMesh> {
    let text = fs::read_to_string(path)?;
    parse_ply(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::icosphere;

    #[test]
    fn round_trip_preserves_channels() {
        let mut mesh = icosphere([1.0, 2.0, 3.0], 5.0, 1);
        let curv: Vec<f64> = (0..mesh.vertices.len()).map(|i| i as f64 * 0.25).collect();
        mesh.set_channel("curvature", curv.clone()).unwrap();
        let text = encode_ply(&mesh);
        let back = parse_ply(&text).unwrap();
        assert_eq!(back.vertices.len(), mesh.vertices.len());
        assert_eq!(back.triangles, mesh.triangles);
        assert_eq!(back.channel("curvature").unwrap(), &curv[..]);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn malformed_inputs_error_cleanly() {
        assert!(parse_ply("").is_err());
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\n").is_err());
        assert!(parse_ply("ply\nformat ascii 1.0\nelement vertex 5\nend_header\n").is_err());
        // face index out of range
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n";
        assert!(parse_ply(text).is_err());
        // absurd element count
        assert!(parse_ply("ply\nformat ascii 1.0\nelement vertex 99999999999\nend_header\n").is_err());
    }
}
