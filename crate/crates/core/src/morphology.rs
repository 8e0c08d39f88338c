//! Binary morphology, connected components and Euclidean distance
//! transforms on voxel grids.

use rayon::prelude::*;

use crate::volume::Geometry;

/// Offsets of a spherical structuring element with the given voxel radius.
fn ball_offsets(radius: usize) -> Vec<[i64; 3]> {
    let r = radius as i64;
    let r2 = (radius * radius) as i64;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r2 {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

fn apply_element(mask: &[bool], dims: [usize; 3], radius: usize, dilate: bool) -> Vec<bool> {
    let offsets = ball_offsets(radius);
    let [nx, ny, nz] = dims;
    let mut out = vec![false; mask.len()];
    out.par_chunks_mut(nx).enumerate().for_each(|(row, chunk)| {
        let y = (row % ny) as i64;
        let z = (row / ny) as i64;
        for (x, o) in chunk.iter_mut().enumerate() {
            let x = x as i64;
            let mut hit = !dilate;
            for off in &offsets {
                let (px, py, pz) = (x + off[0], y + off[1], z + off[2]);
                let inside = px >= 0
                    && py >= 0
                    && pz >= 0
                    && px < nx as i64
                    && py < ny as i64
                    && pz < nz as i64;
                let v = inside && mask[px as usize + nx * (py as usize + ny * pz as usize)];
                if dilate && v {
                    hit = true;
                    break;
                }
                if !dilate && !v {
                    hit = false;
                    break;
                }
            }
            *o = hit;
        }
    });
    out
}

pub fn dilate(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    apply_element(mask, dims, radius, true)
}

pub fn erode(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    apply_element(mask, dims, radius, false)
}

pub fn opening(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    dilate(&erode(mask, dims, radius), dims, radius)
}

pub fn closing(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    erode(&dilate(mask, dims, radius), dims, radius)
}

const FACE_NEIGHBORS: [[i64; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

/// 6-connected component labels (0 = background); returns labels and sizes
/// indexed by component id - 1.
pub fn components_6(mask: &[bool], dims: [usize; 3]) -> (Vec<u32>, Vec<usize>) {
    let [nx, ny, nz] = dims;
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    let mut next = 1u32;
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let mut size = 0usize;
        labels[start] = next;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            size += 1;
            let x = (idx % nx) as i64;
            let y = ((idx / nx) % ny) as i64;
            let z = (idx / (nx * ny)) as i64;
            for d in FACE_NEIGHBORS {
                let (px, py, pz) = (x + d[0], y + d[1], z + d[2]);
                if px < 0 || py < 0 || pz < 0 || px >= nx as i64 || py >= ny as i64 || pz >= nz as i64
                {
                    continue;
                }
                let j = px as usize + nx * (py as usize + ny * pz as usize);
                if mask[j] && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
        next += 1;
    }
    (labels, sizes)
}

/// Keep only the largest 6-connected foreground component.
pub fn largest_component(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let (labels, sizes) = components_6(mask, dims);
    let Some((best, _)) = sizes.iter().enumerate().max_by_key(|(_, &s)| s) else {
        return vec![false; mask.len()];
    };
    let keep = best as u32 + 1;
    labels.iter().map(|&l| l == keep).collect()
}

/// Fill interior cavities: background components that do not touch the
/// volume border become foreground.
pub fn fill_holes(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let inverted: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let (labels, sizes) = components_6(&inverted, dims);
    let [nx, ny, nz] = dims;
    let mut touches_border = vec![false; sizes.len()];
    let mut mark = |idx: usize| {
        let l = labels[idx];
        if l != 0 {
            touches_border[(l - 1) as usize] = true;
        }
    };
    for z in 0..nz {
        for y in 0..ny {
            mark(0 + nx * (y + ny * z));
            mark(nx - 1 + nx * (y + ny * z));
        }
    }
    for z in 0..nz {
        for x in 0..nx {
            mark(x + nx * (0 + ny * z));
            mark(x + nx * (ny - 1 + ny * z));
        }
    }
    for y in 0..ny {
        for x in 0..nx {
            mark(x + nx * (y + ny * 0));
            mark(x + nx * (y + ny * (nz - 1)));
        }
    }
    mask.iter()
        .enumerate()
        .map(|(i, &m)| m || (labels[i] != 0 && !touches_border[(labels[i] - 1) as usize]))
        .collect()
}

/// 1D squared distance transform (Felzenszwalb-Huttenlocher) with sample
/// positions spaced `step` apart. Infinite inputs (no feature on the line
/// yet) are excluded from the parabola envelope.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let pos = |i: usize| i as f64 * step;
    let mut v = vec![0usize; finite.len()];
    let mut z = vec![0.0f64; finite.len() + 1];
    let mut k = 0usize;
    v[0] = finite[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in &finite[1..] {
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p)))
                / (2.0 * step * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        out[q] = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm^2) from every voxel to the mask, honoring
/// anisotropic spacing. Voxels inside the mask get 0.
pub fn edt_squared_mm(mask: &[bool], geom: &Geometry) -> Vec<f64> {
    let [nx, ny, nz] = geom.dims;
    let mut dist: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    // x pass
    dist.par_chunks_mut(nx).for_each(|line| {
        let f = line.to_vec();
        edt_1d(&f, geom.spacing[0], line);
    });
    // y pass, parallel over z planes
    let step_y = geom.spacing[1];
    let mut next = vec![0.0f64; dist.len()];
    next.par_chunks_mut(nx * ny).enumerate().for_each(|(z, plane)| {
        let mut f = vec![0.0f64; ny];
        let mut o = vec![0.0f64; ny];
        for x in 0..nx {
            for y in 0..ny {
                f[y] = dist[x + nx * (y + ny * z)];
            }
            edt_1d(&f, step_y, &mut o);
            for y in 0..ny {
                plane[x + nx * y] = o[y];
            }
        }
    });
    // z pass: gather columns in parallel, scatter back per plane
    let step_z = geom.spacing[2];
    let columns: Vec<Vec<f64>> = (0..nx * ny)
        .into_par_iter()
        .map(|xy| {
            let mut f = vec![0.0f64; nz];
            let mut o = vec![0.0f64; nz];
            for z in 0..nz {
                f[z] = next[xy + nx * ny * z];
            }
            edt_1d(&f, step_z, &mut o);
            o
        })
        .collect();
    next.par_chunks_mut(nx * ny).enumerate().for_each(|(z, plane)| {
        for (xy, p) in plane.iter_mut().enumerate() {
            *p = columns[xy][z];
        }
    });
    next
}

/// Signed distance in mm: negative inside the mask, positive outside.
pub fn signed_distance_mm(mask: &[bool], geom: &Geometry) -> Vec<f64> {
    let outside = edt_squared_mm(mask, geom);
    let inverted: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let inside = edt_squared_mm(&inverted, geom);
    outside
        .iter()
        .zip(&inside)
        .map(|(&o, &i)| o.sqrt() - i.sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_mask(dims: [usize; 3], lo: usize, hi: usize) -> Vec<bool> {
        let [nx, ny, nz] = dims;
        let mut m = vec![false; nx * ny * nz];
        for z in lo..hi {
            for y in lo..hi {
                for x in lo..hi {
                    m[x + nx * (y + ny * z)] = true;
                }
            }
        }
        m
    }

    #[test]
    fn opening_removes_specks() {
        let dims = [16, 16, 16];
        let mut m = cube_mask(dims, 4, 12);
        m[1 + 16 * (1 + 16 * 1)] = true; // isolated voxel
        let o = opening(&m, dims, 1);
        assert!(!o[1 + 16 * (1 + 16 * 1)]);
        // cube interior survives
        assert!(o[8 + 16 * (8 + 16 * 8)]);
    }

    #[test]
    fn fill_holes_closes_cavity() {
        let dims = [12, 12, 12];
        let mut m = cube_mask(dims, 2, 10);
        let center = 6 + 12 * (6 + 12 * 6);
        m[center] = false;
        let f = fill_holes(&m, dims);
        assert!(f[center]);
        // outside stays background
        assert!(!f[0]);
    }

    #[test]
    fn largest_component_keeps_biggest() {
        let dims = [16, 16, 16];
        let mut m = cube_mask(dims, 2, 10);
        for z in 12..14 {
            for y in 12..14 {
                for x in 12..14 {
                    m[x + 16 * (y + 16 * z)] = true;
                }
            }
        }
        let l = largest_component(&m, dims);
        assert!(l[5 + 16 * (5 + 16 * 5)]);
        assert!(!l[13 + 16 * (13 + 16 * 13)]);
    }

    #[test]
    fn edt_matches_brute_force() {
        let mut geom = Geometry::isotropic([10, 8, 6], 1.0);
        geom.spacing = [1.0, 2.0, 0.5];
        let [nx, ny, nz] = geom.dims;
        let mut mask = vec![false; geom.len()];
        mask[3 + nx * (2 + ny * 1)] = true;
        mask[7 + nx * (5 + ny * 4)] = true;
        let d2 = edt_squared_mm(&mask, &geom);
        let sources = [[3.0, 2.0, 1.0], [7.0, 5.0, 4.0]];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut best = f64::INFINITY;
                    for s in sources {
                        let dx = (x as f64 - s[0]) * geom.spacing[0];
                        let dy = (y as f64 - s[1]) * geom.spacing[1];
                        let dz = (z as f64 - s[2]) * geom.spacing[2];
                        best = best.min(dx * dx + dy * dy + dz * dz);
                    }
                    let got = d2[x + nx * (y + ny * z)];
                    assert!((got - best).abs() < 1e-9, "at ({x},{y},{z}): {got} vs {best}");
                }
            }
        }
    }

    #[test]
    fn signed_distance_sign_convention() {
        let geom = Geometry::isotropic([12, 12, 12], 1.0);
        let mask = cube_mask(geom.dims, 3, 9);
        let sd = signed_distance_mm(&mask, &geom);
        assert!(sd[6 + 12 * (6 + 12 * 6)] < 0.0);
        assert!(sd[0] > 0.0);
    }
}
