//! Dense deformation fields and their algebra: warping, composition,
//! inversion, averaging.
//!
//! A field lives on the grid of the fixed image it was estimated on and maps
//! fixed-space points to moving-space points: `phi(p) = p + u(p)` with `u`
//! in physical millimeters.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::volume::{Geometry, Interp, LabelVolume, ProbabilityMaps, Volume};

#[derive(Debug, Clone)]
pub struct DeformationField {
    components: [Volume; 3],
}

impl DeformationField {
    pub fn zero(geometry: &Geometry) -> Self {
        let z = Volume::filled(geometry.clone(), 0.0).expect("valid geometry");
        Self {
            components: [z.clone(), z.clone(), z],
        }
    }

    pub fn from_components(components: [Volume; 3]) -> Result<Self> {
        let g = components[0].geometry();
        for c in &components[1..] {
            if !c.geometry().same_grid(g) {
                return Err(Error::GeometryMismatch(
                    "field components on different grids".into(),
                ));
            }
        }
        for c in &components {
            if c.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::GeometryMismatch(
                    "non-finite displacement component".into(),
                ));
            }
        }
        Ok(Self { components })
    }

    /// Build from a displacement function evaluated at every voxel.
    pub fn from_fn<F>(geometry: &Geometry, f: F) -> Self
    where
        F: Fn(Point3) -> [f64; 3] + Sync,
    {
        let n = geometry.len();
        let [nx, ny, _] = geometry.dims;
        let mut buf: Vec<[f32; 3]> = vec![[0.0; 3]; n];
        buf.par_chunks_mut(nx).enumerate().for_each(|(row, chunk)| {
            let y = row % ny;
            let z = row / ny;
            for (x, out) in chunk.iter_mut().enumerate() {
                let p = geometry.voxel_to_world([x as f64, y as f64, z as f64]);
                let u = f(p);
                *out = [u[0] as f32, u[1] as f32, u[2] as f32];
            }
        });
        let mut cx = Vec::with_capacity(n);
        let mut cy = Vec::with_capacity(n);
        let mut cz = Vec::with_capacity(n);
        for v in buf {
            cx.push(v[0]);
            cy.push(v[1]);
            cz.push(v[2]);
        }
        Self {
            components: [
                Volume::new(geometry.clone(), cx).expect("valid"),
                Volume::new(geometry.clone(), cy).expect("valid"),
                Volume::new(geometry.clone(), cz).expect("valid"),
            ],
        }
    }

    pub fn geometry(&self) -> &Geometry {
        self.components[0].geometry()
    }

    pub fn components(&self) -> &[Volume; 3] {
        &self.components
    }

    pub fn into_components(self) -> [Volume; 3] {
        self.components
    }

    /// Stored displacement at a voxel.
    #[inline]
    pub fn displacement_index(&self, idx: usize) -> [f64; 3] {
        [
            self.components[0].data()[idx] as f64,
            self.components[1].data()[idx] as f64,
            self.components[2].data()[idx] as f64,
        ]
    }

    /// Displacement at an arbitrary physical point (linear interpolation,
    /// clamped to the nearest grid voxel outside the domain so constant
    /// shifts stay exact at the borders).
    #[inline]
    pub fn displacement_at(&self, p: Point3) -> [f64; 3] {
        let g = self.geometry();
        let mut v = g.world_to_voxel(p);
        for d in 0..3 {
            v[d] = v[d].clamp(0.0, (g.dims[d] - 1) as f64);
        }
        [
            self.components[0].sample_voxel_pad(v, Interp::Linear, 0.0) as f64,
            self.components[1].sample_voxel_pad(v, Interp::Linear, 0.0) as f64,
            self.components[2].sample_voxel_pad(v, Interp::Linear, 0.0) as f64,
        ]
    }

    /// `phi(p) = p + u(p)`.
    #[inline]
    pub fn map_point(&self, p: Point3) -> Point3 {
        let u = self.displacement_at(p);
        [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
    }

    pub fn max_magnitude(&self) -> f64 {
        let n = self.geometry().len();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let u = self.displacement_index(i);
                (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
            })
            .reduce(|| 0.0, f64::max)
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.geometry().len();
        let sum = crate::parallel::deterministic_sum(n, |i| {
            let u = self.displacement_index(i);
            (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
        });
        sum / n as f64
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            components: [
                self.components[0].map(|v| (v as f64 * s) as f32),
                self.components[1].map(|v| (v as f64 * s) as f32),
                self.components[2].map(|v| (v as f64 * s) as f32),
            ],
        }
    }

    /// Jacobian determinant of `phi` at every voxel (central differences).
    pub fn jacobian_determinants(&self) -> Vec<f64> {
        let g = self.geometry().clone();
        let [nx, ny, nz] = g.dims;
        let dir = g.direction;
        let comps = &self.components;
        (0..g.len())
            .into_par_iter()
            .map(|idx| {
                let x = idx % nx;
                let y = (idx / nx) % ny;
                let z = idx / (nx * ny);
                // du_i / d(voxel axis k), one-sided at the borders
                let mut dudi = [[0.0f64; 3]; 3];
                for k in 0..3 {
                    let pos = [x, y, z];
                    let mut lo = pos;
                    let mut hi = pos;
                    if pos[k] > 0 {
                        lo[k] -= 1;
                    }
                    if pos[k] + 1 < [nx, ny, nz][k] {
                        hi[k] += 1;
                    }
                    let h = (hi[k] - lo[k]) as f64;
                    if h == 0.0 {
                        continue;
                    }
                    let ilo = g.index(lo[0], lo[1], lo[2]);
                    let ihi = g.index(hi[0], hi[1], hi[2]);
                    for i in 0..3 {
                        dudi[i][k] =
                            (comps[i].data()[ihi] as f64 - comps[i].data()[ilo] as f64) / h;
                    }
                }
                // chain rule: d(index_k)/d(world_j) = direction[j][k] / spacing[k]
                let mut jac = [[0.0f64; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        let mut v = 0.0;
                        for k in 0..3 {
                            v += dudi[i][k] * dir[j][k] / g.spacing[k];
                        }
                        jac[i][j] = v + if i == j { 1.0 } else { 0.0 };
                    }
                }
                crate::geometry::mat_det(&jac)
            })
            .collect()
    }

    /// Warp a scalar volume onto this field's grid: `out(p) = v(p + u(p))`.
    pub fn warp_volume(&self, volume: &Volume, interp: Interp) -> Volume {
        let g = self.geometry();
        let [nx, ny, _] = g.dims;
        let n = g.len();
        let mut data = vec![0.0f32; n];
        data.par_chunks_mut(nx).enumerate().for_each(|(row, chunk)| {
            let y = row % ny;
            let z = row / ny;
            for (x, out) in chunk.iter_mut().enumerate() {
                let idx = x + nx * (y + ny * z);
                let p = g.voxel_to_world([x as f64, y as f64, z as f64]);
                let u = self.displacement_index(idx);
                *out = volume.sample([p[0] + u[0], p[1] + u[1], p[2] + u[2]], interp);
            }
        });
        Volume::new(g.clone(), data).expect("valid")
    }

    /// Warp labels with nearest-neighbor interpolation.
    pub fn warp_labels(&self, labels: &LabelVolume) -> LabelVolume {
        let g = self.geometry();
        let [nx, ny, _] = g.dims;
        let n = g.len();
        let mut data = vec![0u16; n];
        let src_geom = labels.geometry();
        let src = labels.data();
        data.par_chunks_mut(nx).enumerate().for_each(|(row, chunk)| {
            let y = row % ny;
            let z = row / ny;
            for (x, out) in chunk.iter_mut().enumerate() {
                let idx = x + nx * (y + ny * z);
                let p = g.voxel_to_world([x as f64, y as f64, z as f64]);
                let u = self.displacement_index(idx);
                let v = src_geom.world_to_voxel([p[0] + u[0], p[1] + u[1], p[2] + u[2]]);
                let (xi, yi, zi) = (v[0].round(), v[1].round(), v[2].round());
                *out = if xi < 0.0
                    || yi < 0.0
                    || zi < 0.0
                    || xi >= src_geom.dims[0] as f64
                    || yi >= src_geom.dims[1] as f64
                    || zi >= src_geom.dims[2] as f64
                {
                    0
                } else {
                    src[src_geom.index(xi as usize, yi as usize, zi as usize)]
                };
            }
        });
        LabelVolume::new(g.clone(), data, labels.label_table().clone()).expect("table preserved")
    }

    /// Warp probability maps linearly, then renormalize per voxel.
    pub fn warp_probability_maps(&self, maps: &ProbabilityMaps) -> Result<ProbabilityMaps> {
        let warped: Vec<Volume> = maps
            .maps()
            .iter()
            .map(|m| self.warp_volume(m, Interp::Linear))
            .collect();
        Ok(ProbabilityMaps::new(self.geometry().clone(), maps.classes().to_vec(), warped)?
            .normalized())
    }
}

/// `compose(first, second)(p) = first(second(p))`, i.e. the second map is
/// applied first. Result lives on `second`'s grid.
pub fn compose(first: &DeformationField, second: &DeformationField) -> DeformationField {
    DeformationField::from_fn(second.geometry(), |p| {
        let u2 = second.displacement_at(p);
        let q = [p[0] + u2[0], p[1] + u2[1], p[2] + u2[2]];
        let u1 = first.displacement_at(q);
        [u2[0] + u1[0], u2[1] + u1[1], u2[2] + u1[2]]
    })
}

/// Fixed-point inversion: `v_{k+1}(p) = -u(p + v_k(p))`.
pub fn invert(field: &DeformationField, iterations: usize) -> DeformationField {
    let mut inverse = DeformationField::zero(field.geometry());
    for _ in 0..iterations {
        inverse = DeformationField::from_fn(field.geometry(), |p| {
            let v = inverse.displacement_at(p);
            let u = field.displacement_at([p[0] + v[0], p[1] + v[1], p[2] + v[2]]);
            [-u[0], -u[1], -u[2]]
        });
    }
    inverse
}

/// Voxelwise arithmetic mean of displacement fields.
pub fn average_fields(fields: &[DeformationField]) -> Result<DeformationField> {
    let first = fields.first().ok_or(Error::EmptyList)?;
    let g = first.geometry().clone();
    for f in &fields[1..] {
        if !f.geometry().same_grid(&g) {
            return Err(Error::GeometryMismatch("field grids differ".into()));
        }
    }
    let n = g.len();
    let inv = 1.0 / fields.len() as f64;
    let mut comps = Vec::with_capacity(3);
    for c in 0..3 {
        let data: Vec<f32> = (0..n)
            .into_par_iter()
            .map(|i| {
                let sum: f64 = fields.iter().map(|f| f.components[c].data()[i] as f64).sum();
                (sum * inv) as f32
            })
            .collect();
        comps.push(Volume::new(g.clone(), data)?);
    }
    Ok(DeformationField {
        components: [comps.remove(0), comps.remove(0), comps.remove(0)],
    })
}

/// Residual `|phi(phi_inv(p)) - p|` statistics of an inverse estimate, in mm.
pub fn inversion_residual(field: &DeformationField, inverse: &DeformationField) -> (f64, f64) {
    let g = field.geometry();
    let n = g.len();
    let [nx, ny, _] = g.dims;
    let residuals: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let x = idx % nx;
            let y = (idx / nx) % ny;
            let z = idx / (nx * ny);
            let p = g.voxel_to_world([x as f64, y as f64, z as f64]);
            let q = inverse.map_point(p);
            let r = field.map_point(q);
            let d = [r[0] - p[0], r[1] - p[1], r[2] - p[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .collect();
    let mean = residuals.iter().sum::<f64>() / n as f64;
    let max = residuals.iter().fold(0.0f64, |a, &b| a.max(b));
    (mean, max)
}
