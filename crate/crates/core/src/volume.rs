//! 3D scalar volumes with physical geometry, plus label maps and
//! per-class probability maps sharing that geometry.
//!
//! Voxel data is stored row-major with x fastest:
//! `index = x + dims[0] * (y + dims[1] * z)`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mat_transpose, mat_vec, AffineTransform, Mat3, Point3, IDENTITY3};

/// Sentinel label distinct from every real label, used for voting ties.
pub const UNCLASSIFIED: u16 = u16::MAX;

/// Voxel grid geometry: dimensions, spacing (mm), origin (mm) and an
/// orthonormal direction matrix mapping voxel axes to physical axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub direction: Mat3,
}

impl Geometry {
    pub fn isotropic(dims: [usize; 3], spacing: f64) -> Self {
        Self {
            dims,
            spacing: [spacing; 3],
            origin: [0.0; 3],
            direction: IDENTITY3,
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::GeometryMismatch(format!(
                "zero dimension in {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::GeometryMismatch(format!(
                "non-positive spacing {:?}",
                self.spacing
            )));
        }
        let d = &self.direction;
        let dt = mat_transpose(d);
        for i in 0..3 {
            for j in 0..3 {
                let v = d[i][0] * dt[0][j] + d[i][1] * dt[1][j] + d[i][2] * dt[2][j];
                let expect = if i == j { 1.0 } else { 0.0 };
                if (v - expect).abs() > 1e-6 {
                    return Err(Error::GeometryMismatch(
                        "direction matrix not orthonormal".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Physical position (mm) of a continuous voxel index.
    #[inline]
    pub fn voxel_to_world(&self, i: Point3) -> Point3 {
        let s = [
            i[0] * self.spacing[0],
            i[1] * self.spacing[1],
            i[2] * self.spacing[2],
        ];
        let r = mat_vec(&self.direction, s);
        [
            r[0] + self.origin[0],
            r[1] + self.origin[1],
            r[2] + self.origin[2],
        ]
    }

    /// Continuous voxel index of a physical position (mm).
    #[inline]
    pub fn world_to_voxel(&self, p: Point3) -> Point3 {
        let q = [
            p[0] - self.origin[0],
            p[1] - self.origin[1],
            p[2] - self.origin[2],
        ];
        // direction is orthonormal, so its inverse is its transpose
        let r = mat_vec(&mat_transpose(&self.direction), q);
        [
            r[0] / self.spacing[0],
            r[1] / self.spacing[1],
            r[2] / self.spacing[2],
        ]
    }

    /// Center of the grid in physical coordinates.
    pub fn center_mm(&self) -> Point3 {
        self.voxel_to_world([
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ])
    }

    pub fn same_grid(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(&other.spacing)
                .all(|(a, b)| (a - b).abs() < 1e-9)
            && self
                .origin
                .iter()
                .zip(&other.origin)
                .all(|(a, b)| (a - b).abs() < 1e-6)
            && (0..3).all(|i| {
                (0..3).all(|j| (self.direction[i][j] - other.direction[i][j]).abs() < 1e-9)
            })
    }

    /// Iterate voxel indices (x fastest) as linear + (x, y, z) tuples.
    pub fn iter_voxels(&self) -> impl Iterator<Item = (usize, [usize; 3])> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |z| {
            (0..ny).flat_map(move |y| {
                (0..nx).map(move |x| (x + nx * (y + ny * z), [x, y, z]))
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Linear,
}

/// Immutable 3D scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Arc<Vec<f32>>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::GeometryMismatch(format!(
                "data length {} != dims product {}",
                data.len(),
                geometry.len()
            )));
        }
        Ok(Self {
            geometry,
            data: Arc::new(data),
        })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Result<Self> {
        let n = geometry.len();
        Self::new(geometry, vec![value; n])
    }

    /// Build a volume by evaluating `f` at every voxel, in parallel.
    pub fn from_fn<F>(geometry: Geometry, f: F) -> Result<Self>
    where
        F: Fn([usize; 3]) -> f32 + Sync,
    {
        geometry.validate()?;
        let [nx, ny, _] = geometry.dims;
        let mut data = vec![0.0f32; geometry.len()];
        data.par_chunks_mut(nx)
            .enumerate()
            .for_each(|(row, chunk)| {
                let y = row % ny;
                let z = row / ny;
                for (x, v) in chunk.iter_mut().enumerate() {
                    *v = f([x, y, z]);
                }
            });
        Ok(Self {
            geometry,
            data: Arc::new(data),
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in self.data.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Sample at a physical point with zero padding outside the grid.
    #[inline]
    pub fn sample(&self, point_mm: Point3, interp: Interp) -> f32 {
        self.sample_pad(point_mm, interp, 0.0)
    }

    /// Sample at a physical point with an explicit padding value.
    pub fn sample_pad(&self, point_mm: Point3, interp: Interp, pad: f32) -> f32 {
        let v = self.geometry.world_to_voxel(point_mm);
        self.sample_voxel_pad(v, interp, pad)
    }

    /// Sample at a continuous voxel index.
    #[inline]
    pub fn sample_voxel_pad(&self, v: Point3, interp: Interp, pad: f32) -> f32 {
        let [nx, ny, nz] = self.geometry.dims;
        match interp {
            Interp::Nearest => {
                let x = v[0].round();
                let y = v[1].round();
                let z = v[2].round();
                if x < 0.0
                    || y < 0.0
                    || z < 0.0
                    || x >= nx as f64
                    || y >= ny as f64
                    || z >= nz as f64
                {
                    return pad;
                }
                self.at(x as usize, y as usize, z as usize)
            }
            Interp::Linear => {
                let x0 = v[0].floor();
                let y0 = v[1].floor();
                let z0 = v[2].floor();
                let fx = v[0] - x0;
                let fy = v[1] - y0;
                let fz = v[2] - z0;
                let mut acc = 0.0f64;
                for dz in 0..2 {
                    let wz = if dz == 0 { 1.0 - fz } else { fz };
                    if wz == 0.0 {
                        continue;
                    }
                    let z = z0 as isize + dz;
                    for dy in 0..2 {
                        let wy = if dy == 0 { 1.0 - fy } else { fy };
                        if wy == 0.0 {
                            continue;
                        }
                        let y = y0 as isize + dy;
                        for dx in 0..2 {
                            let wx = if dx == 0 { 1.0 - fx } else { fx };
                            if wx == 0.0 {
                                continue;
                            }
                            let x = x0 as isize + dx;
                            let val = if x < 0
                                || y < 0
                                || z < 0
                                || x >= nx as isize
                                || y >= ny as isize
                                || z >= nz as isize
                            {
                                pad
                            } else {
                                self.at(x as usize, y as usize, z as usize)
                            };
                            acc += wx * wy * wz * val as f64;
                        }
                    }
                }
                acc as f32
            }
        }
    }

    /// Checked sampling: rejects NaN/Inf points.
    pub fn sample_checked(&self, point_mm: Point3, interp: Interp) -> Result<f32> {
        if point_mm.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteInput(point_mm));
        }
        Ok(self.sample(point_mm, interp))
    }

    /// Apply `f` voxelwise, producing a new volume with the same geometry.
    pub fn map<F>(&self, f: F) -> Volume
    where
        F: Fn(f32) -> f32 + Sync,
    {
        let data: Vec<f32> = self.data.par_iter().map(|&v| f(v)).collect();
        Volume {
            geometry: self.geometry.clone(),
            data: Arc::new(data),
        }
    }

    /// Voxelwise combination of two same-grid volumes.
    pub fn zip_map<F>(&self, other: &Volume, f: F) -> Result<Volume>
    where
        F: Fn(f32, f32) -> f32 + Sync,
    {
        if !self.geometry.same_grid(&other.geometry) {
            return Err(Error::GeometryMismatch("zip_map grids differ".into()));
        }
        let data: Vec<f32> = self
            .data
            .par_iter()
            .zip(other.data.par_iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Volume {
            geometry: self.geometry.clone(),
            data: Arc::new(data),
        })
    }
}

/// Resample a volume through an affine transform onto a target grid.
///
/// The output voxel at physical point `p` holds `volume.sample(transform(p))`,
/// i.e. the transform maps target-space points into source-space points.
pub fn resample(
    volume: &Volume,
    transform: &AffineTransform,
    target: &Geometry,
    interp: Interp,
) -> Result<Volume> {
    if transform.det().abs() < 1e-12 {
        return Err(Error::SingularTransform(transform.det()));
    }
    target.validate()?;
    let [nx, ny, _] = target.dims;
    let mut data = vec![0.0f32; target.len()];
    data.par_chunks_mut(nx).enumerate().for_each(|(row, chunk)| {
        let y = row % ny;
        let z = row / ny;
        for (x, out) in chunk.iter_mut().enumerate() {
            let p = target.voxel_to_world([x as f64, y as f64, z as f64]);
            *out = volume.sample(transform.apply(p), interp);
        }
    });
    Ok(Volume {
        geometry: target.clone(),
        data: Arc::new(data),
    })
}

/// Integer label volume sharing the scalar volume geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    data: Arc<Vec<u16>>,
    label_table: BTreeMap<u16, String>,
}

impl LabelVolume {
    pub fn new(
        geometry: Geometry,
        data: Vec<u16>,
        label_table: BTreeMap<u16, String>,
    ) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::GeometryMismatch(format!(
                "label data length {} != dims product {}",
                data.len(),
                geometry.len()
            )));
        }
        if label_table.contains_key(&0) || label_table.contains_key(&UNCLASSIFIED) {
            return Err(Error::GeometryMismatch(
                "label table must not define background 0 or the UNCLASSIFIED sentinel".into(),
            ));
        }
        for &v in &data {
            if v != 0 && v != UNCLASSIFIED && !label_table.contains_key(&v) {
                return Err(Error::GeometryMismatch(format!(
                    "label {v} not present in label table"
                )));
            }
        }
        Ok(Self {
            geometry,
            data: Arc::new(data),
            label_table,
        })
    }

    /// Build a label volume, deriving the table from the observed values.
    pub fn from_data(geometry: Geometry, data: Vec<u16>) -> Result<Self> {
        let mut table = BTreeMap::new();
        for &v in &data {
            if v != 0 && v != UNCLASSIFIED {
                table.entry(v).or_insert_with(|| format!("label_{v}"));
            }
        }
        Self::new(geometry, data, table)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn label_table(&self) -> &BTreeMap<u16, String> {
        &self.label_table
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn count(&self, label: u16) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// Labels present in the table, ascending.
    pub fn labels(&self) -> Vec<u16> {
        self.label_table.keys().copied().collect()
    }

    /// Binary mask as 0/1 scalar volume for one label.
    pub fn mask_of(&self, label: u16) -> Volume {
        let data: Vec<f32> = self
            .data
            .par_iter()
            .map(|&v| if v == label { 1.0 } else { 0.0 })
            .collect();
        Volume {
            geometry: self.geometry.clone(),
            data: Arc::new(data),
        }
    }

    /// Binary foreground mask (any nonzero, non-sentinel label).
    pub fn foreground(&self) -> Volume {
        let data: Vec<f32> = self
            .data
            .par_iter()
            .map(|&v| if v != 0 && v != UNCLASSIFIED { 1.0 } else { 0.0 })
            .collect();
        Volume {
            geometry: self.geometry.clone(),
            data: Arc::new(data),
        }
    }

    pub fn map_values<F>(&self, f: F) -> Result<LabelVolume>
    where
        F: Fn(u16) -> u16 + Sync,
    {
        let data: Vec<u16> = self.data.par_iter().map(|&v| f(v)).collect();
        LabelVolume::from_data(self.geometry.clone(), data)
    }
}

/// Ordered per-class probability grids in [0, 1] summing to 1 per voxel.
#[derive(Debug, Clone)]
pub struct ProbabilityMaps {
    geometry: Geometry,
    classes: Vec<u16>,
    maps: Vec<Volume>,
}

impl ProbabilityMaps {
    pub fn new(geometry: Geometry, classes: Vec<u16>, maps: Vec<Volume>) -> Result<Self> {
        geometry.validate()?;
        if classes.len() != maps.len() || classes.is_empty() {
            return Err(Error::GeometryMismatch(
                "probability maps and class list length mismatch".into(),
            ));
        }
        for m in &maps {
            if !m.geometry().same_grid(&geometry) {
                return Err(Error::GeometryMismatch(
                    "probability map grid differs from carrier geometry".into(),
                ));
            }
        }
        Ok(Self {
            geometry,
            classes,
            maps,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn classes(&self) -> &[u16] {
        &self.classes
    }

    pub fn maps(&self) -> &[Volume] {
        &self.maps
    }

    pub fn class_map(&self, class: u16) -> Option<&Volume> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map(|i| &self.maps[i])
    }

    /// Normalize so probabilities sum to 1 at every voxel; all-zero voxels
    /// become uniform.
    pub fn normalized(&self) -> ProbabilityMaps {
        let n = self.geometry.len();
        let k = self.maps.len();
        let mut out: Vec<Vec<f32>> = vec![vec![0.0; n]; k];
        let uniform = 1.0 / k as f32;
        for i in 0..n {
            let mut sum = 0.0f64;
            for m in &self.maps {
                sum += m.data[i].max(0.0) as f64;
            }
            if sum <= 0.0 {
                for map in out.iter_mut() {
                    map[i] = uniform;
                }
            } else {
                for (j, m) in self.maps.iter().enumerate() {
                    out[j][i] = (m.data[i].max(0.0) as f64 / sum) as f32;
                }
            }
        }
        ProbabilityMaps {
            geometry: self.geometry.clone(),
            classes: self.classes.clone(),
            maps: out
                .into_iter()
                .map(|d| Volume {
                    geometry: self.geometry.clone(),
                    data: Arc::new(d),
                })
                .collect(),
        }
    }

    /// Largest deviation of per-voxel probability sums from 1.
    pub fn max_sum_error(&self) -> f64 {
        let n = self.geometry.len();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let sum: f64 = self.maps.iter().map(|m| m.data[i] as f64).sum();
                (sum - 1.0).abs()
            })
            .reduce(|| 0.0, f64::max)
    }

    /// Per-voxel argmax as a label volume; ties take the lowest class id.
    pub fn argmax_labels(&self) -> Result<LabelVolume> {
        let n = self.geometry.len();
        let data: Vec<u16> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best = self.classes[0];
                let mut best_p = self.maps[0].data[i];
                for (j, m) in self.maps.iter().enumerate().skip(1) {
                    let p = m.data[i];
                    if p > best_p || (p == best_p && self.classes[j] < best) {
                        best = self.classes[j];
                        best_p = p;
                    }
                }
                best
            })
            .collect();
        LabelVolume::from_data(self.geometry.clone(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_volume() -> Volume {
        let g = Geometry::isotropic([4, 4, 4], 2.0);
        let data = (0..64).map(|i| i as f32).collect();
        Volume::new(g, data).unwrap()
    }

    #[test]
    fn world_voxel_round_trip() {
        let mut g = Geometry::isotropic([5, 6, 7], 1.0);
        g.spacing = [0.7, 1.3, 2.1];
        g.origin = [-3.0, 4.5, 10.0];
        g.direction = crate::geometry::rotation_from_vector([0.3, -0.2, 0.9]);
        for z in 0..7 {
            for y in 0..6 {
                for x in 0..5 {
                    let i = [x as f64, y as f64, z as f64];
                    let back = g.world_to_voxel(g.voxel_to_world(i));
                    for d in 0..3 {
                        assert!((back[d] - i[d]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn sample_at_voxel_center_returns_stored_value() {
        let v = small_volume();
        let p = v.geometry().voxel_to_world([2.0, 1.0, 3.0]);
        let expect = v.at(2, 1, 3);
        assert_eq!(v.sample(p, Interp::Linear), expect);
        assert_eq!(v.sample(p, Interp::Nearest), expect);
    }

    #[test]
    fn sample_constant_volume_interior() {
        let g = Geometry::isotropic([8, 8, 8], 1.0);
        let v = Volume::filled(g, 7.0).unwrap();
        assert_eq!(v.sample([3.3, 4.7, 2.2], Interp::Linear), 7.0);
    }

    #[test]
    fn sample_midpoint_blends_linearly() {
        let g = Geometry::isotropic([2, 1, 1], 1.0);
        let v = Volume::new(g, vec![0.0, 10.0]).unwrap();
        assert!((v.sample([0.5, 0.0, 0.0], Interp::Linear) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn sample_outside_returns_padding() {
        let v = small_volume();
        assert_eq!(v.sample([-100.0, 0.0, 0.0], Interp::Linear), 0.0);
        assert_eq!(v.sample_pad([-100.0, 0.0, 0.0], Interp::Nearest, -1.0), -1.0);
    }

    #[test]
    fn sample_rejects_non_finite() {
        let v = small_volume();
        assert!(matches!(
            v.sample_checked([f64::NAN, 0.0, 0.0], Interp::Linear),
            Err(Error::NonFiniteInput(_))
        ));
    }

    #[test]
    fn resample_identity_is_exact() {
        let v = small_volume();
        let out = resample(
            &v,
            &AffineTransform::identity(),
            v.geometry(),
            Interp::Linear,
        )
        .unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn resample_one_voxel_translation_shifts_data() {
        let v = small_volume();
        // transform maps output point p to source point p + spacing*x̂,
        // so output(x) = input(x+1): data shifted down by one index
        let t = AffineTransform::translation([2.0, 0.0, 0.0]);
        let out = resample(&v, &t, v.geometry(), Interp::Linear).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..3 {
                    assert_eq!(out.at(x, y, z), v.at(x + 1, y, z));
                }
                assert_eq!(out.at(3, y, z), 0.0); // padded boundary
            }
        }
    }

    #[test]
    fn resample_nearest_integer_shift_is_permutation() {
        let v = small_volume();
        let t = AffineTransform::translation([0.0, 2.0, 0.0]);
        let out = resample(&v, &t, v.geometry(), Interp::Nearest).unwrap();
        // every output value is either padding or some input value
        for &val in out.data() {
            assert!(val == 0.0 || v.data().contains(&val));
        }
    }

    #[test]
    fn resample_rejects_singular() {
        let v = small_volume();
        let t = AffineTransform {
            matrix: [[0.0; 3]; 3],
            translation: [0.0; 3],
        };
        assert!(matches!(
            resample(&v, &t, v.geometry(), Interp::Linear),
            Err(Error::SingularTransform(_))
        ));
    }

    #[test]
    fn label_volume_validates_table() {
        let g = Geometry::isotropic([2, 2, 2], 1.0);
        let mut table = BTreeMap::new();
        table.insert(3u16, "csf".to_string());
        assert!(LabelVolume::new(g.clone(), vec![0, 3, 3, 0, 0, 0, 0, 3], table.clone()).is_ok());
        assert!(LabelVolume::new(g, vec![0, 5, 3, 0, 0, 0, 0, 3], table).is_err());
    }

    #[test]
    fn probability_maps_normalize_and_argmax() {
        let g = Geometry::isotropic([2, 2, 2], 1.0);
        let a = Volume::filled(g.clone(), 0.2).unwrap();
        let b = Volume::filled(g.clone(), 0.6).unwrap();
        let pm = ProbabilityMaps::new(g, vec![1, 2], vec![a, b])
            .unwrap()
            .normalized();
        assert!(pm.max_sum_error() < 1e-6);
        let labels = pm.argmax_labels().unwrap();
        assert!(labels.data().iter().all(|&v| v == 2));
    }
}
