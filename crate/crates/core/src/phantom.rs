//! Deterministic synthetic brain phantoms, cohort deformations, and
//! anisotropic acquisition stacks.
//!
//! The phantom is a nested-sphere "brain" with a sinusoidally folded cortical
//! ribbon, T2-like contrast (CSF brightest) and an optional skull shell. It
//! has analytic ground truth, which is what the oracle tests lean on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DeformationField;
use crate::filter::gaussian_smooth;
use crate::geometry::{norm, sub, Point3};
use crate::rng::Rng;
use crate::tissue;
use crate::volume::{Geometry, LabelVolume, Volume};

/// Anatomical axes for stack simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StackAxis {
    Sagittal = 0, // through-plane along x
    Coronal = 1,  // through-plane along y
    Axial = 2,    // through-plane along z
}

impl StackAxis {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub brain_radius_mm: f64,
    pub ventricle_radius_mm: f64,
    pub deep_gm_radius_mm: f64,
    pub cerebellum_radius_mm: f64,
    pub brainstem_radius_mm: f64,
    pub ribbon_thickness_mm: f64,
    pub fold_amplitude_mm: f64,
    pub fold_wavelength_mm: f64,
    /// Mean intensity per label id (T2-like ordering by default).
    pub intensity: TissueIntensity,
    pub noise_sigma: f64,
    pub skull_shell: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TissueIntensity {
    pub background: f32,
    pub csf: f32,
    pub cortical_gm: f32,
    pub wm: f32,
    pub ventricles: f32,
    pub cerebellum: f32,
    pub deep_gm: f32,
    pub brainstem: f32,
    pub skull: f32,
}

impl Default for TissueIntensity {
    fn default() -> Self {
        Self {
            background: 5.0,
            csf: 220.0,
            cortical_gm: 150.0,
            wm: 100.0,
            ventricles: 230.0,
            cerebellum: 160.0,
            deep_gm: 135.0,
            brainstem: 115.0,
            skull: 60.0,
        }
    }
}

impl TissueIntensity {
    pub fn of(&self, label: u16) -> f32 {
        match label {
            tissue::CSF => self.csf,
            tissue::CORTICAL_GM => self.cortical_gm,
            tissue::WM => self.wm,
            tissue::VENTRICLES => self.ventricles,
            tissue::CEREBELLUM => self.cerebellum,
            tissue::DEEP_GM => self.deep_gm,
            tissue::BRAINSTEM => self.brainstem,
            tissue::SKULL => self.skull,
            _ => self.background,
        }
    }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [96, 96, 96],
            spacing_mm: 1.0,
            brain_radius_mm: 38.0,
            ventricle_radius_mm: 5.0,
            deep_gm_radius_mm: 11.0,
            cerebellum_radius_mm: 8.0,
            brainstem_radius_mm: 5.0,
            ribbon_thickness_mm: 3.0,
            fold_amplitude_mm: 2.0,
            fold_wavelength_mm: 24.0,
            intensity: TissueIntensity::default(),
            noise_sigma: 3.0,
            skull_shell: true,
        }
    }
}

impl PhantomSpec {
    /// Default anatomy scaled to a cube of `dim` voxels at 1 mm spacing.
    pub fn scaled_to(dim: usize, seed: u64) -> Self {
        let d = Self::default();
        // the skull shell has a fixed width, so cap the brain radius on
        // small grids and scale the interior to whatever radius fits
        let half_extent = (dim as f64 - 1.0) / 2.0;
        let brain = (d.brain_radius_mm * dim as f64 / 96.0).min(half_extent - 4.5);
        let s = brain / d.brain_radius_mm;
        Self {
            seed,
            dims: [dim; 3],
            brain_radius_mm: brain,
            ventricle_radius_mm: d.ventricle_radius_mm * s,
            deep_gm_radius_mm: d.deep_gm_radius_mm * s,
            cerebellum_radius_mm: d.cerebellum_radius_mm * s,
            brainstem_radius_mm: d.brainstem_radius_mm * s,
            ribbon_thickness_mm: (d.ribbon_thickness_mm * s).max(2.0),
            fold_amplitude_mm: d.fold_amplitude_mm * s,
            fold_wavelength_mm: d.fold_wavelength_mm * s,
            ..d
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::isotropic(self.dims, self.spacing_mm)
    }

    /// Mean cortical radius; the outer CSF rim is 3 mm thick on full-size
    /// phantoms and thins out proportionally on small ones.
    pub fn cortex_radius_mm(&self) -> f64 {
        self.brain_radius_mm - (0.08 * self.brain_radius_mm).clamp(1.0, 3.0)
    }

    fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::InvalidSpec("dims must be at least 16 voxels".into()));
        }
        if !(self.spacing_mm > 0.0) {
            return Err(Error::InvalidSpec("spacing must be positive".into()));
        }
        if self.ribbon_thickness_mm <= 0.0 {
            return Err(Error::InvalidSpec("ribbon thickness must be positive".into()));
        }
        if self.ventricle_radius_mm + 1.0 > self.deep_gm_radius_mm {
            return Err(Error::InvalidSpec(
                "ventricles must nest inside the deep-GM region".into(),
            ));
        }
        let inner_cortex =
            self.cortex_radius_mm() - self.fold_amplitude_mm - self.ribbon_thickness_mm;
        if self.deep_gm_radius_mm + 1.0 > inner_cortex {
            return Err(Error::InvalidSpec(
                "deep-GM region must nest inside the white matter".into(),
            ));
        }
        if self.brain_radius_mm <= self.cortex_radius_mm() {
            return Err(Error::InvalidSpec("brain radius too small".into()));
        }
        let half_extent = self
            .dims
            .iter()
            .map(|&d| (d as f64 - 1.0) / 2.0 * self.spacing_mm)
            .fold(f64::INFINITY, f64::min);
        let outer = self.brain_radius_mm + if self.skull_shell { 4.0 } else { 0.0 };
        if outer >= half_extent {
            return Err(Error::InvalidSpec(format!(
                "anatomy radius {outer} mm does not fit the grid half-extent {half_extent} mm"
            )));
        }
        Ok(())
    }

    /// Radial fold perturbation for a unit direction on the cortex sphere.
    fn fold(&self, n: Point3) -> f64 {
        if self.fold_amplitude_mm == 0.0 {
            return 0.0;
        }
        let a = 2.0 * std::f64::consts::PI * self.cortex_radius_mm() / self.fold_wavelength_mm;
        self.fold_amplitude_mm * (a * n[0]).cos() * (a * n[1]).cos() * (a * n[2]).cos()
    }

    fn label_at(&self, p_rel: Point3) -> u16 {
        let r = norm(p_rel);
        // deep structures first: they are carved out of the white matter
        let vent_off = self.deep_gm_radius_mm - self.ventricle_radius_mm - 1.0;
        for sign in [-1.0, 1.0] {
            let c = [sign * vent_off, 0.0, 0.0];
            if norm(sub(p_rel, c)) <= self.ventricle_radius_mm {
                return tissue::VENTRICLES;
            }
        }
        if r <= self.deep_gm_radius_mm {
            return tissue::DEEP_GM;
        }
        let cb_dist = self.deep_gm_radius_mm + self.cerebellum_radius_mm + 1.0;
        let cb_center = [0.0, -0.6 * cb_dist, -0.8 * cb_dist];
        if norm(sub(p_rel, cb_center)) <= self.cerebellum_radius_mm {
            return tissue::CEREBELLUM;
        }
        let bs_dist = self.deep_gm_radius_mm + self.brainstem_radius_mm + 3.0;
        let bs_center = [0.0, 0.42 * bs_dist, -0.91 * bs_dist];
        if norm(sub(p_rel, bs_center)) <= self.brainstem_radius_mm {
            return tissue::BRAINSTEM;
        }
        // radial shells: WM | cortical ribbon | CSF | (skull) | background
        if r <= 1e-9 {
            return tissue::WM;
        }
        let n = [p_rel[0] / r, p_rel[1] / r, p_rel[2] / r];
        let outer = self.cortex_radius_mm() + self.fold(n);
        let inner = outer - self.ribbon_thickness_mm;
        if r <= inner {
            return tissue::WM;
        }
        if r <= outer {
            return tissue::CORTICAL_GM;
        }
        if r <= self.brain_radius_mm {
            return tissue::CSF;
        }
        if self.skull_shell && r > self.brain_radius_mm + 2.0 && r <= self.brain_radius_mm + 4.0 {
            return tissue::SKULL;
        }
        tissue::BACKGROUND
    }
}

/// Generate the T2-like intensity volume and its ground-truth labels.
/// The same spec always produces bit-identical output.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let geom = spec.geometry();
    let center = geom.center_mm();

    let labels_data: Vec<u16> = {
        use rayon::prelude::*;
        let [nx, ny, _] = geom.dims;
        (0..geom.len())
            .into_par_iter()
            .map(|idx| {
                let x = idx % nx;
                let y = (idx / nx) % ny;
                let z = idx / (nx * ny);
                let p = geom.voxel_to_world([x as f64, y as f64, z as f64]);
                spec.label_at(sub(p, center))
            })
            .collect()
    };

    // noise is drawn sequentially in voxel order so output is seed-exact
    let mut rng = Rng::derive(spec.seed, 0x9a07);
    let mut intensity = Vec::with_capacity(geom.len());
    for &label in &labels_data {
        let mean = spec.intensity.of(label);
        let v = mean as f64 + spec.noise_sigma * rng.normal();
        intensity.push(v.max(0.0) as f32);
    }

    let table = if spec.skull_shell {
        tissue::tissue_table_with_skull()
    } else {
        tissue::tissue_table()
    };
    let volume = Volume::new(geom.clone(), intensity)?;
    let labels = LabelVolume::new(geom, labels_data, table)?;
    Ok((volume, labels))
}

/// Smoothed white-noise displacement field rescaled so the maximum
/// displacement magnitude equals `amplitude_mm`. If that amplitude folds
/// space (non-positive Jacobian), it is reduced by 10% steps until the field
/// is diffeomorphic; the achieved amplitude is returned alongside.
pub fn random_smooth_deformation(
    seed: u64,
    amplitude_mm: f64,
    correlation_length_mm: f64,
    geometry: &Geometry,
) -> (DeformationField, f64) {
    assert!(amplitude_mm >= 0.0, "amplitude must be non-negative");
    if amplitude_mm == 0.0 {
        return (DeformationField::zero(geometry), 0.0);
    }
    let mut rng = Rng::derive(seed, 0xdef0);
    let n = geometry.len();
    let mut comps = Vec::with_capacity(3);
    for _ in 0..3 {
        let data: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
        let noise = Volume::new(geometry.clone(), data).expect("valid");
        comps.push(gaussian_smooth(&noise, correlation_length_mm));
    }
    let raw = DeformationField::from_components([
        comps.remove(0),
        comps.remove(0),
        comps.remove(0),
    ])
    .expect("same grid");
    let max = raw.max_magnitude();
    if max <= 0.0 {
        return (DeformationField::zero(geometry), 0.0);
    }
    let mut amplitude = amplitude_mm;
    loop {
        let field = raw.scaled(amplitude / max);
        let ok = field.jacobian_determinants().iter().all(|&d| d > 0.0);
        if ok {
            if amplitude < amplitude_mm {
                log::warn!(
                    "deformation amplitude reduced from {amplitude_mm} to {amplitude} mm to keep a positive Jacobian"
                );
            }
            return (field, amplitude);
        }
        amplitude *= 0.9;
    }
}

/// Simulate anisotropic acquisition: box slice-profile averaging along each
/// requested through-plane axis, plus additive Gaussian noise.
pub fn make_stacks(
    volume: &Volume,
    slice_thickness_mm: f64,
    axes: &[StackAxis],
    noise_sigma: f64,
    seed: u64,
) -> Vec<Volume> {
    let geom = volume.geometry();
    axes.iter()
        .map(|&ax| {
            let axis = ax.index();
            let spacing = geom.spacing[axis];
            assert!(
                slice_thickness_mm >= spacing - 1e-9,
                "slice thickness must be at least the source spacing"
            );
            let k = slice_thickness_mm / spacing;
            let n_in = geom.dims[axis];
            let n_out = ((n_in as f64) * spacing / slice_thickness_mm - 1e-9).ceil() as usize;
            let n_out = n_out.max(1);

            // output slice j averages input slices whose centers fall in
            // [j*k, (j+1)*k) voxel units
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_out];
            for s in 0..n_in {
                let j = ((s as f64 + 0.5) / k).floor() as usize;
                members[j.min(n_out - 1)].push(s);
            }

            let mut dims = geom.dims;
            dims[axis] = n_out;
            let mut spacing_out = geom.spacing;
            spacing_out[axis] = slice_thickness_mm;
            let mut offset = [0.0f64; 3];
            offset[axis] = (slice_thickness_mm / spacing - 1.0) / 2.0;
            let target = Geometry {
                dims,
                spacing: spacing_out,
                origin: geom.voxel_to_world(offset),
                direction: geom.direction,
            };

            let mut data = vec![0.0f32; target.len()];
            let [nx, ny, _] = target.dims;
            for idx in 0..target.len() {
                let x = idx % nx;
                let y = (idx / nx) % ny;
                let z = idx / (nx * ny);
                let pos = [x, y, z];
                let slab = &members[pos[axis]];
                let mut acc = 0.0f64;
                for &s in slab {
                    let mut src = pos;
                    src[axis] = s;
                    acc += volume.at(src[0], src[1], src[2]) as f64;
                }
                data[idx] = if slab.is_empty() {
                    0.0
                } else {
                    (acc / slab.len() as f64) as f32
                };
            }
            if noise_sigma > 0.0 {
                let mut rng = Rng::derive(seed, 0x57ac + axis as u64);
                for v in data.iter_mut() {
                    *v = (*v as f64 + noise_sigma * rng.normal()) as f32;
                }
            }
            Volume::new(target, data).expect("valid stack geometry")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tissue::*;

    fn checksum(v: &[f32]) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for x in v {
            h.update(x.to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    #[test]
    fn same_spec_is_bit_identical() {
        let spec = PhantomSpec::scaled_to(48, 11);
        let (a, la) = make_phantom(&spec).unwrap();
        let (b, lb) = make_phantom(&spec).unwrap();
        assert_eq!(checksum(a.data()), checksum(b.data()));
        assert_eq!(la.data(), lb.data());
    }

    #[test]
    fn all_seven_tissues_present() {
        let (_, labels) = make_phantom(&PhantomSpec::default()).unwrap();
        for class in TISSUE_CLASSES {
            assert!(labels.count(class) > 0, "missing label {class}");
        }
    }

    #[test]
    fn unfolded_cortex_matches_analytic_shell_volume() {
        let spec = PhantomSpec {
            fold_amplitude_mm: 0.0,
            ..PhantomSpec::default()
        };
        let (_, labels) = make_phantom(&spec).unwrap();
        let count = labels.count(CORTICAL_GM) as f64 * spec.spacing_mm.powi(3);
        let r_out = spec.cortex_radius_mm();
        let r_in = r_out - spec.ribbon_thickness_mm;
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * (r_out.powi(3) - r_in.powi(3));
        let rel = (count - analytic).abs() / analytic;
        assert!(rel < 0.03, "shell volume off by {:.1}%", rel * 100.0);
    }

    #[test]
    fn t2_contrast_ordering() {
        let (vol, labels) = make_phantom(&PhantomSpec::default()).unwrap();
        let mean_of = |label: u16| {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for (v, l) in vol.data().iter().zip(labels.data()) {
                if *l == label {
                    sum += *v as f64;
                    n += 1;
                }
            }
            sum / n as f64
        };
        let csf = mean_of(CSF);
        let gm = mean_of(CORTICAL_GM);
        let wm = mean_of(WM);
        assert!(csf > gm && gm > wm, "csf {csf} gm {gm} wm {wm}");
    }

    #[test]
    fn invalid_nesting_rejected() {
        let spec = PhantomSpec {
            ventricle_radius_mm: 20.0,
            ..PhantomSpec::default()
        };
        assert!(matches!(make_phantom(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn deformation_amplitude_zero_is_identity() {
        let g = Geometry::isotropic([24, 24, 24], 1.0);
        let (f, a) = random_smooth_deformation(3, 0.0, 20.0, &g);
        assert_eq!(a, 0.0);
        assert_eq!(f.max_magnitude(), 0.0);
    }

    #[test]
    fn deformation_hits_requested_amplitude() {
        let g = Geometry::isotropic([32, 32, 32], 2.0);
        let (f, a) = random_smooth_deformation(5, 3.0, 20.0, &g);
        assert!((a - 3.0).abs() < 1e-12);
        assert!((f.max_magnitude() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn deformation_jacobian_positive() {
        let g = Geometry::isotropic([48, 48, 48], 1.0);
        let (f, _) = random_smooth_deformation(7, 3.0, 20.0, &g);
        assert!(f.jacobian_determinants().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn identity_acquisition_returns_input() {
        let spec = PhantomSpec::scaled_to(32, 2);
        let (vol, _) = make_phantom(&spec).unwrap();
        let stacks = make_stacks(&vol, spec.spacing_mm, &[StackAxis::Axial], 0.0, 0);
        assert_eq!(stacks[0].data(), vol.data());
        assert!(stacks[0].geometry().same_grid(vol.geometry()));
    }

    #[test]
    fn thick_slices_average_their_sources() {
        let g = Geometry::isotropic([9, 9, 9], 1.0);
        let vol = Volume::from_fn(g, |[x, y, z]| (x + 10 * y + 100 * z) as f32).unwrap();
        let stacks = make_stacks(&vol, 3.0, &[StackAxis::Axial], 0.0, 0);
        let s = &stacks[0];
        assert_eq!(s.dims(), [9, 9, 3]);
        for z_out in 0..3 {
            for y in 0..9 {
                for x in 0..9 {
                    let expect = (0..3)
                        .map(|dz| vol.at(x, y, 3 * z_out + dz) as f64)
                        .sum::<f64>()
                        / 3.0;
                    assert!((s.at(x, y, z_out) as f64 - expect).abs() < 1e-6);
                }
            }
        }
        // through-plane world positions sit at block centers
        let p = s.geometry().voxel_to_world([0.0, 0.0, 1.0]);
        assert!((p[2] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn stack_noise_is_seeded() {
        let spec = PhantomSpec::scaled_to(24, 9);
        let (vol, _) = make_phantom(&spec).unwrap();
        let a = make_stacks(&vol, 3.0, &[StackAxis::Coronal], 2.0, 42);
        let b = make_stacks(&vol, 3.0, &[StackAxis::Coronal], 2.0, 42);
        let c = make_stacks(&vol, 3.0, &[StackAxis::Coronal], 2.0, 43);
        assert_eq!(a[0].data(), b[0].data());
        assert_ne!(a[0].data(), c[0].data());
    }
}
