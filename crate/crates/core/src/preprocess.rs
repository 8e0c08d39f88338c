//! Pre-processing: brain extraction, intensity inhomogeneity correction and
//! principal-component rigid initialization.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::gaussian_smooth;
use crate::geometry::{AffineTransform, Mat3, Point3};
use crate::morphology;
use crate::volume::{Geometry, Interp, LabelVolume, Volume};

/// Otsu threshold over a 256-bin histogram; returns the cut value.
pub fn otsu_threshold(volume: &Volume) -> f32 {
    let (lo, hi) = volume.min_max();
    if hi <= lo {
        return hi;
    }
    const BINS: usize = 256;
    let scale = BINS as f64 / (hi - lo) as f64;
    let mut hist = [0u64; BINS];
    for &v in volume.data() {
        let b = (((v - lo) as f64) * scale) as usize;
        hist[b.min(BINS - 1)] += 1;
    }
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut w0 = 0u64;
    let mut sum0 = 0.0f64;
    let mut best = (0usize, -1.0f64);
    for t in 0..BINS - 1 {
        w0 += hist[t];
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if between > best.1 {
            best = (t, between);
        }
    }
    lo + ((best.0 as f64 + 1.0) / scale) as f32
}

fn mask_to_bools(mask: &LabelVolume) -> Vec<bool> {
    mask.data().iter().map(|&v| v != 0).collect()
}

fn bools_to_mask(geom: &Geometry, bools: &[bool]) -> LabelVolume {
    let data: Vec<u16> = bools.iter().map(|&b| if b { 1 } else { 0 }).collect();
    let mut table = std::collections::BTreeMap::new();
    table.insert(1u16, "brain".to_string());
    LabelVolume::new(geom.clone(), data, table).expect("binary mask")
}

/// Otsu threshold, opening, largest 6-connected component, hole fill and
/// closing. The result is a single connected mask with no interior cavities.
pub fn extract_brain(volume: &Volume) -> Result<LabelVolume> {
    let threshold = otsu_threshold(volume);
    let dims = volume.dims();
    let fg: Vec<bool> = volume.data().iter().map(|&v| v > threshold).collect();
    if !fg.iter().any(|&b| b) {
        return Err(Error::NoForeground);
    }
    let opened = morphology::opening(&fg, dims, 1);
    if !opened.iter().any(|&b| b) {
        return Err(Error::NoForeground);
    }
    let largest = morphology::largest_component(&opened, dims);
    let filled = morphology::fill_holes(&largest, dims);
    let closed = morphology::closing(&filled, dims, 2);
    let closed = morphology::fill_holes(&closed, dims);
    Ok(bools_to_mask(volume.geometry(), &closed))
}

#[derive(Debug, Clone)]
pub struct BiasConfig {
    pub max_iter: usize,
    pub spline_spacing_mm: f64,
    /// FWHM of the log-intensity histogram blur removed by Wiener
    /// deconvolution.
    pub sharpen_fwhm: f64,
    pub histogram_bins: usize,
    pub wiener_noise: f64,
    /// Stop once the RMS of the field update falls below this.
    pub convergence_rms: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            spline_spacing_mm: 30.0,
            sharpen_fwhm: 0.15,
            histogram_bins: 200,
            wiener_noise: 0.01,
            convergence_rms: 1e-3,
        }
    }
}

/// Sharpened-histogram expectation of the true log intensity given the
/// observed one (Wiener deconvolution of the histogram, then a smoothed
/// conditional mean).
fn expected_log_intensity(hist: &[f64], bin0: f64, width: f64, cfg: &BiasConfig) -> Vec<f64> {
    let n = hist.len();
    let sigma_bins = cfg.sharpen_fwhm / (2.0 * (2.0f64.ln() * 2.0).sqrt()) / width;
    // circular Gaussian kernel, DFT by direct evaluation (n is small)
    let kernel: Vec<f64> = (0..n)
        .map(|i| {
            let d = if i <= n / 2 { i as f64 } else { (n - i) as f64 };
            (-d * d / (2.0 * sigma_bins * sigma_bins)).exp()
        })
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();

    let dft = |x: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        for (k, (r, i)) in re.iter_mut().zip(im.iter_mut()).enumerate() {
            for (j, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                *r += v * ang.cos();
                *i += v * ang.sin();
            }
        }
        (re, im)
    };
    let (hr, hi) = dft(hist);
    let (kr, ki) = dft(&kernel);
    // Wiener: F = conj(K) H / (|K|^2 + noise)
    let mut fr = vec![0.0; n];
    let mut fi = vec![0.0; n];
    for j in 0..n {
        let denom = kr[j] * kr[j] + ki[j] * ki[j] + cfg.wiener_noise;
        fr[j] = (kr[j] * hr[j] + ki[j] * hi[j]) / denom;
        fi[j] = (kr[j] * hi[j] - ki[j] * hr[j]) / denom;
    }
    // inverse DFT, clamp negatives
    let mut sharp = vec![0.0; n];
    for (j, s) in sharp.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..n {
            let ang = 2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
            acc += fr[k] * ang.cos() - fi[k] * ang.sin();
        }
        *s = (acc / n as f64).max(0.0);
    }
    // conditional mean under the kernel: E[u_true | u_obs = bin i]
    let radius = (4.0 * sigma_bins).ceil() as i64;
    (0..n as i64)
        .map(|i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for j in (i - radius).max(0)..=(i + radius).min(n as i64 - 1) {
                let d = (i - j) as f64;
                let w = (-d * d / (2.0 * sigma_bins * sigma_bins)).exp();
                let center = bin0 + (j as f64 + 0.5) * width;
                num += w * sharp[j as usize] * center;
                den += w * sharp[j as usize];
            }
            if den > 0.0 {
                num / den
            } else {
                bin0 + (i as f64 + 0.5) * width
            }
        })
        .collect()
}

/// Normalized (mask-aware) Gaussian smoothing of a residual image.
fn smooth_residual(residual: &[f64], mask: &[bool], geom: &Geometry, sigma: f64) -> Vec<f64> {
    let num_data: Vec<f32> = residual
        .iter()
        .zip(mask)
        .map(|(&r, &m)| if m { r as f32 } else { 0.0 })
        .collect();
    let den_data: Vec<f32> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let num = gaussian_smooth(&Volume::new(geom.clone(), num_data).expect("valid"), sigma);
    let den = gaussian_smooth(&Volume::new(geom.clone(), den_data).expect("valid"), sigma);
    num.data()
        .iter()
        .zip(den.data())
        .map(|(&n, &d)| if d > 1e-6 { (n / d) as f64 } else { 0.0 })
        .collect()
}

/// Iterative low-frequency gain estimation in the log domain. Returns the
/// corrected image and the multiplicative bias field; the corrected image is
/// exactly `input / bias_field` and keeps the masked mean of the input to
/// within 0.1%.
pub fn bias_correct(
    volume: &Volume,
    mask: &LabelVolume,
    cfg: &BiasConfig,
) -> Result<(Volume, Volume)> {
    if !mask.geometry().same_grid(volume.geometry()) {
        return Err(Error::GeometryMismatch("mask grid differs from image".into()));
    }
    let inside = mask_to_bools(mask);
    let n_inside = inside.iter().filter(|&&b| b).count();
    if n_inside == 0 {
        return Err(Error::EmptyMask);
    }
    let geom = volume.geometry().clone();

    // intensities must be positive in the log domain
    let min_inside = volume
        .data()
        .iter()
        .zip(&inside)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f32::INFINITY, f32::min);
    let shift = if min_inside <= 0.0 {
        let s = 1.0 - min_inside as f64;
        log::info!("bias_correct: shifting intensities by {s} to keep the log domain valid");
        s
    } else {
        0.0
    };

    let log_input: Vec<f64> = volume
        .data()
        .iter()
        .map(|&v| (v as f64 + shift).max(1e-12).ln())
        .collect();
    let mut u = log_input.clone();
    let mut field_log = vec![0.0f64; geom.len()];

    // histogram range fixed at the first iteration
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, &m) in u.iter().zip(&inside) {
        if m {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if hi <= lo {
        hi = lo + 1e-6;
    }
    let bins = cfg.histogram_bins;
    let width = (hi - lo) / bins as f64;

    for iter in 0..cfg.max_iter {
        let mut hist = vec![0.0f64; bins];
        for (v, &m) in u.iter().zip(&inside) {
            if m {
                let b = (((*v - lo) / width) as usize).min(bins - 1);
                hist[b] += 1.0;
            }
        }
        let expected = expected_log_intensity(&hist, lo, width, cfg);
        let residual: Vec<f64> = u
            .par_iter()
            .zip(inside.par_iter())
            .map(|(&v, &m)| {
                if !m {
                    return 0.0;
                }
                let b = (((v - lo) / width) as usize).min(bins - 1);
                v - expected[b]
            })
            .collect();
        let update = smooth_residual(&residual, &inside, &geom, cfg.spline_spacing_mm / 2.0);
        let mut rms = 0.0f64;
        for i in 0..u.len() {
            u[i] -= update[i];
            field_log[i] += update[i];
            if inside[i] {
                rms += update[i] * update[i];
            }
        }
        let rms = (rms / n_inside as f64).sqrt();
        if rms < cfg.convergence_rms {
            log::debug!("bias_correct converged after {} iterations (rms {rms:.2e})", iter + 1);
            break;
        }
    }

    // geometric-mean-1 normalization of the field inside the mask
    let mean_log: f64 = field_log
        .iter()
        .zip(&inside)
        .filter(|(_, &m)| m)
        .map(|(&f, _)| f)
        .sum::<f64>()
        / n_inside as f64;
    let mut bias: Vec<f64> = field_log.iter().map(|&f| (f - mean_log).exp()).collect();

    // scalar recalibration so the corrected masked mean matches the input
    let mean_in: f64 = volume
        .data()
        .iter()
        .zip(&inside)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .sum::<f64>()
        / n_inside as f64;
    let mean_corr: f64 = volume
        .data()
        .iter()
        .zip(&bias)
        .zip(&inside)
        .filter(|(_, &m)| m)
        .map(|((&v, &b), _)| v as f64 / b)
        .sum::<f64>()
        / n_inside as f64;
    if mean_in.abs() > 1e-12 {
        let c = mean_corr / mean_in;
        for b in bias.iter_mut() {
            *b *= c;
        }
    }

    let bias_field = Volume::new(geom.clone(), bias.iter().map(|&b| b as f32).collect())?;
    let corrected = volume.zip_map(&bias_field, |v, b| v / b)?;
    Ok((corrected, bias_field))
}

fn mask_moments(mask: &LabelVolume) -> Result<(Point3, Matrix3<f64>)> {
    let geom = mask.geometry();
    let [nx, ny, _] = geom.dims;
    let mut count = 0.0f64;
    let mut sum = Vector3::zeros();
    let mut sq = Matrix3::zeros();
    for (idx, &v) in mask.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        let x = idx % nx;
        let y = (idx / nx) % ny;
        let z = idx / (nx * ny);
        let p = geom.voxel_to_world([x as f64, y as f64, z as f64]);
        let p = Vector3::new(p[0], p[1], p[2]);
        count += 1.0;
        sum += p;
        sq += p * p.transpose();
    }
    if count == 0.0 {
        return Err(Error::EmptyMask);
    }
    let mean = sum / count;
    let cov = sq / count - mean * mean.transpose();
    Ok(([mean[0], mean[1], mean[2]], cov))
}

/// Unit eigenvectors of a covariance matrix, columns ordered by descending
/// eigenvalue, right-handed.
fn principal_axes(cov: &Matrix3<f64>) -> Result<(Matrix3<f64>, [f64; 3])> {
    let eig = SymmetricEigen::new(*cov);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut axes = Matrix3::zeros();
    let mut values = [0.0; 3];
    for (col, &src) in order.iter().enumerate() {
        axes.set_column(col, &eig.eigenvectors.column(src));
        values[col] = eig.eigenvalues[src];
    }
    if values[2] <= 0.0 || values[0] / values[2] > 1e6 {
        return Err(Error::DegenerateMask(if values[2] > 0.0 {
            values[0] / values[2]
        } else {
            f64::INFINITY
        }));
    }
    if axes.determinant() < 0.0 {
        let c = -axes.column(2);
        axes.set_column(2, &c);
    }
    Ok((axes, values))
}

fn overlap_score(moving: &LabelVolume, fixed: &LabelVolume, t: &AffineTransform) -> usize {
    let geom = fixed.geometry();
    let [nx, ny, _] = geom.dims;
    let mg = moving.geometry();
    let md = moving.data();
    (0..fixed.data().len())
        .into_par_iter()
        .filter(|&idx| {
            if fixed.data()[idx] == 0 {
                return false;
            }
            let x = idx % nx;
            let y = (idx / nx) % ny;
            let z = idx / (nx * ny);
            // score on a stride-2 lattice; plenty for ranking 4 candidates
            if x % 2 != 0 || y % 2 != 0 || z % 2 != 0 {
                return false;
            }
            let p = geom.voxel_to_world([x as f64, y as f64, z as f64]);
            let q = mg.world_to_voxel(t.apply(p));
            let (xi, yi, zi) = (q[0].round(), q[1].round(), q[2].round());
            xi >= 0.0
                && yi >= 0.0
                && zi >= 0.0
                && xi < mg.dims[0] as f64
                && yi < mg.dims[1] as f64
                && zi < mg.dims[2] as f64
                && md[mg.index(xi as usize, yi as usize, zi as usize)] != 0
        })
        .count()
}

/// Rigid initialization from mask centroids and principal axes. The returned
/// transform maps fixed-space points into moving-space points. The four
/// proper sign flips of the axes are disambiguated by mask overlap.
pub fn pca_rigid_init(moving_mask: &LabelVolume, fixed_mask: &LabelVolume) -> Result<AffineTransform> {
    let (c_moving, cov_moving) = mask_moments(moving_mask)?;
    let (c_fixed, cov_fixed) = mask_moments(fixed_mask)?;
    let (axes_moving, _) = principal_axes(&cov_moving)?;
    let (axes_fixed, _) = principal_axes(&cov_fixed)?;

    const FLIPS: [[f64; 3]; 4] = [
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ];
    let mut best: Option<(usize, AffineTransform)> = None;
    for flip in FLIPS {
        let d = Matrix3::from_diagonal(&Vector3::new(flip[0], flip[1], flip[2]));
        let r = axes_moving * d * axes_fixed.transpose();
        let mut matrix: Mat3 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                matrix[i][j] = r[(i, j)];
            }
        }
        let rc = crate::geometry::mat_vec(&matrix, c_fixed);
        let t = AffineTransform {
            matrix,
            translation: [
                c_moving[0] - rc[0],
                c_moving[1] - rc[1],
                c_moving[2] - rc[2],
            ],
        };
        let score = overlap_score(moving_mask, fixed_mask, &t);
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, t));
        }
    }
    Ok(best.expect("four candidates evaluated").1)
}

/// Morphologically derived brain mask as a resampled binary volume.
pub fn resample_mask(
    mask: &LabelVolume,
    transform: &AffineTransform,
    target: &Geometry,
) -> Result<LabelVolume> {
    let vol = mask.foreground();
    let warped = crate::volume::resample(&vol, transform, target, Interp::Nearest)?;
    let data: Vec<u16> = warped.data().iter().map(|&v| if v > 0.5 { 1 } else { 0 }).collect();
    let mut table = std::collections::BTreeMap::new();
    table.insert(1u16, "mask".to_string());
    LabelVolume::new(target.clone(), data, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_phantom, PhantomSpec};
    use crate::tissue;

    fn dice_bools(a: &[bool], b: &[bool]) -> f64 {
        let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
        let na = a.iter().filter(|&&x| x).count();
        let nb = b.iter().filter(|&&x| x).count();
        2.0 * inter as f64 / (na + nb) as f64
    }

    #[test]
    fn extract_brain_on_phantom() {
        let spec = PhantomSpec::scaled_to(64, 21);
        let (vol, labels) = make_phantom(&spec).unwrap();
        let mask = extract_brain(&vol).unwrap();

        let truth: Vec<bool> = labels
            .data()
            .iter()
            .map(|&l| l != tissue::BACKGROUND && l != tissue::SKULL)
            .collect();
        let got: Vec<bool> = mask.data().iter().map(|&v| v != 0).collect();
        let d = dice_bools(&truth, &got);
        assert!(d >= 0.95, "brain mask dice {d:.3}");

        // no overlap with the skull shell
        let overlap = labels
            .data()
            .iter()
            .zip(mask.data())
            .filter(|(&l, &m)| l == tissue::SKULL && m != 0)
            .count();
        assert_eq!(overlap, 0, "mask leaks into the skull shell");
    }

    #[test]
    fn extract_brain_structure() {
        let spec = PhantomSpec::scaled_to(48, 3);
        let (vol, _) = make_phantom(&spec).unwrap();
        let mask = extract_brain(&vol).unwrap();
        let bools = mask_to_bools(&mask);
        let (_, sizes) = morphology::components_6(&bools, mask.dims());
        assert_eq!(sizes.len(), 1, "mask must be one connected component");
        // complement inside the bounding box must be a single shell
        let inverted: Vec<bool> = bools.iter().map(|&b| !b).collect();
        let (_, holes) = morphology::components_6(&inverted, mask.dims());
        assert_eq!(holes.len(), 1, "mask must not contain cavities");
    }

    #[test]
    fn extract_brain_idempotent() {
        let spec = PhantomSpec::scaled_to(48, 5);
        let (vol, _) = make_phantom(&spec).unwrap();
        let mask = extract_brain(&vol).unwrap();
        let again = extract_brain(&mask.foreground()).unwrap();
        assert_eq!(mask.data(), again.data());
    }

    #[test]
    fn all_zero_volume_is_no_foreground() {
        let g = Geometry::isotropic([16, 16, 16], 1.0);
        let v = Volume::filled(g, 0.0).unwrap();
        assert!(matches!(extract_brain(&v), Err(Error::NoForeground)));
    }

    #[test]
    fn bias_field_near_one_on_clean_phantom() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..PhantomSpec::scaled_to(48, 7)
        };
        let (vol, _) = make_phantom(&spec).unwrap();
        let mask = extract_brain(&vol).unwrap();
        let (_, field) = bias_correct(&vol, &mask, &BiasConfig::default()).unwrap();
        for (f, m) in field.data().iter().zip(mask.data()) {
            if *m != 0 {
                assert!((0.98..=1.02).contains(f), "field value {f}");
            }
        }
    }

    #[test]
    fn known_field_recovery() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            ..PhantomSpec::scaled_to(64, 9)
        };
        let (vol, _) = make_phantom(&spec).unwrap();
        let g = vol.geometry().clone();
        let center = g.center_mm();
        let half = (g.dims[0] as f64 - 1.0) / 2.0 * g.spacing[0];
        // smooth multiplicative gain in [0.7, 1.3]
        let known = Volume::from_fn(g.clone(), |[x, y, z]| {
            let p = g.voxel_to_world([x as f64, y as f64, z as f64]);
            let u = (p[0] - center[0]) / half;
            let v = (p[1] - center[1]) / half;
            let w = (p[2] - center[2]) / half;
            (1.0 + 0.3 * (0.9 * u + 0.5 * v - 0.7 * w).clamp(-1.0, 1.0)) as f32
        })
        .unwrap();
        let biased = vol.zip_map(&known, |a, b| a * b).unwrap();
        let mask = extract_brain(&biased).unwrap();
        let (_, recovered) = bias_correct(&biased, &mask, &BiasConfig::default()).unwrap();

        // compare shapes with matched masked means
        let inside: Vec<usize> = mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0)
            .map(|(i, _)| i)
            .collect();
        let mean = |v: &Volume| {
            inside.iter().map(|&i| v.data()[i] as f64).sum::<f64>() / inside.len() as f64
        };
        let (mk, mr) = (mean(&known), mean(&recovered));
        let mut rms = 0.0;
        for &i in &inside {
            let d = known.data()[i] as f64 / mk - recovered.data()[i] as f64 / mr;
            rms += d * d;
        }
        let rms = (rms / inside.len() as f64).sqrt();
        assert!(rms < 0.05, "field recovery rms {rms:.4}");
    }

    #[test]
    fn corrected_is_input_over_field() {
        let spec = PhantomSpec::scaled_to(32, 13);
        let (vol, _) = make_phantom(&spec).unwrap();
        let mask = extract_brain(&vol).unwrap();
        let (corrected, field) = bias_correct(&vol, &mask, &BiasConfig::default()).unwrap();
        for i in 0..vol.data().len() {
            let expect = vol.data()[i] / field.data()[i];
            assert_eq!(corrected.data()[i], expect);
        }
        // masked mean preserved
        let inside: Vec<usize> = mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0)
            .map(|(i, _)| i)
            .collect();
        let m_in: f64 =
            inside.iter().map(|&i| vol.data()[i] as f64).sum::<f64>() / inside.len() as f64;
        let m_out: f64 =
            inside.iter().map(|&i| corrected.data()[i] as f64).sum::<f64>() / inside.len() as f64;
        assert!((m_out - m_in).abs() / m_in < 1e-3);
    }

    #[test]
    fn bias_requires_mask() {
        let g = Geometry::isotropic([8, 8, 8], 1.0);
        let v = Volume::filled(g.clone(), 10.0).unwrap();
        let empty = LabelVolume::from_data(g, vec![0; 512]).unwrap();
        assert!(matches!(
            bias_correct(&v, &empty, &BiasConfig::default()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn pca_identity_for_identical_masks() {
        let spec = PhantomSpec::scaled_to(48, 15);
        let (vol, _) = make_phantom(&spec).unwrap();
        let mask = extract_brain(&vol).unwrap();
        let t = pca_rigid_init(&mask, &mask).unwrap();
        assert!(t.orthogonality_error() < 1e-9);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((t.matrix[i][j] - expect).abs() < 1e-6);
            }
            assert!(t.translation[i].abs() < 1e-6);
        }
    }

    #[test]
    fn pca_rigidity_contract() {
        let spec = PhantomSpec::scaled_to(48, 17);
        let (vol, _) = make_phantom(&spec).unwrap();
        let mask = extract_brain(&vol).unwrap();
        let t = pca_rigid_init(&mask, &mask).unwrap();
        assert!(t.orthogonality_error() < 1e-9);
        assert!((t.det() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_mask_rejected() {
        let g = Geometry::isotropic([16, 16, 16], 1.0);
        let mut data = vec![0u16; g.len()];
        // planar sheet: one eigenvalue collapses
        for y in 0..16 {
            for x in 0..16 {
                data[x + 16 * (y + 16 * 8)] = 1;
            }
        }
        let mask = LabelVolume::from_data(g, data).unwrap();
        assert!(matches!(
            pca_rigid_init(&mask, &mask),
            Err(Error::DegenerateMask(_))
        ));
    }
}
