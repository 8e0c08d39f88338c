//! Separable Gaussian smoothing and pyramid downsampling.

use rayon::prelude::*;

use crate::error::Result;
use crate::volume::{Geometry, Interp, Volume};

/// Truncated Gaussian taps for one axis, in voxel units. Radius is 3 sigma.
fn kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_vox).ceil() as i64;
    (-radius..=radius)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect()
}

fn smooth_axis(data: &[f32], dims: [usize; 3], axis: usize, sigma_vox: f64) -> Vec<f32> {
    if sigma_vox <= 0.0 {
        return data.to_vec();
    }
    let taps = kernel(sigma_vox);
    let radius = (taps.len() / 2) as i64;
    let [nx, ny, _] = dims;
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let extent = dims[axis] as i64;
    let mut out = vec![0.0f32; data.len()];
    out.par_chunks_mut(nx).enumerate().for_each(|(row, chunk)| {
        let y = row % ny;
        let z = row / ny;
        for (x, o) in chunk.iter_mut().enumerate() {
            let pos = [x as i64, y as i64, z as i64][axis];
            let idx = x + nx * (y + ny * z);
            let mut acc = 0.0f64;
            let mut wsum = 0.0f64;
            for (t, &w) in taps.iter().enumerate() {
                let k = t as i64 - radius;
                let p = pos + k;
                if p < 0 || p >= extent {
                    continue; // truncated at borders, renormalized below
                }
                let j = (idx as i64 + k * stride as i64) as usize;
                acc += w * data[j] as f64;
                wsum += w;
            }
            *o = (acc / wsum) as f32;
        }
    });
    out
}

/// Separable Gaussian convolution, kernel truncated at 3 sigma and
/// renormalized at the borders. `sigma_mm = 0` returns the input unchanged.
pub fn gaussian_smooth(volume: &Volume, sigma_mm: f64) -> Volume {
    gaussian_smooth_aniso(volume, [sigma_mm; 3])
}

/// Gaussian smoothing with a per-axis sigma in millimeters.
pub fn gaussian_smooth_aniso(volume: &Volume, sigma_mm: [f64; 3]) -> Volume {
    if sigma_mm.iter().all(|&s| s <= 0.0) {
        return volume.clone();
    }
    let geom = volume.geometry();
    let mut data = volume.data().to_vec();
    for axis in 0..3 {
        if sigma_mm[axis] > 0.0 {
            data = smooth_axis(&data, geom.dims, axis, sigma_mm[axis] / geom.spacing[axis]);
        }
    }
    Volume::new(geom.clone(), data).expect("geometry unchanged")
}

/// Gaussian pre-smooth (sigma = 0.5 * factor * spacing) followed by
/// decimation at source block centers. Output voxel `j` sits at the world
/// position of continuous input index `j*factor + (factor-1)/2`.
pub fn downsample(volume: &Volume, factor: usize) -> Result<Volume> {
    assert!(factor >= 1, "downsample factor must be >= 1");
    let geom = volume.geometry();
    let sigma: Vec<f64> = geom.spacing.iter().map(|s| 0.5 * factor as f64 * s).collect();
    let smoothed = gaussian_smooth_aniso(volume, [sigma[0], sigma[1], sigma[2]]);
    if factor == 1 {
        return Ok(smoothed);
    }
    let f = factor as f64;
    let offset = (f - 1.0) / 2.0;
    let dims = [
        geom.dims[0].div_ceil(factor),
        geom.dims[1].div_ceil(factor),
        geom.dims[2].div_ceil(factor),
    ];
    let target = Geometry {
        dims,
        spacing: [
            geom.spacing[0] * f,
            geom.spacing[1] * f,
            geom.spacing[2] * f,
        ],
        origin: geom.voxel_to_world([offset, offset, offset]),
        direction: geom.direction,
    };
    let max = [
        (geom.dims[0] - 1) as f64,
        (geom.dims[1] - 1) as f64,
        (geom.dims[2] - 1) as f64,
    ];
    Volume::from_fn(target, |[x, y, z]| {
        // partial trailing blocks clamp to the grid instead of blending
        // with padding
        let src = [
            (x as f64 * f + offset).min(max[0]),
            (y as f64 * f + offset).min(max[1]),
            (z as f64 * f + offset).min(max[2]),
        ];
        smoothed.sample_voxel_pad(src, Interp::Linear, 0.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_zero_is_identity() {
        let g = Geometry::isotropic([6, 6, 6], 1.0);
        let v = Volume::from_fn(g, |[x, y, z]| (x * 36 + y * 6 + z) as f32).unwrap();
        let s = gaussian_smooth(&v, 0.0);
        assert_eq!(s.data(), v.data());
    }

    #[test]
    fn constant_volume_unchanged() {
        let g = Geometry::isotropic([10, 10, 10], 1.0);
        let v = Volume::filled(g, 3.5).unwrap();
        let s = gaussian_smooth(&v, 2.0);
        for &x in s.data() {
            assert!((x - 3.5).abs() < 1e-5);
        }
    }

    #[test]
    fn impulse_matches_direct_kernel_evaluation() {
        // unit impulse at the center, sigma = 2 * spacing; interior voxels see
        // the full (untruncated-by-border) kernel, so the center value is the
        // cube of the normalized 1D tap at zero offset
        let n = 31usize;
        let g = Geometry::isotropic([n, n, n], 1.0);
        let mut data = vec![0.0f32; n * n * n];
        let c = n / 2;
        data[c + n * (c + n * c)] = 1.0;
        let v = Volume::new(g, data).unwrap();
        let sigma = 2.0;
        let s = gaussian_smooth(&v, sigma);

        let taps = kernel(sigma);
        let wsum: f64 = taps.iter().sum();
        let w0 = taps[taps.len() / 2] / wsum;
        let expect = (w0 * w0 * w0) as f32;
        assert!(
            (s.at(c, c, c) - expect).abs() < 1e-6,
            "center {} vs kernel product {}",
            s.at(c, c, c),
            expect
        );
    }

    #[test]
    fn smoothing_preserves_mean_of_constant() {
        let g = Geometry::isotropic([12, 12, 12], 1.0);
        let v = Volume::filled(g, 2.0).unwrap();
        let s = gaussian_smooth(&v, 1.5);
        assert!((s.mean() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn downsample_factor_one_keeps_geometry() {
        let g = Geometry::isotropic([8, 8, 8], 1.0);
        let v = Volume::from_fn(g.clone(), |[x, _, _]| x as f32).unwrap();
        let d = downsample(&v, 1).unwrap();
        assert!(d.geometry().same_grid(&g));
        // data must equal a sigma = 0.5 * spacing smooth, not the input
        let expect = gaussian_smooth(&v, 0.5);
        assert_eq!(d.data(), expect.data());
    }

    #[test]
    fn downsample_constant_halves_dims() {
        let g = Geometry::isotropic([9, 8, 8], 1.0);
        let v = Volume::filled(g, 4.0).unwrap();
        let d = downsample(&v, 2).unwrap();
        assert_eq!(d.dims(), [5, 4, 4]);
        assert_eq!(d.geometry().spacing, [2.0, 2.0, 2.0]);
        for &x in d.data() {
            assert!((x - 4.0).abs() < 1e-4);
        }
    }

    #[test]
    fn downsample_block_center_alignment() {
        let mut g = Geometry::isotropic([10, 10, 10], 1.3);
        g.origin = [5.0, -2.0, 1.0];
        let v = Volume::filled(g.clone(), 1.0).unwrap();
        for factor in [2usize, 3, 4] {
            let d = downsample(&v, factor).unwrap();
            let out0 = d.geometry().voxel_to_world([0.0, 0.0, 0.0]);
            let center = (factor as f64 - 1.0) / 2.0;
            let expect = g.voxel_to_world([center, center, center]);
            for k in 0..3 {
                assert!(
                    (out0[k] - expect[k]).abs() < 1e-6,
                    "factor {factor}: axis {k}: {} vs {}",
                    out0[k],
                    expect[k]
                );
            }
        }
    }
}
