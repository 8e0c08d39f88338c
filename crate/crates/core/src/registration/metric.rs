//! Similarity metrics: mutual information over a Parzen partial-volume
//! joint histogram, and local normalized cross-correlation with box-sum
//! windows. Both come with analytic gradients with respect to the moving
//! image intensities, used by the free-form optimizer.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

/// Intensity bounds used to scale values into histogram bins.
#[derive(Debug, Clone, Copy)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn of(volume: &Volume) -> Self {
        let (lo, hi) = volume.min_max();
        Self {
            lo: lo as f64,
            hi: hi as f64,
        }
    }

    #[inline]
    fn to_bin(&self, v: f64, bins: usize) -> f64 {
        if self.hi <= self.lo {
            return 0.0;
        }
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0) * (bins - 1) as f64
    }
}

/// Joint Parzen histogram with linear partial-volume weights on both axes.
/// Accumulation is slab-parallel with a sequential final sum, so the result
/// does not depend on the thread count.
pub struct JointHistogram {
    pub bins: usize,
    pub joint: Vec<f64>,
    pub marginal_fixed: Vec<f64>,
    pub marginal_moving: Vec<f64>,
    pub samples: f64,
}

impl JointHistogram {
    pub fn accumulate(
        fixed: &Volume,
        moving: &Volume,
        bins: usize,
        mask: Option<&[bool]>,
        bounds_fixed: Bounds,
        bounds_moving: Bounds,
    ) -> Result<Self> {
        if !fixed.geometry().same_grid(moving.geometry()) {
            return Err(Error::GeometryMismatch(
                "metric inputs on different grids".into(),
            ));
        }
        Self::from_slices(fixed.data(), moving.data(), bins, mask, bounds_fixed, bounds_moving)
    }

    pub fn from_slices(
        fixed: &[f32],
        moving: &[f32],
        bins: usize,
        mask: Option<&[bool]>,
        bounds_fixed: Bounds,
        bounds_moving: Bounds,
    ) -> Result<Self> {
        let n = fixed.len();
        let slab = 16 * 1024;
        let partials: Vec<Vec<f64>> = (0..n.div_ceil(slab))
            .into_par_iter()
            .map(|s| {
                let mut hist = vec![0.0f64; bins * bins];
                let end = ((s + 1) * slab).min(n);
                for i in s * slab..end {
                    if let Some(m) = mask {
                        if !m[i] {
                            continue;
                        }
                    }
                    let tf = bounds_fixed.to_bin(fixed[i] as f64, bins);
                    let tm = bounds_moving.to_bin(moving[i] as f64, bins);
                    let (f0, ff) = (tf.floor(), tf.fract());
                    let (m0, mf) = (tm.floor(), tm.fract());
                    let f0 = f0 as usize;
                    let m0 = m0 as usize;
                    let f1 = (f0 + 1).min(bins - 1);
                    let m1 = (m0 + 1).min(bins - 1);
                    hist[f0 * bins + m0] += (1.0 - ff) * (1.0 - mf);
                    hist[f0 * bins + m1] += (1.0 - ff) * mf;
                    hist[f1 * bins + m0] += ff * (1.0 - mf);
                    hist[f1 * bins + m1] += ff * mf;
                }
                hist
            })
            .collect();
        let mut joint = vec![0.0f64; bins * bins];
        for p in &partials {
            for (j, v) in joint.iter_mut().zip(p) {
                *j += v;
            }
        }
        let samples: f64 = joint.iter().sum();
        if samples <= 0.0 {
            return Err(Error::EmptyMask);
        }
        let mut marginal_fixed = vec![0.0f64; bins];
        let mut marginal_moving = vec![0.0f64; bins];
        for f in 0..bins {
            for m in 0..bins {
                let v = joint[f * bins + m];
                marginal_fixed[f] += v;
                marginal_moving[m] += v;
            }
        }
        Ok(Self {
            bins,
            joint,
            marginal_fixed,
            marginal_moving,
            samples,
        })
    }

    /// Mutual information in nats.
    pub fn mutual_information(&self) -> f64 {
        let n = self.samples;
        let mut mi = 0.0;
        for f in 0..self.bins {
            let pf = self.marginal_fixed[f] / n;
            if pf <= 0.0 {
                continue;
            }
            for m in 0..self.bins {
                let pj = self.joint[f * self.bins + m] / n;
                if pj <= 0.0 {
                    continue;
                }
                let pm = self.marginal_moving[m] / n;
                mi += pj * (pj / (pf * pm)).ln();
            }
        }
        mi
    }

    /// Entropy of the fixed marginal, in nats.
    pub fn marginal_entropy_fixed(&self) -> f64 {
        let n = self.samples;
        -self
            .marginal_fixed
            .iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| {
                let p = c / n;
                p * p.ln()
            })
            .sum::<f64>()
    }
}

/// Mutual information between two same-grid volumes, optionally restricted
/// to a mask. Intensities are min-max scaled into `bins` over the evaluated
/// region.
pub fn mutual_information(
    fixed: &Volume,
    moving: &Volume,
    bins: usize,
    mask: Option<&LabelVolume>,
) -> Result<f64> {
    let mask_bools: Option<Vec<bool>> =
        mask.map(|m| m.data().iter().map(|&v| v != 0).collect());
    if let Some(b) = &mask_bools {
        if !b.iter().any(|&x| x) {
            return Err(Error::EmptyMask);
        }
    }
    let (bf, bm) = match &mask_bools {
        None => (Bounds::of(fixed), Bounds::of(moving)),
        Some(b) => {
            let masked_bounds = |v: &Volume| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for (x, &m) in v.data().iter().zip(b.iter()) {
                    if m {
                        lo = lo.min(*x as f64);
                        hi = hi.max(*x as f64);
                    }
                }
                Bounds { lo, hi }
            };
            (masked_bounds(fixed), masked_bounds(moving))
        }
    };
    let hist = JointHistogram::accumulate(fixed, moving, bins, mask_bools.as_deref(), bf, bm)?;
    Ok(hist.mutual_information())
}

/// Per-voxel gradient of MI with respect to the moving intensity.
pub fn mi_gradient(
    fixed: &Volume,
    moving: &Volume,
    bins: usize,
    bounds_fixed: Bounds,
    bounds_moving: Bounds,
) -> Result<Vec<f64>> {
    let hist = JointHistogram::accumulate(fixed, moving, bins, None, bounds_fixed, bounds_moving)?;
    let n = hist.samples;
    let eps = 1e-12;
    // precompute log(p(f,m) / p(m)) per cell
    let mut log_ratio = vec![0.0f64; bins * bins];
    for f in 0..bins {
        for m in 0..bins {
            let pj = (hist.joint[f * bins + m] / n).max(eps);
            let pm = (hist.marginal_moving[m] / n).max(eps);
            log_ratio[f * bins + m] = (pj / pm).ln();
        }
    }
    let scale = if bounds_moving.hi > bounds_moving.lo {
        (bins - 1) as f64 / (bounds_moving.hi - bounds_moving.lo)
    } else {
        0.0
    };
    let len = fixed.geometry().len();
    Ok((0..len)
        .into_par_iter()
        .map(|i| {
            let tf = bounds_fixed.to_bin(fixed.data()[i] as f64, bins);
            let tm = bounds_moving.to_bin(moving.data()[i] as f64, bins);
            let (f0, ff) = (tf.floor() as usize, tf.fract());
            let (m0, _) = (tm.floor() as usize, tm.fract());
            let f1 = (f0 + 1).min(bins - 1);
            let m1 = (m0 + 1).min(bins - 1);
            if m1 == m0 {
                return 0.0;
            }
            let wf = [(f0, 1.0 - ff), (f1, ff)];
            let mut g = 0.0;
            for (fb, w) in wf {
                if w == 0.0 {
                    continue;
                }
                g += w * (log_ratio[fb * bins + m1] - log_ratio[fb * bins + m0]);
            }
            g * scale / n
        })
        .collect())
}

/// Box sums over a cubic window of the given voxel radius, truncated at the
/// borders. Returns per-voxel window sums.
fn box_sum(data: &[f64], dims: [usize; 3], radius: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let [nx, ny, _] = dims;
    for axis in 0..3 {
        let stride = match axis {
            0 => 1usize,
            1 => nx,
            _ => nx * ny,
        };
        let extent = dims[axis] as i64;
        let r = radius as i64;
        let src = cur.clone();
        cur.par_chunks_mut(nx).enumerate().for_each(|(row, chunk)| {
            let y = row % ny;
            let z = row / ny;
            for (x, o) in chunk.iter_mut().enumerate() {
                let pos = [x as i64, y as i64, z as i64][axis];
                let idx = x + nx * (y + ny * z);
                let mut acc = 0.0;
                for k in -r..=r {
                    let p = pos + k;
                    if p < 0 || p >= extent {
                        continue;
                    }
                    acc += src[(idx as i64 + k * stride as i64) as usize];
                }
                *o = acc;
            }
        });
    }
    cur
}

/// Per-voxel window statistics used by LNCC and its gradient.
pub struct LnccTerms {
    pub count: Vec<f64>,
    pub mean_f: Vec<f64>,
    pub mean_m: Vec<f64>,
    pub var_f: Vec<f64>,
    pub var_m: Vec<f64>,
    pub cov: Vec<f64>,
    pub eps_f: f64,
    pub eps_m: f64,
}

impl LnccTerms {
    pub fn compute(fixed: &Volume, moving: &Volume, radius: usize) -> Result<Self> {
        if !fixed.geometry().same_grid(moving.geometry()) {
            return Err(Error::GeometryMismatch(
                "LNCC inputs on different grids".into(),
            ));
        }
        let dims = fixed.dims();
        let n = fixed.geometry().len();
        let f: Vec<f64> = fixed.data().iter().map(|&v| v as f64).collect();
        let m: Vec<f64> = moving.data().iter().map(|&v| v as f64).collect();
        let ones = vec![1.0f64; n];
        let ff: Vec<f64> = f.iter().map(|v| v * v).collect();
        let mm: Vec<f64> = m.iter().map(|v| v * v).collect();
        let fm: Vec<f64> = f.iter().zip(&m).map(|(a, b)| a * b).collect();

        let count = box_sum(&ones, dims, radius);
        let sf = box_sum(&f, dims, radius);
        let sm = box_sum(&m, dims, radius);
        let sff = box_sum(&ff, dims, radius);
        let smm = box_sum(&mm, dims, radius);
        let sfm = box_sum(&fm, dims, radius);

        let mut mean_f = vec![0.0; n];
        let mut mean_m = vec![0.0; n];
        let mut var_f = vec![0.0; n];
        let mut var_m = vec![0.0; n];
        let mut cov = vec![0.0; n];
        for i in 0..n {
            let c = count[i];
            mean_f[i] = sf[i] / c;
            mean_m[i] = sm[i] / c;
            var_f[i] = (sff[i] / c - mean_f[i] * mean_f[i]).max(0.0);
            var_m[i] = (smm[i] / c - mean_m[i] * mean_m[i]).max(0.0);
            cov[i] = sfm[i] / c - mean_f[i] * mean_m[i];
        }
        let range = |v: &Volume| {
            let (lo, hi) = v.min_max();
            (hi - lo) as f64
        };
        // variance floor marking constant windows
        let eps_f = (1e-5 * range(fixed).max(1e-30)).powi(2);
        let eps_m = (1e-5 * range(moving).max(1e-30)).powi(2);
        Ok(Self {
            count,
            mean_f,
            mean_m,
            var_f,
            var_m,
            cov,
            eps_f,
            eps_m,
        })
    }

    #[inline]
    pub fn cc_at(&self, i: usize) -> Option<f64> {
        if self.var_f[i] <= self.eps_f || self.var_m[i] <= self.eps_m {
            return None;
        }
        Some(self.cov[i] / (self.var_f[i] * self.var_m[i]).sqrt())
    }
}

/// Mean local correlation over valid windows; the FFD objective for LNCC
/// channels.
pub fn lncc_metric(fixed: &Volume, moving: &Volume, radius: usize) -> Result<f64> {
    let terms = LnccTerms::compute(fixed, moving, radius)?;
    let n = fixed.geometry().len();
    let (sum, count) = crate::parallel::deterministic_sum_count(n, |i| {
        terms.cc_at(i).map_or((0.0, 0), |c| (c, 1))
    });
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / n as f64)
}

/// Per-voxel gradient of the mean-LNCC objective with respect to the moving
/// intensity (window-centered approximation).
pub fn lncc_gradient(fixed: &Volume, moving: &Volume, radius: usize) -> Result<Vec<f64>> {
    let terms = LnccTerms::compute(fixed, moving, radius)?;
    let n = fixed.geometry().len();
    let inv_n = 1.0 / n as f64;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            if terms.var_f[i] <= terms.eps_f || terms.var_m[i] <= terms.eps_m {
                return 0.0;
            }
            let denom = (terms.var_f[i] * terms.var_m[i]).sqrt();
            let fc = fixed.data()[i] as f64 - terms.mean_f[i];
            let mc = moving.data()[i] as f64 - terms.mean_m[i];
            let a_over_c = terms.cov[i] / terms.var_m[i];
            inv_n * (fc - a_over_c * mc) / denom
        })
        .collect())
}

/// Local-similarity weight map for label fusion: `w = max(LNCC, 0)` over a
/// cubic window; constant windows get weight 0.
pub fn local_similarity(fixed: &Volume, warped: &Volume, radius_voxels: usize) -> Result<Volume> {
    let terms = LnccTerms::compute(fixed, warped, radius_voxels)?;
    let n = fixed.geometry().len();
    let data: Vec<f32> = (0..n)
        .into_par_iter()
        .map(|i| terms.cc_at(i).map_or(0.0, |c| c.max(0.0) as f32))
        .collect();
    Volume::new(fixed.geometry().clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::volume::Geometry;

    /// Image whose intensities land exactly on histogram bin centers, so the
    /// partial-volume weights collapse and MI identities hold exactly.
    fn bin_aligned_volume(seed: u64, bins: usize, dims: [usize; 3]) -> Volume {
        let g = Geometry::isotropic(dims, 1.0);
        let mut rng = Rng::from_seed(seed);
        let mut data: Vec<f32> = (0..g.len())
            .map(|_| (rng.next_u64() % bins as u64) as f32)
            .collect();
        // pin the range so min-max scaling maps k -> bin k
        data[0] = 0.0;
        data[1] = (bins - 1) as f32;
        Volume::new(g, data).unwrap()
    }

    #[test]
    fn mi_self_equals_marginal_entropy() {
        let v = bin_aligned_volume(3, 32, [16, 16, 16]);
        let mi = mutual_information(&v, &v, 32, None).unwrap();
        let h = JointHistogram::accumulate(&v, &v, 32, None, Bounds::of(&v), Bounds::of(&v))
            .unwrap()
            .marginal_entropy_fixed();
        assert!((mi - h).abs() < 1e-9, "MI {mi} vs H {h}");
    }

    #[test]
    fn mi_symmetric() {
        let a = bin_aligned_volume(5, 32, [12, 12, 12]);
        let b = bin_aligned_volume(6, 32, [12, 12, 12]);
        let ab = mutual_information(&a, &b, 32, None).unwrap();
        let ba = mutual_information(&b, &a, 32, None).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn mi_of_independent_noise_is_small() {
        let g = Geometry::isotropic([96, 96, 96], 1.0);
        let mut rng = Rng::from_seed(77);
        let a: Vec<f32> = (0..g.len()).map(|_| rng.uniform() as f32).collect();
        let b: Vec<f32> = (0..g.len()).map(|_| rng.uniform() as f32).collect();
        let a = Volume::new(g.clone(), a).unwrap();
        let b = Volume::new(g, b).unwrap();
        let mi = mutual_information(&a, &b, 32, None).unwrap();
        assert!(mi < 0.02, "independent noise MI {mi}");
        assert!(mi >= 0.0);
    }

    #[test]
    fn mi_invariant_under_bin_permutation() {
        let bins = 16;
        let a = bin_aligned_volume(9, bins, [12, 12, 12]);
        let b = bin_aligned_volume(10, bins, [12, 12, 12]);
        // bijective relabeling of b's bins: k -> (7k + 3) mod 16, then
        // repin the range markers
        let perm = |k: u32| ((7 * k + 3) % 16) as f32;
        let mut data: Vec<f32> = b.data().iter().map(|&v| perm(v as u32)).collect();
        // the permutation is bijective on 0..16 so min/max still span 0..15
        data[0] = data[0].max(0.0);
        let b2 = Volume::new(b.geometry().clone(), data).unwrap();
        let m1 = mutual_information(&a, &b, bins, None).unwrap();
        let m2 = mutual_information(&a, &b2, bins, None).unwrap();
        assert!((m1 - m2).abs() < 1e-9, "{m1} vs {m2}");
    }

    #[test]
    fn mi_empty_mask_rejected() {
        let g = Geometry::isotropic([8, 8, 8], 1.0);
        let v = Volume::filled(g.clone(), 1.0).unwrap();
        let mask = LabelVolume::from_data(g, vec![0; 512]).unwrap();
        assert!(matches!(
            mutual_information(&v, &v, 16, Some(&mask)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn lncc_identical_images() {
        let g = Geometry::isotropic([16, 16, 16], 1.0);
        let mut rng = Rng::from_seed(11);
        let data: Vec<f32> = (0..g.len()).map(|_| rng.normal() as f32).collect();
        let v = Volume::new(g, data).unwrap();
        let w = local_similarity(&v, &v, 2).unwrap();
        for &x in w.data() {
            assert!((x - 1.0).abs() < 1e-5, "weight {x}");
        }
    }

    #[test]
    fn lncc_anticorrelated_clamps_to_zero() {
        let g = Geometry::isotropic([12, 12, 12], 1.0);
        let mut rng = Rng::from_seed(13);
        let data: Vec<f32> = (0..g.len()).map(|_| rng.normal() as f32).collect();
        let v = Volume::new(g.clone(), data.clone()).unwrap();
        let neg = Volume::new(g, data.iter().map(|&x| -x).collect()).unwrap();
        let w = local_similarity(&v, &neg, 2).unwrap();
        for &x in w.data() {
            assert!(x == 0.0, "weight {x}");
        }
        // and the unclamped metric is -1
        let m = lncc_metric(&v, &neg, 2).unwrap();
        assert!((m + 1.0).abs() < 1e-6);
    }

    #[test]
    fn lncc_constant_patch_zero_weight() {
        let g = Geometry::isotropic([12, 12, 12], 1.0);
        let v = Volume::filled(g.clone(), 5.0).unwrap();
        let mut rng = Rng::from_seed(15);
        let data: Vec<f32> = (0..g.len()).map(|_| rng.normal() as f32).collect();
        let w = local_similarity(&v, &Volume::new(g, data).unwrap(), 2).unwrap();
        assert!(w.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lncc_blend_sits_between_extremes() {
        let g = Geometry::isotropic([24, 24, 24], 1.0);
        let mut rng = Rng::from_seed(17);
        let img: Vec<f32> = (0..g.len()).map(|_| rng.normal() as f32).collect();
        let noise: Vec<f32> = (0..g.len()).map(|_| rng.normal() as f32).collect();
        let fixed = Volume::new(g.clone(), img.clone()).unwrap();
        let blended = Volume::new(
            g,
            img.iter().zip(&noise).map(|(&a, &b)| 0.5 * a + 0.5 * b).collect(),
        )
        .unwrap();
        let w = local_similarity(&fixed, &blended, 2).unwrap();
        let mean = w.data().iter().map(|&x| x as f64).sum::<f64>() / w.data().len() as f64;
        assert!(mean > 0.05 && mean < 0.95, "blend mean weight {mean}");
    }

    #[test]
    fn mi_gradient_matches_finite_differences() {
        let g = Geometry::isotropic([10, 10, 10], 1.0);
        let mut rng = Rng::from_seed(19);
        let f: Vec<f32> = (0..g.len()).map(|_| rng.uniform() as f32).collect();
        let m: Vec<f32> = f
            .iter()
            .map(|&v| v + 0.1 * rng.normal() as f32)
            .collect();
        let fixed = Volume::new(g.clone(), f).unwrap();
        let moving = Volume::new(g.clone(), m.clone()).unwrap();
        let bf = Bounds::of(&fixed);
        let bm = Bounds { lo: -0.5, hi: 1.5 };
        let grad = mi_gradient(&fixed, &moving, 16, bf, bm).unwrap();

        let mi_of = |data: Vec<f32>| {
            let mv = Volume::new(g.clone(), data).unwrap();
            JointHistogram::accumulate(&fixed, &mv, 16, None, bf, bm)
                .unwrap()
                .mutual_information()
        };
        let h = 1e-4f32;
        for &i in &[17usize, 333, 777] {
            let mut plus = m.clone();
            plus[i] += h;
            let mut minus = m.clone();
            minus[i] -= h;
            let fd = (mi_of(plus) - mi_of(minus)) / (2.0 * h as f64);
            assert!(
                (grad[i] - fd).abs() < 2e-2 * (1.0 + fd.abs()),
                "voxel {i}: analytic {} vs fd {}",
                grad[i],
                fd
            );
        }
    }

    #[test]
    fn lncc_gradient_matches_finite_differences() {
        let g = Geometry::isotropic([10, 10, 10], 1.0);
        let mut rng = Rng::from_seed(23);
        let f: Vec<f32> = (0..g.len()).map(|_| rng.normal() as f32).collect();
        let m: Vec<f32> = f
            .iter()
            .map(|&v| 0.8 * v + 0.3 * rng.normal() as f32)
            .collect();
        let fixed = Volume::new(g.clone(), f).unwrap();
        let moving = Volume::new(g.clone(), m.clone()).unwrap();
        let grad = lncc_gradient(&fixed, &moving, 2).unwrap();
        let metric_of = |data: Vec<f32>| {
            lncc_metric(&fixed, &Volume::new(g.clone(), data).unwrap(), 2).unwrap()
        };
        let h = 1e-4f32;
        for &i in &[111usize, 444, 888] {
            let mut plus = m.clone();
            plus[i] += h;
            let mut minus = m.clone();
            minus[i] -= h;
            let fd = (metric_of(plus) - metric_of(minus)) / (2.0 * h as f64);
            // window-centered approximation: expect agreement in sign and
            // rough magnitude
            assert!(
                grad[i] * fd > 0.0 || (grad[i].abs() < 1e-7 && fd.abs() < 1e-6),
                "voxel {i}: analytic {} vs fd {}",
                grad[i],
                fd
            );
        }
    }
}
