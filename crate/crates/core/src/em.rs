//! Expectation-maximization Gaussian-mixture tissue segmentation with
//! spatial atlas priors, plus structural-to-tissue relabeling.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::parallel::deterministic_sum;
use crate::volume::{LabelVolume, ProbabilityMaps, Volume};

/// Priors below this are floored (then renormalized) so registration errors
/// cannot hard-mask a tissue.
const PRIOR_FLOOR: f32 = 1e-4;

/// A class whose posterior mass falls below this many voxels is frozen at
/// its initialization.
const DEGENERATE_MASS: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop when the log-likelihood gain falls below `tol` times the first
    /// iteration's gain (scale-free, so affine intensity rescales do not
    /// change the iteration count).
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmState {
    pub classes: Vec<u16>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Observed-data log-likelihood after each iteration.
    pub log_likelihood: Vec<f64>,
    pub frozen: Vec<bool>,
}

/// EM segmentation of a scalar volume under per-voxel spatial priors.
/// Returns posteriors, the argmax labels (ties to the lowest class id) and
/// the fitted mixture state.
pub fn em_segment(
    volume: &Volume,
    priors: &ProbabilityMaps,
    mask: &LabelVolume,
    config: &EmConfig,
) -> Result<(ProbabilityMaps, LabelVolume, GmmState)> {
    if !priors.geometry().same_grid(volume.geometry())
        || !mask.geometry().same_grid(volume.geometry())
    {
        return Err(Error::GeometryMismatch(
            "EM inputs on different grids".into(),
        ));
    }
    let inside: Vec<usize> = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m != 0)
        .map(|(i, _)| i)
        .collect();
    if inside.is_empty() {
        return Err(Error::EmptyMask);
    }
    let k = priors.classes().len();
    let classes = priors.classes().to_vec();

    // floored, renormalized priors at the masked voxels
    let floored: Vec<Vec<f32>> = inside
        .par_iter()
        .map(|&i| {
            let mut row: Vec<f32> = priors
                .maps()
                .iter()
                .map(|m| m.data()[i].max(PRIOR_FLOOR))
                .collect();
            let sum: f32 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
            row
        })
        .collect();
    let values: Vec<f64> = inside.iter().map(|&i| volume.data()[i] as f64).collect();
    let n = values.len();

    let (lo, hi) = volume.min_max();
    let range = (hi - lo) as f64;
    let var_floor = (1e-6 * range * range).max(1e-30);

    // prior-weighted moment initialization
    let mut means = vec![0.0f64; k];
    let mut variances = vec![0.0f64; k];
    for c in 0..k {
        let wsum = deterministic_sum(n, |i| floored[i][c] as f64);
        let msum = deterministic_sum(n, |i| floored[i][c] as f64 * values[i]);
        let mean = if wsum > 0.0 { msum / wsum } else { 0.0 };
        let vsum = deterministic_sum(n, |i| {
            let d = values[i] - mean;
            floored[i][c] as f64 * d * d
        });
        means[c] = mean;
        variances[c] = (if wsum > 0.0 { vsum / wsum } else { var_floor }).max(var_floor);
    }
    // uninformative priors leave every class at the global moments, a
    // symmetric fixed point of EM; break it with quantile spacing
    let spread = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - means.iter().cloned().fold(f64::INFINITY, f64::min);
    if k > 1 && spread < 0.05 * range {
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let var0 = (range / (2.0 * k as f64)).powi(2).max(var_floor);
        for c in 0..k {
            let q = (c as f64 + 0.5) / k as f64;
            means[c] = sorted[((q * n as f64) as usize).min(n - 1)];
            variances[c] = var0;
        }
    }
    let init_means = means.clone();
    let init_vars = variances.clone();
    let mut frozen = vec![false; k];

    let gauss = |x: f64, mean: f64, var: f64| -> f64 {
        let d = x - mean;
        (-d * d / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    };

    let mut posteriors: Vec<Vec<f32>> = vec![vec![0.0; k]; n];
    let mut log_likelihood = Vec::new();
    let mut first_gain: Option<f64> = None;

    for iter in 0..config.max_iter {
        // E-step
        let ll = {
            let means = &means;
            let variances = &variances;
            let floored = &floored;
            let values = &values;
            let partial: Vec<(Vec<f32>, f64)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut row = vec![0.0f64; k];
                    let mut total = 0.0f64;
                    for c in 0..k {
                        let p = floored[i][c] as f64 * gauss(values[i], means[c], variances[c]);
                        row[c] = p;
                        total += p;
                    }
                    if total <= 0.0 {
                        // numerically impossible voxel: fall back to priors
                        let row: Vec<f32> = floored[i].clone();
                        (row, f64::MIN_POSITIVE.ln())
                    } else {
                        (
                            row.iter().map(|&p| (p / total) as f32).collect(),
                            total.ln(),
                        )
                    }
                })
                .collect();
            for (i, (row, _)) in partial.iter().enumerate() {
                posteriors[i] = row.clone();
            }
            // deterministic reduction in voxel order
            let mut acc = 0.0;
            for (_, l) in &partial {
                acc += l;
            }
            acc
        };
        log_likelihood.push(ll);

        // M-step
        for c in 0..k {
            if frozen[c] {
                continue;
            }
            let wsum = deterministic_sum(n, |i| posteriors[i][c] as f64);
            if wsum < DEGENERATE_MASS {
                log::warn!(
                    "EM class {} posterior mass {:.2} voxels; freezing at initialization",
                    classes[c],
                    wsum
                );
                frozen[c] = true;
                means[c] = init_means[c];
                variances[c] = init_vars[c];
                continue;
            }
            let msum = deterministic_sum(n, |i| posteriors[i][c] as f64 * values[i]);
            let mean = msum / wsum;
            let vsum = deterministic_sum(n, |i| {
                let d = values[i] - mean;
                posteriors[i][c] as f64 * d * d
            });
            means[c] = mean;
            variances[c] = (vsum / wsum).max(var_floor);
        }

        if iter > 0 {
            let gain = ll - log_likelihood[iter - 1];
            let reference = *first_gain.get_or_insert(gain.abs().max(1e-12));
            if gain.abs() < config.tol * reference {
                break;
            }
        }
    }

    // assemble full-grid outputs; voxels outside the mask keep the priors
    let geom = volume.geometry().clone();
    let len = geom.len();
    let mut index_of = vec![usize::MAX; len];
    for (row, &i) in inside.iter().enumerate() {
        index_of[i] = row;
    }
    let mut maps = Vec::with_capacity(k);
    for c in 0..k {
        let data: Vec<f32> = (0..len)
            .into_par_iter()
            .map(|i| {
                if index_of[i] != usize::MAX {
                    posteriors[index_of[i]][c]
                } else {
                    priors.maps()[c].data()[i]
                }
            })
            .collect();
        maps.push(Volume::new(geom.clone(), data)?);
    }
    let out = ProbabilityMaps::new(geom.clone(), classes.clone(), maps)?.normalized();
    let labels = {
        let data: Vec<u16> = (0..len)
            .into_par_iter()
            .map(|i| {
                if index_of[i] == usize::MAX {
                    return 0;
                }
                let row = &posteriors[index_of[i]];
                let mut best = 0usize;
                for c in 1..k {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                classes[best]
            })
            .collect();
        LabelVolume::from_data(geom, data)?
    };
    Ok((
        out,
        labels,
        GmmState {
            classes,
            means,
            variances,
            log_likelihood,
            frozen,
        },
    ))
}

/// Pure relabeling of structural labels into tissue classes.
pub fn tissue_from_structural(
    structural: &LabelVolume,
    mapping: &std::collections::BTreeMap<u16, u16>,
) -> Result<LabelVolume> {
    let mut missing: Vec<u16> = structural
        .label_table()
        .keys()
        .filter(|l| !mapping.contains_key(l))
        .copied()
        .collect();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Error::UnmappedLabel(missing));
    }
    structural.map_values(|v| {
        if v == 0 || v == crate::volume::UNCLASSIFIED {
            v
        } else {
            mapping[&v]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::volume::Geometry;
    use std::collections::BTreeMap;

    fn full_mask(geom: &Geometry) -> LabelVolume {
        LabelVolume::from_data(geom.clone(), vec![1; geom.len()]).unwrap()
    }

    #[test]
    fn zero_prior_forces_zero_posterior() {
        let g = Geometry::isotropic([8, 8, 8], 1.0);
        let mut rng = Rng::from_seed(1);
        let data: Vec<f32> = (0..g.len()).map(|_| 50.0 + 5.0 * rng.normal() as f32).collect();
        let v = Volume::new(g.clone(), data).unwrap();
        // class 2's prior is zero on the left half
        let p1 = Volume::from_fn(g.clone(), |[x, _, _]| if x < 4 { 1.0 } else { 0.5 }).unwrap();
        let p2 = Volume::from_fn(g.clone(), |[x, _, _]| if x < 4 { 0.0 } else { 0.5 }).unwrap();
        let priors = ProbabilityMaps::new(g.clone(), vec![1, 2], vec![p1, p2]).unwrap();
        let (post, _, _) = em_segment(&v, &priors, &full_mask(&g), &EmConfig::default()).unwrap();
        // the floor keeps a relaxed prior, so "zero" means at most the floor
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..4 {
                    let p = post.class_map(2).unwrap().at(x, y, z);
                    assert!(p < 5e-4, "posterior {p} at ({x},{y},{z})");
                }
            }
        }
    }

    #[test]
    fn identical_classes_follow_prior_argmax() {
        let g = Geometry::isotropic([8, 8, 8], 1.0);
        let v = Volume::filled(g.clone(), 10.0).unwrap();
        let p1 = Volume::from_fn(g.clone(), |[x, _, _]| if x < 4 { 1.0 } else { 0.0 }).unwrap();
        let p2 = Volume::from_fn(g.clone(), |[x, _, _]| if x < 4 { 0.0 } else { 1.0 }).unwrap();
        let priors = ProbabilityMaps::new(g.clone(), vec![3, 5], vec![p1, p2]).unwrap();
        let (_, labels, _) =
            em_segment(&v, &priors, &full_mask(&g), &EmConfig::default()).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let expect = if x < 4 { 3 } else { 5 };
                    assert_eq!(labels.at(x, y, z), expect);
                }
            }
        }
    }

    fn three_class_sample(seed: u64, n_side: usize) -> (Volume, Vec<u16>, Geometry) {
        let g = Geometry::isotropic([n_side, n_side, n_side], 1.0);
        let mut rng = Rng::from_seed(seed);
        let mut data = Vec::with_capacity(g.len());
        let mut truth = Vec::with_capacity(g.len());
        let means = [30.0, 60.0, 90.0];
        for i in 0..g.len() {
            let c = i % 3;
            truth.push(c as u16 + 1);
            data.push((means[c] + 5.0 * rng.normal()) as f32);
        }
        (Volume::new(g.clone(), data).unwrap(), truth, g)
    }

    #[test]
    fn recovers_three_class_mixture() {
        let (v, truth, g) = three_class_sample(33, 24);
        let flat = Volume::filled(g.clone(), 1.0 / 3.0).unwrap();
        let priors = ProbabilityMaps::new(
            g.clone(),
            vec![1, 2, 3],
            vec![flat.clone(), flat.clone(), flat],
        )
        .unwrap();
        let (_, labels, state) =
            em_segment(&v, &priors, &full_mask(&g), &EmConfig::default()).unwrap();

        let mut sorted = state.means.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (got, expect) in sorted.iter().zip([30.0, 60.0, 90.0]) {
            assert!(
                (got - expect).abs() / expect < 0.02,
                "mean {got} vs {expect}"
            );
        }
        // accuracy: classes may be permuted, but flat priors + sorted truth
        // means make the argmax class ids line up with intensity order
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| state.means[a].partial_cmp(&state.means[b]).unwrap());
        let relabel: Vec<u16> = {
            let mut r = vec![0u16; 3];
            for (rank, &c) in order.iter().enumerate() {
                r[c] = rank as u16 + 1;
            }
            r
        };
        let correct = labels
            .data()
            .iter()
            .zip(&truth)
            .filter(|(&l, &t)| relabel[(l - 1) as usize] == t)
            .count();
        let accuracy = correct as f64 / truth.len() as f64;
        assert!(accuracy >= 0.99, "accuracy {accuracy:.4}");
    }

    #[test]
    fn log_likelihood_is_monotone() {
        let (v, _, g) = three_class_sample(35, 16);
        let flat = Volume::filled(g.clone(), 1.0 / 3.0).unwrap();
        let priors = ProbabilityMaps::new(
            g.clone(),
            vec![1, 2, 3],
            vec![flat.clone(), flat.clone(), flat],
        )
        .unwrap();
        let (_, _, state) =
            em_segment(&v, &priors, &full_mask(&g), &EmConfig::default()).unwrap();
        for pair in state.log_likelihood.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-9,
                "log-likelihood decreased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn posteriors_sum_to_one_in_mask() {
        let (v, _, g) = three_class_sample(37, 12);
        let flat = Volume::filled(g.clone(), 1.0 / 3.0).unwrap();
        let priors = ProbabilityMaps::new(
            g.clone(),
            vec![1, 2, 3],
            vec![flat.clone(), flat.clone(), flat],
        )
        .unwrap();
        let (post, _, _) =
            em_segment(&v, &priors, &full_mask(&g), &EmConfig::default()).unwrap();
        assert!(post.max_sum_error() < 1e-6);
    }

    #[test]
    fn labels_invariant_under_affine_rescale() {
        let (v, _, g) = three_class_sample(39, 16);
        let flat = Volume::filled(g.clone(), 1.0 / 3.0).unwrap();
        let priors = ProbabilityMaps::new(
            g.clone(),
            vec![1, 2, 3],
            vec![flat.clone(), flat.clone(), flat],
        )
        .unwrap();
        let mask = full_mask(&g);
        let (_, labels_a, _) = em_segment(&v, &priors, &mask, &EmConfig::default()).unwrap();
        let rescaled = v.map(|x| 3.5 * x + 120.0);
        let (_, labels_b, _) =
            em_segment(&rescaled, &priors, &mask, &EmConfig::default()).unwrap();
        assert_eq!(labels_a.data(), labels_b.data());
    }

    #[test]
    fn empty_mask_rejected() {
        let g = Geometry::isotropic([4, 4, 4], 1.0);
        let v = Volume::filled(g.clone(), 1.0).unwrap();
        let flat = Volume::filled(g.clone(), 1.0).unwrap();
        let priors = ProbabilityMaps::new(g.clone(), vec![1], vec![flat]).unwrap();
        let empty = LabelVolume::from_data(g, vec![0; 64]).unwrap();
        assert!(matches!(
            em_segment(&v, &priors, &empty, &EmConfig::default()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn tissue_mapping_identity_and_merge() {
        let g = Geometry::isotropic([4, 4, 4], 1.0);
        let data: Vec<u16> = (0..64).map(|i| (i % 4) as u16).collect();
        let labels = LabelVolume::from_data(g, data.clone()).unwrap();

        let identity: BTreeMap<u16, u16> = [(1, 1), (2, 2), (3, 3)].into();
        let same = tissue_from_structural(&labels, &identity).unwrap();
        assert_eq!(same.data(), &data[..]);

        // {1,2} -> 7, {3} -> 9: counts must be additive
        let merge: BTreeMap<u16, u16> = [(1, 7), (2, 7), (3, 9)].into();
        let merged = tissue_from_structural(&labels, &merge).unwrap();
        assert_eq!(merged.count(7), labels.count(1) + labels.count(2));
        assert_eq!(merged.count(9), labels.count(3));
    }

    #[test]
    fn unmapped_label_reported() {
        let g = Geometry::isotropic([2, 2, 2], 1.0);
        let labels = LabelVolume::from_data(g, vec![0, 1, 2, 0, 0, 0, 0, 2]).unwrap();
        let partial: BTreeMap<u16, u16> = [(1, 1)].into();
        match tissue_from_structural(&labels, &partial) {
            Err(Error::UnmappedLabel(missing)) => assert_eq!(missing, vec![2]),
            other => panic!("expected UnmappedLabel, got {other:?}"),
        }
    }
}
