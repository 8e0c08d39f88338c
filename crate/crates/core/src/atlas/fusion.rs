//! Label fusion: simple majority voting with an explicit tie sentinel,
//! weighted 26-neighborhood tie resolution, and locally weighted fusion.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ProbabilityMaps, Volume, UNCLASSIFIED};

fn merged_table(maps: &[LabelVolume]) -> BTreeMap<u16, String> {
    let mut table = BTreeMap::new();
    for m in maps {
        for (k, v) in m.label_table() {
            table.entry(*k).or_insert_with(|| v.clone());
        }
    }
    table
}

/// Per voxel, the strictly most frequent label and its vote fraction; ties
/// for the maximum become [`UNCLASSIFIED`] carrying the tied fraction.
pub fn majority_vote(label_maps: &[LabelVolume]) -> Result<(LabelVolume, Volume)> {
    let first = label_maps
        .first()
        .ok_or_else(|| Error::LengthMismatch("no label maps".into()))?;
    let geom = first.geometry().clone();
    for m in &label_maps[1..] {
        if !m.geometry().same_grid(&geom) {
            return Err(Error::GeometryMismatch("label map grids differ".into()));
        }
    }
    let n = geom.len();
    let total = label_maps.len() as f32;
    let results: Vec<(u16, f32)> = (0..n)
        .into_par_iter()
        .map(|i| {
            // count votes over a small sorted scratch
            let mut votes: Vec<u16> = label_maps.iter().map(|m| m.data()[i]).collect();
            votes.sort_unstable();
            let mut best_label = votes[0];
            let mut best_count = 0usize;
            let mut tied = false;
            let mut k = 0;
            while k < votes.len() {
                let label = votes[k];
                let mut count = 1;
                while k + count < votes.len() && votes[k + count] == label {
                    count += 1;
                }
                if count > best_count {
                    best_count = count;
                    best_label = label;
                    tied = false;
                } else if count == best_count {
                    tied = true;
                }
                k += count;
            }
            let fraction = best_count as f32 / total;
            if tied {
                (UNCLASSIFIED, fraction)
            } else {
                (best_label, fraction)
            }
        })
        .collect();
    let labels: Vec<u16> = results.iter().map(|r| r.0).collect();
    let fractions: Vec<f32> = results.iter().map(|r| r.1).collect();
    Ok((
        LabelVolume::new(geom.clone(), labels, merged_table(label_maps))?,
        Volume::new(geom, fractions)?,
    ))
}

/// Assign every [`UNCLASSIFIED`] voxel by weighted majority voting over its
/// 26-connected neighborhood, weights being the neighbors' vote fractions.
/// Sweeps run in raster order and repeat until stable; voxels that can
/// never be reached fall back to background.
pub fn resolve_ties(labels: &LabelVolume, vote_fraction: &Volume) -> Result<LabelVolume> {
    if !labels.geometry().same_grid(vote_fraction.geometry()) {
        return Err(Error::GeometryMismatch(
            "vote fraction grid differs from labels".into(),
        ));
    }
    let geom = labels.geometry().clone();
    let [nx, ny, nz] = geom.dims;
    let mut data = labels.data().to_vec();
    let fractions = vote_fraction.data();

    let mut pending: Vec<usize> = data
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == UNCLASSIFIED)
        .map(|(i, _)| i)
        .collect();

    while !pending.is_empty() {
        let mut changed = false;
        let mut still_pending = Vec::new();
        for &idx in &pending {
            let x = (idx % nx) as i64;
            let y = ((idx / nx) % ny) as i64;
            let z = (idx / (nx * ny)) as i64;
            // weighted vote over the 26-neighborhood; ties -> lowest label
            let mut scores: BTreeMap<u16, f64> = BTreeMap::new();
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let (px, py, pz) = (x + dx, y + dy, z + dz);
                        if px < 0
                            || py < 0
                            || pz < 0
                            || px >= nx as i64
                            || py >= ny as i64
                            || pz >= nz as i64
                        {
                            continue;
                        }
                        let j = px as usize + nx * (py as usize + ny * pz as usize);
                        let l = data[j];
                        if l == UNCLASSIFIED {
                            continue;
                        }
                        *scores.entry(l).or_insert(0.0) += fractions[j] as f64;
                    }
                }
            }
            // BTreeMap iterates ascending, so strict > keeps the lowest id
            let mut best: Option<(u16, f64)> = None;
            for (&label, &score) in &scores {
                if best.map_or(true, |(_, s)| score > s) {
                    best = Some((label, score));
                }
            }
            match best {
                Some((label, score)) if score > 0.0 => {
                    data[idx] = label;
                    changed = true;
                }
                _ => still_pending.push(idx),
            }
        }
        if !changed {
            // isolated voxels with no classified neighbors anywhere
            for &idx in &still_pending {
                data[idx] = 0;
            }
            break;
        }
        pending = still_pending;
    }
    LabelVolume::new(geom, data, labels.label_table().clone())
}

/// Locally weighted fusion: per voxel, each subject's weight map scores its
/// label; the probability maps are the normalized scores (uniform where all
/// weights vanish) and the labels are the argmax with lowest-id ties.
pub fn locally_weighted_fusion(
    warped_labels: &[LabelVolume],
    weights: &[Volume],
) -> Result<(LabelVolume, ProbabilityMaps)> {
    if warped_labels.len() != weights.len() || warped_labels.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} label maps vs {} weight maps",
            warped_labels.len(),
            weights.len()
        )));
    }
    let geom = warped_labels[0].geometry().clone();
    for m in warped_labels {
        if !m.geometry().same_grid(&geom) {
            return Err(Error::GeometryMismatch("label map grids differ".into()));
        }
    }
    for w in weights {
        if !w.geometry().same_grid(&geom) {
            return Err(Error::GeometryMismatch("weight map grids differ".into()));
        }
    }
    let table = merged_table(warped_labels);
    // classes: background plus every table label
    let mut classes: Vec<u16> = vec![0];
    classes.extend(table.keys().copied());
    let class_index: BTreeMap<u16, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();

    let n = geom.len();
    let k = classes.len();
    let rows: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut scores = vec![0.0f64; k];
            for (m, w) in warped_labels.iter().zip(weights) {
                let label = m.data()[i];
                if label == UNCLASSIFIED {
                    continue;
                }
                let weight = w.data()[i].max(0.0) as f64;
                scores[class_index[&label]] += weight;
            }
            let sum: f64 = scores.iter().sum();
            if sum <= 0.0 {
                vec![1.0 / k as f32; k]
            } else {
                scores.iter().map(|&s| (s / sum) as f32).collect()
            }
        })
        .collect();

    let mut maps = Vec::with_capacity(k);
    for c in 0..k {
        let data: Vec<f32> = rows.iter().map(|r| r[c]).collect();
        maps.push(Volume::new(geom.clone(), data)?);
    }
    let prob = ProbabilityMaps::new(geom.clone(), classes.clone(), maps)?;
    let label_data: Vec<u16> = rows
        .par_iter()
        .map(|r| {
            let mut best = 0usize;
            for c in 1..k {
                if r[c] > r[best] {
                    best = c;
                }
            }
            classes[best]
        })
        .collect();
    Ok((LabelVolume::new(geom, label_data, table)?, prob))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::volume::Geometry;

    fn maps_from(values: &[&[u16]], dims: [usize; 3]) -> Vec<LabelVolume> {
        let g = Geometry::isotropic(dims, 1.0);
        values
            .iter()
            .map(|v| LabelVolume::from_data(g.clone(), v.to_vec()).unwrap())
            .collect()
    }

    #[test]
    fn unanimous_and_majority_and_tie() {
        let maps = maps_from(&[&[2, 1, 1], &[2, 1, 2], &[2, 2, 3]], [3, 1, 1]);
        let (labels, fraction) = majority_vote(&maps).unwrap();
        assert_eq!(labels.data(), &[2, 1, UNCLASSIFIED]);
        assert!((fraction.data()[0] - 1.0).abs() < 1e-6);
        assert!((fraction.data()[1] - 2.0 / 3.0).abs() < 1e-6);
        assert!((fraction.data()[2] - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn two_way_tie_is_unclassified() {
        let maps = maps_from(&[&[1], &[2]], [1, 1, 1]);
        let (labels, fraction) = majority_vote(&maps).unwrap();
        assert_eq!(labels.data()[0], UNCLASSIFIED);
        assert!((fraction.data()[0] - 0.5).abs() < 1e-6);
    }

    /// Brute-force frequency count, used as the oracle.
    fn oracle_vote(values: &[u16]) -> (u16, f32) {
        let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
        for &v in values {
            *counts.entry(v).or_insert(0) += 1;
        }
        let max = *counts.values().max().unwrap();
        let winners: Vec<u16> = counts
            .iter()
            .filter(|(_, &c)| c == max)
            .map(|(&l, _)| l)
            .collect();
        let fraction = max as f32 / values.len() as f32;
        if winners.len() == 1 {
            (winners[0], fraction)
        } else {
            (UNCLASSIFIED, fraction)
        }
    }

    #[test]
    fn matches_brute_force_on_random_stacks() {
        let mut rng = Rng::from_seed(2024);
        for _ in 0..200 {
            let n_maps = 1 + (rng.next_u64() % 5) as usize;
            let g = Geometry::isotropic([8, 8, 8], 1.0);
            let maps: Vec<LabelVolume> = (0..n_maps)
                .map(|_| {
                    let data: Vec<u16> =
                        (0..512).map(|_| (rng.next_u64() % 4) as u16).collect();
                    LabelVolume::from_data(g.clone(), data).unwrap()
                })
                .collect();
            let (labels, fraction) = majority_vote(&maps).unwrap();
            for i in 0..512 {
                let column: Vec<u16> = maps.iter().map(|m| m.data()[i]).collect();
                let (el, ef) = oracle_vote(&column);
                assert_eq!(labels.data()[i], el, "voxel {i} of {column:?}");
                assert!((fraction.data()[i] - ef).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resolve_all_neighbors_agree() {
        let g = Geometry::isotropic([3, 3, 3], 1.0);
        let mut data = vec![3u16; 27];
        data[13] = UNCLASSIFIED; // center
        let labels = LabelVolume::from_data(g.clone(), data).unwrap();
        let fraction = Volume::filled(g, 1.0).unwrap();
        let resolved = resolve_ties(&labels, &fraction).unwrap();
        assert_eq!(resolved.data()[13], 3);
        assert!(resolved.data().iter().all(|&v| v != UNCLASSIFIED));
    }

    #[test]
    fn resolve_weighted_sum_oracle() {
        // 13 neighbors of label 1 at fraction 0.9 (sum 11.7) beat 13
        // neighbors of label 2 at fraction 0.5 (sum 6.5)
        let g = Geometry::isotropic([3, 3, 3], 1.0);
        let mut data = vec![0u16; 27];
        let mut fraction = vec![0.0f32; 27];
        let neighbors: Vec<usize> = (0..27).filter(|&i| i != 13).collect();
        for (k, &i) in neighbors.iter().enumerate() {
            if k < 13 {
                data[i] = 1;
                fraction[i] = 0.9;
            } else {
                data[i] = 2;
                fraction[i] = 0.5;
            }
        }
        data[13] = UNCLASSIFIED;
        let labels = LabelVolume::from_data(g.clone(), data).unwrap();
        let fraction = Volume::new(g, fraction).unwrap();
        let resolved = resolve_ties(&labels, &fraction).unwrap();
        assert_eq!(resolved.data()[13], 1);
    }

    #[test]
    fn resolve_no_unclassified_is_identity() {
        let g = Geometry::isotropic([4, 4, 4], 1.0);
        let data: Vec<u16> = (0..64).map(|i| (i % 3) as u16).collect();
        let labels = LabelVolume::from_data(g.clone(), data.clone()).unwrap();
        let fraction = Volume::filled(g, 0.7).unwrap();
        let resolved = resolve_ties(&labels, &fraction).unwrap();
        assert_eq!(resolved.data(), &data[..]);
    }

    #[test]
    fn resolve_lowest_id_on_equal_scores() {
        let g = Geometry::isotropic([3, 1, 1], 1.0);
        let labels =
            LabelVolume::from_data(g.clone(), vec![5, UNCLASSIFIED, 2]).unwrap();
        let fraction = Volume::new(g, vec![0.5, 0.5, 0.5]).unwrap();
        let resolved = resolve_ties(&labels, &fraction).unwrap();
        assert_eq!(resolved.data()[1], 2);
    }

    #[test]
    fn fusion_constant_weights_reduce_to_majority() {
        let mut rng = Rng::from_seed(99);
        let g = Geometry::isotropic([6, 6, 6], 1.0);
        let maps: Vec<LabelVolume> = (0..3)
            .map(|_| {
                let data: Vec<u16> =
                    (0..216).map(|_| (rng.next_u64() % 3) as u16).collect();
                LabelVolume::from_data(g.clone(), data).unwrap()
            })
            .collect();
        let weights: Vec<Volume> = (0..3).map(|_| Volume::filled(g.clone(), 0.4).unwrap()).collect();
        let (fused, prob) = locally_weighted_fusion(&maps, &weights).unwrap();
        assert!(prob.max_sum_error() < 1e-4);
        // oracle: majority with lowest-id tie break
        for i in 0..216 {
            let column: Vec<u16> = maps.iter().map(|m| m.data()[i]).collect();
            let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
            for &v in &column {
                *counts.entry(v).or_insert(0) += 1;
            }
            let max = *counts.values().max().unwrap();
            let expect = counts
                .iter()
                .filter(|(_, &c)| c == max)
                .map(|(&l, _)| l)
                .min()
                .unwrap();
            assert_eq!(fused.data()[i], expect, "voxel {i}: {column:?}");
        }
    }

    #[test]
    fn fusion_one_hot_weight_copies_subject() {
        let g = Geometry::isotropic([4, 4, 4], 1.0);
        let a = LabelVolume::from_data(g.clone(), vec![1; 64]).unwrap();
        let b = LabelVolume::from_data(g.clone(), vec![2; 64]).unwrap();
        let w1 = Volume::filled(g.clone(), 1.0).unwrap();
        let w0 = Volume::filled(g.clone(), 0.0).unwrap();
        let (fused, _) = locally_weighted_fusion(&[a, b.clone()], &[w0, w1]).unwrap();
        assert_eq!(fused.data(), b.data());
    }

    #[test]
    fn fusion_half_space_weights_select_regions() {
        let g = Geometry::isotropic([8, 4, 4], 1.0);
        let a = LabelVolume::from_data(g.clone(), vec![1; 128]).unwrap();
        let b = LabelVolume::from_data(g.clone(), vec![2; 128]).unwrap();
        let wa = Volume::from_fn(g.clone(), |[x, _, _]| if x < 4 { 1.0 } else { 0.0 }).unwrap();
        let wb = Volume::from_fn(g.clone(), |[x, _, _]| if x < 4 { 0.0 } else { 1.0 }).unwrap();
        let (fused, _) = locally_weighted_fusion(&[a, b], &[wa, wb]).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..8 {
                    let expect = if x < 4 { 1 } else { 2 };
                    assert_eq!(fused.at(x, y, z), expect);
                }
            }
        }
    }

    #[test]
    fn fusion_argmax_invariant_under_weight_scaling() {
        let mut rng = Rng::from_seed(7);
        let g = Geometry::isotropic([5, 5, 5], 1.0);
        let maps: Vec<LabelVolume> = (0..4)
            .map(|_| {
                let data: Vec<u16> =
                    (0..125).map(|_| (rng.next_u64() % 4) as u16).collect();
                LabelVolume::from_data(g.clone(), data).unwrap()
            })
            .collect();
        let weights: Vec<Volume> = (0..4)
            .map(|_| {
                let data: Vec<f32> = (0..125).map(|_| rng.uniform() as f32).collect();
                Volume::new(g.clone(), data).unwrap()
            })
            .collect();
        let (fused, _) = locally_weighted_fusion(&maps, &weights).unwrap();
        let scaled: Vec<Volume> = weights.iter().map(|w| w.map(|v| v * 7.5)).collect();
        let (fused2, _) = locally_weighted_fusion(&maps, &scaled).unwrap();
        assert_eq!(fused.data(), fused2.data());
    }

    #[test]
    fn length_mismatch_rejected() {
        let g = Geometry::isotropic([2, 2, 2], 1.0);
        let a = LabelVolume::from_data(g.clone(), vec![1; 8]).unwrap();
        let w = Volume::filled(g, 1.0).unwrap();
        assert!(matches!(
            locally_weighted_fusion(&[a], &[w.clone(), w]),
            Err(Error::LengthMismatch(_))
        ));
    }
}
