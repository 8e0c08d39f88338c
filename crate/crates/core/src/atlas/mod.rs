//! Temporal templates, multi-subject atlases, groupwise template
//! construction and single-registration atlas segmentation.
//!
//! The template stores one deformation field per atlas subject
//! (template-space to subject-space). Segmenting a new subject then needs
//! exactly one new registration: subject to template, composed with every
//! stored field.

pub mod fusion;
pub mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{average_fields, compose, invert, DeformationField};
use crate::geometry::AffineTransform;
use crate::registration::{
    local_similarity, register_affine, register_nonrigid, ChannelSet, Metric, RegistrationConfig,
};
use crate::tissue;
use crate::volume::{Interp, LabelVolume, ProbabilityMaps, Volume};

pub use fusion::{locally_weighted_fusion, majority_vote, resolve_ties};

/// One age sample of a temporal template.
#[derive(Debug, Clone)]
pub struct TemporalSample {
    pub age_weeks: f64,
    pub intensity: Volume,
    pub tissue_priors: ProbabilityMaps,
    pub tissue_labels: LabelVolume,
}

/// Age-indexed sequence of average brains with tissue priors and labels.
#[derive(Debug, Clone)]
pub struct TemporalTemplate {
    samples: Vec<TemporalSample>,
}

impl TemporalTemplate {
    pub fn new(samples: Vec<TemporalSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyTemplate);
        }
        for pair in samples.windows(2) {
            if pair[1].age_weeks <= pair[0].age_weeks {
                return Err(Error::GeometryMismatch(
                    "temporal samples must have strictly increasing ages".into(),
                ));
            }
            if pair[0].tissue_labels.label_table() != pair[1].tissue_labels.label_table() {
                return Err(Error::GeometryMismatch(
                    "temporal samples must share one label table".into(),
                ));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[TemporalSample] {
        &self.samples
    }

    /// Sample closest in gestational age; equidistant ties pick the younger.
    pub fn select_by_age(&self, ga_weeks: f64) -> Result<&TemporalSample> {
        self.samples
            .iter()
            .min_by(|a, b| {
                let da = (a.age_weeks - ga_weeks).abs();
                let db = (b.age_weeks - ga_weeks).abs();
                da.partial_cmp(&db)
                    .unwrap()
                    .then(a.age_weeks.partial_cmp(&b.age_weeks).unwrap())
            })
            .ok_or(Error::EmptyTemplate)
    }
}

/// One labelled subject of a multi-subject atlas.
#[derive(Debug, Clone)]
pub struct AtlasSubject {
    pub id: String,
    pub intensity: Volume,
    pub structural_labels: LabelVolume,
    pub gm_prob: Volume,
    pub ventricle_prob: Volume,
}

impl AtlasSubject {
    pub fn channels(&self) -> Result<ChannelSet> {
        ChannelSet::three_channel(
            self.intensity.clone(),
            self.gm_prob.clone(),
            self.ventricle_prob.clone(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct MultiSubjectAtlas {
    subjects: Vec<AtlasSubject>,
}

impl MultiSubjectAtlas {
    pub fn new(subjects: Vec<AtlasSubject>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::TooFewSubjects { needed: 1, got: 0 });
        }
        let table = subjects[0].structural_labels.label_table().clone();
        for s in &subjects[1..] {
            if *s.structural_labels.label_table() != table {
                return Err(Error::GeometryMismatch(
                    "atlas subjects must share one label table".into(),
                ));
            }
        }
        Ok(Self { subjects })
    }

    pub fn subjects(&self) -> &[AtlasSubject] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateProvenance {
    pub iterations: usize,
    /// RMS intensity change of the template per iteration.
    pub rms_change: Vec<f64>,
    pub subject_ids: Vec<String>,
}

/// Mean-intensity template with stored template-to-subject fields and fused
/// channel maps.
#[derive(Debug, Clone)]
pub struct AtlasTemplate {
    pub intensity: Volume,
    pub gm_prob: Volume,
    pub ventricle_prob: Volume,
    /// Per atlas subject, the field mapping template-space points into that
    /// subject's space, on the template grid.
    pub fields: Vec<(String, DeformationField)>,
    pub provenance: TemplateProvenance,
}

impl AtlasTemplate {
    pub fn channels(&self) -> Result<ChannelSet> {
        ChannelSet::three_channel(
            self.intensity.clone(),
            self.gm_prob.clone(),
            self.ventricle_prob.clone(),
        )
    }
}

fn mean_volumes(volumes: &[Volume]) -> Result<Volume> {
    let first = volumes.first().ok_or(Error::EmptyList)?;
    let geom = first.geometry().clone();
    let inv = 1.0 / volumes.len() as f64;
    let n = geom.len();
    use rayon::prelude::*;
    let data: Vec<f32> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sum: f64 = volumes.iter().map(|v| v.data()[i] as f64).sum();
            (sum * inv) as f32
        })
        .collect();
    Volume::new(geom, data)
}

fn rms_diff(a: &Volume, b: &Volume) -> f64 {
    let n = a.data().len();
    let sum = crate::parallel::deterministic_sum(n, |i| {
        let d = a.data()[i] as f64 - b.data()[i] as f64;
        d * d
    });
    (sum / n as f64).sqrt()
}

/// Groupwise template construction: per iteration every subject is
/// registered to the running template (the first subject bootstraps
/// iteration one), the fields are centered by composing with the inverse of
/// their average, and the template is the mean of the warped images.
pub fn build_template(
    atlas: &MultiSubjectAtlas,
    iterations: usize,
    config: &RegistrationConfig,
) -> Result<AtlasTemplate> {
    let subjects = atlas.subjects();
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    if subjects.len() == 1 {
        let s = &subjects[0];
        return Ok(AtlasTemplate {
            intensity: s.intensity.clone(),
            gm_prob: s.gm_prob.clone(),
            ventricle_prob: s.ventricle_prob.clone(),
            fields: vec![(
                s.id.clone(),
                DeformationField::zero(s.intensity.geometry()),
            )],
            provenance: TemplateProvenance {
                iterations: 0,
                rms_change: Vec::new(),
                subject_ids: ids,
            },
        });
    }

    let mut reference = subjects[0].channels()?;
    let mut rms_change = Vec::new();
    let mut stored_fields: Vec<DeformationField> = Vec::new();
    let mut template_intensity = subjects[0].intensity.clone();
    let mut template_gm = subjects[0].gm_prob.clone();
    let mut template_vent = subjects[0].ventricle_prob.clone();

    for iter in 0..iterations.max(1) {
        let mut fields = Vec::with_capacity(subjects.len());
        for s in subjects {
            let field = register_nonrigid(
                &reference,
                &s.channels()?,
                &AffineTransform::identity(),
                config,
            )?;
            fields.push(field);
        }
        // centering: remove the average deformation so the template drifts
        // to the population center instead of the reference subject
        let avg = average_fields(&fields)?;
        let avg_inv = invert(&avg, 20);
        let centered: Vec<DeformationField> =
            fields.iter().map(|f| compose(f, &avg_inv)).collect();

        let warped: Vec<Volume> = centered
            .iter()
            .zip(subjects)
            .map(|(f, s)| f.warp_volume(&s.intensity, Interp::Linear))
            .collect();
        let new_template = mean_volumes(&warped)?;
        let warped_gm: Vec<Volume> = centered
            .iter()
            .zip(subjects)
            .map(|(f, s)| f.warp_volume(&s.gm_prob, Interp::Linear))
            .collect();
        let warped_vent: Vec<Volume> = centered
            .iter()
            .zip(subjects)
            .map(|(f, s)| f.warp_volume(&s.ventricle_prob, Interp::Linear))
            .collect();

        rms_change.push(rms_diff(&new_template, &template_intensity));
        template_intensity = new_template;
        template_gm = mean_volumes(&warped_gm)?;
        template_vent = mean_volumes(&warped_vent)?;
        stored_fields = centered;
        reference = ChannelSet::three_channel(
            template_intensity.clone(),
            template_gm.clone(),
            template_vent.clone(),
        )?;
        log::info!(
            "template iteration {}: rms change {:.4}",
            iter + 1,
            rms_change.last().unwrap()
        );
    }

    Ok(AtlasTemplate {
        intensity: template_intensity,
        gm_prob: template_gm,
        ventricle_prob: template_vent,
        fields: ids.iter().cloned().zip(stored_fields).collect(),
        provenance: TemplateProvenance {
            iterations: iterations.max(1),
            rms_change,
            subject_ids: ids,
        },
    })
}

/// Atlas-based structural segmentation with a single new registration.
///
/// The subject is registered to the template once (3-channel, non-rigid);
/// every atlas subject's labels are then pulled into subject space through
/// the composition of its stored field with that one result, weighted by
/// local similarity, and fused.
pub fn segment_subject(
    template: &AtlasTemplate,
    atlas: &MultiSubjectAtlas,
    subject: &ChannelSet,
    config: &RegistrationConfig,
) -> Result<(LabelVolume, ProbabilityMaps)> {
    let template_ids: Vec<&String> = template.fields.iter().map(|(id, _)| id).collect();
    let atlas_ids: Vec<&String> = atlas.subjects().iter().map(|s| &s.id).collect();
    if template_ids != atlas_ids {
        return Err(Error::GeometryMismatch(
            "atlas template and atlas list different subjects".into(),
        ));
    }
    // the single registration of the whole procedure
    let subject_to_template = register_nonrigid(
        subject,
        &template.channels()?,
        &AffineTransform::identity(),
        config,
    )?;

    let mut warped_labels = Vec::with_capacity(atlas.len());
    let mut weights = Vec::with_capacity(atlas.len());
    for (s, (_, template_to_s)) in atlas.subjects().iter().zip(&template.fields) {
        let total = compose(template_to_s, &subject_to_template);
        warped_labels.push(total.warp_labels(&s.structural_labels));
        let warped_intensity = total.warp_volume(&s.intensity, Interp::Linear);
        weights.push(local_similarity(
            subject.primary(),
            &warped_intensity,
            config.lncc_radius_voxels,
        )?);
    }
    locally_weighted_fusion(&warped_labels, &weights)
}

/// Transfer labels from one temporal template to another: every source
/// sample is registered to each target sample (multi-channel, MI, affine
/// then free-form); the transferred labels come from majority voting over
/// the warped candidates with neighborhood tie resolution, and the priors
/// from locally weighted fusion.
pub fn transfer_labels_across_templates(
    source: &TemporalTemplate,
    target: &TemporalTemplate,
    config: &RegistrationConfig,
) -> Result<TemporalTemplate> {
    let mut config = config.clone();
    config.metric = Metric::Mi;
    let sample_channels = |s: &TemporalSample| -> Result<ChannelSet> {
        let gm = s
            .tissue_priors
            .class_map(tissue::CORTICAL_GM)
            .cloned()
            .unwrap_or_else(|| s.tissue_labels.mask_of(tissue::CORTICAL_GM));
        let vent = s
            .tissue_priors
            .class_map(tissue::VENTRICLES)
            .cloned()
            .unwrap_or_else(|| s.tissue_labels.mask_of(tissue::VENTRICLES));
        ChannelSet::three_channel(s.intensity.clone(), gm, vent)
    };

    let mut new_samples = Vec::with_capacity(target.samples().len());
    for t in target.samples() {
        let t_channels = sample_channels(t)?;
        let mut candidates = Vec::new();
        let mut weights = Vec::new();
        for s in source.samples() {
            let s_channels = sample_channels(s)?;
            let affine = register_affine(
                &t_channels,
                &s_channels,
                &AffineTransform::identity(),
                &config,
            )?;
            let field = register_nonrigid(&t_channels, &s_channels, &affine, &config)?;
            candidates.push(field.warp_labels(&s.tissue_labels));
            let warped_intensity = field.warp_volume(&s.intensity, Interp::Linear);
            weights.push(local_similarity(
                &t.intensity,
                &warped_intensity,
                config.lncc_radius_voxels,
            )?);
        }
        let (_, priors) = locally_weighted_fusion(&candidates, &weights)?;
        let (voted, fraction) = majority_vote(&candidates)?;
        let labels = resolve_ties(&voted, &fraction)?;
        new_samples.push(TemporalSample {
            age_weeks: t.age_weeks,
            intensity: t.intensity.clone(),
            tissue_priors: priors,
            tissue_labels: labels,
        });
    }
    TemporalTemplate::new(new_samples)
}

/// Leave-one-out refinement: per round, each subject is re-segmented by
/// fusing the other N-1 subjects' labels and replaced; rounds stop when
/// fewer than 0.1% of voxels change or `max_rounds` is hit. Returns the
/// refined atlas and the per-round change fractions.
pub fn refine_atlas(
    atlas: &MultiSubjectAtlas,
    max_rounds: usize,
    config: &RegistrationConfig,
) -> Result<(MultiSubjectAtlas, Vec<f64>)> {
    if atlas.len() < 2 {
        return Err(Error::TooFewSubjects {
            needed: 2,
            got: atlas.len(),
        });
    }
    const CONVERGED_FRACTION: f64 = 0.001;
    let mut current = atlas.clone();
    let mut change_fractions = Vec::new();
    for round in 0..max_rounds {
        let mut next_subjects = Vec::with_capacity(current.len());
        let mut changed = 0usize;
        let mut total = 0usize;
        for (i, target) in current.subjects().iter().enumerate() {
            let t_channels = target.channels()?;
            let mut candidates = Vec::new();
            let mut weights = Vec::new();
            for (j, other) in current.subjects().iter().enumerate() {
                if i == j {
                    continue;
                }
                let field = register_nonrigid(
                    &t_channels,
                    &other.channels()?,
                    &AffineTransform::identity(),
                    config,
                )?;
                candidates.push(field.warp_labels(&other.structural_labels));
                let warped = field.warp_volume(&other.intensity, Interp::Linear);
                weights.push(local_similarity(
                    &target.intensity,
                    &warped,
                    config.lncc_radius_voxels,
                )?);
            }
            let (labels, _) = locally_weighted_fusion(&candidates, &weights)?;
            changed += labels
                .data()
                .iter()
                .zip(target.structural_labels.data())
                .filter(|(a, b)| a != b)
                .count();
            total += labels.data().len();
            next_subjects.push(AtlasSubject {
                structural_labels: labels,
                ..target.clone()
            });
        }
        let fraction = changed as f64 / total as f64;
        change_fractions.push(fraction);
        log::info!("refine round {}: changed fraction {:.5}", round + 1, fraction);
        current = MultiSubjectAtlas::new(next_subjects)?;
        if fraction < CONVERGED_FRACTION {
            break;
        }
    }
    Ok((current, change_fractions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn dummy_sample(age: f64) -> TemporalSample {
        let g = Geometry::isotropic([8, 8, 8], 1.0);
        let v = Volume::filled(g.clone(), 1.0).unwrap();
        let labels = LabelVolume::from_data(g.clone(), vec![0; 512]).unwrap();
        let maps = ProbabilityMaps::new(g, vec![0], vec![Volume::filled(labels.geometry().clone(), 1.0).unwrap()]).unwrap();
        TemporalSample {
            age_weeks: age,
            intensity: v,
            tissue_priors: maps,
            tissue_labels: labels,
        }
    }

    #[test]
    fn select_by_age_rules() {
        let t = TemporalTemplate::new(vec![dummy_sample(30.0), dummy_sample(31.0)]).unwrap();
        assert_eq!(t.select_by_age(30.0).unwrap().age_weeks, 30.0);
        assert_eq!(t.select_by_age(30.4).unwrap().age_weeks, 30.0);
        // equidistant tie goes to the younger sample
        assert_eq!(t.select_by_age(30.5).unwrap().age_weeks, 30.0);
        assert_eq!(t.select_by_age(30.6).unwrap().age_weeks, 31.0);
    }

    #[test]
    fn ages_must_increase() {
        assert!(TemporalTemplate::new(vec![dummy_sample(31.0), dummy_sample(30.0)]).is_err());
    }

    #[test]
    fn empty_template_rejected() {
        assert!(matches!(
            TemporalTemplate::new(vec![]),
            Err(Error::EmptyTemplate)
        ));
    }

    #[test]
    fn single_subject_template_is_subject() {
        let g = Geometry::isotropic([12, 12, 12], 1.0);
        let v = Volume::from_fn(g.clone(), |[x, _, _]| x as f32).unwrap();
        let subject = AtlasSubject {
            id: "a".into(),
            intensity: v.clone(),
            structural_labels: LabelVolume::from_data(g.clone(), vec![0; g.len()]).unwrap(),
            gm_prob: Volume::filled(g.clone(), 0.0).unwrap(),
            ventricle_prob: Volume::filled(g, 0.0).unwrap(),
        };
        let atlas = MultiSubjectAtlas::new(vec![subject]).unwrap();
        let template =
            build_template(&atlas, 3, &RegistrationConfig::nonrigid_default()).unwrap();
        assert_eq!(template.intensity.data(), v.data());
        assert_eq!(template.fields.len(), 1);
        assert_eq!(template.fields[0].1.max_magnitude(), 0.0);
    }
}
