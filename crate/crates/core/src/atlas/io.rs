//! Atlas directory layout: a JSON manifest (`atlas.json`) naming NIfTI
//! files for each sample or subject; template directories add the mean
//! template, per-subject fields and `provenance.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DeformationField;
use crate::nifti;
use crate::volume::{LabelVolume, ProbabilityMaps, Volume};

use super::{
    AtlasSubject, AtlasTemplate, MultiSubjectAtlas, TemplateProvenance, TemporalSample,
    TemporalTemplate,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalSampleEntry {
    pub age_weeks: f64,
    pub intensity: String,
    pub labels: String,
    /// class id -> prior map file
    pub priors: BTreeMap<u16, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub intensity: String,
    pub labels: String,
    pub gm_prob: String,
    pub ventricle_prob: String,
}

/// `atlas.json` manifest covering both atlas kinds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtlasManifest {
    pub kind: String,
    #[serde(default)]
    pub label_table: BTreeMap<u16, String>,
    #[serde(default)]
    pub samples: Vec<TemporalSampleEntry>,
    #[serde(default)]
    pub subjects: Vec<SubjectEntry>,
}

impl AtlasManifest {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

fn read_labels_with_table(
    dir: &Path,
    file: &str,
    table: &BTreeMap<u16, String>,
) -> Result<LabelVolume> {
    let raw = nifti::read_labels(dir.join(file))?;
    if table.is_empty() {
        Ok(raw)
    } else {
        nifti::with_label_table(raw, table.clone())
    }
}

pub fn save_temporal_template(template: &TemporalTemplate, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut samples = Vec::new();
    for (i, s) in template.samples().iter().enumerate() {
        let base = format!("sample{i:02}");
        let intensity = format!("{base}_t2.nii");
        let labels = format!("{base}_labels.nii");
        nifti::write_volume(&s.intensity, dir.join(&intensity))?;
        nifti::write_labels(&s.tissue_labels, dir.join(&labels))?;
        let mut priors = BTreeMap::new();
        for (class, map) in s.tissue_priors.classes().iter().zip(s.tissue_priors.maps()) {
            let file = format!("{base}_prior{class:02}.nii");
            nifti::write_volume(map, dir.join(&file))?;
            priors.insert(*class, file);
        }
        samples.push(TemporalSampleEntry {
            age_weeks: s.age_weeks,
            intensity,
            labels,
            priors,
        });
    }
    let manifest = AtlasManifest {
        kind: "temporal_template".into(),
        label_table: template.samples()[0].tissue_labels.label_table().clone(),
        samples,
        subjects: Vec::new(),
    };
    fs::write(dir.join("atlas.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_temporal_template(dir: &Path) -> Result<TemporalTemplate> {
    let manifest = AtlasManifest::parse(&fs::read(dir.join("atlas.json"))?)?;
    if manifest.kind != "temporal_template" {
        return Err(Error::MalformedFile(format!(
            "expected a temporal_template manifest, found {:?}",
            manifest.kind
        )));
    }
    let mut samples = Vec::new();
    for e in &manifest.samples {
        let intensity = nifti::read_volume(dir.join(&e.intensity))?;
        let labels = read_labels_with_table(dir, &e.labels, &manifest.label_table)?;
        let mut classes = Vec::new();
        let mut maps = Vec::new();
        for (class, file) in &e.priors {
            classes.push(*class);
            maps.push(nifti::read_volume(dir.join(file))?);
        }
        let priors = ProbabilityMaps::new(intensity.geometry().clone(), classes, maps)?;
        samples.push(TemporalSample {
            age_weeks: e.age_weeks,
            intensity,
            tissue_priors: priors,
            tissue_labels: labels,
        });
    }
    TemporalTemplate::new(samples)
}

pub fn save_multi_subject_atlas(atlas: &MultiSubjectAtlas, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut subjects = Vec::new();
    for s in atlas.subjects() {
        let entry = SubjectEntry {
            id: s.id.clone(),
            intensity: format!("{}_t2.nii", s.id),
            labels: format!("{}_labels.nii", s.id),
            gm_prob: format!("{}_gm.nii", s.id),
            ventricle_prob: format!("{}_vent.nii", s.id),
        };
        nifti::write_volume(&s.intensity, dir.join(&entry.intensity))?;
        nifti::write_labels(&s.structural_labels, dir.join(&entry.labels))?;
        nifti::write_volume(&s.gm_prob, dir.join(&entry.gm_prob))?;
        nifti::write_volume(&s.ventricle_prob, dir.join(&entry.ventricle_prob))?;
        subjects.push(entry);
    }
    let manifest = AtlasManifest {
        kind: "multi_subject_atlas".into(),
        label_table: atlas.subjects()[0].structural_labels.label_table().clone(),
        samples: Vec::new(),
        subjects,
    };
    fs::write(dir.join("atlas.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_multi_subject_atlas(dir: &Path) -> Result<MultiSubjectAtlas> {
    let manifest = AtlasManifest::parse(&fs::read(dir.join("atlas.json"))?)?;
    if manifest.kind != "multi_subject_atlas" {
        return Err(Error::MalformedFile(format!(
            "expected a multi_subject_atlas manifest, found {:?}",
            manifest.kind
        )));
    }
    let mut subjects = Vec::new();
    for e in &manifest.subjects {
        subjects.push(AtlasSubject {
            id: e.id.clone(),
            intensity: nifti::read_volume(dir.join(&e.intensity))?,
            structural_labels: read_labels_with_table(dir, &e.labels, &manifest.label_table)?,
            gm_prob: nifti::read_volume(dir.join(&e.gm_prob))?,
            ventricle_prob: nifti::read_volume(dir.join(&e.ventricle_prob))?,
        });
    }
    MultiSubjectAtlas::new(subjects)
}

pub fn save_atlas_template(template: &AtlasTemplate, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("fields"))?;
    nifti::write_volume(&template.intensity, dir.join("template.nii"))?;
    nifti::write_volume(&template.gm_prob, dir.join("template_gm.nii"))?;
    nifti::write_volume(&template.ventricle_prob, dir.join("template_vent.nii"))?;
    for (id, field) in &template.fields {
        nifti::write_vector(field.components(), dir.join("fields").join(format!("{id}.nii")))?;
    }
    fs::write(
        dir.join("provenance.json"),
        serde_json::to_vec_pretty(&template.provenance)?,
    )?;
    Ok(())
}

pub fn load_atlas_template(dir: &Path) -> Result<AtlasTemplate> {
    let provenance: TemplateProvenance =
        serde_json::from_slice(&fs::read(dir.join("provenance.json"))?)?;
    let intensity = nifti::read_volume(dir.join("template.nii"))?;
    let gm_prob = nifti::read_volume(dir.join("template_gm.nii"))?;
    let ventricle_prob = nifti::read_volume(dir.join("template_vent.nii"))?;
    let mut fields = Vec::new();
    for id in &provenance.subject_ids {
        let path = dir.join("fields").join(format!("{id}.nii"));
        match nifti::read_nifti(&path)? {
            nifti::NiftiData::Vector(components) => {
                fields.push((id.clone(), DeformationField::from_components(components)?));
            }
            _ => {
                return Err(Error::MalformedFile(format!(
                    "{} is not a displacement field",
                    path.display()
                )))
            }
        }
    }
    Ok(AtlasTemplate {
        intensity,
        gm_prob,
        ventricle_prob,
        fields,
        provenance,
    })
}

/// Round-trip a volume through the atlas directory conventions.
pub fn save_probability_maps(maps: &ProbabilityMaps, dir: &Path, stem: &str) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (class, map) in maps.classes().iter().zip(maps.maps()) {
        let file = format!("{stem}_class{class:02}.nii");
        nifti::write_volume(map, dir.join(&file))?;
        files.push(file);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    #[test]
    fn multi_subject_round_trip() {
        let g = Geometry::isotropic([6, 6, 6], 1.5);
        let subject = AtlasSubject {
            id: "s00".into(),
            intensity: Volume::from_fn(g.clone(), |[x, _, _]| x as f32).unwrap(),
            structural_labels: LabelVolume::from_data(
                g.clone(),
                (0..216).map(|i| (i % 3) as u16).collect(),
            )
            .unwrap(),
            gm_prob: Volume::filled(g.clone(), 0.25).unwrap(),
            ventricle_prob: Volume::filled(g, 0.1).unwrap(),
        };
        let atlas = MultiSubjectAtlas::new(vec![subject]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_multi_subject_atlas(&atlas, dir.path()).unwrap();
        let back = load_multi_subject_atlas(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(
            back.subjects()[0].intensity.data(),
            atlas.subjects()[0].intensity.data()
        );
        assert_eq!(
            back.subjects()[0].structural_labels.data(),
            atlas.subjects()[0].structural_labels.data()
        );
    }

    #[test]
    fn atlas_template_round_trip() {
        let g = Geometry::isotropic([5, 5, 5], 1.0);
        let field = DeformationField::from_fn(&g, |p| [p[0] * 0.01, 0.5, -0.25]);
        let template = AtlasTemplate {
            intensity: Volume::filled(g.clone(), 3.0).unwrap(),
            gm_prob: Volume::filled(g.clone(), 0.5).unwrap(),
            ventricle_prob: Volume::filled(g, 0.2).unwrap(),
            fields: vec![("s00".into(), field)],
            provenance: TemplateProvenance {
                iterations: 2,
                rms_change: vec![1.0, 0.1],
                subject_ids: vec!["s00".into()],
            },
        };
        let dir = tempfile::tempdir().unwrap();
        save_atlas_template(&template, dir.path()).unwrap();
        let back = load_atlas_template(dir.path()).unwrap();
        assert_eq!(back.fields.len(), 1);
        assert_eq!(
            back.fields[0].1.components()[0].data(),
            template.fields[0].1.components()[0].data()
        );
        assert_eq!(back.provenance.iterations, 2);
    }

    #[test]
    fn manifest_rejects_wrong_kind() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = AtlasManifest {
            kind: "temporal_template".into(),
            label_table: BTreeMap::new(),
            samples: Vec::new(),
            subjects: Vec::new(),
        };
        fs::write(
            dir.path().join("atlas.json"),
            serde_json::to_vec(&manifest).unwrap(),
        )
        .unwrap();
        assert!(load_multi_subject_atlas(dir.path()).is_err());
    }

    #[test]
    fn manifest_parse_rejects_garbage() {
        assert!(AtlasManifest::parse(b"not json").is_err());
        assert!(AtlasManifest::parse(b"{\"kind\": 3}").is_err());
    }
}
