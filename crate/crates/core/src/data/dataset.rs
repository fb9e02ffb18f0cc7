//! Label-scarcity settings and partially labeled datasets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Annotated, BoxAnn, ImageSample, Mask, Provenance, SceneSpec};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::error::{Error, Result};
use crate::task::{PerTask, Task};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingKind {
    DisjointNormal,
    DisjointBalance,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSetting {
    pub kind: SettingKind,
    /// Labeled-image count per task. Ignored by `Full`, which keeps everything.
    pub counts: PerTask<usize>,
}

impl DatasetSetting {
    /// `driv : det : sem = 20 : 10 : 7`, scaled by `unit`.
    pub fn disjoint_normal(unit: usize) -> Self {
        Self { kind: SettingKind::DisjointNormal, counts: PerTask::new(10 * unit, 7 * unit, 20 * unit) }
    }

    pub fn disjoint_balance(per_task: usize) -> Self {
        Self { kind: SettingKind::DisjointBalance, counts: PerTask::new(per_task, per_task, per_task) }
    }

    pub fn full() -> Self {
        Self { kind: SettingKind::Full, counts: PerTask::new(0, 0, 0) }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SettingKind::DisjointNormal => "disjoint_normal",
            SettingKind::DisjointBalance => "disjoint_balance",
            SettingKind::Full => "full",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.counts;
        match self.kind {
            SettingKind::DisjointNormal => {
                if c.driv * 10 != c.det * 20 || c.det * 7 != c.sem * 10 || c.det == 0 {
                    return Err(Error::Config(format!(
                        "disjoint_normal counts (driv={}, det={}, sem={}) must be a positive multiple of 20:10:7",
                        c.driv, c.det, c.sem
                    )));
                }
            }
            SettingKind::DisjointBalance => {
                if c.det != c.sem || c.sem != c.driv || c.det == 0 {
                    return Err(Error::Config(format!(
                        "disjoint_balance counts must be equal and positive, got ({}, {}, {})",
                        c.det, c.sem, c.driv
                    )));
                }
            }
            SettingKind::Full => {}
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.det + self.counts.sem + self.counts.driv
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialDataset {
    pub samples: Vec<ImageSample>,
}

impl PartialDataset {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples carrying an annotation for `task`.
    pub fn pool(&self, task: Task) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].has(task)).collect()
    }

    pub fn labeled_counts(&self) -> PerTask<usize> {
        PerTask::from_fn(|t| self.samples.iter().filter(|s| s.has(t)).count())
    }

    pub fn pseudo_count(&self) -> usize {
        self.samples
            .iter()
            .flat_map(|s| Task::ALL.map(|t| s.provenance(t).cloned()))
            .filter(|p| matches!(p, Some(Provenance::Pseudo { .. })))
            .count()
    }

    /// Samples labeled for exactly `task`, other annotations removed.
    pub fn single_task_subset(&self, task: Task) -> PartialDataset {
        let samples = self
            .samples
            .iter()
            .filter(|s| s.has(task))
            .map(|s| {
                let mut s = s.clone();
                for t in Task::ALL.into_iter().filter(|&t| t != task) {
                    s.drop_annotation(t);
                }
                s
            })
            .collect();
        PartialDataset { samples }
    }
}

/// Carves `samples` into a label-scarcity setting. Disjoint kinds keep exactly
/// one task's annotation per selected image; the assignment depends only on
/// `seed`. Output is ordered by sample id.
pub fn split_setting(samples: &[ImageSample], setting: &DatasetSetting, seed: u64) -> Result<PartialDataset> {
    setting.validate()?;
    if setting.kind == SettingKind::Full {
        return Ok(PartialDataset::new(samples.to_vec()));
    }
    let need = setting.total();
    if samples.len() < need {
        return Err(Error::Config(format!(
            "{} setting needs {need} images but only {} were supplied",
            setting.name(),
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assigned: Vec<(usize, Task)> = Vec::with_capacity(need);
    let mut cursor = 0;
    for task in [Task::Driv, Task::Det, Task::Sem] {
        let n = *setting.counts.get(task);
        assigned.extend(order[cursor..cursor + n].iter().map(|&i| (i, task)));
        cursor += n;
    }
    assigned.sort_by_key(|&(i, _)| samples[i].id);
    let out = assigned
        .into_iter()
        .map(|(i, keep)| {
            let mut s = samples[i].clone();
            for t in Task::ALL.into_iter().filter(|&t| t != keep) {
                s.drop_annotation(t);
            }
            s
        })
        .collect();
    Ok(PartialDataset::new(out))
}

const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub file: String,
    pub availability: [bool; 3],
    pub provenance: [Option<Provenance>; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub scene: SceneSpec,
    pub setting: Option<DatasetSetting>,
    pub records: Vec<ManifestRecord>,
}

fn mask_tensor(m: &Mask) -> Tensor {
    Tensor::new([m.height, m.width], m.data.iter().map(|&v| v as f64).collect())
}

fn tensor_mask(t: &Tensor) -> Option<Mask> {
    let s = t.shape();
    if s.len() != 2 {
        return None;
    }
    let data: Option<Vec<u8>> = t
        .data()
        .iter()
        .map(|&v| ((0.0..=255.0).contains(&v) && v.fract() == 0.0).then_some(v as u8))
        .collect();
    Some(Mask { height: s[0], width: s[1], data: data? })
}

fn sample_file(s: &ImageSample) -> Checkpoint {
    let mut ck = Checkpoint::new("synthetic_world");
    ck.insert("image", DType::F32, s.image.clone());
    if let Some(b) = &s.boxes {
        let rows: Vec<f64> = b.value.iter().flat_map(|b| [b.x1, b.y1, b.x2, b.y2, b.class as f64]).collect();
        ck.insert("boxes", DType::F32, Tensor::new([b.value.len(), 5], rows));
    }
    if let Some(m) = &s.semantic_mask {
        ck.insert("semantic_mask", DType::F32, mask_tensor(&m.value));
    }
    if let Some(m) = &s.drivable_mask {
        ck.insert("drivable_mask", DType::F32, mask_tensor(&m.value));
    }
    ck
}

/// Writes `manifest.json` plus one tensor file per image.
pub fn save_dataset(dir: &Path, name: &str, scene: &SceneSpec, setting: Option<&DatasetSetting>, data: &PartialDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(data.len());
    for s in &data.samples {
        let file = format!("{name}_{:06}.ckpt", s.id);
        sample_file(s).save(&dir.join(&file))?;
        records.push(ManifestRecord {
            id: s.id,
            file,
            availability: s.availability(),
            provenance: Task::ALL.map(|t| s.provenance(t).cloned()),
        });
    }
    let manifest = DatasetManifest { name: name.into(), scene: scene.clone(), setting: setting.copied(), records };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(format!("{name}.{MANIFEST}")), &json)
}

pub fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.{MANIFEST}"))
}

pub fn load_manifest(dir: &Path, name: &str) -> Result<DatasetManifest> {
    let path = manifest_path(dir, name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e))
}

pub fn load_dataset(dir: &Path, name: &str) -> Result<(DatasetManifest, PartialDataset)> {
    let manifest = load_manifest(dir, name)?;
    let mut samples = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let path = dir.join(&r.file);
        let ck = Checkpoint::load(&path)?;
        let bad = |what: &str| Error::format(&path, what);
        let image = ck.get("image").ok_or_else(|| bad("missing image"))?.clone();
        let prov = |t: Task| r.provenance[t.index()].clone().unwrap_or(Provenance::GroundTruth);
        let boxes = match ck.get("boxes") {
            Some(t) => {
                let rows = t.data().chunks(5).map(|c| BoxAnn { x1: c[0], y1: c[1], x2: c[2], y2: c[3], class: c[4] as usize });
                Some(Annotated { value: rows.collect(), provenance: prov(Task::Det) })
            }
            None => None,
        };
        let mask = |key: &str, t: Task| -> Result<Option<Annotated<Mask>>> {
            ck.get(key)
                .map(|m| tensor_mask(m).map(|value| Annotated { value, provenance: prov(t) }).ok_or_else(|| bad("invalid mask values")))
                .transpose()
        };
        let s = ImageSample {
            id: r.id,
            image,
            boxes,
            semantic_mask: mask("semantic_mask", Task::Sem)?,
            drivable_mask: mask("drivable_mask", Task::Driv)?,
        };
        if s.availability() != r.availability {
            return Err(bad("availability disagrees with stored annotations"));
        }
        samples.push(s);
    }
    Ok((manifest, PartialDataset::new(samples)))
}
