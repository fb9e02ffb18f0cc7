//! Data generation, the full training pipeline and run artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::data::dataset::{load_manifest, manifest_path};
use crate::data::scene::derive_seed;
use crate::data::{class_vocabulary, generate_scenes, load_dataset, save_dataset, split_setting, PartialDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMetrics};
use crate::model::{LoadReport, MultiTaskModel};
use crate::self_training::{merge_labels, train_teacher, TeacherConfig, TeacherModel};
use crate::task::{PerTask, Task};
use crate::train::{run_paradigm, toy_pretrain, ParadigmConfig, PretrainOutcome, ScheduleKind, StepRecord};

pub const TRAIN_SPLIT: &str = "train";
pub const TEST_SPLIT: &str = "test";
/// Test scenes are drawn from indices far past any training pool.
pub const TEST_INDEX_OFFSET: usize = 1 << 20;

const PRETRAIN_STREAM: u64 = 0x9127;
const TEACHER_STREAM: u64 = 0x7eac;
const MODEL_STREAM: u64 = 0x30de1;

pub fn vocabulary(cfg: &ExperimentConfig) -> PerTask<Vec<String>> {
    PerTask::from_fn(|t| class_vocabulary(&cfg.dataset.scene, t))
}

/// The partially labeled training set and the fully labeled test set.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(PartialDataset, PartialDataset)> {
    let d = &cfg.dataset;
    let pool = generate_scenes(&d.scene, 0..d.train_images)?;
    let train = split_setting(&pool, &d.setting, d.split_seed)?;
    let test = PartialDataset::new(generate_scenes(&d.scene, TEST_INDEX_OFFSET..TEST_INDEX_OFFSET + d.test_images)?);
    Ok((train, test))
}

pub fn generate_data(cfg: &ExperimentConfig, dir: &Path) -> Result<(PartialDataset, PartialDataset)> {
    let (train, test) = build_datasets(cfg)?;
    save_dataset(dir, TRAIN_SPLIT, &cfg.dataset.scene, Some(&cfg.dataset.setting), &train)?;
    save_dataset(dir, TEST_SPLIT, &cfg.dataset.scene, None, &test)?;
    Ok((train, test))
}

/// Loads a split written by [`generate_data`], checking that it was made
/// from the same scene spec as `cfg`.
pub fn load_split(cfg: &ExperimentConfig, dir: &Path, split: &str) -> Result<PartialDataset> {
    let path = manifest_path(dir, split);
    if !path.is_file() {
        return Err(Error::Config(format!("dataset not found: {} (run `gen-data` first)", path.display())));
    }
    let manifest = load_manifest(dir, split)?;
    if manifest.scene != cfg.dataset.scene {
        return Err(Error::Config(format!("{} was generated from a different scene spec", path.display())));
    }
    if split == TRAIN_SPLIT && manifest.setting.as_ref() != Some(&cfg.dataset.setting) {
        return Err(Error::Config(format!("{} was generated for a different label setting", path.display())));
    }
    Ok(load_dataset(dir, split)?.1)
}

pub fn load_data(cfg: &ExperimentConfig, dir: &Path) -> Result<(PartialDataset, PartialDataset)> {
    Ok((load_split(cfg, dir, TRAIN_SPLIT)?, load_split(cfg, dir, TEST_SPLIT)?))
}

pub fn pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<PretrainOutcome> {
    toy_pretrain(&cfg.model.backbone, &cfg.dataset.scene, &cfg.training.pretrain, derive_seed(seed, PRETRAIN_STREAM))
}

/// Trains one teacher per task on its labeled images and completes every
/// missing annotation with their pseudo labels.
pub fn teach(
    cfg: &ExperimentConfig,
    train: &PartialDataset,
    init: &Checkpoint,
    seed: u64,
) -> Result<(PerTask<Option<TeacherModel>>, PartialDataset)> {
    let mut teachers = PerTask::new(None, None, None);
    for task in Task::ALL {
        let subset = train.single_task_subset(task);
        if subset.is_empty() {
            continue;
        }
        let tcfg = TeacherConfig {
            model: cfg.model_config(),
            stage: cfg.training.teacher.clone(),
            seed: derive_seed(seed, TEACHER_STREAM + task.index() as u64),
        };
        *teachers.get_mut(task) = Some(train_teacher(task, &subset, &vocabulary(cfg), &tcfg, Some(init))?.0);
    }
    let merged = merge_labels(train, &teachers, &cfg.pseudo)?;
    Ok((teachers, merged))
}

/// A fresh three-task model with the pretrained tensors loaded.
pub fn init_model(cfg: &ExperimentConfig, pretrained: &Checkpoint, seed: u64) -> Result<(MultiTaskModel, LoadReport)> {
    let mut model =
        MultiTaskModel::new(cfg.model_config(), vocabulary(cfg), PerTask::new(true, true, true), derive_seed(seed, MODEL_STREAM))?;
    let report = model.load_checkpoint(pretrained)?;
    Ok((model, report))
}

pub fn paradigm_config(cfg: &ExperimentConfig, seed: u64) -> ParadigmConfig {
    let t = &cfg.training;
    ParadigmConfig {
        adapt: t.adapt.clone(),
        finetune: t.finetune.clone(),
        schedule: t.schedule,
        weights: t.weights,
        seed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDigests {
    pub pretrained: String,
    pub teachers: PerTask<Option<String>>,
    #[serde(rename = "final")]
    pub final_model: String,
}

/// One row of results, with everything needed to trace it back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub setting: String,
    pub paradigm: String,
    pub budget: String,
    pub schedule: String,
    pub prompt_mode: String,
    pub seed: u64,
    pub config_digest: String,
    pub eval_digest: String,
    pub checkpoints: CheckpointDigests,
    pub optimizer_steps: usize,
    pub metrics: EvalMetrics,
}

pub struct RunArtifacts {
    pub metrics: RunMetrics,
    pub log: Vec<StepRecord>,
    pub model: MultiTaskModel,
    pub model_checkpoint: Checkpoint,
    pub pretrained: Checkpoint,
    pub load_report: LoadReport,
}

/// Pretraining, optional pseudo labeling, the configured paradigm and a
/// final evaluation, all derived from `seed`.
pub fn run_experiment(cfg: &ExperimentConfig, train: &PartialDataset, test: &PartialDataset, seed: u64) -> Result<RunArtifacts> {
    cfg.validate()?;
    let pretrained = pretrain(cfg, seed)?.checkpoint;
    let (teachers, data) = if cfg.training.schedule == ScheduleKind::SelfTraining {
        teach(cfg, train, &pretrained, seed)?
    } else {
        (PerTask::new(None, None, None), train.clone())
    };
    let (mut model, load_report) = init_model(cfg, &pretrained, seed)?;
    let run = run_paradigm(&mut model, &data, cfg.training.paradigm, cfg.training.budget, &paradigm_config(cfg, seed))?;
    let metrics = evaluate(&model, test)?;
    let mut model_checkpoint = model.to_checkpoint(&format!("{}:{}", cfg.training.paradigm, cfg.training.budget));
    model_checkpoint.config_digest = Some(cfg.digest());
    model_checkpoint.frozen_digest = run.stages.last().map(|s| s.freeze.digest_after.clone());
    model_checkpoint.meta.insert("seed".into(), seed.to_string());
    let metrics = RunMetrics {
        method: cfg.name.clone(),
        setting: cfg.dataset.setting.name().into(),
        paradigm: cfg.training.paradigm.to_string(),
        budget: cfg.training.budget.to_string(),
        schedule: cfg.training.schedule.to_string(),
        prompt_mode: serde_json::to_value(cfg.language.mode).expect("enum").as_str().unwrap_or_default().into(),
        seed,
        config_digest: cfg.digest(),
        eval_digest: cfg.eval_digest(),
        checkpoints: CheckpointDigests {
            pretrained: pretrained.digest(),
            teachers: teachers.map(|_, t| t.as_ref().map(TeacherModel::digest)),
            final_model: model_checkpoint.digest(),
        },
        optimizer_steps: run.total_steps(),
        metrics,
    };
    let log = run.stages.into_iter().flat_map(|s| s.log).collect();
    Ok(RunArtifacts { metrics, log, model, model_checkpoint, pretrained, load_report })
}

pub const METRICS_FILE: &str = "metrics.json";
pub const STEPS_FILE: &str = "steps.jsonl";

pub fn run_dir(root: &Path, method: &str, seed: u64) -> PathBuf {
    root.join(method).join(format!("seed-{seed}"))
}

pub fn metrics_json(m: &RunMetrics) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(m).expect("metrics serialize");
    v.push(b'\n');
    v
}

/// Writes `metrics.json`, `steps.jsonl`, the load report and both checkpoints.
pub fn write_run(dir: &Path, art: &RunArtifacts) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut steps = Vec::new();
    for r in &art.log {
        steps.extend(serde_json::to_vec(r).expect("step serializes"));
        steps.push(b'\n');
    }
    write_atomic(&dir.join(STEPS_FILE), &steps)?;
    let report = serde_json::to_vec_pretty(&art.load_report).expect("report serializes");
    write_atomic(&dir.join("load_report.json"), &report)?;
    art.pretrained.save(&dir.join("pretrained.ckpt"))?;
    art.model_checkpoint.save(&dir.join("model.ckpt"))?;
    write_atomic(&dir.join(METRICS_FILE), &metrics_json(&art.metrics))
}

pub fn read_metrics(path: &Path) -> Result<RunMetrics> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))
}

/// Every `metrics.json` below `root`, in path order.
pub fn collect_metrics(root: &Path) -> Result<Vec<RunMetrics>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == METRICS_FILE) {
                found.push(p);
            }
        }
    }
    found.sort();
    found.iter().map(|p| read_metrics(p)).collect()
}
