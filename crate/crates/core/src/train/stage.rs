//! One training stage: warmup schedule, exact freezing, loss masking.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, AdamW, AdamWConfig};
use super::schedule::{compose_batch, ScheduleKind};
use crate::autograd::Tape;
use crate::data::PartialDataset;
use crate::error::{Error, Result};
use crate::heads::{total_loss, LossWeights};
use crate::language::l2v::is_language_adapter_param;
use crate::language::prompts::is_prompt_param;
use crate::language::text_encoder::is_text_encoder_param;
use crate::model::{is_fpn_param, MultiTaskModel};
use crate::params::{tensor_digest, Bound, ParamStore};
use crate::task::{PerTask, Task};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Adapt,
    Finetune,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Adapt => "adapt",
            StageKind::Finetune => "finetune",
        }
    }

    /// Whether parameter `name` is updated in this stage. The text encoder is
    /// never trainable.
    pub fn is_trainable(self, name: &str) -> bool {
        if is_text_encoder_param(name) {
            return false;
        }
        match self {
            StageKind::Adapt => is_fpn_param(name) || is_language_adapter_param(name) || is_prompt_param(name),
            StageKind::Finetune => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: StageKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Upper bound on warmup; the stage uses `min(warmup_iters, steps / 10)`.
    pub warmup_iters: usize,
    pub warmup_factor: f64,
    pub batch_size: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::finetune()
    }
}

impl StageConfig {
    pub fn adapt() -> Self {
        Self {
            stage: StageKind::Adapt,
            epochs: 1,
            learning_rate: 2.5e-4,
            weight_decay: 1e-4,
            warmup_iters: 1000,
            warmup_factor: 0.01,
            batch_size: 2,
            clip_norm: Some(1.0),
        }
    }

    pub fn finetune() -> Self {
        Self { stage: StageKind::Finetune, learning_rate: 2.5e-5, ..Self::adapt() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate >= 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.warmup_factor)
            && self.batch_size > 0
            && self.clip_norm.is_none_or(|c| c.is_finite() && c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {} stage settings", self.stage.name())))
        }
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.epochs * self.steps_per_epoch(dataset_len)
    }

    pub fn effective_warmup(&self, total_steps: usize) -> usize {
        self.warmup_iters.min(total_steps / 10).max(1)
    }

    /// Learning rate of step `step` (0-based) of a `total_steps`-step stage.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let warmup = self.effective_warmup(total_steps);
        let progress = (step as f64 / warmup as f64).min(1.0);
        self.learning_rate * (self.warmup_factor + (1.0 - self.warmup_factor) * progress)
    }
}

/// Frozen parameter names and the digest of their contents before and after
/// a stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub frozen_names: BTreeSet<String>,
    pub digest_before: String,
    pub digest_after: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: StageKind,
    pub lr: f64,
    /// Mean over the batch items that carried the task.
    pub det: Option<f64>,
    pub sem: Option<f64>,
    pub driv: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRun {
    pub log: Vec<StepRecord>,
    pub freeze: FreezeSpec,
    pub steps: usize,
}

pub fn frozen_digest(params: &ParamStore, frozen: &BTreeSet<String>) -> String {
    params.group_digest(|n| frozen.contains(n))
}

/// Gradients of the batch loss for one step, with per-task loss means.
pub struct StepGradients {
    pub grads: BTreeMap<String, Tensor>,
    pub task_losses: PerTask<Option<f64>>,
    pub total: f64,
}

/// Forward and backward pass of one batch: the loss is the mean over items
/// of the weighted per-item task losses selected by each item's mask.
pub fn batch_gradients(
    model: &MultiTaskModel,
    data: &PartialDataset,
    items: &[(usize, [bool; 3])],
    weights: &LossWeights,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<StepGradients> {
    let tape = Tape::new();
    let b = Bound::new(&tape, &model.params, trainable);
    let text = model.text_features(&b)?;
    let mut item_totals = Vec::with_capacity(items.len());
    let mut sums: PerTask<(f64, usize)> = PerTask::new((0.0, 0), (0.0, 0), (0.0, 0));
    for &(index, mask) in items {
        let sample = &data.samples[index];
        let losses = model.sample_losses(&b, sample, text, mask)?;
        for task in Task::ALL {
            if let Some(l) = losses.get(task) {
                let e = sums.get_mut(task);
                e.0 += tape.item(*l);
                e.1 += 1;
            }
        }
        item_totals.push(total_loss(&tape, &losses, weights)?);
    }
    let mut loss = item_totals[0];
    for &l in &item_totals[1..] {
        loss = tape.add(loss, l);
    }
    let loss = tape.scale(loss, 1.0 / items.len() as f64);
    let total = tape.item(loss);
    if !total.is_finite() {
        return Err(Error::TrainingAbort(format!("batch loss is {total}")));
    }
    let g = tape.backward(loss);
    let grads = b.grads(&g);
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::TrainingAbort(format!("non-finite gradient for `{name}`")));
    }
    let task_losses = sums.map(|_, &(s, n)| if n > 0 { Some(s / n as f64) } else { None });
    Ok(StepGradients { grads, task_losses, total })
}

/// Trains `model` in place for `cfg.epochs` epochs of `data`.
pub fn run_stage(
    model: &mut MultiTaskModel,
    data: &PartialDataset,
    cfg: &StageConfig,
    schedule: ScheduleKind,
    weights: &LossWeights,
    seed: u64,
) -> Result<StageRun> {
    cfg.validate()?;
    weights.validate()?;
    let stage = cfg.stage;
    let frozen: BTreeSet<String> = model.params.names().filter(|n| !stage.is_trainable(n)).map(String::from).collect();
    let before: BTreeMap<String, String> =
        frozen.iter().map(|n| (n.clone(), tensor_digest(model.params.get(n).expect("listed")))).collect();
    let digest_before = frozen_digest(&model.params, &frozen);
    let total_steps = cfg.total_steps(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let trainable = move |n: &str| stage.is_trainable(n);
    let mut log = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let batch = compose_batch(schedule, data, cfg.batch_size, step, &mut rng)?;
        let items: Vec<(usize, [bool; 3])> = batch.items.iter().map(|i| (i.index, i.loss_mask)).collect();
        let mut sg = batch_gradients(model, data, &items, weights, &trainable)?;
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut sg.grads, c);
        }
        let lr = cfg.lr_at(step, total_steps);
        opt.step(&mut model.params, &sg.grads, lr);
        log.push(StepRecord {
            step,
            stage,
            lr,
            det: sg.task_losses.det,
            sem: sg.task_losses.sem,
            driv: sg.task_losses.driv,
            total: sg.total,
        });
    }
    for (name, d) in &before {
        let now = model.params.get(name).map(tensor_digest);
        if now.as_deref() != Some(d.as_str()) {
            return Err(Error::Invariant(format!("frozen tensor `{name}` changed during the {} stage", stage.name())));
        }
    }
    let digest_after = frozen_digest(&model.params, &frozen);
    Ok(StageRun { log, freeze: FreezeSpec { frozen_names: frozen, digest_before, digest_after }, steps: total_steps })
}
