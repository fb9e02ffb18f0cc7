//! Direct fine-tuning versus adapt-then-finetune under one epoch budget.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::schedule::ScheduleKind;
use super::stage::{run_stage, StageConfig, StageKind, StageRun};
use crate::data::PartialDataset;
use crate::error::{Error, Result};
use crate::heads::LossWeights;
use crate::model::MultiTaskModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    PretrainFinetune,
    PretrainAdaptFinetune,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::PretrainFinetune => "pretrain_finetune",
            Paradigm::PretrainAdaptFinetune => "pretrain_adapt_finetune",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain_finetune" => Ok(Paradigm::PretrainFinetune),
            "pretrain_adapt_finetune" => Ok(Paradigm::PretrainAdaptFinetune),
            _ => Err(Error::Config(format!("unknown paradigm `{s}`"))),
        }
    }
}

/// Written as `"adapt,finetune"` in configs, e.g. `"1,35"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EpochBudget {
    pub adapt_epochs: usize,
    pub finetune_epochs: usize,
}

impl EpochBudget {
    pub fn total(&self) -> usize {
        self.adapt_epochs + self.finetune_epochs
    }
}

impl fmt::Display for EpochBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.adapt_epochs, self.finetune_epochs)
    }
}

impl From<EpochBudget> for String {
    fn from(b: EpochBudget) -> String {
        b.to_string()
    }
}

impl TryFrom<String> for EpochBudget {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for EpochBudget {
    type Err = Error;

    /// `"adapt,finetune"`, e.g. `"1,35"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let parse = |p: &str| p.parse::<usize>().map_err(|_| Error::Config(format!("bad epoch count `{p}` in budget `{s}`")));
        match parts.as_slice() {
            [a, f] => Ok(EpochBudget { adapt_epochs: parse(a)?, finetune_epochs: parse(f)? }),
            _ => Err(Error::Config(format!("budget `{s}` must look like `adapt,finetune`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParadigmConfig {
    /// Template for the adapt stage; its epoch count is taken from the budget.
    pub adapt: StageConfig,
    /// Template for the finetune stage; its epoch count is taken from the budget.
    pub finetune: StageConfig,
    pub schedule: ScheduleKind,
    pub weights: LossWeights,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParadigmRun {
    pub stages: Vec<StageRun>,
}

impl ParadigmRun {
    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }
}

/// Stage seeds depend only on the run seed and the stage kind, so a
/// zero-epoch adapt stage leaves the finetune stage unaffected.
pub fn stage_seed(seed: u64, stage: StageKind) -> u64 {
    crate::data::scene::derive_seed(seed, 0x57a6e + stage as u64)
}

/// Runs the paradigm on `model`, which already holds the pretrained weights.
pub fn run_paradigm(
    model: &mut MultiTaskModel,
    data: &PartialDataset,
    paradigm: Paradigm,
    budget: EpochBudget,
    cfg: &ParadigmConfig,
) -> Result<ParadigmRun> {
    if cfg.adapt.batch_size != cfg.finetune.batch_size {
        return Err(Error::Config("adapt and finetune stages must share a batch size to keep step counts comparable".into()));
    }
    let mut stages = Vec::new();
    let finetune_epochs = match paradigm {
        Paradigm::PretrainFinetune => budget.total(),
        Paradigm::PretrainAdaptFinetune => {
            let adapt = StageConfig { stage: StageKind::Adapt, epochs: budget.adapt_epochs, ..cfg.adapt.clone() };
            stages.push(run_stage(model, data, &adapt, cfg.schedule, &cfg.weights, stage_seed(cfg.seed, StageKind::Adapt))?);
            budget.finetune_epochs
        }
    };
    let finetune = StageConfig { stage: StageKind::Finetune, epochs: finetune_epochs, ..cfg.finetune.clone() };
    stages.push(run_stage(model, data, &finetune, cfg.schedule, &cfg.weights, stage_seed(cfg.seed, StageKind::Finetune))?);
    Ok(ParadigmRun { stages })
}
