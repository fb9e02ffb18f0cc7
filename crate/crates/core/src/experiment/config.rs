//! TOML experiment configuration.
//!
//! A config file only needs the keys it changes: it is merged key by key
//! over [`ExperimentConfig::default`], so a partial `[training.adapt]` table
//! keeps the adapt-stage defaults for everything it leaves out.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSetting, SceneSpec, SettingKind};
use crate::error::{Error, Result};
use crate::heads::{DetHeadConfig, LossWeights, SegHeadConfig};
use crate::language::LanguageConfig;
use crate::model::{AdapterConfig, BackboneConfig, ModelConfig};
use crate::params::bytes_digest;
use crate::self_training::PseudoLabelConfig;
use crate::train::{EpochBudget, Paradigm, PretrainConfig, ScheduleKind, StageConfig, StageKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub scene: SceneSpec,
    pub setting: DatasetSetting,
    /// Size of the pool the setting is carved from.
    pub train_images: usize,
    /// Fully labeled held-out scenes.
    pub test_images: usize,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneConfig,
    pub channels: usize,
    pub adapter: AdapterConfig,
    pub seg: SegHeadConfig,
    pub det: DetHeadConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub paradigm: Paradigm,
    pub budget: EpochBudget,
    pub schedule: ScheduleKind,
    pub weights: LossWeights,
    pub adapt: StageConfig,
    pub finetune: StageConfig,
    pub pretrain: PretrainConfig,
    /// Single-task teachers, used by the self-training schedule.
    pub teacher: StageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Method label in reports.
    pub name: String,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub language: LanguageConfig,
    pub training: TrainingSection,
    pub pseudo: PseudoLabelConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            name: "experiment".into(),
            dataset: DatasetSection {
                scene: SceneSpec::default(),
                setting: DatasetSetting::disjoint_normal(1),
                train_images: 37,
                test_images: 16,
                split_seed: 0,
            },
            model: ModelSection { backbone: m.backbone, channels: m.channels, adapter: m.adapter, seg: m.seg, det: m.det },
            language: LanguageConfig::default(),
            training: TrainingSection {
                paradigm: Paradigm::PretrainAdaptFinetune,
                budget: EpochBudget { adapt_epochs: 1, finetune_epochs: 35 },
                schedule: ScheduleKind::ZeroingLoss,
                weights: LossWeights::default(),
                adapt: StageConfig::adapt(),
                finetune: StageConfig::finetune(),
                pretrain: PretrainConfig::default(),
                teacher: StageConfig { epochs: 36, ..StageConfig::finetune() },
            },
            pseudo: PseudoLabelConfig::default(),
            seeds: vec![0],
        }
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let mut base = toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize");
        merge(&mut base, user);
        let cfg: ExperimentConfig =
            toml::Value::Table(base).try_into().map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            backbone: m.backbone,
            channels: m.channels,
            adapter: m.adapter,
            seg: m.seg,
            det: m.det,
            language: self.language.clone(),
        }
    }

    /// Digest of everything except the seed list, so every seed of one
    /// experiment shares it.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        bytes_digest(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// Identity of the held-out set; runs are only comparable when it matches.
    pub fn eval_digest(&self) -> String {
        let key = (&self.dataset.scene, self.dataset.test_images);
        bytes_digest(&serde_json::to_vec(&key).expect("scene serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        d.scene.validate()?;
        d.setting.validate()?;
        if d.setting.kind != SettingKind::Full && d.setting.total() > d.train_images {
            return Err(Error::Config(format!(
                "{} setting needs {} images but train_images is {}",
                d.setting.name(),
                d.setting.total(),
                d.train_images
            )));
        }
        if d.train_images == 0 || d.test_images == 0 {
            return Err(Error::Config("train_images and test_images must be positive".into()));
        }
        self.model_config().validate()?;
        let t = &self.training;
        t.weights.validate()?;
        for (kind, s) in [(StageKind::Adapt, &t.adapt), (StageKind::Finetune, &t.finetune), (StageKind::Finetune, &t.teacher)] {
            StageConfig { stage: kind, ..s.clone() }.validate()?;
        }
        if t.adapt.batch_size != t.finetune.batch_size {
            return Err(Error::Config("training.adapt and training.finetune must share batch_size".into()));
        }
        if t.budget.total() == 0 {
            return Err(Error::Config("the epoch budget must be positive".into()));
        }
        self.pseudo.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::PromptMode;

    #[test]
    fn partial_tables_keep_section_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            name = "x"
            [training.adapt]
            epochs = 3
            [language]
            mode = "learned"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.training.adapt.learning_rate, StageConfig::adapt().learning_rate);
        assert_eq!(cfg.training.finetune.learning_rate, StageConfig::finetune().learning_rate);
        assert_eq!(cfg.language.mode, PromptMode::Learned);
        assert_eq!(cfg.model_config().language.mode, PromptMode::Learned);
    }

    #[test]
    fn defaults_survive_a_toml_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            "nmae = \"typo\"",
            "[training]\nschedule = \"sometimes\"",
            "[training]\nbudget = \"1;35\"",
            "[language]\nmode = \"handcrafted\"\ntemplates = [\"no placeholder\"]",
            "seeds = []",
            "[dataset]\ntrain_images = 5",
            "[training.finetune]\nbatch_size = 4",
        ] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn digest_ignores_seeds_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seeds: vec![4, 5], ..a.clone() };
        assert_eq!(a.digest(), b.digest());
        let mut c = a.clone();
        c.training.weights.alpha_sem = 0.5;
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.eval_digest(), c.eval_digest());
    }
}
