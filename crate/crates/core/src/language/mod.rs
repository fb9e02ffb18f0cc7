//! Language guidance: frozen text encoder, prompt generators, and the two
//! ways of injecting class text into the coarsest pyramid level.

pub mod fusion;
pub mod l2v;
pub mod prompts;
pub mod text_encoder;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::task::{PerTask, Task};

pub use fusion::{naive_prompt_fusion, FusionOutput};
pub use l2v::{l2v_adapt, L2vConfig, L2vOutput};
pub use prompts::{ensemble_prompt_features, handcrafted_prompt_features, prompt_tokens, task_prompt_features};
pub use text_encoder::{text_encode, TextEncoderConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// No language guidance.
    None,
    /// One fixed template through the L2V adapter.
    Handcrafted,
    /// Averaged fixed templates through the L2V adapter.
    Ensemble,
    /// Per-task learnable contexts through the L2V adapter.
    Learned,
    /// Per-task learnable contexts fused by cosine maps and a 1×1 convolution.
    NaiveFusion,
}

impl PromptMode {
    pub fn uses_contexts(self) -> bool {
        matches!(self, PromptMode::Learned | PromptMode::NaiveFusion)
    }

    pub fn uses_l2v(self) -> bool {
        matches!(self, PromptMode::Handcrafted | PromptMode::Ensemble | PromptMode::Learned)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct LanguageConfig {
    pub mode: PromptMode,
    /// The first template is the handcrafted one; all are ensembled.
    pub templates: Vec<String>,
    pub context_length: usize,
    pub l2v: L2vConfig,
    pub encoder: TextEncoderConfig,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::None,
            templates: vec![prompts::SCENE_TEMPLATE.into(), prompts::PHOTO_TEMPLATE.into()],
            context_length: 16,
            l2v: L2vConfig::default(),
            encoder: TextEncoderConfig::default(),
        }
    }
}

impl LanguageConfig {
    pub fn validate(&self) -> Result<()> {
        if matches!(self.mode, PromptMode::Handcrafted | PromptMode::Ensemble) && self.templates.is_empty() {
            return Err(Error::Config("prompt mode needs at least one template".into()));
        }
        for tpl in &self.templates {
            if !tpl.contains(prompts::CLASS_PLACEHOLDER) {
                return Err(Error::Config(format!("template `{tpl}` lacks {}", prompts::CLASS_PLACEHOLDER)));
            }
        }
        if self.mode.uses_contexts() && self.context_length == 0 {
            return Err(Error::Config("learned prompts need a positive context length".into()));
        }
        Ok(())
    }
}

/// Registers the trainable language-side parameters for `mode`.
pub fn init_language(
    store: &mut ParamStore,
    init: &mut Init,
    cfg: &LanguageConfig,
    c: usize,
    tasks: &PerTask<bool>,
    vocab: &PerTask<Vec<String>>,
) {
    if cfg.mode == PromptMode::None {
        return;
    }
    let d = cfg.encoder.width;
    l2v::init_text_projection(store, init, d, c);
    if cfg.mode.uses_l2v() {
        l2v::init_l2v(store, init, c, &cfg.l2v);
    }
    if cfg.mode == PromptMode::NaiveFusion {
        let n = Task::ALL.iter().filter(|&&t| *tasks.get(t)).map(|&t| vocab.get(t).len()).sum();
        fusion::init_fusion(store, init, c, n);
    }
    if cfg.mode.uses_contexts() {
        for task in Task::ALL.into_iter().filter(|&t| *tasks.get(t)) {
            prompts::init_prompt_context(store, init, task, cfg.context_length, d);
        }
    }
}

/// Text rows of every active task's classes, stacked in task order.
pub fn class_text_features(b: &Bound, cfg: &LanguageConfig, tasks: &PerTask<bool>, vocab: &PerTask<Vec<String>>) -> Result<Option<Var>> {
    if cfg.mode == PromptMode::None {
        return Ok(None);
    }
    let mut rows = Vec::new();
    for task in Task::ALL.into_iter().filter(|&t| *tasks.get(t)) {
        let names = vocab.get(task);
        rows.push(match cfg.mode {
            PromptMode::Handcrafted => handcrafted_prompt_features(b, &cfg.encoder, &cfg.templates[0], names)?,
            PromptMode::Ensemble => ensemble_prompt_features(b, &cfg.encoder, &cfg.templates, names)?,
            PromptMode::Learned | PromptMode::NaiveFusion => task_prompt_features(b, &cfg.encoder, task, names)?,
            PromptMode::None => unreachable!(),
        });
    }
    if rows.is_empty() {
        return Ok(None);
    }
    Ok(Some(b.tape().concat_rows(&rows)))
}

/// Replaces the `(H5, W5, C)` map by its language-aware counterpart.
pub fn apply_language(b: &Bound, cfg: &LanguageConfig, text: Var, p5: Var) -> Result<Var> {
    let t = b.tape();
    let s = t.shape(p5);
    let z5 = t.reshape(p5, &[s[0] * s[1], s[2]]);
    let z = match cfg.mode {
        PromptMode::NaiveFusion => {
            let proj = l2v::project_text(b, text)?;
            naive_prompt_fusion(b, proj, z5)?.fused
        }
        PromptMode::None => z5,
        _ => l2v_adapt(b, text, z5, &cfg.l2v)?.z,
    };
    Ok(t.reshape(z, &s))
}
