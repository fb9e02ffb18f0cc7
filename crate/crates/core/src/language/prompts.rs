//! Class-name prompts turned into unit-norm text features.
//!
//! Three generators share the frozen encoder: a single handcrafted template,
//! an ensemble of templates averaged in embedding space, and per-task
//! learnable context vectors inserted at the embedding layer in front of the
//! class-name tokens.

use super::text_encoder::{embed_tokens, encode_embedded, text_encode, TextEncoderConfig};
use super::tokenizer::{self, EOT, SOT};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::task::Task;

pub const CLASS_PLACEHOLDER: &str = "[CLASS]";
pub const SCENE_TEMPLATE: &str = "there is a [CLASS] in the scene.";
pub const PHOTO_TEMPLATE: &str = "a photo of a [CLASS].";

/// Token ids of a class name, its rows of the embedding table form the
/// class-name embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassNameTokens {
    pub name: String,
    pub tokens: Vec<usize>,
}

impl ClassNameTokens {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), tokens: tokenizer::tokenize(name) }
    }

    /// `(T_name, D_text)` embedding rows.
    pub fn embedding(&self, b: &Bound) -> Result<Var> {
        embed_tokens(b, &self.tokens)
    }
}

/// `[SOT, template with the name substituted, EOT]`.
pub fn prompt_tokens(template: &str, name: &str) -> Result<Vec<usize>> {
    if !template.contains(CLASS_PLACEHOLDER) {
        return Err(Error::Prompt(format!("template `{template}` lacks the {CLASS_PLACEHOLDER} placeholder")));
    }
    let text = template.replace(CLASS_PLACEHOLDER, name);
    let mut tokens = vec![SOT];
    tokens.extend(tokenizer::tokenize(&text));
    tokens.push(EOT);
    Ok(tokens)
}

/// `(N, D_text)` unit-norm rows, one per name.
pub fn handcrafted_prompt_features(b: &Bound, cfg: &TextEncoderConfig, template: &str, names: &[String]) -> Result<Var> {
    let t = b.tape();
    let rows = names
        .iter()
        .map(|n| text_encode(b, cfg, &prompt_tokens(template, n)?))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Prompt("no class names to encode".into()));
    }
    Ok(t.l2_normalize_rows(t.concat_rows(&rows)))
}

/// Mean of per-template normalized features, renormalized.
pub fn ensemble_prompt_features(b: &Bound, cfg: &TextEncoderConfig, templates: &[String], names: &[String]) -> Result<Var> {
    let t = b.tape();
    if templates.is_empty() {
        return Err(Error::Prompt("prompt ensemble needs at least one template".into()));
    }
    let mut acc = handcrafted_prompt_features(b, cfg, &templates[0], names)?;
    for tpl in &templates[1..] {
        acc = t.add(acc, handcrafted_prompt_features(b, cfg, tpl, names)?);
    }
    let mean = t.scale(acc, 1.0 / templates.len() as f64);
    Ok(t.l2_normalize_rows(mean))
}

pub fn context_name(task: Task) -> String {
    format!("prompt.{}.ctx", task.name())
}

pub fn is_prompt_param(name: &str) -> bool {
    name.starts_with("prompt.")
}

/// Learnable `(L, D_text)` context for `task`.
pub fn init_prompt_context(store: &mut ParamStore, init: &mut Init, task: Task, length: usize, width: usize) {
    store.insert(context_name(task), init.normal(&[length, width], 0.02));
}

/// Encodes `[SOT; context; name tokens; EOT]` per class and normalizes.
pub fn task_prompt_features(b: &Bound, cfg: &TextEncoderConfig, task: Task, names: &[String]) -> Result<Var> {
    let t = b.tape();
    let ctx = b.p(&context_name(task))?;
    let ctx_len = t.shape(ctx)[0];
    let sot = embed_tokens(b, &[SOT])?;
    let eot = embed_tokens(b, &[EOT])?;
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let cls = ClassNameTokens::new(name);
        let n = ctx_len + cls.tokens.len() + 2;
        if n > cfg.max_len {
            return Err(Error::Prompt(format!(
                "context of {ctx_len} plus `{name}` ({} tokens) exceeds {} positions",
                cls.tokens.len(),
                cfg.max_len
            )));
        }
        let mut parts = vec![sot, ctx];
        if !cls.tokens.is_empty() {
            parts.push(cls.embedding(b)?);
        }
        parts.push(eot);
        rows.push(encode_embedded(b, cfg, t.concat_rows(&parts))?);
    }
    if rows.is_empty() {
        return Err(Error::Prompt("no class names to encode".into()));
    }
    Ok(t.l2_normalize_rows(t.concat_rows(&rows)))
}
