//! Small frozen transformer text encoder.
//!
//! Token plus position embeddings go through pre-norm layers of causal
//! multi-head self-attention and a GELU MLP; the representation of the final
//! token after a last layer norm is the sequence embedding. Weights come from
//! a fixed seed or from an external checkpoint and are never trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer;
use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "text_encoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { width: 32, layers: 2, heads: 4, max_len: 77, seed: 0x7e47 }
    }
}

pub fn is_text_encoder_param(name: &str) -> bool {
    name.starts_with("text_encoder.")
}

pub fn init_text_encoder(store: &mut ParamStore, cfg: &TextEncoderConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = Init::new(&mut rng);
    let d = cfg.width;
    store.insert(format!("{PREFIX}.tok_emb"), init.normal(&[tokenizer::vocab_size(), d], 0.5));
    store.insert(format!("{PREFIX}.pos_emb"), init.normal(&[cfg.max_len, d], 0.1));
    for l in 0..cfg.layers {
        let p = format!("{PREFIX}.l{l}");
        nn::init_norm(store, &format!("{p}.ln1"), d);
        nn::init_mha(store, &mut init, &format!("{p}.attn"), d, d, d);
        nn::init_norm(store, &format!("{p}.ln2"), d);
        nn::init_ffn(store, &mut init, &format!("{p}.mlp"), d, 4 * d);
    }
    nn::init_norm(store, &format!("{PREFIX}.ln_final"), d);
}

/// Replaces the encoder tensors in `store` with those of an external
/// checkpoint. Every encoder tensor must be present with a matching shape.
pub fn load_text_encoder(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<usize> {
    let names: Vec<String> = store.names().filter(|n| is_text_encoder_param(n)).map(String::from).collect();
    for name in &names {
        let src = ckpt
            .get(name)
            .ok_or_else(|| Error::Model(format!("text encoder checkpoint lacks `{name}`")))?;
        let dst = store.get(name).expect("listed above");
        if src.shape() != dst.shape() {
            return Err(Error::Model(format!(
                "text encoder tensor `{name}` has shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        }
    }
    for name in &names {
        store.insert(name.clone(), ckpt.get(name).expect("checked").clone());
    }
    Ok(names.len())
}

/// Embedding rows of `tokens`, `(n, D)`.
pub fn embed_tokens(b: &Bound, tokens: &[usize]) -> Result<Var> {
    let table = b.p(&format!("{PREFIX}.tok_emb"))?;
    let vocab = b.tape().value(table).rows();
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Prompt(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    Ok(b.tape().gather_rows(table, tokens))
}

fn causal_mask(n: usize) -> Tensor {
    Tensor::from_fn([n, n], |i| if i % n > i / n { f64::NEG_INFINITY } else { 0.0 })
}

/// Encodes an already embedded `(n, D)` sequence into a `(1, D)` row.
pub fn encode_embedded(b: &Bound, cfg: &TextEncoderConfig, x: Var) -> Result<Var> {
    let t = b.tape();
    let n = t.shape(x)[0];
    if n == 0 || n > cfg.max_len {
        return Err(Error::Prompt(format!("sequence of {n} tokens exceeds context of {}", cfg.max_len)));
    }
    let pos = t.slice_rows(b.p(&format!("{PREFIX}.pos_emb"))?, 0, n);
    let mut h = t.add(x, pos);
    let mask = t.constant(causal_mask(n));
    for l in 0..cfg.layers {
        let p = format!("{PREFIX}.l{l}");
        let a = nn::layer_norm(b, &format!("{p}.ln1"), h)?;
        h = t.add(h, nn::mha(b, &format!("{p}.attn"), a, a, cfg.heads, Some(mask))?);
        let m = nn::layer_norm(b, &format!("{p}.ln2"), h)?;
        h = t.add(h, nn::ffn(b, &format!("{p}.mlp"), m)?);
    }
    let last = t.slice_rows(h, n - 1, 1);
    nn::layer_norm(b, &format!("{PREFIX}.ln_final"), last)
}

/// Encodes a complete token sequence (sentinels included).
pub fn text_encode(b: &Bound, cfg: &TextEncoderConfig, tokens: &[usize]) -> Result<Var> {
    if tokens.len() > cfg.max_len {
        return Err(Error::Prompt(format!("sequence of {} tokens exceeds context of {}", tokens.len(), cfg.max_len)));
    }
    let x = embed_tokens(b, tokens)?;
    encode_embedded(b, cfg, x)
}
