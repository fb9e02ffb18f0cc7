//! CLIP-style attentional pooling of the last backbone stage.
//!
//! The spatial mean of `x5` is prepended as token 0, one residual multi-head
//! self-attention layer mixes all `1 + H5·W5` tokens, and every output row is
//! L2-normalized. Token 0 is the global embedding, the rest the per-location
//! embeddings. The pooled token shares the projections of the spatial tokens.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "attnpool";

pub fn init_attention_pool(store: &mut ParamStore, init: &mut Init, c5: usize) {
    nn::init_mha(store, init, PREFIX, c5, c5, c5);
}

/// Identity q/k/v/o projections with zero biases.
pub fn identity_attention_pool(c5: usize) -> ParamStore {
    let mut store = ParamStore::new();
    for p in ["q", "k", "v", "o"] {
        store.insert(format!("{PREFIX}.{p}.w"), Tensor::from_fn([c5, c5], |i| if i / c5 == i % c5 { 1.0 } else { 0.0 }));
        store.insert(format!("{PREFIX}.{p}.b"), Tensor::zeros([c5]));
    }
    store
}

#[derive(Clone, Copy, Debug)]
pub struct PooledImageFeature {
    /// `(1, C5)` unit-norm global embedding.
    pub global: Var,
    /// `(H5·W5, C5)` unit-norm per-location embeddings.
    pub spatial: Var,
    /// All `1 + H5·W5` rows before normalization.
    pub pre_norm: Var,
}

/// Pools `(H5·W5, C5)` tokens.
pub fn attention_pool(b: &Bound, x5: Var, heads: usize) -> Result<PooledImageFeature> {
    let t = b.tape();
    let s = t.shape(x5);
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::Model(format!("attention_pool expects (H5*W5, C5) tokens, got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Model(format!("attention_pool: {c} channels not divisible by {heads} heads")));
    }
    let avg = t.constant(Tensor::full([1, n], 1.0 / n as f64));
    let gap = t.matmul(avg, x5);
    let tokens = t.concat_rows(&[gap, x5]);
    let mixed = nn::mha(b, PREFIX, tokens, tokens, heads, None)?;
    let pre_norm = t.add(tokens, mixed);
    let normed = t.l2_normalize_rows(pre_norm);
    Ok(PooledImageFeature { global: t.slice_rows(normed, 0, 1), spatial: t.slice_rows(normed, 1, n), pre_norm })
}
