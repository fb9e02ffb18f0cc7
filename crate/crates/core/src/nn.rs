//! Layer building blocks shared by the vision and language modules.
//!
//! Each layer is a pair of free functions: `init_*` writes parameters under a
//! name prefix, and the forward function reads them back through a [`Bound`].

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear(store: &mut ParamStore, init: &mut Init, name: &str, din: usize, dout: usize) {
    let std = (1.0 / din as f64).sqrt();
    store.insert(format!("{name}.w"), init.normal(&[din, dout], std));
    store.insert(format!("{name}.b"), Tensor::zeros([dout]));
}

pub fn init_linear_zero(store: &mut ParamStore, name: &str, din: usize, dout: usize) {
    store.insert(format!("{name}.w"), Tensor::zeros([din, dout]));
    store.insert(format!("{name}.b"), Tensor::zeros([dout]));
}

pub fn linear(b: &Bound, name: &str, x: Var) -> Result<Var> {
    let t = b.tape();
    let w = b.p(&format!("{name}.w"))?;
    let bias = b.p(&format!("{name}.b"))?;
    let (xc, wr) = (t.value(x).cols(), t.value(w).rows());
    if xc != wr {
        return Err(Error::Model(format!("{name}: input has {xc} features, weight expects {wr}")));
    }
    Ok(t.add_row(t.matmul(x, w), bias))
}

pub fn init_conv(store: &mut ParamStore, init: &mut Init, name: &str, k: usize, cin: usize, cout: usize) {
    let std = (2.0 / (k * k * cin) as f64).sqrt();
    store.insert(format!("{name}.w"), init.normal(&[k, k, cin, cout], std));
    store.insert(format!("{name}.b"), Tensor::zeros([cout]));
}

/// Convolution with bias and "same" padding for odd kernels.
pub fn conv(b: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let t = b.tape();
    let w = b.p(&format!("{name}.w"))?;
    let bias = b.p(&format!("{name}.b"))?;
    let (ws, xs) = (t.shape(w), t.shape(x));
    if ws.len() != 4 || xs.len() != 3 || ws[2] != xs[2] {
        return Err(Error::Model(format!("{name}: kernel {ws:?} incompatible with input {xs:?}")));
    }
    let pad = ws[0] / 2;
    Ok(t.add_row(t.conv2d(x, w, stride, pad), bias))
}

pub fn init_norm(store: &mut ParamStore, name: &str, c: usize) {
    store.insert(format!("{name}.g"), Tensor::full([c], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros([c]));
}

pub fn layer_norm(b: &Bound, name: &str, x: Var) -> Result<Var> {
    let t = b.tape();
    let g = b.p(&format!("{name}.g"))?;
    let bias = b.p(&format!("{name}.b"))?;
    Ok(t.add_row(t.mul_row(t.layer_norm(x, LN_EPS), g), bias))
}

pub fn group_norm(b: &Bound, name: &str, x: Var, groups: usize) -> Result<Var> {
    let t = b.tape();
    let g = b.p(&format!("{name}.g"))?;
    let bias = b.p(&format!("{name}.b"))?;
    Ok(t.add_row(t.mul_row(t.group_norm(x, groups, LN_EPS), g), bias))
}

pub fn init_mha(store: &mut ParamStore, init: &mut Init, name: &str, dq: usize, dkv: usize, d: usize) {
    init_linear(store, init, &format!("{name}.q"), dq, d);
    init_linear(store, init, &format!("{name}.k"), dkv, d);
    init_linear(store, init, &format!("{name}.v"), dkv, d);
    init_linear(store, init, &format!("{name}.o"), d, d);
}

/// Intermediate results of multi-head attention, exposed for oracle tests.
pub struct AttentionParts {
    /// Row-stochastic attention matrices, one per head, `(Nq, Nk)`.
    pub weights: Vec<Var>,
    /// Concatenated head outputs before the output projection, `(Nq, d)`.
    pub mixed: Var,
    /// Output projection of `mixed`.
    pub out: Var,
}

/// Scaled dot-product attention with `heads` heads; queries from `q_in`,
/// keys and values from `kv_in`. `mask` is added to the logits of every head.
pub fn mha_parts(b: &Bound, name: &str, q_in: Var, kv_in: Var, heads: usize, mask: Option<Var>) -> Result<AttentionParts> {
    let t = b.tape();
    let q = linear(b, &format!("{name}.q"), q_in)?;
    let k = linear(b, &format!("{name}.k"), kv_in)?;
    let v = linear(b, &format!("{name}.v"), kv_in)?;
    let d = t.value(q).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Model(format!("{name}: width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (t.slice_last(q, h * dh, dh), t.slice_last(k, h * dh, dh), t.slice_last(v, h * dh, dh))
        };
        let mut logits = t.scale(t.matmul(qh, t.transpose(kh)), scale);
        if let Some(m) = mask {
            logits = t.add(logits, m);
        }
        let w = t.softmax(logits);
        weights.push(w);
        outs.push(t.matmul(w, vh));
    }
    let mixed = if heads == 1 { outs[0] } else { t.concat_last(&outs) };
    let out = linear(b, &format!("{name}.o"), mixed)?;
    Ok(AttentionParts { weights, mixed, out })
}

pub fn mha(b: &Bound, name: &str, q_in: Var, kv_in: Var, heads: usize, mask: Option<Var>) -> Result<Var> {
    Ok(mha_parts(b, name, q_in, kv_in, heads, mask)?.out)
}

pub fn init_ffn(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, hidden: usize) {
    init_linear(store, init, &format!("{name}.fc1"), d, hidden);
    init_linear(store, init, &format!("{name}.fc2"), hidden, d);
}

pub fn ffn(b: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = b.tape().gelu(linear(b, &format!("{name}.fc1"), x)?);
    linear(b, &format!("{name}.fc2"), h)
}

/// Flattens an `(H, W, C)` map into `(H·W, C)` tokens.
pub fn flatten_hw(b: &Bound, x: Var) -> Var {
    let s = b.tape().shape(x);
    b.tape().reshape(x, &[s[0] * s[1], s[2]])
}
