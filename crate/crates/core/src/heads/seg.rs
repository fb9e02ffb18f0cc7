//! Query-based mask-classification segmentation head.
//!
//! A pixel decoder fuses `P5 → P2` into per-pixel embeddings at stride 4; a
//! small transformer decoder turns `Q` learnable queries, cross-attending to
//! the flattened `P5`, into class logits (with a trailing no-object slot)
//! and mask embeddings. Mask logits are query-pixel inner products.
//!
//! The per-pixel class posterior mixes the queries' class distributions
//! weighted by their sigmoid masks and renormalizes over classes; the loss is
//! its negative log-likelihood over non-ignored pixels.

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, softmax_rows, Tape, Var};
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::model::PyramidFeatures;
use crate::nn;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegHeadConfig {
    pub queries: usize,
    pub decoder_layers: usize,
    pub heads: usize,
}

impl Default for SegHeadConfig {
    fn default() -> Self {
        Self { queries: 20, decoder_layers: 2, heads: 4 }
    }
}

pub fn init_seg_head(store: &mut ParamStore, init: &mut Init, prefix: &str, c: usize, num_classes: usize, cfg: &SegHeadConfig) {
    nn::init_conv(store, init, &format!("{prefix}.pd.in5"), 3, c, c);
    for lvl in 2..=4 {
        nn::init_conv(store, init, &format!("{prefix}.pd.fuse{lvl}"), 3, c, c);
    }
    nn::init_conv(store, init, &format!("{prefix}.pd.mask_feat"), 1, c, c);
    store.insert(format!("{prefix}.queries"), init.normal(&[cfg.queries, c], 1.0));
    for l in 0..cfg.decoder_layers {
        let p = format!("{prefix}.dec{l}");
        nn::init_norm(store, &format!("{p}.ln_cross"), c);
        nn::init_mha(store, init, &format!("{p}.cross"), c, c, c);
        nn::init_norm(store, &format!("{p}.ln_self"), c);
        nn::init_mha(store, init, &format!("{p}.self"), c, c, c);
        nn::init_norm(store, &format!("{p}.ln_ffn"), c);
        nn::init_ffn(store, init, &format!("{p}.ffn"), c, 4 * c);
    }
    nn::init_norm(store, &format!("{prefix}.dec_norm"), c);
    nn::init_linear(store, init, &format!("{prefix}.cls"), c, num_classes + 1);
    nn::init_linear(store, init, &format!("{prefix}.mask_mlp.fc1"), c, c);
    nn::init_linear(store, init, &format!("{prefix}.mask_mlp.fc2"), c, c);
}

#[derive(Clone, Copy, Debug)]
pub struct SegPrediction {
    /// `(H/4, W/4, C)`.
    pub pixel_embeddings: Var,
    /// `(Q, C)`.
    pub mask_embeddings: Var,
    /// `(Q, K + 1)`, last column is no-object.
    pub class_logits: Var,
    /// `(Q, H/4 · W/4)`.
    pub mask_logits: Var,
    pub height: usize,
    pub width: usize,
}

pub fn pixel_decoder(b: &Bound, prefix: &str, pyr: &PyramidFeatures) -> Result<Var> {
    let t = b.tape();
    let mut y = t.relu(nn::conv(b, &format!("{prefix}.pd.in5"), pyr.levels[3], 1)?);
    for lvl in (2..=4).rev() {
        let merged = t.add(pyr.levels[lvl - 2], t.upsample2x(y));
        y = t.relu(nn::conv(b, &format!("{prefix}.pd.fuse{lvl}"), merged, 1)?);
    }
    nn::conv(b, &format!("{prefix}.pd.mask_feat"), y, 1)
}

/// Masks from mask embeddings and a stride-4 pixel embedding map.
pub fn mask_logits(t: &Tape, mask_embeddings: Var, pixel_embeddings: Var) -> Var {
    let s = t.shape(pixel_embeddings);
    let flat = t.reshape(pixel_embeddings, &[s[0] * s[1], s[2]]);
    t.matmul(mask_embeddings, t.transpose(flat))
}

pub fn seg_head_forward(b: &Bound, prefix: &str, pyr: &PyramidFeatures, cfg: &SegHeadConfig) -> Result<SegPrediction> {
    let t = b.tape();
    let pixel = pixel_decoder(b, prefix, pyr)?;
    let memory = nn::flatten_hw(b, pyr.p5());
    let mut q = b.p(&format!("{prefix}.queries"))?;
    for l in 0..cfg.decoder_layers {
        let p = format!("{prefix}.dec{l}");
        let n = nn::layer_norm(b, &format!("{p}.ln_cross"), q)?;
        q = t.add(q, nn::mha(b, &format!("{p}.cross"), n, memory, cfg.heads, None)?);
        let n = nn::layer_norm(b, &format!("{p}.ln_self"), q)?;
        q = t.add(q, nn::mha(b, &format!("{p}.self"), n, n, cfg.heads, None)?);
        let n = nn::layer_norm(b, &format!("{p}.ln_ffn"), q)?;
        q = t.add(q, nn::ffn(b, &format!("{p}.ffn"), n)?);
    }
    let q = nn::layer_norm(b, &format!("{prefix}.dec_norm"), q)?;
    let class_logits = nn::linear(b, &format!("{prefix}.cls"), q)?;
    let h = t.relu(nn::linear(b, &format!("{prefix}.mask_mlp.fc1"), q)?);
    let mask_embeddings = nn::linear(b, &format!("{prefix}.mask_mlp.fc2"), h)?;
    let mask_logits = mask_logits(t, mask_embeddings, pixel);
    let s = t.shape(pixel);
    Ok(SegPrediction { pixel_embeddings: pixel, mask_embeddings, class_logits, mask_logits, height: s[0], width: s[1] })
}

/// Mean per-pixel NLL of `mask` (already at stride 4) under the mixture
/// posterior. Returns a constant 0 when every pixel is ignored.
pub fn seg_loss(t: &Tape, pred: &SegPrediction, mask: &Mask, ignore_index: u8) -> Result<Var> {
    let k = t.value(pred.class_logits).cols() - 1;
    if mask.height != pred.height || mask.width != pred.width {
        return Err(Error::Model(format!(
            "target mask {}x{} does not match prediction {}x{}",
            mask.height, mask.width, pred.height, pred.width
        )));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (p, &v) in mask.data.iter().enumerate() {
        if v == ignore_index {
            continue;
        }
        if v as usize >= k {
            return Err(Error::Model(format!("mask value {v} out of range for {k} classes")));
        }
        rows.push(p);
        targets.push(v as usize);
    }
    if rows.is_empty() {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let probs = t.slice_last(t.softmax(pred.class_logits), 0, k);
    let masks = t.transpose(t.sigmoid(pred.mask_logits));
    let scores = t.matmul(t.gather_rows(masks, &rows), probs);
    let num = t.log(t.pick(scores, &targets));
    let den = t.log(t.sum_last(scores));
    Ok(t.mean(t.sub(den, num)))
}

/// Normalized per-pixel class posterior `(H/4 · W/4, K)` from raw outputs.
pub fn seg_posterior(class_logits: &Tensor, mask_logits: &Tensor) -> Tensor {
    let k = class_logits.cols() - 1;
    let q = class_logits.rows();
    let probs = softmax_rows(class_logits);
    let npix = mask_logits.cols();
    let mut out = vec![0.0; npix * k];
    for p in 0..npix {
        let row = &mut out[p * k..(p + 1) * k];
        for qi in 0..q {
            let m = sigmoid(mask_logits.data()[qi * npix + p]);
            for (c, o) in row.iter_mut().enumerate() {
                *o += m * probs.row(qi)[c];
            }
        }
        let s: f64 = row.iter().sum();
        for o in row.iter_mut() {
            *o /= s;
        }
    }
    Tensor::new([npix, k], out)
}

/// Per-pixel `(argmax class, max posterior)`.
pub fn argmax_scores(posterior: &Tensor) -> Vec<(usize, f64)> {
    (0..posterior.rows())
        .map(|p| {
            posterior.row(p).iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
        })
        .collect()
}

pub fn predicted_mask(posterior: &Tensor, height: usize, width: usize) -> Mask {
    Mask { height, width, data: argmax_scores(posterior).into_iter().map(|(c, _)| c as u8).collect() }
}
