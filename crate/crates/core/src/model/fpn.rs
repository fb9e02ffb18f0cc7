//! Feature pyramid adapter and its convolutional variants.
//!
//! The plain pyramid projects every stage with a 1×1 lateral convolution,
//! adds the 2× nearest-upsampled coarser level top-down, and smooths each
//! merged map with a 3×3 convolution. The variants insert two 3×3
//! convolutions per level before (`pre*`) or after (`post`) the pyramid;
//! `pre_scalar` and `pre_vector` add that branch residually, scaled by a
//! learnable scalar or per-channel vector.

use serde::{Deserialize, Serialize};

use super::backbone::FeatureHierarchy;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    Fpn,
    Pre,
    Post,
    PreScalar,
    PreVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub variant: AdapterVariant,
    /// Initial residual weight for `pre_scalar` / `pre_vector`.
    pub residual_init: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { variant: AdapterVariant::Fpn, residual_init: 0.001 }
    }
}

/// `P2..P5`, all with the same channel count.
#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    pub levels: [Var; 4],
}

impl PyramidFeatures {
    pub fn p2(&self) -> Var {
        self.levels[0]
    }

    pub fn p5(&self) -> Var {
        self.levels[3]
    }
}

pub fn init_fpn(store: &mut ParamStore, init: &mut Init, in_channels: [usize; 4], out: usize, cfg: &AdapterConfig) {
    for (i, &c) in in_channels.iter().enumerate() {
        let lvl = i + 2;
        nn::init_conv(store, init, &format!("fpn.lat{lvl}"), 1, c, out);
        nn::init_conv(store, init, &format!("fpn.out{lvl}"), 3, out, out);
        match cfg.variant {
            AdapterVariant::Fpn => {}
            AdapterVariant::Pre | AdapterVariant::PreScalar | AdapterVariant::PreVector => {
                nn::init_conv(store, init, &format!("fpn.pre{lvl}.conv1"), 3, c, c);
                nn::init_conv(store, init, &format!("fpn.pre{lvl}.conv2"), 3, c, c);
                if cfg.variant == AdapterVariant::PreScalar {
                    store.insert(format!("fpn.pre{lvl}.scale"), Tensor::full([1], cfg.residual_init));
                } else if cfg.variant == AdapterVariant::PreVector {
                    store.insert(format!("fpn.pre{lvl}.scale"), Tensor::full([c], cfg.residual_init));
                }
            }
            AdapterVariant::Post => {
                nn::init_conv(store, init, &format!("fpn.post{lvl}.conv1"), 3, out, out);
                nn::init_conv(store, init, &format!("fpn.post{lvl}.conv2"), 3, out, out);
            }
        }
    }
}

fn two_convs(b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = b.tape().relu(nn::conv(b, &format!("{prefix}.conv1"), x, 1)?);
    nn::conv(b, &format!("{prefix}.conv2"), h, 1)
}

pub fn fpn_forward(b: &Bound, h: &FeatureHierarchy, cfg: &AdapterConfig) -> Result<PyramidFeatures> {
    let t = b.tape();
    let mut inputs = h.levels;
    for (i, x) in inputs.iter_mut().enumerate() {
        let lvl = i + 2;
        let prefix = format!("fpn.pre{lvl}");
        *x = match cfg.variant {
            AdapterVariant::Pre => two_convs(b, &prefix, *x)?,
            AdapterVariant::PreScalar => {
                let branch = two_convs(b, &prefix, *x)?;
                t.add(*x, t.mul_scalar(branch, b.p(&format!("{prefix}.scale"))?))
            }
            AdapterVariant::PreVector => {
                let branch = two_convs(b, &prefix, *x)?;
                t.add(*x, t.mul_row(branch, b.p(&format!("{prefix}.scale"))?))
            }
            AdapterVariant::Fpn | AdapterVariant::Post => *x,
        };
    }
    let lateral: Vec<Var> =
        (0..4).map(|i| nn::conv(b, &format!("fpn.lat{}", i + 2), inputs[i], 1)).collect::<Result<_>>()?;
    let mut merged = [lateral[3]; 4];
    for i in (0..3).rev() {
        let up = t.upsample2x(merged[i + 1]);
        if t.shape(up) != t.shape(lateral[i]) {
            return Err(Error::Model(format!(
                "pyramid level {} has shape {:?}, upsampled level {} has {:?}",
                i + 2,
                t.shape(lateral[i]),
                i + 3,
                t.shape(up)
            )));
        }
        merged[i] = t.add(lateral[i], up);
    }
    let mut levels = [merged[0]; 4];
    for i in 0..4 {
        let lvl = i + 2;
        let p = nn::conv(b, &format!("fpn.out{lvl}"), merged[i], 1)?;
        levels[i] = match cfg.variant {
            AdapterVariant::Post => two_convs(b, &format!("fpn.post{lvl}"), p)?,
            _ => p,
        };
    }
    Ok(PyramidFeatures { levels })
}

pub fn is_fpn_param(name: &str) -> bool {
    name.starts_with("fpn.")
}
