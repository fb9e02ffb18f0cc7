//! Toy pretraining registry producing backbone-only checkpoints.
//!
//! `supervised_toy` classifies the dominant semantic class of random crops;
//! `contrastive_toy` pulls together two crops of the same scene against the
//! other scenes of the batch (InfoNCE); `random` is plain seeded
//! initialization. Auxiliary heads live under `pretrain.` and are dropped.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::scene::derive_seed;
use crate::data::{generate_scenes, ImageSample, SceneSpec};
use crate::error::{Error, Result};
use crate::model::{backbone_forward, init_backbone, is_backbone_param, BackboneConfig};
use crate::nn;
use crate::params::{Bound, Init, ParamStore};
use crate::task::Task;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainKind {
    SupervisedToy,
    ContrastiveToy,
    Random,
}

impl PretrainKind {
    pub fn name(self) -> &'static str {
        match self {
            PretrainKind::SupervisedToy => "supervised_toy",
            PretrainKind::ContrastiveToy => "contrastive_toy",
            PretrainKind::Random => "random",
        }
    }
}

impl fmt::Display for PretrainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PretrainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [PretrainKind::SupervisedToy, PretrainKind::ContrastiveToy, PretrainKind::Random]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pretraining kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub kind: PretrainKind,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Number of scenes crops are drawn from.
    pub images: usize,
    /// Square crop side, a multiple of 32.
    pub crop: usize,
    pub temperature: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            kind: PretrainKind::ContrastiveToy,
            steps: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            images: 32,
            crop: 32,
            temperature: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Training loss per step.
    pub losses: Vec<f64>,
    /// Loss on a fixed evaluation batch before and after training.
    pub eval_before: Option<f64>,
    pub eval_after: Option<f64>,
}

fn crop(image: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let w = image.shape()[1];
    let mut out = Vec::with_capacity(size * size * 3);
    for y in y0..y0 + size {
        out.extend_from_slice(&image.data()[(y * w + x0) * 3..(y * w + x0 + size) * 3]);
    }
    Tensor::new([size, size, 3], out)
}

/// Top-left corner of a crop in one scene.
#[derive(Clone, Copy, Debug)]
struct View {
    image: usize,
    y0: usize,
    x0: usize,
}

fn random_view(images: &[ImageSample], image: usize, size: usize, rng: &mut ChaCha8Rng) -> View {
    let s = images[image].image.shape();
    View { image, y0: rng.random_range(0..=s[0] - size), x0: rng.random_range(0..=s[1] - size) }
}

fn dominant_class(sample: &ImageSample, v: View, size: usize, classes: usize) -> usize {
    let mask = sample.seg_mask(Task::Sem).expect("ground truth scenes are fully labeled");
    let mut hist = vec![0usize; classes];
    for y in v.y0..v.y0 + size {
        for x in v.x0..v.x0 + size {
            hist[mask.get(y, x) as usize] += 1;
        }
    }
    (0..classes).max_by_key(|&c| (hist[c], std::cmp::Reverse(c))).expect("non-empty vocabulary")
}

fn embed(b: &Bound, cfg: &BackboneConfig, image: Tensor) -> Result<Var> {
    let t = b.tape();
    let x = t.constant(image);
    let x5 = backbone_forward(b, cfg, x)?.x5();
    let tokens = nn::flatten_hw(b, x5);
    let n = t.shape(tokens)[0];
    let avg = t.constant(Tensor::full([1, n], 1.0 / n as f64));
    Ok(t.matmul(avg, tokens))
}

struct Objective<'a> {
    kind: PretrainKind,
    backbone: &'a BackboneConfig,
    images: &'a [ImageSample],
    cfg: &'a PretrainConfig,
    classes: usize,
}

impl Objective<'_> {
    fn loss(&self, b: &Bound, views: &[(View, View)]) -> Result<Var> {
        let t = b.tape();
        let size = self.cfg.crop;
        match self.kind {
            PretrainKind::SupervisedToy => {
                let mut rows = Vec::new();
                let mut labels = Vec::new();
                for (v, _) in views {
                    rows.push(embed(b, self.backbone, crop(&self.images[v.image].image, v.y0, v.x0, size))?);
                    labels.push(dominant_class(&self.images[v.image], *v, size, self.classes));
                }
                let logits = nn::linear(b, "pretrain.cls", t.concat_rows(&rows))?;
                Ok(t.scale(t.sum(t.pick(t.log_softmax(logits), &labels)), -1.0 / views.len() as f64))
            }
            PretrainKind::ContrastiveToy => {
                let project = |v: &View| -> Result<Var> {
                    let h = embed(b, self.backbone, crop(&self.images[v.image].image, v.y0, v.x0, size))?;
                    let h = t.relu(nn::linear(b, "pretrain.proj.fc1", h)?);
                    nn::linear(b, "pretrain.proj.fc2", h)
                };
                let mut a = Vec::new();
                let mut p = Vec::new();
                for (v1, v2) in views {
                    a.push(project(v1)?);
                    p.push(project(v2)?);
                }
                let za = t.l2_normalize_rows(t.concat_rows(&a));
                let zp = t.l2_normalize_rows(t.concat_rows(&p));
                let logits = t.scale(t.matmul(za, t.transpose(zp)), 1.0 / self.cfg.temperature);
                let diag: Vec<usize> = (0..views.len()).collect();
                let fwd = t.sum(t.pick(t.log_softmax(logits), &diag));
                let bwd = t.sum(t.pick(t.log_softmax(t.transpose(logits)), &diag));
                Ok(t.scale(t.add(fwd, bwd), -0.5 / views.len() as f64))
            }
            PretrainKind::Random => unreachable!("random pretraining has no loss"),
        }
    }

    fn views(&self, rng: &mut ChaCha8Rng) -> Vec<(View, View)> {
        let mut picks: Vec<usize> = (0..self.images.len()).collect();
        // distinct scenes per batch so every negative is a different image
        for i in 0..self.cfg.batch_size.min(picks.len()) {
            let j = rng.random_range(i..picks.len());
            picks.swap(i, j);
        }
        picks[..self.cfg.batch_size.min(picks.len())]
            .iter()
            .map(|&i| (random_view(self.images, i, self.cfg.crop, rng), random_view(self.images, i, self.cfg.crop, rng)))
            .collect()
    }
}

/// Pretrains a backbone. The checkpoint holds `backbone.*` tensors only.
pub fn toy_pretrain(backbone: &BackboneConfig, scene: &SceneSpec, cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c5 = backbone.channels()[3];
    let classes = scene.num_classes(Task::Sem);
    {
        let mut init = Init::new(&mut rng);
        init_backbone(&mut store, &mut init, backbone);
        match cfg.kind {
            PretrainKind::SupervisedToy => nn::init_linear(&mut store, &mut init, "pretrain.cls", c5, classes),
            PretrainKind::ContrastiveToy => {
                nn::init_linear(&mut store, &mut init, "pretrain.proj.fc1", c5, c5);
                nn::init_linear(&mut store, &mut init, "pretrain.proj.fc2", c5, 32);
            }
            PretrainKind::Random => {}
        }
    }
    let mut losses = Vec::new();
    let (mut eval_before, mut eval_after) = (None, None);
    if cfg.kind != PretrainKind::Random {
        let (h, w) = scene.image_size;
        if cfg.crop == 0 || !cfg.crop.is_multiple_of(32) || cfg.crop > h || cfg.crop > w {
            return Err(Error::Config(format!("pretraining crop {} must be a multiple of 32 within the image", cfg.crop)));
        }
        if cfg.batch_size < 2 || cfg.images < cfg.batch_size {
            return Err(Error::Config("pretraining needs a batch of at least 2 distinct images".into()));
        }
        let spec = SceneSpec { rng_seed: derive_seed(seed, 0x9e7a), ..scene.clone() };
        let images = generate_scenes(&spec, 0..cfg.images)?;
        let task = Objective { kind: cfg.kind, backbone, images: &images, cfg, classes };
        let eval_views = task.views(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xe7a1)));
        let frozen = |_: &str| false;
        let evaluate = |store: &ParamStore| -> Result<f64> {
            let tape = Tape::new();
            let b = Bound::new(&tape, store, &frozen);
            Ok(tape.item(task.loss(&b, &eval_views)?))
        };
        eval_before = Some(evaluate(&store)?);
        let mut opt = AdamW::new(AdamWConfig::default());
        let all = |_: &str| true;
        for _ in 0..cfg.steps {
            let views = task.views(&mut rng);
            let tape = Tape::new();
            let b = Bound::new(&tape, &store, &all);
            let loss = task.loss(&b, &views)?;
            let v = tape.item(loss);
            if !v.is_finite() {
                return Err(Error::TrainingAbort(format!("{} pretraining loss is {v}", cfg.kind)));
            }
            let grads = b.grads(&tape.backward(loss));
            drop(b);
            opt.step(&mut store, &grads, cfg.learning_rate);
            losses.push(v);
        }
        eval_after = Some(evaluate(&store)?);
    }
    let mut checkpoint = Checkpoint::from_params(&store.filtered(is_backbone_param), format!("toy_pretrain:{}", cfg.kind));
    checkpoint.meta.insert("seed".into(), seed.to_string());
    checkpoint.meta.insert("steps".into(), losses.len().to_string());
    Ok(PretrainOutcome { checkpoint, losses, eval_before, eval_after })
}
