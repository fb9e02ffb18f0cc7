//! The multi-task network: shared backbone and adapter, optional language
//! guidance on the coarsest level, and one head per enabled task.

pub mod attnpool;
pub mod backbone;
pub mod fpn;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attnpool::{attention_pool, identity_attention_pool, init_attention_pool, PooledImageFeature};
pub use backbone::{backbone_forward, init_backbone, is_backbone_param, BackboneConfig, FeatureHierarchy, STRIDES};
pub use fpn::{fpn_forward, init_fpn, is_fpn_param, AdapterConfig, AdapterVariant, PyramidFeatures};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{ImageSample, Mask, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::heads::det::{self, decode_detections, DetHeadConfig, DetPrediction, ScoredBox};
use crate::heads::loss::det_loss;
use crate::heads::seg::{self, seg_posterior, SegHeadConfig, SegPrediction};
use crate::language::{self, LanguageConfig, PromptMode};
use crate::params::{Bound, Init, ParamStore};
use crate::task::{PerTask, Task};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Pyramid width shared by every level and head.
    pub channels: usize,
    pub adapter: AdapterConfig,
    pub seg: SegHeadConfig,
    pub det: DetHeadConfig,
    pub language: LanguageConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            channels: 32,
            adapter: AdapterConfig::default(),
            seg: SegHeadConfig::default(),
            det: DetHeadConfig::default(),
            language: LanguageConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.backbone.base_width == 0 || self.backbone.blocks_per_stage == 0 || self.backbone.norm_groups == 0 {
            return bad("backbone widths, block counts and norm groups must be positive");
        }
        if self.channels == 0 || self.seg.queries == 0 || self.det.proposals == 0 || self.det.dynamic_dim == 0 {
            return bad("channels, queries, proposals and dynamic_dim must be positive");
        }
        if self.det.stages == 0 {
            return bad("the detection head needs at least one cascade stage");
        }
        if self.seg.heads == 0 || !self.channels.is_multiple_of(self.seg.heads) {
            return bad("channels must be divisible by the segmentation attention heads");
        }
        if self.language.mode != PromptMode::None {
            let l = &self.language;
            if l.l2v.heads == 0 || !self.channels.is_multiple_of(l.l2v.heads) {
                return bad("channels must be divisible by the L2V attention heads");
            }
            if l.encoder.heads == 0 || !l.encoder.width.is_multiple_of(l.encoder.heads) {
                return bad("text width must be divisible by the text encoder heads");
            }
        }
        if !self.adapter.residual_init.is_finite() {
            return bad("adapter residual_init must be finite");
        }
        self.language.validate()
    }
}

pub fn head_prefix(task: Task) -> &'static str {
    match task {
        Task::Det => "head.det",
        Task::Sem => "head.sem",
        Task::Driv => "head.driv",
    }
}

pub fn is_head_param(task: Task, name: &str) -> bool {
    name.strip_prefix(head_prefix(task)).is_some_and(|rest| rest.starts_with('.'))
}

pub fn is_any_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

/// Outputs of one forward pass; heads that were not requested are `None`.
pub struct ModelOutput {
    pub hierarchy: FeatureHierarchy,
    pub pyramid: PyramidFeatures,
    pub det: Option<DetPrediction>,
    pub sem: Option<SegPrediction>,
    pub driv: Option<SegPrediction>,
}

impl ModelOutput {
    pub fn seg(&self, task: Task) -> Option<&SegPrediction> {
        match task {
            Task::Sem => self.sem.as_ref(),
            Task::Driv => self.driv.as_ref(),
            Task::Det => None,
        }
    }
}

/// Raw segmentation outputs for one image.
#[derive(Clone, Debug)]
pub struct SegOutput {
    pub class_logits: Tensor,
    pub mask_logits: Tensor,
    /// Stride-4 grid size.
    pub height: usize,
    pub width: usize,
}

impl SegOutput {
    pub fn posterior(&self) -> Tensor {
        seg_posterior(&self.class_logits, &self.mask_logits)
    }

    /// Argmax class mask at full resolution.
    pub fn mask(&self) -> Mask {
        seg::predicted_mask(&self.posterior(), self.height, self.width).upsample(STRIDES[0])
    }
}

#[derive(Clone, Debug)]
pub struct DetOutput {
    /// `(R, 4)` normalized boxes.
    pub boxes: Tensor,
    pub class_logits: Tensor,
    pub image_height: usize,
    pub image_width: usize,
}

impl DetOutput {
    pub fn detections(&self) -> Vec<ScoredBox> {
        decode_detections(&self.boxes, &self.class_logits, self.image_height, self.image_width)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Prediction {
    pub det: Option<DetOutput>,
    pub sem: Option<SegOutput>,
    pub driv: Option<SegOutput>,
}

impl Prediction {
    pub fn seg(&self, task: Task) -> Option<&SegOutput> {
        match task {
            Task::Sem => self.sem.as_ref(),
            Task::Driv => self.driv.as_ref(),
            Task::Det => None,
        }
    }
}

/// Which checkpoint tensors were used when loading into a model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model tensors absent from the checkpoint, left at their initialization.
    pub initialized_fresh: Vec<String>,
    /// Checkpoint tensors the model does not have.
    pub unknown: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskModel {
    pub cfg: ModelConfig,
    pub vocab: PerTask<Vec<String>>,
    /// Tasks with a head.
    pub tasks: PerTask<bool>,
    pub params: ParamStore,
}

impl MultiTaskModel {
    /// Seeded initialization. The text encoder uses its own seed, so every
    /// model sharing a language config sees the same frozen encoder.
    pub fn new(cfg: ModelConfig, vocab: PerTask<Vec<String>>, tasks: PerTask<bool>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !Task::ALL.iter().any(|&t| *tasks.get(t)) {
            return Err(Error::Config("a model needs at least one task head".into()));
        }
        for task in Task::ALL {
            if *tasks.get(task) && vocab.get(task).is_empty() {
                return Err(Error::Config(format!("{task} has an empty class vocabulary")));
            }
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        init_backbone(&mut store, &mut init, &cfg.backbone);
        init_fpn(&mut store, &mut init, cfg.backbone.channels(), cfg.channels, &cfg.adapter);
        for task in Task::ALL.into_iter().filter(|&t| *tasks.get(t)) {
            let k = vocab.get(task).len();
            match task {
                Task::Det => det::init_det_head(&mut store, &mut init, cfg.channels, k, &cfg.det),
                _ => seg::init_seg_head(&mut store, &mut init, head_prefix(task), cfg.channels, k, &cfg.seg),
            }
        }
        language::init_language(&mut store, &mut init, &cfg.language, cfg.channels, &tasks, &vocab);
        if cfg.language.mode != PromptMode::None {
            language::text_encoder::init_text_encoder(&mut store, &cfg.language.encoder);
        }
        Ok(Self { cfg, vocab, tasks, params: store })
    }

    pub fn num_classes(&self, task: Task) -> usize {
        self.vocab.get(task).len()
    }

    pub fn has_task(&self, task: Task) -> bool {
        *self.tasks.get(task)
    }

    /// Stacked class text rows for the language path, computed once per step.
    pub fn text_features(&self, b: &Bound) -> Result<Option<Var>> {
        language::class_text_features(b, &self.cfg.language, &self.tasks, &self.vocab)
    }

    /// Runs the shared trunk and the requested heads on an `(H, W, 3)` image.
    pub fn forward(&self, b: &Bound, image: Var, text: Option<Var>, heads: [bool; 3]) -> Result<ModelOutput> {
        let hierarchy = backbone_forward(b, &self.cfg.backbone, image)?;
        let mut pyramid = fpn_forward(b, &hierarchy, &self.cfg.adapter)?;
        if let Some(text) = text {
            pyramid.levels[3] = language::apply_language(b, &self.cfg.language, text, pyramid.p5())?;
        }
        let want = |t: Task| heads[t.index()] && self.has_task(t);
        let det = if want(Task::Det) { Some(det::det_head_forward(b, &pyramid, &self.cfg.det)?) } else { None };
        let seg_for = |t: Task| -> Result<Option<SegPrediction>> {
            if want(t) {
                Ok(Some(seg::seg_head_forward(b, head_prefix(t), &pyramid, &self.cfg.seg)?))
            } else {
                Ok(None)
            }
        };
        let sem = seg_for(Task::Sem)?;
        let driv = seg_for(Task::Driv)?;
        Ok(ModelOutput { hierarchy, pyramid, det, sem, driv })
    }

    /// Per-task losses of one sample for the tasks enabled in `mask`. Tasks
    /// outside the mask get no head evaluation and no loss.
    pub fn sample_losses(&self, b: &Bound, sample: &ImageSample, text: Option<Var>, mask: [bool; 3]) -> Result<PerTask<Option<Var>>> {
        let t = b.tape();
        let mut heads = [false; 3];
        for task in Task::ALL {
            if mask[task.index()] {
                if !sample.has(task) {
                    return Err(Error::Model(format!("sample {} has no {task} annotation", sample.id)));
                }
                heads[task.index()] = self.has_task(task);
            }
        }
        let mut losses = PerTask::new(None, None, None);
        if !heads.iter().any(|&h| h) {
            return Ok(losses);
        }
        let image = t.constant(sample.image.clone());
        let out = self.forward(b, image, text, heads)?;
        let (h, w) = (sample.height(), sample.width());
        if let (Some(pred), Some(gt)) = (&out.det, &sample.boxes) {
            losses.det = Some(det_loss(t, pred, &gt.value, h, w)?);
        }
        for task in [Task::Sem, Task::Driv] {
            if let (Some(pred), Some(mask)) = (out.seg(task), sample.seg_mask(task)) {
                let target = mask.downsample(STRIDES[0]);
                *losses.get_mut(task) = Some(seg::seg_loss(t, pred, &target, IGNORE_INDEX)?);
            }
        }
        Ok(losses)
    }

    /// Inference with every parameter frozen.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        self.predict_with(image, [true; 3])
    }

    pub fn predict_with(&self, image: &Tensor, heads: [bool; 3]) -> Result<Prediction> {
        let tape = Tape::new();
        let frozen = |_: &str| false;
        let b = Bound::new(&tape, &self.params, &frozen);
        let text = self.text_features(&b)?;
        let x = tape.constant(image.clone());
        let out = self.forward(&b, x, text, heads)?;
        let s = image.shape();
        let seg_out = |p: Option<&SegPrediction>| {
            p.map(|p| SegOutput {
                class_logits: tape.value(p.class_logits).clone(),
                mask_logits: tape.value(p.mask_logits).clone(),
                height: p.height,
                width: p.width,
            })
        };
        Ok(Prediction {
            det: out.det.as_ref().map(|p| DetOutput {
                boxes: tape.value(p.boxes).clone(),
                class_logits: tape.value(p.class_logits).clone(),
                image_height: s[0],
                image_width: s[1],
            }),
            sem: seg_out(out.sem.as_ref()),
            driv: seg_out(out.driv.as_ref()),
        })
    }

    /// Copies matching tensors from `ckpt`; everything else keeps its
    /// initialization. A shape mismatch on a shared name is an error.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        for name in ckpt.names() {
            let src = ckpt.get(name).expect("listed name");
            match self.params.get(name) {
                Some(dst) if dst.shape() != src.shape() => {
                    return Err(Error::Model(format!(
                        "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                        src.shape(),
                        dst.shape()
                    )));
                }
                Some(_) => report.loaded.push(name.to_string()),
                None => report.unknown.push(name.to_string()),
            }
        }
        for name in &report.loaded {
            self.params.insert(name.clone(), ckpt.get(name).expect("listed name").clone());
        }
        let loaded: BTreeSet<&str> = report.loaded.iter().map(String::as_str).collect();
        report.initialized_fresh = self.params.names().filter(|n| !loaded.contains(n)).map(String::from).collect();
        Ok(report)
    }

    pub fn to_checkpoint(&self, provenance: &str) -> Checkpoint {
        Checkpoint::from_params(&self.params, provenance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{full_tiny_data, tiny_model};

    fn all() -> PerTask<bool> {
        PerTask::new(true, true, true)
    }

    #[test]
    fn head_outputs_have_configured_shapes() {
        let m = tiny_model(PromptMode::None, all(), 0);
        let sample = &full_tiny_data(1).samples[0];
        let p = m.predict(&sample.image).unwrap();
        let sem = p.sem.as_ref().unwrap();
        assert_eq!(sem.class_logits.shape(), &[4, m.num_classes(Task::Sem) + 1]);
        assert_eq!(sem.mask_logits.shape(), &[4, 8 * 8]);
        assert_eq!(sem.mask().data.len(), 32 * 32);
        let det = p.det.as_ref().unwrap();
        assert_eq!(det.boxes.shape(), &[6, 4]);
        assert_eq!(det.class_logits.shape(), &[6, m.num_classes(Task::Det) + 1]);
        assert!((0..6).all(|r| det.boxes.row(r)[2] > 0.0 && det.boxes.row(r)[3] > 0.0));
        assert_eq!(det.detections().len(), 6);
    }

    #[test]
    fn masked_out_tasks_get_no_loss_and_no_gradient() {
        let m = tiny_model(PromptMode::None, all(), 1);
        let sample = &full_tiny_data(1).samples[0];
        let tape = Tape::new();
        let every = |_: &str| true;
        let b = Bound::new(&tape, &m.params, &every);
        let losses = m.sample_losses(&b, sample, None, [true, false, false]).unwrap();
        assert!(losses.det.is_some() && losses.sem.is_none() && losses.driv.is_none());
        let grads = b.grads(&tape.backward(losses.det.unwrap()));
        assert!(grads.keys().any(|n| is_head_param(Task::Det, n)));
        assert!(!grads.keys().any(|n| is_head_param(Task::Sem, n) || is_head_param(Task::Driv, n)));
    }

    #[test]
    fn requesting_a_missing_annotation_is_an_error() {
        let m = tiny_model(PromptMode::None, all(), 0);
        let mut sample = full_tiny_data(1).samples[0].clone();
        sample.drop_annotation(Task::Sem);
        let tape = Tape::new();
        let every = |_: &str| true;
        let b = Bound::new(&tape, &m.params, &every);
        assert!(m.sample_losses(&b, &sample, None, [false, true, false]).is_err());
    }

    #[test]
    fn backbone_only_checkpoint_reports_fresh_heads() {
        let src = tiny_model(PromptMode::None, all(), 7);
        let mut ckpt = Checkpoint::from_params(&src.params.filtered(is_backbone_param), "test");
        ckpt.insert("stray.tensor", crate::tensor::DType::F64, Tensor::zeros([2]));
        let mut dst = tiny_model(PromptMode::None, all(), 8);
        let report = dst.load_checkpoint(&ckpt).unwrap();
        let backbone: BTreeSet<&str> = src.params.names().filter(|n| is_backbone_param(n)).collect();
        let expected_fresh: Vec<&str> = dst.params.names().filter(|n| !backbone.contains(n)).collect();
        assert_eq!(report.initialized_fresh, expected_fresh);
        assert!(report.initialized_fresh.iter().any(|n| is_any_head_param(n)));
        assert_eq!(report.unknown, vec!["stray.tensor".to_string()]);
        for n in &backbone {
            assert!(dst.params.get(n).unwrap().bit_eq(src.params.get(n).unwrap()));
        }
    }

    #[test]
    fn shape_mismatch_on_load_is_an_error() {
        let mut m = tiny_model(PromptMode::None, all(), 0);
        let mut ckpt = Checkpoint::new("test");
        ckpt.insert("backbone.stem1.b", crate::tensor::DType::F64, Tensor::zeros([99]));
        assert!(matches!(m.load_checkpoint(&ckpt), Err(Error::Model(_))));
    }

    #[test]
    fn language_models_carry_a_text_encoder_and_others_do_not() {
        let plain = tiny_model(PromptMode::None, all(), 0);
        let learned = tiny_model(PromptMode::Learned, all(), 0);
        let enc = |m: &MultiTaskModel| m.params.names().any(crate::language::text_encoder::is_text_encoder_param);
        assert!(!enc(&plain) && enc(&learned));
        assert_eq!(plain.params.get("backbone.stem1.w"), learned.params.get("backbone.stem1.w"));
    }
}
