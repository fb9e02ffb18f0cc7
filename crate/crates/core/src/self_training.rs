//! Single-task teachers and pseudo labels that complete partial annotations.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Annotated, BoxAnn, ImageSample, Mask, PartialDataset, Provenance, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::heads::det::ScoredBox;
use crate::heads::seg::argmax_scores;
use crate::heads::LossWeights;
use crate::language::PromptMode;
use crate::model::{ModelConfig, MultiTaskModel, STRIDES};
use crate::task::{PerTask, Task};
use crate::tensor::Tensor;
use crate::train::{run_stage, ScheduleKind, StageConfig, StageKind, StageRun};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelConfig {
    pub box_score_threshold: f64,
    pub mask_score_threshold: f64,
    pub ignore_index: u8,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self { box_score_threshold: 0.5, mask_score_threshold: 0.3, ignore_index: IGNORE_INDEX }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.box_score_threshold) || !open(self.mask_score_threshold) {
            return Err(Error::Config("pseudo-label thresholds must lie strictly between 0 and 1".into()));
        }
        Ok(())
    }
}

/// A model with exactly one head.
#[derive(Clone, Debug)]
pub struct TeacherModel {
    pub task: Task,
    pub model: MultiTaskModel,
}

impl TeacherModel {
    pub fn from_model(task: Task, model: MultiTaskModel) -> Result<Self> {
        let heads: Vec<Task> = Task::ALL.into_iter().filter(|&t| model.has_task(t)).collect();
        if heads != [task] {
            return Err(Error::Model(format!("a {task} teacher must have exactly the {task} head, found {heads:?}")));
        }
        Ok(Self { task, model })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint(&format!("teacher:{}", self.task));
        ckpt.meta.insert("task".into(), self.task.name().into());
        ckpt
    }

    pub fn digest(&self) -> String {
        self.checkpoint().digest()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    /// Language guidance is always disabled for teachers.
    pub model: ModelConfig,
    pub stage: StageConfig,
    pub seed: u64,
}

/// Trains a single-task model on images labeled for `task`, starting from
/// `init` (typically a pretrained backbone) when given.
pub fn train_teacher(
    task: Task,
    subset: &PartialDataset,
    vocab: &PerTask<Vec<String>>,
    cfg: &TeacherConfig,
    init: Option<&Checkpoint>,
) -> Result<(TeacherModel, StageRun)> {
    if subset.is_empty() {
        return Err(Error::Config(format!("no labeled images to train the {task} teacher")));
    }
    if let Some(s) = subset.samples.iter().find(|s| !s.has(task)) {
        return Err(Error::Config(format!("image {} in the {task} teacher subset lacks {task} labels", s.id)));
    }
    let data = subset.single_task_subset(task);
    let mut mcfg = cfg.model.clone();
    mcfg.language.mode = PromptMode::None;
    let tasks = PerTask::from_fn(|t| t == task);
    let mut model = MultiTaskModel::new(mcfg, vocab.clone(), tasks, cfg.seed)?;
    if let Some(ckpt) = init {
        model.load_checkpoint(ckpt)?;
    }
    let stage = StageConfig { stage: StageKind::Finetune, ..cfg.stage.clone() };
    let run = run_stage(&mut model, &data, &stage, ScheduleKind::ZeroingLoss, &LossWeights::default(), cfg.seed)?;
    Ok((TeacherModel { task, model }, run))
}

/// Every proposal of a detection teacher, scored and clipped.
pub fn raw_boxes(teacher: &TeacherModel, image: &Tensor) -> Result<Vec<ScoredBox>> {
    if teacher.task != Task::Det {
        return Err(Error::Model(format!("pseudo boxes need a det teacher, got {}", teacher.task)));
    }
    let pred = teacher.model.predict(image)?;
    Ok(pred.det.expect("det teacher").detections())
}

/// Keeps detections scoring at least `threshold`. Boxes that clipping left
/// thinner than one pixel are widened to one pixel inside the image.
pub fn filter_boxes(raw: &[ScoredBox], threshold: f64, height: usize, width: usize) -> Vec<BoxAnn> {
    let widen = |a: f64, b: f64, limit: f64| -> (f64, f64) {
        if b - a >= 1.0 {
            (a, b)
        } else if a + 1.0 <= limit {
            (a, a + 1.0)
        } else {
            (limit - 1.0, limit)
        }
    };
    raw.iter()
        .filter(|d| d.score >= threshold)
        .map(|d| {
            let (x1, x2) = widen(d.x1, d.x2, width as f64);
            let (y1, y2) = widen(d.y1, d.y2, height as f64);
            BoxAnn { x1, y1, x2, y2, class: d.class }
        })
        .collect()
}

pub fn pseudo_boxes(teacher: &TeacherModel, image: &Tensor, cfg: &PseudoLabelConfig) -> Result<Vec<BoxAnn>> {
    let raw = raw_boxes(teacher, image)?;
    Ok(filter_boxes(&raw, cfg.box_score_threshold, image.shape()[0], image.shape()[1]))
}

/// Winning class per stride-4 pixel, ignored below the score threshold, then
/// upsampled to full resolution.
pub fn mask_from_posterior(posterior: &Tensor, height: usize, width: usize, cfg: &PseudoLabelConfig) -> Mask {
    let data = argmax_scores(posterior)
        .into_iter()
        .map(|(c, s)| if s < cfg.mask_score_threshold { cfg.ignore_index } else { c as u8 })
        .collect();
    Mask { height, width, data }.upsample(STRIDES[0])
}

/// Stride-4 segmentation posterior of a teacher, `(H/4 · W/4, K)`.
pub fn raw_posterior(teacher: &TeacherModel, image: &Tensor) -> Result<(Tensor, usize, usize)> {
    if !teacher.task.is_segmentation() {
        return Err(Error::Model(format!("pseudo masks need a segmentation teacher, got {}", teacher.task)));
    }
    let pred = teacher.model.predict(image)?;
    let seg = pred.seg(teacher.task).expect("segmentation teacher");
    Ok((seg.posterior(), seg.height, seg.width))
}

pub fn pseudo_mask(teacher: &TeacherModel, image: &Tensor, cfg: &PseudoLabelConfig) -> Result<Mask> {
    let (post, h, w) = raw_posterior(teacher, image)?;
    Ok(mask_from_posterior(&post, h, w, cfg))
}

/// Fills every missing annotation with a teacher's pseudo label; ground
/// truth is never touched.
pub fn merge_labels(data: &PartialDataset, teachers: &PerTask<Option<TeacherModel>>, cfg: &PseudoLabelConfig) -> Result<PartialDataset> {
    let mut digests: PerTask<Option<String>> = PerTask::new(None, None, None);
    for task in Task::ALL {
        if let Some(t) = teachers.get(task) {
            if t.task != task {
                return Err(Error::Config(format!("teacher in the {task} slot was trained for {}", t.task)));
            }
            *digests.get_mut(task) = Some(t.digest());
        }
    }
    let samples = data
        .samples
        .iter()
        .map(|s| -> Result<ImageSample> {
            let mut s = s.clone();
            let missing: Vec<Task> = Task::ALL.into_iter().filter(|&t| !s.has(t)).collect();
            for task in missing {
                let teacher = teachers
                    .get(task)
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("image {} lacks {task} labels and no {task} teacher was given", s.id)))?;
                let provenance = Provenance::Pseudo { teacher_digest: digests.get(task).clone().expect("set above") };
                match task {
                    Task::Det => s.boxes = Some(Annotated { value: pseudo_boxes(teacher, &s.image, cfg)?, provenance }),
                    Task::Sem => s.semantic_mask = Some(Annotated { value: pseudo_mask(teacher, &s.image, cfg)?, provenance }),
                    Task::Driv => s.drivable_mask = Some(Annotated { value: pseudo_mask(teacher, &s.image, cfg)?, provenance }),
                }
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PartialDataset::new(samples))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::PartialDataset;
    use crate::model::is_head_param;
    use crate::test_support::{disjoint_tiny_data, full_tiny_data, tiny_config, tiny_scene, vocab};
    use crate::train::batch_gradients;

    fn teacher_cfg(epochs: usize, seed: u64) -> TeacherConfig {
        TeacherConfig {
            model: tiny_config(PromptMode::Learned),
            stage: StageConfig { epochs, learning_rate: 2e-3, warmup_iters: 1, ..StageConfig::finetune() },
            seed,
        }
    }

    fn labeled(data: &PartialDataset, task: Task) -> PartialDataset {
        PartialDataset::new(data.samples.iter().filter(|s| s.has(task)).cloned().collect())
    }

    fn teachers(data: &PartialDataset) -> PerTask<Option<TeacherModel>> {
        PerTask::from_fn(|task| Some(train_teacher(task, &labeled(data, task), &vocab(&tiny_scene()), &teacher_cfg(1, 3), None).unwrap().0))
    }

    fn scored(x1: f64, class: usize, score: f64) -> ScoredBox {
        ScoredBox { x1, y1: 2.0, x2: x1 + 5.0, y2: 9.0, class, score }
    }

    #[test]
    fn thresholds_must_be_open_unit_values() {
        assert!(PseudoLabelConfig::default().validate().is_ok());
        for (b, m) in [(0.0, 0.3), (0.5, 1.0), (f64::NAN, 0.3)] {
            assert!(PseudoLabelConfig { box_score_threshold: b, mask_score_threshold: m, ..PseudoLabelConfig::default() }.validate().is_err());
        }
    }

    #[test]
    fn teacher_keeps_exactly_its_own_head() {
        let data = full_tiny_data(2);
        let (t, run) = train_teacher(Task::Sem, &data, &vocab(&tiny_scene()), &teacher_cfg(1, 0), None).unwrap();
        assert_eq!(run.steps, 1);
        let ckpt = t.checkpoint();
        assert!(ckpt.names().any(|n| is_head_param(Task::Sem, n)));
        assert!(!ckpt.names().any(|n| is_head_param(Task::Det, n) || is_head_param(Task::Driv, n)));
        assert!(!ckpt.names().any(|n| n.starts_with("text_encoder.") || n.starts_with("lv.")));
        assert!(TeacherModel::from_model(Task::Det, t.model.clone()).is_err());
    }

    #[test]
    fn teacher_training_is_reproducible() {
        let data = labeled(&disjoint_tiny_data(6), Task::Det);
        let a = train_teacher(Task::Det, &data, &vocab(&tiny_scene()), &teacher_cfg(1, 5), None).unwrap().0;
        let b = train_teacher(Task::Det, &data, &vocab(&tiny_scene()), &teacher_cfg(1, 5), None).unwrap().0;
        assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
    }

    #[test]
    fn near_zero_threshold_emits_every_proposal() {
        let data = labeled(&disjoint_tiny_data(3), Task::Det);
        let t = train_teacher(Task::Det, &data, &vocab(&tiny_scene()), &teacher_cfg(1, 5), None).unwrap().0;
        let image = &data.samples[0].image;
        let cfg = PseudoLabelConfig { box_score_threshold: 1e-12, ..PseudoLabelConfig::default() };
        assert_eq!(pseudo_boxes(&t, image, &cfg).unwrap().len(), 6);
        let raw = raw_boxes(&t, image).unwrap();
        let cfg = PseudoLabelConfig::default();
        let kept = pseudo_boxes(&t, image, &cfg).unwrap();
        assert_eq!(kept.len(), raw.iter().filter(|d| d.score >= cfg.box_score_threshold).count());
    }

    #[test]
    fn teacher_loss_decreases_on_its_data() {
        let data = labeled(&full_tiny_data(3), Task::Driv);
        let items: Vec<(usize, [bool; 3])> = (0..data.len()).map(|i| (i, [false, false, true])).collect();
        let loss = |m: &MultiTaskModel| {
            let every = |_: &str| true;
            batch_gradients(m, &data, &items, &LossWeights::default(), &every).unwrap().total
        };
        let cfg = teacher_cfg(8, 1);
        let mut mcfg = cfg.model.clone();
        mcfg.language.mode = PromptMode::None;
        let fresh = MultiTaskModel::new(mcfg, vocab(&tiny_scene()), PerTask::new(false, false, true), cfg.seed).unwrap();
        let (t, _) = train_teacher(Task::Driv, &data, &vocab(&tiny_scene()), &cfg, None).unwrap();
        assert!(loss(&t.model) < loss(&fresh), "{} !< {}", loss(&t.model), loss(&fresh));
    }

    #[test]
    fn teacher_inputs_are_checked() {
        let v = vocab(&tiny_scene());
        assert!(train_teacher(Task::Sem, &PartialDataset::new(vec![]), &v, &teacher_cfg(1, 0), None).is_err());
        assert!(train_teacher(Task::Sem, &disjoint_tiny_data(3), &v, &teacher_cfg(1, 0), None).is_err());
    }

    #[test]
    fn zero_threshold_keeps_every_proposal() {
        let raw = vec![scored(1.0, 0, 0.01), scored(3.0, 2, 0.7), scored(30.0, 1, 0.2)];
        assert_eq!(filter_boxes(&raw, 0.0, 32, 32).len(), 3);
        assert!(filter_boxes(&raw, 0.9, 32, 32).is_empty());
        let kept = filter_boxes(&raw, 0.5, 32, 32);
        assert_eq!(kept, vec![BoxAnn { x1: 3.0, y1: 2.0, x2: 8.0, y2: 9.0, class: 2 }]);
    }

    #[test]
    fn degenerate_boxes_are_widened_inside_the_image() {
        let raw = [ScoredBox { x1: 32.0, y1: 0.0, x2: 32.0, y2: 0.0, class: 0, score: 0.9 }];
        let b = filter_boxes(&raw, 0.5, 32, 32)[0];
        assert_eq!((b.x1, b.x2, b.y1, b.y2), (31.0, 32.0, 0.0, 1.0));
    }

    #[test]
    fn confident_posterior_ignores_nothing_and_uniform_ignores_everything() {
        let cfg = PseudoLabelConfig::default();
        let confident = Tensor::from_fn([4, 3], |i| if i % 3 == (i / 3) % 3 { 0.9 } else { 0.05 });
        let m = mask_from_posterior(&confident, 2, 2, &cfg);
        assert_eq!((m.height, m.width), (8, 8));
        assert!(m.data.iter().all(|&v| v != cfg.ignore_index));
        assert_eq!(m.get(0, 4), 1);
        let uniform = Tensor::full([4, 8], 0.125);
        assert!(mask_from_posterior(&uniform, 2, 2, &cfg).data.iter().all(|&v| v == cfg.ignore_index));
    }

    #[test]
    fn merging_fills_gaps_and_preserves_ground_truth() {
        let data = disjoint_tiny_data(6);
        let teachers = teachers(&data);
        let cfg = PseudoLabelConfig::default();
        let merged = merge_labels(&data, &teachers, &cfg).unwrap();
        assert_eq!(merged.len(), data.len());
        assert_eq!(merged.pseudo_count(), 2 * data.len());
        for (before, after) in data.samples.iter().zip(&merged.samples) {
            assert_eq!(after.availability(), [true; 3]);
            for task in Task::ALL {
                if before.has(task) {
                    assert_eq!(after.provenance(task), Some(&Provenance::GroundTruth));
                } else {
                    let digest = teachers.get(task).as_ref().unwrap().digest();
                    assert_eq!(after.provenance(task), Some(&Provenance::Pseudo { teacher_digest: digest }));
                }
            }
            assert_eq!(before.boxes.is_some(), after.boxes == before.boxes);
            assert_eq!(before.semantic_mask.is_some(), after.semantic_mask == before.semantic_mask);
        }
        for s in &merged.samples {
            for b in &s.boxes.as_ref().unwrap().value {
                assert!(b.x2 > b.x1 && b.y2 > b.y1 && b.x1 >= 0.0 && b.x2 <= s.width() as f64);
            }
            assert_eq!(s.semantic_mask.as_ref().unwrap().value.data.len(), s.height() * s.width());
        }
        assert_eq!(merge_labels(&merged, &teachers, &cfg).unwrap(), merged);
    }

    #[test]
    fn fully_labeled_data_passes_through_without_teachers() {
        let data = full_tiny_data(2);
        let none = PerTask::new(None, None, None);
        assert_eq!(merge_labels(&data, &none, &PseudoLabelConfig::default()).unwrap(), data);
        assert!(merge_labels(&disjoint_tiny_data(2), &none, &PseudoLabelConfig::default()).is_err());
    }

    #[test]
    fn teacher_in_the_wrong_slot_is_rejected() {
        let data = full_tiny_data(2);
        let sem = train_teacher(Task::Sem, &data, &vocab(&tiny_scene()), &teacher_cfg(1, 0), None).unwrap().0;
        let slots = PerTask::new(None, None, Some(sem.clone()));
        assert!(merge_labels(&data, &slots, &PseudoLabelConfig::default()).is_err());
        assert!(pseudo_boxes(&sem, &data.samples[0].image, &PseudoLabelConfig::default()).is_err());
    }

    #[test]
    fn pseudo_masks_match_a_per_pixel_threshold() {
        let data = full_tiny_data(1);
        let t = train_teacher(Task::Sem, &data, &vocab(&tiny_scene()), &teacher_cfg(1, 2), None).unwrap().0;
        for thr in [0.05, 0.3, 0.6] {
            let cfg = PseudoLabelConfig { mask_score_threshold: thr, ..PseudoLabelConfig::default() };
            let image = &data.samples[0].image;
            let (post, h, w) = raw_posterior(&t, image).unwrap();
            let mask = pseudo_mask(&t, image, &cfg).unwrap();
            for y in 0..h * 4 {
                for x in 0..w * 4 {
                    let row = post.row((y / 4) * w + x / 4);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(mask.get(y, x) == cfg.ignore_index, max < thr);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn box_filter_matches_brute_force(
            scores in proptest::collection::vec(0.0f64..1.0, 0..12),
            thr in 0.01f64..0.99,
        ) {
            let raw: Vec<ScoredBox> = scores.iter().enumerate().map(|(i, &s)| scored(i as f64, i % 3, s)).collect();
            let kept = filter_boxes(&raw, thr, 32, 32);
            let mut want = Vec::new();
            for d in &raw {
                if d.score >= thr {
                    want.push((d.x1, d.class));
                }
            }
            prop_assert_eq!(kept.iter().map(|b| (b.x1, b.class)).collect::<Vec<_>>(), want);
        }

        #[test]
        fn ignored_pixels_are_exactly_the_low_scoring_ones(
            values in proptest::collection::vec(0.01f64..1.0, 12),
        ) {
            let post = Tensor::new([4, 3], values);
            let cfg = PseudoLabelConfig::default();
            let m = mask_from_posterior(&post, 2, 2, &cfg);
            for p in 0..4 {
                let row = post.row(p);
                let (best, max) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (c, &v)| if v > a.1 { (c, v) } else { a });
                let v = m.get((p / 2) * 4, (p % 2) * 4);
                if max < cfg.mask_score_threshold {
                    prop_assert_eq!(v, cfg.ignore_index);
                } else {
                    prop_assert_eq!(v as usize, best);
                }
            }
        }
    }
}
