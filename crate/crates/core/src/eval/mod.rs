//! Segmentation and detection metrics.

pub mod det;
pub mod seg;

use serde::{Deserialize, Serialize};

pub use det::{average_precision, detection_metrics, DetMetrics};
pub use seg::{ConfusionMatrix, SegMetrics};

use crate::data::{Provenance, PartialDataset, IGNORE_INDEX};
use crate::error::Result;
use crate::model::MultiTaskModel;
use crate::task::Task;

/// Metrics of every head the model has, over ground-truth annotations only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub images: usize,
    pub det: Option<DetMetrics>,
    pub sem: Option<SegMetrics>,
    pub driv: Option<SegMetrics>,
}

impl EvalMetrics {
    pub fn seg(&self, task: Task) -> Option<&SegMetrics> {
        match task {
            Task::Sem => self.sem.as_ref(),
            Task::Driv => self.driv.as_ref(),
            Task::Det => None,
        }
    }
}

pub fn evaluate(model: &MultiTaskModel, data: &PartialDataset) -> Result<EvalMetrics> {
    let is_gt = |p: Option<&Provenance>| matches!(p, Some(Provenance::GroundTruth));
    let mut cms = [Task::Sem, Task::Driv].map(|t| ConfusionMatrix::new(model.num_classes(t)));
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for s in &data.samples {
        let heads = Task::ALL.map(|t| model.has_task(t) && is_gt(s.provenance(t)));
        if !heads.iter().any(|&h| h) {
            continue;
        }
        let p = model.predict_with(&s.image, heads)?;
        for (i, task) in [Task::Sem, Task::Driv].into_iter().enumerate() {
            if let (Some(out), Some(gt)) = (p.seg(task), s.seg_mask(task).filter(|_| heads[task.index()])) {
                cms[i].accumulate(&out.mask(), gt, IGNORE_INDEX)?;
            }
        }
        if let (Some(out), Some(b)) = (&p.det, s.boxes.as_ref().filter(|_| heads[0])) {
            preds.push(out.detections());
            gts.push(b.value.clone());
        }
    }
    let [sem_cm, driv_cm] = cms;
    Ok(EvalMetrics {
        images: data.len(),
        det: (model.has_task(Task::Det) && !gts.is_empty())
            .then(|| detection_metrics(&preds, &gts, model.num_classes(Task::Det))),
        sem: model.has_task(Task::Sem).then(|| sem_cm.metrics()),
        driv: model.has_task(Task::Driv).then(|| driv_cm.metrics()),
    })
}
