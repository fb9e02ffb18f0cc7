//! Set-prediction detection loss and the weighted multi-task objective.

use serde::{Deserialize, Serialize};

use super::det::DetPrediction;
use super::matching::hungarian;
use crate::autograd::{softmax_rows, Tape, Var};
use crate::data::BoxAnn;
use crate::error::{Error, Result};
use crate::task::{PerTask, Task};
use crate::tensor::Tensor;

pub const L1_WEIGHT: f64 = 5.0;
pub const GIOU_WEIGHT: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_det: f64,
    pub alpha_sem: f64,
    pub alpha_driv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha_det: 1.0, alpha_sem: 0.7, alpha_driv: 0.7 }
    }
}

impl LossWeights {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Det => self.alpha_det,
            Task::Sem => self.alpha_sem,
            Task::Driv => self.alpha_driv,
        }
    }

    pub fn set(&mut self, task: Task, value: f64) {
        match task {
            Task::Det => self.alpha_det = value,
            Task::Sem => self.alpha_sem = value,
            Task::Driv => self.alpha_driv = value,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for task in Task::ALL {
            let a = self.get(task);
            if !a.is_finite() || a < 0.0 {
                return Err(Error::Config(format!("loss weight for {task} must be finite and non-negative, got {a}")));
            }
        }
        Ok(())
    }
}

/// `Σ α_t · l_t` over the tasks that have a loss. Absent tasks contribute
/// nothing; a non-finite task loss aborts training.
pub fn total_loss(t: &Tape, losses: &PerTask<Option<Var>>, w: &LossWeights) -> Result<Var> {
    let mut terms = Vec::new();
    for task in Task::ALL {
        if let Some(l) = *losses.get(task) {
            let v = t.item(l);
            if !v.is_finite() {
                return Err(Error::TrainingAbort(format!("{task} loss is {v}")));
            }
            terms.push(t.scale(l, w.get(task)));
        }
    }
    let mut acc = match terms.first() {
        Some(&first) => first,
        None => return Ok(t.constant(Tensor::scalar(0.0))),
    };
    for &term in &terms[1..] {
        acc = t.add(acc, term);
    }
    Ok(acc)
}

fn to_xyxy(b: &[f64]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

/// Generalized IoU of two `(cx, cy, w, h)` boxes.
pub fn giou(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (to_xyxy(a), to_xyxy(b));
    let area = |x: &[f64; 4]| (x[2] - x[0]).max(0.0) * (x[3] - x[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(&a) + area(&b) - inter;
    let enclose = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (enclose - union) / enclose
}

/// Differentiable gIoU of matched rows, `(M, 4)` predictions against a
/// constant `(M, 4)` target; returns `(M,)`.
pub fn giou_var(t: &Tape, pred: Var, target: Var) -> Var {
    let col = |v: Var, i: usize| t.slice_last(v, i, 1);
    let corners = |v: Var| {
        let (cx, cy, w, h) = (col(v, 0), col(v, 1), col(v, 2), col(v, 3));
        let (hw, hh) = (t.scale(w, 0.5), t.scale(h, 0.5));
        (t.sub(cx, hw), t.sub(cy, hh), t.add(cx, hw), t.add(cy, hh), t.mul(w, h))
    };
    let (px1, py1, px2, py2, pa) = corners(pred);
    let (gx1, gy1, gx2, gy2, ga) = corners(target);
    let iw = t.relu(t.sub(t.minimum(px2, gx2), t.maximum(px1, gx1)));
    let ih = t.relu(t.sub(t.minimum(py2, gy2), t.maximum(py1, gy1)));
    let inter = t.mul(iw, ih);
    let union = t.sub(t.add(pa, ga), inter);
    let ew = t.sub(t.maximum(px2, gx2), t.minimum(px1, gx1));
    let eh = t.sub(t.maximum(py2, gy2), t.minimum(py1, gy1));
    let enclose = t.mul(ew, eh);
    let out = t.sub(t.div(inter, union), t.div(t.sub(enclose, union), enclose));
    let m = t.shape(out)[0];
    t.reshape(out, &[m])
}

/// Ground-truth pixel boxes as normalized `(cx, cy, w, h)` rows.
pub fn normalized_targets(gt: &[BoxAnn], height: usize, width: usize) -> Vec<[f64; 4]> {
    let (h, w) = (height as f64, width as f64);
    gt.iter()
        .map(|b| [(b.x1 + b.x2) / 2.0 / w, (b.y1 + b.y2) / 2.0 / h, (b.x2 - b.x1) / w, (b.y2 - b.y1) / h])
        .collect()
}

/// Matching cost `(G, R)` between ground truth and proposals.
pub fn matching_cost(probs: &Tensor, boxes: &Tensor, gt: &[BoxAnn], targets: &[[f64; 4]]) -> Vec<Vec<f64>> {
    gt.iter()
        .zip(targets)
        .map(|(g, tb)| {
            (0..boxes.rows())
                .map(|r| {
                    let pb = boxes.row(r);
                    let l1: f64 = pb.iter().zip(tb).map(|(a, b)| (a - b).abs()).sum();
                    let p = probs.row(r)[g.class].max(1e-12);
                    -p.ln() + L1_WEIGHT * l1 + GIOU_WEIGHT * (1.0 - giou(pb, tb))
                })
                .collect()
        })
        .collect()
}

/// Optimal `(gt, proposal)` pairs for a prediction.
pub fn match_predictions(t: &Tape, pred: &DetPrediction, gt: &[BoxAnn], height: usize, width: usize) -> Vec<(usize, usize)> {
    if gt.is_empty() {
        return Vec::new();
    }
    let probs = softmax_rows(&t.value(pred.class_logits));
    let boxes = t.value(pred.boxes).clone();
    let targets = normalized_targets(gt, height, width);
    hungarian(&matching_cost(&probs, &boxes, gt, &targets))
}

#[derive(Clone, Copy, Debug)]
pub struct DetLossTerms {
    pub class: Var,
    /// Absent without ground truth.
    pub l1: Option<Var>,
    pub giou: Option<Var>,
    pub total: Var,
}

/// Classification loss averaged over all proposals (unmatched ones target
/// no-object) plus L1 and gIoU box losses summed over matched pairs and
/// divided by the number of ground-truth boxes.
pub fn det_loss_terms(t: &Tape, pred: &DetPrediction, gt: &[BoxAnn], height: usize, width: usize) -> Result<DetLossTerms> {
    let (r, k1) = {
        let v = t.value(pred.class_logits);
        (v.rows(), v.cols())
    };
    if let Some(b) = gt.iter().find(|b| b.class + 1 >= k1) {
        return Err(Error::Model(format!("box class {} out of range for {} classes", b.class, k1 - 1)));
    }
    let pairs = match_predictions(t, pred, gt, height, width);
    let mut targets = vec![k1 - 1; r];
    for &(g, p) in &pairs {
        targets[p] = gt[g].class;
    }
    let class = t.scale(t.sum(t.pick(t.log_softmax(pred.class_logits), &targets)), -1.0 / r as f64);
    if pairs.is_empty() {
        return Ok(DetLossTerms { class, l1: None, giou: None, total: class });
    }
    let norm = 1.0 / gt.len() as f64;
    let rows: Vec<usize> = pairs.iter().map(|&(_, p)| p).collect();
    let boxes = normalized_targets(gt, height, width);
    let target_data: Vec<f64> = pairs.iter().flat_map(|&(g, _)| boxes[g]).collect();
    let target = t.constant(Tensor::new([pairs.len(), 4], target_data));
    let matched = t.gather_rows(pred.boxes, &rows);
    let l1 = t.scale(t.sum(t.abs(t.sub(matched, target))), norm);
    let g = giou_var(t, matched, target);
    let giou_loss = t.scale(t.sum(t.add_scalar(t.scale(g, -1.0), 1.0)), norm);
    let total = t.add(class, t.add(t.scale(l1, L1_WEIGHT), t.scale(giou_loss, GIOU_WEIGHT)));
    Ok(DetLossTerms { class, l1: Some(l1), giou: Some(giou_loss), total })
}

pub fn det_loss(t: &Tape, pred: &DetPrediction, gt: &[BoxAnn], height: usize, width: usize) -> Result<Var> {
    Ok(det_loss_terms(t, pred, gt, height, width)?.total)
}
