//! Sparse detection head with learnable proposal boxes.
//!
//! `R` proposal boxes (stored as logits of normalized `cx, cy, w, h`) and `R`
//! proposal features are learned directly. Each cascade stage pools a region
//! mean per box from every pyramid level, lets the proposal feature generate
//! a `C × D` filter that is applied to its pooled feature, updates the
//! proposal feature and emits class logits plus box deltas.

use serde::{Deserialize, Serialize};

use crate::autograd::{Region, Tape, Var};
use crate::error::{Error, Result};
use crate::model::PyramidFeatures;
use crate::nn;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "head.det";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetHeadConfig {
    pub proposals: usize,
    pub stages: usize,
    pub dynamic_dim: usize,
}

impl Default for DetHeadConfig {
    fn default() -> Self {
        Self { proposals: 50, stages: 2, dynamic_dim: 8 }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn init_det_head(store: &mut ParamStore, init: &mut Init, c: usize, num_classes: usize, cfg: &DetHeadConfig) {
    let r = cfg.proposals;
    let centers = init.uniform(&[r, 2], 0.15, 0.85);
    let sizes = init.uniform(&[r, 2], 0.1, 0.4);
    let boxes = Tensor::from_fn([r, 4], |i| {
        let (row, col) = (i / 4, i % 4);
        logit(if col < 2 { centers.data()[row * 2 + col] } else { sizes.data()[row * 2 + col - 2] })
    });
    store.insert(format!("{PREFIX}.proposal_boxes"), boxes);
    store.insert(format!("{PREFIX}.proposal_feats"), init.normal(&[r, c], 1.0));
    let d = cfg.dynamic_dim;
    for s in 0..cfg.stages {
        let p = format!("{PREFIX}.st{s}");
        nn::init_linear(store, init, &format!("{p}.dyn"), c, c * d);
        nn::init_linear(store, init, &format!("{p}.dyn_out"), d, c);
        nn::init_norm(store, &format!("{p}.norm1"), c);
        nn::init_ffn(store, init, &format!("{p}.ffn"), c, 2 * c);
        nn::init_norm(store, &format!("{p}.norm2"), c);
        nn::init_linear(store, init, &format!("{p}.cls"), c, num_classes + 1);
        store.insert(format!("{p}.reg.w"), init.normal(&[c, 4], 0.01));
        store.insert(format!("{p}.reg.b"), Tensor::zeros([4]));
    }
}

#[derive(Clone, Debug)]
pub struct DetPrediction {
    /// `(R, 4)` normalized `(cx, cy, w, h)` of the final stage.
    pub boxes: Var,
    /// `(R, K + 1)`, last column is no-object.
    pub class_logits: Var,
    /// Boxes after every stage; the initial proposals come first.
    pub stage_boxes: Vec<Var>,
}

/// Pixel rectangle covered by a normalized box on a `(fh, fw)` grid. Always
/// non-empty; non-finite boxes fall back to the whole map.
pub fn box_region(b: &[f64], fh: usize, fw: usize) -> Region {
    let axis = |c: f64, s: f64, n: usize| -> (usize, usize) {
        let (lo, hi) = ((c - s / 2.0) * n as f64, (c + s / 2.0) * n as f64);
        if !lo.is_finite() || !hi.is_finite() {
            return (0, n);
        }
        let a = (lo.floor().max(0.0) as usize).min(n - 1);
        let b = (hi.ceil().max(0.0) as usize).clamp(a + 1, n);
        (a, b)
    };
    let (y0, y1) = axis(b[1], b[3], fh);
    let (x0, x1) = axis(b[0], b[2], fw);
    (y0, y1, x0, x1)
}

/// Mean of per-level region averages, `(R, C)`.
pub fn pool_regions(t: &Tape, pyr: &PyramidFeatures, boxes: &Tensor) -> Var {
    let mut acc: Option<Var> = None;
    for &level in &pyr.levels {
        let s = t.shape(level);
        let regions: Vec<Region> = (0..boxes.rows()).map(|r| box_region(boxes.row(r), s[0], s[1])).collect();
        let pooled = t.region_mean(level, &regions);
        acc = Some(match acc {
            Some(a) => t.add(a, pooled),
            None => pooled,
        });
    }
    t.scale(acc.expect("four levels"), 1.0 / pyr.levels.len() as f64)
}

/// `cx += dx·w, cy += dy·h, w *= exp(dw), h *= exp(dh)`.
pub fn apply_deltas(t: &Tape, boxes: Var, deltas: Var) -> Var {
    let col = |v: Var, i: usize| t.slice_last(v, i, 1);
    let (cx, cy, w, h) = (col(boxes, 0), col(boxes, 1), col(boxes, 2), col(boxes, 3));
    let (dx, dy, dw, dh) = (col(deltas, 0), col(deltas, 1), col(deltas, 2), col(deltas, 3));
    t.concat_last(&[
        t.add(cx, t.mul(dx, w)),
        t.add(cy, t.mul(dy, h)),
        t.mul(w, t.exp(dw)),
        t.mul(h, t.exp(dh)),
    ])
}

pub fn det_head_forward(b: &Bound, pyr: &PyramidFeatures, cfg: &DetHeadConfig) -> Result<DetPrediction> {
    let t = b.tape();
    let c = t.shape(pyr.p2())[2];
    let mut boxes = t.sigmoid(b.p(&format!("{PREFIX}.proposal_boxes"))?);
    let mut feats = b.p(&format!("{PREFIX}.proposal_feats"))?;
    if t.shape(feats) != [cfg.proposals, c] {
        return Err(Error::Model(format!(
            "proposal features {:?} do not match {} proposals of width {c}",
            t.shape(feats),
            cfg.proposals
        )));
    }
    let mut stage_boxes = vec![boxes];
    let mut logits = None;
    for s in 0..cfg.stages {
        let p = format!("{PREFIX}.st{s}");
        let current = t.value(boxes).clone();
        let pooled = pool_regions(t, pyr, &current);
        let filters = nn::linear(b, &format!("{p}.dyn"), feats)?;
        let inter = t.relu(t.layer_norm(t.row_vec_mat(pooled, filters, cfg.dynamic_dim), nn::LN_EPS));
        let update = nn::linear(b, &format!("{p}.dyn_out"), inter)?;
        feats = nn::layer_norm(b, &format!("{p}.norm1"), t.add(feats, update))?;
        feats = nn::layer_norm(b, &format!("{p}.norm2"), t.add(feats, nn::ffn(b, &format!("{p}.ffn"), feats)?))?;
        logits = Some(nn::linear(b, &format!("{p}.cls"), feats)?);
        let deltas = nn::linear(b, &format!("{p}.reg"), feats)?;
        boxes = apply_deltas(t, boxes, deltas);
        stage_boxes.push(boxes);
    }
    let class_logits = logits.ok_or_else(|| Error::Model("detection head needs at least one stage".into()))?;
    Ok(DetPrediction { boxes, class_logits, stage_boxes })
}

/// A decoded detection in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class: usize,
    pub score: f64,
}

impl ScoredBox {
    pub fn iou(&self, other: &crate::data::BoxAnn) -> f64 {
        let a = crate::data::BoxAnn { x1: self.x1, y1: self.y1, x2: self.x2, y2: self.y2, class: self.class };
        a.iou(other)
    }
}

/// One detection per proposal: the best non-background class and its
/// probability, box clipped to the image.
pub fn decode_detections(boxes: &Tensor, class_logits: &Tensor, height: usize, width: usize) -> Vec<ScoredBox> {
    let probs = crate::autograd::softmax_rows(class_logits);
    let k = probs.cols() - 1;
    let (h, w) = (height as f64, width as f64);
    (0..boxes.rows())
        .map(|r| {
            let b = boxes.row(r);
            let (class, score) = probs.row(r)[..k]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best });
            let clip = |v: f64, hi: f64| if v.is_finite() { v.clamp(0.0, hi) } else { 0.0 };
            ScoredBox {
                x1: clip((b[0] - b[2] / 2.0) * w, w),
                y1: clip((b[1] - b[3] / 2.0) * h, h),
                x2: clip((b[0] + b[2] / 2.0) * w, w),
                y2: clip((b[1] + b[3] / 2.0) * h, h),
                class,
                score,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const C: usize = 6;

    fn pyramid(t: &Tape, f: impl Fn(usize, usize) -> f64) -> PyramidFeatures {
        let level = |n: usize, lvl: usize| t.constant(Tensor::from_fn([n, n, C], |i| f(lvl, i)));
        PyramidFeatures { levels: [level(8, 0), level(4, 1), level(2, 2), level(1, 3)] }
    }

    fn head(cfg: &DetHeadConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init_det_head(&mut s, &mut Init::new(&mut rng), C, 3, cfg);
        s
    }

    #[test]
    fn forward_emits_one_box_and_logit_row_per_proposal() {
        let cfg = DetHeadConfig { proposals: 5, stages: 3, dynamic_dim: 2 };
        let s = head(&cfg, 1);
        let tape = Tape::new();
        let frozen = |_: &str| false;
        let b = Bound::new(&tape, &s, &frozen);
        let pred = det_head_forward(&b, &pyramid(&tape, |l, i| ((l * 31 + i) as f64 * 0.13).sin()), &cfg).unwrap();
        assert_eq!(tape.shape(pred.boxes), vec![5, 4]);
        assert_eq!(tape.shape(pred.class_logits), vec![5, 4]);
        assert_eq!(pred.stage_boxes.len(), 4);
        let initial = tape.value(pred.stage_boxes[0]).clone();
        assert!(initial.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_regression_keeps_every_stage_on_the_proposals() {
        let cfg = DetHeadConfig { proposals: 4, stages: 2, dynamic_dim: 3 };
        let mut s = head(&cfg, 2);
        for st in 0..cfg.stages {
            s.get_mut(&format!("{PREFIX}.st{st}.reg.w")).unwrap().scale_assign(0.0);
        }
        let tape = Tape::new();
        let frozen = |_: &str| false;
        let b = Bound::new(&tape, &s, &frozen);
        let pred = det_head_forward(&b, &pyramid(&tape, |l, i| (l + i % 5) as f64), &cfg).unwrap();
        let first = tape.value(pred.stage_boxes[0]).clone();
        for &sb in &pred.stage_boxes[1..] {
            let v = tape.value(sb);
            assert!(v.data().iter().zip(first.data()).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn deltas_scale_with_box_size() {
        let tape = Tape::new();
        let boxes = tape.constant(Tensor::new([1, 4], vec![0.5, 0.4, 0.2, 0.1]));
        let deltas = tape.constant(Tensor::new([1, 4], vec![0.5, -1.0, 2f64.ln(), 0.0]));
        let out = apply_deltas(&tape, boxes, deltas);
        let v = tape.value(out);
        let want = [0.6, 0.3, 0.4, 0.1];
        assert!(v.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12), "{:?}", v.data());
    }

    #[test]
    fn pooling_a_constant_field_returns_the_constant() {
        let tape = Tape::new();
        let pyr = pyramid(&tape, |_, i| (i % C) as f64 - 2.0);
        let boxes = Tensor::new([3, 4], vec![0.5, 0.5, 1.0, 1.0, 0.1, 0.9, 0.05, 0.05, 0.7, 0.3, 0.3, 0.6]);
        let pooled = pool_regions(&tape, &pyr, &boxes);
        let v = tape.value(pooled);
        assert_eq!(v.shape(), &[3, C]);
        for r in 0..3 {
            assert!(v.row(r).iter().enumerate().all(|(c, &x)| (x - (c as f64 - 2.0)).abs() < 1e-12));
        }
    }

    #[test]
    fn box_regions_are_never_empty() {
        assert_eq!(box_region(&[0.5, 0.5, 1.0, 1.0], 8, 8), (0, 8, 0, 8));
        assert_eq!(box_region(&[0.25, 0.75, 0.5, 0.5], 4, 4), (2, 4, 0, 2));
        let (y0, y1, x0, x1) = box_region(&[1.5, -0.5, 0.0, 0.0], 4, 4);
        assert!(y1 > y0 && x1 > x0 && y1 <= 4 && x1 <= 4);
        assert_eq!(box_region(&[f64::NAN, 0.5, 0.1, 0.1], 4, 4).2, 0);
    }

    #[test]
    fn decoding_clips_to_the_image_and_skips_no_object() {
        let boxes = Tensor::new([1, 4], vec![0.9, 0.5, 0.4, 0.2]);
        let logits = Tensor::new([1, 3], vec![0.0, 1.0, 5.0]);
        let d = decode_detections(&boxes, &logits, 10, 20);
        assert_eq!(d[0].class, 1);
        assert!((d[0].x2 - 20.0).abs() < 1e-12 && (d[0].x1 - 14.0).abs() < 1e-12);
        assert!((d[0].y1 - 4.0).abs() < 1e-12 && (d[0].y2 - 6.0).abs() < 1e-12);
        let z = 1.0 + 1f64.exp() + 5f64.exp();
        assert!((d[0].score - 1f64.exp() / z).abs() < 1e-12);
    }
}
