//! Task heads and their losses.

pub mod det;
pub mod loss;
pub mod matching;
pub mod seg;

pub use det::{det_head_forward, init_det_head, DetHeadConfig, DetPrediction};
pub use loss::{det_loss, giou, total_loss, LossWeights};
pub use matching::hungarian;
pub use seg::{seg_head_forward, seg_loss, seg_posterior, init_seg_head, SegHeadConfig, SegPrediction};
