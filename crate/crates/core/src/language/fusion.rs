//! Naive prompt fusion: cosine activation maps concatenated to the visual
//! tokens and squeezed back by a 1×1 convolution.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, Init, ParamStore};

pub const NAME: &str = "lv.fusion";

pub fn init_fusion(store: &mut ParamStore, init: &mut Init, c: usize, num_texts: usize) {
    nn::init_linear(store, init, NAME, c + num_texts, c);
}

pub struct FusionOutput {
    /// `(H5·W5, N)` cosine similarities.
    pub activation: Var,
    /// `(H5·W5, C)`.
    pub fused: Var,
}

/// `text` is `(N, C)` in the visual space; `z5` is `(H5·W5, C)`.
pub fn naive_prompt_fusion(b: &Bound, text: Var, z5: Var) -> Result<FusionOutput> {
    let t = b.tape();
    if t.value(text).cols() != t.value(z5).cols() {
        return Err(Error::Model("fusion text rows must have the visual width".into()));
    }
    let zn = t.l2_normalize_rows(z5);
    let tn = t.l2_normalize_rows(text);
    let activation = t.matmul(zn, t.transpose(tn));
    // A 1×1 convolution over tokens is a linear map of the channels.
    let fused = nn::linear(b, NAME, t.concat_last(&[z5, activation]))?;
    Ok(FusionOutput { activation, fused })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    fn fuse(text: Tensor, z5: Tensor) -> (Tensor, Tensor) {
        let c = z5.cols();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        init_fusion(&mut s, &mut Init::new(&mut rng), c, text.rows());
        let tape = Tape::new();
        let frozen = |_: &str| false;
        let b = Bound::new(&tape, &s, &frozen);
        let out = naive_prompt_fusion(&b, tape.constant(text), tape.constant(z5)).unwrap();
        let res = (tape.value(out.activation).clone(), tape.value(out.fused).clone());
        res
    }

    #[test]
    fn activation_is_the_per_token_cosine() {
        let text = Tensor::from_fn([3, 4], |i| ((i * 7 % 5) as f64 - 2.0) * 0.8 + 0.1);
        let z5 = Tensor::from_fn([6, 4], |i| (i as f64 * 1.3).sin());
        let (a, fused) = fuse(text.clone(), z5.clone());
        assert_eq!(a.shape(), &[6, 3]);
        assert_eq!(fused.shape(), &[6, 4]);
        for p in 0..6 {
            for n in 0..3 {
                let (u, v) = (z5.row(p), text.row(n));
                let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                let norm = |x: &[f64]| x.iter().map(|e| e * e).sum::<f64>().sqrt();
                let cos = dot / (norm(u) * norm(v));
                assert!((a.row(p)[n] - cos).abs() < 1e-9);
                assert!(a.row(p)[n].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_text_row_gives_a_zero_column() {
        let text = Tensor::new([2, 3], vec![0.0, 0.0, 2.0, 1.0, 1.0, 0.0]);
        let z5 = Tensor::new([2, 3], vec![1.0, -0.5, 0.0, 0.3, 2.0, 0.0]);
        let (a, _) = fuse(text, z5);
        assert!(a.row(0)[0].abs() < 1e-12 && a.row(1)[0].abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_fusion(&mut s, &mut Init::new(&mut rng), 4, 1);
        let tape = Tape::new();
        let frozen = |_: &str| false;
        let b = Bound::new(&tape, &s, &frozen);
        assert!(naive_prompt_fusion(&b, tape.constant(Tensor::zeros([1, 3])), tape.constant(Tensor::zeros([2, 4]))).is_err());
    }
}
