//! Language-to-vision adapter: visual tokens query class text features.
//!
//! Text rows are mapped to the visual width by one linear layer. Each
//! decoder layer applies pre-norm cross-attention (visual queries, text keys
//! and values) and a pre-norm feed-forward block, both residual.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{self, AttentionParts};
use crate::params::{Bound, Init, ParamStore};

pub const PREFIX: &str = "lv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L2vConfig {
    pub layers: usize,
    pub heads: usize,
}

impl Default for L2vConfig {
    fn default() -> Self {
        Self { layers: 3, heads: 4 }
    }
}

pub fn is_language_adapter_param(name: &str) -> bool {
    name.starts_with("lv.")
}

pub fn init_text_projection(store: &mut ParamStore, init: &mut Init, d_text: usize, c: usize) {
    nn::init_linear(store, init, &format!("{PREFIX}.text_proj"), d_text, c);
}

pub fn init_l2v(store: &mut ParamStore, init: &mut Init, c: usize, cfg: &L2vConfig) {
    for l in 0..cfg.layers {
        let p = format!("{PREFIX}.dec{l}");
        nn::init_norm(store, &format!("{p}.ln_q"), c);
        nn::init_mha(store, init, &format!("{p}.cross"), c, c, c);
        nn::init_norm(store, &format!("{p}.ln_ffn"), c);
        nn::init_ffn(store, init, &format!("{p}.ffn"), c, 4 * c);
    }
}

/// `(N, D_text)` text rows → `(N, C)`.
pub fn project_text(b: &Bound, text: Var) -> Result<Var> {
    nn::linear(b, &format!("{PREFIX}.text_proj"), text)
}

pub struct L2vOutput {
    /// Language-aware context, same shape as the input tokens.
    pub z: Var,
    /// Projected text rows used as keys and values.
    pub text: Var,
    /// Cross-attention internals per layer, before the residual add.
    pub attention: Vec<AttentionParts>,
}

/// Runs the decoder with `z5` `(H5·W5, C)` as queries over `text` `(N, D_text)`.
pub fn l2v_adapt(b: &Bound, text: Var, z5: Var, cfg: &L2vConfig) -> Result<L2vOutput> {
    let t = b.tape();
    let proj = project_text(b, text)?;
    if t.value(proj).cols() != t.value(z5).cols() {
        return Err(Error::Model(format!(
            "projected text width {} differs from visual width {}",
            t.value(proj).cols(),
            t.value(z5).cols()
        )));
    }
    let mut z = z5;
    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("{PREFIX}.dec{l}");
        let q = nn::layer_norm(b, &format!("{p}.ln_q"), z)?;
        let parts = nn::mha_parts(b, &format!("{p}.cross"), q, proj, cfg.heads, None)?;
        z = t.add(z, parts.out);
        attention.push(parts);
        let n = nn::layer_norm(b, &format!("{p}.ln_ffn"), z)?;
        z = t.add(z, nn::ffn(b, &format!("{p}.ffn"), n)?);
    }
    Ok(L2vOutput { z, text: proj, attention })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;
    use crate::test_support::dense;

    const C: usize = 8;
    const D: usize = 6;

    fn store(cfg: &L2vConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let mut s = ParamStore::new();
        init_text_projection(&mut s, &mut init, D, C);
        init_l2v(&mut s, &mut init, C, cfg);
        s.insert("in.text", init.normal(&[3, D], 1.0));
        s.insert("in.z5", init.normal(&[5, C], 1.0));
        s
    }

    fn run(s: &ParamStore, cfg: &L2vConfig, n_text: usize) -> (Tensor, Tensor, Vec<Tensor>) {
        let tape = Tape::new();
        let frozen = |_: &str| false;
        let b = Bound::new(&tape, s, &frozen);
        let text = tape.slice_rows(b.p("in.text").unwrap(), 0, n_text);
        let out = l2v_adapt(&b, text, b.p("in.z5").unwrap(), cfg).unwrap();
        let mixed = out.attention.iter().map(|a| tape.value(a.mixed).clone()).collect();
        let res = (tape.value(out.z).clone(), tape.value(out.text).clone(), mixed);
        res
    }

    #[test]
    fn output_keeps_the_visual_token_shape() {
        let cfg = L2vConfig::default();
        let s = store(&cfg, 0);
        for n in 1..=3 {
            let (z, text, attn) = run(&s, &cfg, n);
            assert_eq!(z.shape(), &[5, C]);
            assert_eq!(text.shape(), &[n, C]);
            assert_eq!(attn.len(), 3);
        }
    }

    #[test]
    fn a_single_text_row_is_attended_fully() {
        let cfg = L2vConfig { layers: 2, heads: 4 };
        let s = store(&cfg, 1);
        let (_, text, mixed) = run(&s, &cfg, 1);
        for (l, m) in mixed.iter().enumerate() {
            let value = dense::linear(&s, &format!("lv.dec{l}.cross.v"), &dense::from_tensor(&text));
            for r in 0..5 {
                assert!(m.row(r).iter().zip(&value[0]).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn single_layer_matches_dense_cross_attention() {
        let cfg = L2vConfig { layers: 1, heads: 2 };
        let s = store(&cfg, 2);
        let (z, _, _) = run(&s, &cfg, 3);
        let text = dense::linear(&s, "lv.text_proj", &dense::from_tensor(s.get("in.text").unwrap()));
        let z5 = dense::from_tensor(s.get("in.z5").unwrap());
        let q = dense::layer_norm(&s, "lv.dec0.ln_q", &z5);
        let h = dense::add(&z5, &dense::attention(&s, "lv.dec0.cross", &q, &text, 2, false).1);
        let want = dense::add(&h, &dense::ffn(&s, "lv.dec0.ffn", &dense::layer_norm(&s, "lv.dec0.ln_ffn", &h)));
        for r in 0..5 {
            assert!(z.row(r).iter().zip(&want[r]).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }

    #[test]
    fn zeroed_output_projections_leave_tokens_unchanged() {
        let cfg = L2vConfig::default();
        let mut s = store(&cfg, 3);
        for l in 0..cfg.layers {
            for name in ["cross.o.w", "cross.o.b", "ffn.fc2.w", "ffn.fc2.b"] {
                s.get_mut(&format!("lv.dec{l}.{name}")).unwrap().scale_assign(0.0);
            }
        }
        let (z, _, _) = run(&s, &cfg, 3);
        assert!(z.bit_eq(s.get("in.z5").unwrap()));
    }
}
