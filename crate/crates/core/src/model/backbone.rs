//! Four-stage strided residual network producing features at strides 4..32.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, Init, ParamStore};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub base_width: usize,
    pub blocks_per_stage: usize,
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { base_width: 16, blocks_per_stage: 2, norm_groups: 4 }
    }
}

impl BackboneConfig {
    /// Channel counts of stages 2..5, doubling per stage.
    pub fn channels(&self) -> [usize; 4] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w]
    }

    fn groups(&self, c: usize) -> usize {
        let mut g = self.norm_groups.min(c).max(1);
        while !c.is_multiple_of(g) {
            g -= 1;
        }
        g
    }
}

/// Outputs of stages 2..5 (`x2` at stride 4 through `x5` at stride 32).
#[derive(Clone, Copy, Debug)]
pub struct FeatureHierarchy {
    pub levels: [Var; 4],
}

impl FeatureHierarchy {
    pub fn x5(&self) -> Var {
        self.levels[3]
    }
}

pub fn init_backbone(store: &mut ParamStore, init: &mut Init, cfg: &BackboneConfig) {
    let ch = cfg.channels();
    nn::init_conv(store, init, "backbone.stem1", 3, 3, ch[0]);
    nn::init_norm(store, "backbone.stem1_gn", ch[0]);
    nn::init_conv(store, init, "backbone.stem2", 3, ch[0], ch[0]);
    nn::init_norm(store, "backbone.stem2_gn", ch[0]);
    let mut cin = ch[0];
    for (s, &c) in ch.iter().enumerate() {
        for blk in 0..cfg.blocks_per_stage {
            let p = format!("backbone.s{}.b{blk}", s + 2);
            let bin = if blk == 0 { cin } else { c };
            nn::init_conv(store, init, &format!("{p}.conv1"), 3, bin, c);
            nn::init_norm(store, &format!("{p}.gn1"), c);
            nn::init_conv(store, init, &format!("{p}.conv2"), 3, c, c);
            nn::init_norm(store, &format!("{p}.gn2"), c);
            if blk == 0 && s > 0 {
                nn::init_conv(store, init, &format!("{p}.proj"), 1, bin, c);
                nn::init_norm(store, &format!("{p}.proj_gn"), c);
            }
        }
        cin = c;
    }
}

fn block(b: &Bound, cfg: &BackboneConfig, p: &str, x: Var, c: usize, stride: usize, project: bool) -> Result<Var> {
    let t = b.tape();
    let g = cfg.groups(c);
    let h = nn::conv(b, &format!("{p}.conv1"), x, stride)?;
    let h = t.relu(nn::group_norm(b, &format!("{p}.gn1"), h, g)?);
    let h = nn::conv(b, &format!("{p}.conv2"), h, 1)?;
    let h = nn::group_norm(b, &format!("{p}.gn2"), h, g)?;
    let skip = if project {
        let s = nn::conv(b, &format!("{p}.proj"), x, stride)?;
        nn::group_norm(b, &format!("{p}.proj_gn"), s, g)?
    } else {
        x
    };
    Ok(t.relu(t.add(h, skip)))
}

/// Runs the backbone on an `(H, W, 3)` image.
pub fn backbone_forward(b: &Bound, cfg: &BackboneConfig, image: Var) -> Result<FeatureHierarchy> {
    let t = b.tape();
    let s = t.shape(image);
    if s.len() != 3 || s[2] != 3 || !s[0].is_multiple_of(32) || !s[1].is_multiple_of(32) || s[0] == 0 || s[1] == 0 {
        return Err(Error::Model(format!("backbone input must be (H, W, 3) with H, W multiples of 32, got {s:?}")));
    }
    let ch = cfg.channels();
    let g0 = cfg.groups(ch[0]);
    let x = nn::conv(b, "backbone.stem1", image, 2)?;
    let x = t.relu(nn::group_norm(b, "backbone.stem1_gn", x, g0)?);
    let x = nn::conv(b, "backbone.stem2", x, 2)?;
    let mut x = t.relu(nn::group_norm(b, "backbone.stem2_gn", x, g0)?);
    let mut levels = Vec::with_capacity(4);
    for (si, &c) in ch.iter().enumerate() {
        for blk in 0..cfg.blocks_per_stage {
            let p = format!("backbone.s{}.b{blk}", si + 2);
            let first = blk == 0 && si > 0;
            x = block(b, cfg, &p, x, c, if first { 2 } else { 1 }, first)?;
        }
        levels.push(x);
    }
    Ok(FeatureHierarchy { levels: [levels[0], levels[1], levels[2], levels[3]] })
}

pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("backbone.")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::check_gradients;
    use crate::tensor::Tensor;

    fn store(cfg: &BackboneConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init_backbone(&mut s, &mut Init::new(&mut rng), cfg);
        s
    }

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn([h, w, 3], |i| ((i * 37) % 101) as f64 / 101.0)
    }

    #[test]
    fn strides_and_channels() {
        let cfg = BackboneConfig::default();
        let s = store(&cfg, 0);
        let tape = Tape::new();
        let frozen = |_: &str| false;
        let b = Bound::new(&tape, &s, &frozen);
        let h = backbone_forward(&b, &cfg, tape.constant(image(64, 96))).unwrap();
        for (i, (&stride, &c)) in STRIDES.iter().zip(&cfg.channels()).enumerate() {
            assert_eq!(tape.shape(h.levels[i]), vec![64 / stride, 96 / stride, c]);
        }
        assert_eq!(tape.shape(h.x5())[..2], [2, 3]);
        assert!(cfg.channels().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_image_with_zero_biases_stays_finite() {
        let cfg = BackboneConfig::default();
        let s = store(&cfg, 1);
        assert!(s.iter().filter(|(n, _)| n.ends_with(".b")).all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        let tape = Tape::new();
        let frozen = |_: &str| false;
        let b = Bound::new(&tape, &s, &frozen);
        let h = backbone_forward(&b, &cfg, tape.constant(Tensor::zeros([32, 32, 3]))).unwrap();
        assert!(h.levels.iter().all(|&l| tape.value(l).is_finite()));
    }

    #[test]
    fn rejects_sizes_off_the_coarsest_stride() {
        let cfg = BackboneConfig::default();
        let s = store(&cfg, 0);
        let tape = Tape::new();
        let frozen = |_: &str| false;
        let b = Bound::new(&tape, &s, &frozen);
        assert!(matches!(backbone_forward(&b, &cfg, tape.constant(image(48, 64))), Err(Error::Model(_))));
    }

    #[test]
    fn gradient_of_x5_sum_matches_finite_differences() {
        let cfg = BackboneConfig { base_width: 4, blocks_per_stage: 1, norm_groups: 2 };
        let s = store(&cfg, 2);
        let img = image(32, 32);
        let probes = check_gradients(&s, &|_| true, 12, 1e-6, 3, &|b| {
            let t = b.tape();
            let h = backbone_forward(b, &cfg, t.constant(img.clone()))?;
            Ok(t.sum(h.x5()))
        })
        .unwrap();
        for p in &probes {
            assert!(p.relative_error(1e-6) < 1e-3, "{p:?}");
        }
    }
}
