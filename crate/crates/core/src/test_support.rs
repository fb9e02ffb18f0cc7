//! Small configurations that keep unit tests fast.

use crate::data::{class_vocabulary, generate_scenes, PartialDataset, SceneSpec};
use crate::heads::{DetHeadConfig, SegHeadConfig};
use crate::language::{LanguageConfig, PromptMode};
use crate::model::{BackboneConfig, ModelConfig, MultiTaskModel};
use crate::task::PerTask;

pub fn tiny_config(mode: PromptMode) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { base_width: 4, blocks_per_stage: 1, norm_groups: 2 },
        channels: 8,
        seg: SegHeadConfig { queries: 4, decoder_layers: 1, heads: 2 },
        det: DetHeadConfig { proposals: 6, stages: 2, dynamic_dim: 4 },
        language: LanguageConfig { mode, context_length: 4, ..LanguageConfig::default() },
        ..ModelConfig::default()
    }
}

pub fn tiny_scene() -> SceneSpec {
    SceneSpec { image_size: (32, 32), num_objects: (1, 3), ..SceneSpec::default() }
}

pub fn vocab(spec: &SceneSpec) -> PerTask<Vec<String>> {
    PerTask::from_fn(|t| class_vocabulary(spec, t))
}

pub fn tiny_model(mode: PromptMode, tasks: PerTask<bool>, seed: u64) -> MultiTaskModel {
    MultiTaskModel::new(tiny_config(mode), vocab(&tiny_scene()), tasks, seed).expect("tiny config is valid")
}

pub fn full_tiny_data(n: usize) -> PartialDataset {
    PartialDataset::new(generate_scenes(&tiny_scene(), 0..n).expect("valid scene"))
}

/// Plain nested-vector reimplementations used as oracles for tape code.
pub mod dense {
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    pub type Mat = Vec<Vec<f64>>;

    pub fn from_tensor(t: &Tensor) -> Mat {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    pub fn linear(s: &ParamStore, name: &str, x: &Mat) -> Mat {
        let w = s.get(&format!("{name}.w")).unwrap();
        let b = s.get(&format!("{name}.b")).unwrap();
        x.iter()
            .map(|row| (0..w.cols()).map(|j| b.data()[j] + row.iter().enumerate().map(|(i, v)| v * w.row(i)[j]).sum::<f64>()).collect())
            .collect()
    }

    pub fn layer_norm(s: &ParamStore, name: &str, x: &Mat) -> Mat {
        let g = s.get(&format!("{name}.g")).unwrap().data();
        let b = s.get(&format!("{name}.b")).unwrap().data();
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter().enumerate().map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
            })
            .collect()
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn ffn(s: &ParamStore, name: &str, x: &Mat) -> Mat {
        let h: Mat = linear(s, &format!("{name}.fc1"), x).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        linear(s, &format!("{name}.fc2"), &h)
    }

    /// Returns `(mixed, out)`: head outputs before and after the output projection.
    pub fn attention(s: &ParamStore, name: &str, q_in: &Mat, kv_in: &Mat, heads: usize, causal: bool) -> (Mat, Mat) {
        let q = linear(s, &format!("{name}.q"), q_in);
        let k = linear(s, &format!("{name}.k"), kv_in);
        let v = linear(s, &format!("{name}.v"), kv_in);
        let d = q[0].len();
        let dh = d / heads;
        let mut mixed = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for (i, qi) in q.iter().enumerate() {
                let logits: Vec<f64> = k
                    .iter()
                    .enumerate()
                    .map(|(j, kj)| {
                        if causal && j > i {
                            f64::NEG_INFINITY
                        } else {
                            cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt()
                        }
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for c in cols.clone() {
                    mixed[i][c] = v.iter().zip(&logits).map(|(vj, l)| (l - m).exp() / z * vj[c]).sum();
                }
            }
        }
        let out = linear(s, &format!("{name}.o"), &mixed);
        (mixed, out)
    }
}

/// Image `i` keeps only the annotation of task `i % 3`.
pub fn disjoint_tiny_data(n: usize) -> PartialDataset {
    let mut data = full_tiny_data(n);
    for (i, s) in data.samples.iter_mut().enumerate() {
        for task in crate::task::Task::ALL {
            if task.index() != i % 3 {
                s.drop_annotation(task);
            }
        }
    }
    data
}
