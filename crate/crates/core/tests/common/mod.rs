//! Configurations and dense reference computations shared by integration tests.

#![allow(dead_code)]

use mtadapt::data::{class_vocabulary, generate_scenes, PartialDataset, SceneSpec};
use mtadapt::experiment::ExperimentConfig;
use mtadapt::heads::{DetHeadConfig, SegHeadConfig};
use mtadapt::language::{LanguageConfig, PromptMode};
use mtadapt::model::{BackboneConfig, ModelConfig, MultiTaskModel};
use mtadapt::params::{Init, ParamStore};
use mtadapt::{PerTask, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DESK_TOML: &str = include_str!("../../../../configs/desk.toml");

pub fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(DESK_TOML).expect("desk config parses")
}

pub fn tiny_model_config(mode: PromptMode) -> ModelConfig {
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

pub fn tiny_model(mode: PromptMode, seed: u64) -> MultiTaskModel {
    MultiTaskModel::new(tiny_model_config(mode), vocab(&tiny_scene()), PerTask::new(true, true, true), seed).expect("tiny config is valid")
}

pub fn full_tiny_data(n: usize) -> PartialDataset {
    PartialDataset::new(generate_scenes(&tiny_scene(), 0..n).expect("valid scene"))
}

/// Image `i` keeps only the annotation of task `i % 3`.
pub fn disjoint(mut data: PartialDataset) -> PartialDataset {
    for (i, s) in data.samples.iter_mut().enumerate() {
        for task in Task::ALL {
            if task.index() != i % 3 {
                s.drop_annotation(task);
            }
        }
    }
    data
}

/// Replaces every tensor of `store` with standard-normal values scaled by `std`.
pub fn randomize(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init::new(&mut rng);
    let shapes: Vec<(String, Vec<usize>)> = store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for (name, shape) in shapes {
        store.insert(name, init.normal(&shape, std));
    }
}

/// Plain nested-vector reimplementations used as oracles for tape code.
pub mod dense {
    use mtadapt::params::ParamStore;
    use mtadapt::Tensor;

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

    pub fn l2_normalize(x: &Mat) -> Mat {
        x.iter()
            .map(|row| {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter().map(|v| v / n).collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn ffn(s: &ParamStore, name: &str, x: &Mat) -> Mat {
        let h: Mat = linear(s, &format!("{name}.fc1"), x).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        linear(s, &format!("{name}.fc2"), &h)
    }

    /// Returns `(mixed, out)`: head outputs before and after the output projection.
    pub fn attention(s: &ParamStore, name: &str, q_in: &Mat, kv_in: &Mat, heads: usize) -> (Mat, Mat) {
        let q = linear(s, &format!("{name}.q"), q_in);
        let k = linear(s, &format!("{name}.k"), kv_in);
        let v = linear(s, &format!("{name}.v"), kv_in);
        let d = q[0].len();
        let dh = d / heads;
        let mut mixed = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for (i, qi) in q.iter().enumerate() {
                let logits: Vec<f64> = k.iter().map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt()).collect();
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

    pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
        a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}
