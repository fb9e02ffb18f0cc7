//! Batch composition for training on partially labeled data.
//!
//! Every batch item carries its own loss mask, so a mixed batch can train
//! some heads on one image and other heads on the next.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PartialDataset;
use crate::error::{Error, Result};
use crate::task::{PerTask, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    SelfTraining,
    ZeroingLoss,
    RoundRobin,
    UniformSample,
    WeightedSample,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::SelfTraining,
        ScheduleKind::ZeroingLoss,
        ScheduleKind::RoundRobin,
        ScheduleKind::UniformSample,
        ScheduleKind::WeightedSample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::SelfTraining => "self_training",
            ScheduleKind::ZeroingLoss => "zeroing_loss",
            ScheduleKind::RoundRobin => "round_robin",
            ScheduleKind::UniformSample => "uniform_sample",
            ScheduleKind::WeightedSample => "weighted_sample",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub index: usize,
    /// `(det, sem, driv)` losses to evaluate for this image.
    pub loss_mask: [bool; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    /// The task of a task-homogeneous batch.
    pub task: Option<Task>,
}

/// Task of step `step` under a round-robin schedule.
pub fn round_robin_task(step: usize) -> Task {
    Task::ALL[step % Task::ALL.len()]
}

/// Draws a task uniformly, or proportionally to `counts` when `weighted`.
/// Tasks without labeled images are never drawn.
pub fn sample_task(counts: &PerTask<usize>, weighted: bool, rng: &mut ChaCha8Rng) -> Result<Task> {
    let weights: Vec<f64> = Task::ALL
        .iter()
        .map(|&t| {
            let c = *counts.get(t);
            if c == 0 {
                0.0
            } else if weighted {
                c as f64
            } else {
                1.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::Config("no task has labeled images".into()));
    }
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(Task::ALL[i]);
        }
        u -= w;
    }
    Ok(Task::ALL[weights.iter().rposition(|&w| w > 0.0).expect("positive total")])
}

fn draw(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

/// Composes the batch for optimizer step `step`.
pub fn compose_batch(
    kind: ScheduleKind,
    data: &PartialDataset,
    batch_size: usize,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::Config("cannot compose a batch from an empty dataset or batch size".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let homogeneous = |task: Task, rng: &mut ChaCha8Rng| -> Result<Batch> {
        let pool = data.pool(task);
        if pool.is_empty() {
            return Err(Error::Config(format!("no images labeled for {task}")));
        }
        let mut loss_mask = [false; 3];
        loss_mask[task.index()] = true;
        let items = draw(&pool, batch_size, rng).into_iter().map(|index| BatchItem { index, loss_mask }).collect();
        Ok(Batch { items, task: Some(task) })
    };
    match kind {
        ScheduleKind::SelfTraining => {
            let items = draw(&all, batch_size, rng)
                .into_iter()
                .map(|index| {
                    let avail = data.samples[index].availability();
                    if avail.iter().all(|&a| a) {
                        Ok(BatchItem { index, loss_mask: [true; 3] })
                    } else {
                        Err(Error::Config(format!("self-training needs fully labeled images; image {index} is not")))
                    }
                })
                .collect::<Result<_>>()?;
            Ok(Batch { items, task: None })
        }
        ScheduleKind::ZeroingLoss => {
            let items = draw(&all, batch_size, rng)
                .into_iter()
                .map(|index| BatchItem { index, loss_mask: data.samples[index].availability() })
                .collect();
            Ok(Batch { items, task: None })
        }
        ScheduleKind::RoundRobin => homogeneous(round_robin_task(step), rng),
        ScheduleKind::UniformSample | ScheduleKind::WeightedSample => {
            let task = sample_task(&data.labeled_counts(), kind == ScheduleKind::WeightedSample, rng)?;
            homogeneous(task, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::test_support::{disjoint_tiny_data, full_tiny_data};

    #[test]
    fn round_robin_cycles_det_sem_driv() {
        let seq: Vec<Task> = (0..6).map(round_robin_task).collect();
        assert_eq!(seq, [Task::Det, Task::Sem, Task::Driv, Task::Det, Task::Sem, Task::Driv]);
        let data = disjoint_tiny_data(6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for step in 0..6 {
            let b = compose_batch(ScheduleKind::RoundRobin, &data, 4, step, &mut rng).unwrap();
            let task = round_robin_task(step);
            assert_eq!(b.task, Some(task));
            for item in &b.items {
                assert!(data.samples[item.index].has(task));
                assert_eq!(item.loss_mask.iter().filter(|&&m| m).count(), 1);
                assert!(item.loss_mask[task.index()]);
            }
        }
    }

    #[test]
    fn empty_task_pool_is_a_configuration_error() {
        let mut data = disjoint_tiny_data(3);
        data.samples[0].drop_annotation(Task::Det);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = compose_batch(ScheduleKind::RoundRobin, &data, 2, 0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(compose_batch(ScheduleKind::RoundRobin, &data, 2, 1, &mut rng).is_ok());
        let none = PerTask::new(0, 0, 0);
        assert!(sample_task(&none, true, &mut rng).is_err());
    }

    #[test]
    fn weighted_sampling_tracks_label_counts() {
        let counts = PerTask::new(200, 100, 70);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut hits = [0usize; 3];
        for _ in 0..n {
            hits[sample_task(&counts, true, &mut rng).unwrap().index()] += 1;
        }
        for (i, &c) in [200.0, 100.0, 70.0].iter().enumerate() {
            let p: f64 = c / 370.0;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let freq = hits[i] as f64 / n as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "task {i}: {freq} vs {p}");
        }
    }

    #[test]
    fn uniform_sampling_skips_unlabeled_tasks() {
        let counts = PerTask::new(5, 0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut hits = [0usize; 3];
        for _ in 0..3000 {
            hits[sample_task(&counts, false, &mut rng).unwrap().index()] += 1;
        }
        assert_eq!(hits[1], 0);
        assert!((hits[0] as f64 / 3000.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn zeroing_loss_masks_follow_availability() {
        let data = disjoint_tiny_data(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = compose_batch(ScheduleKind::ZeroingLoss, &data, 8, 0, &mut rng).unwrap();
        assert_eq!(b.task, None);
        assert_eq!(b.items.len(), 8);
        assert!(b.items.iter().all(|i| i.loss_mask == data.samples[i.index].availability()));
    }

    #[test]
    fn self_training_requires_complete_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let full = full_tiny_data(3);
        let b = compose_batch(ScheduleKind::SelfTraining, &full, 4, 0, &mut rng).unwrap();
        assert!(b.items.iter().all(|i| i.loss_mask == [true; 3]));
        assert!(compose_batch(ScheduleKind::SelfTraining, &disjoint_tiny_data(3), 4, 0, &mut rng).is_err());
    }

    #[test]
    fn schedule_names_round_trip() {
        for k in ScheduleKind::ALL {
            assert_eq!(k.name().parse::<ScheduleKind>().unwrap(), k);
        }
        assert!("sometimes".parse::<ScheduleKind>().is_err());
    }
}
