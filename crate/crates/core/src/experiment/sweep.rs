//! Loss-weight grids.

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::task::Task;

/// Parses `lo:hi:step` into an inclusive, evenly spaced grid.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("grid `{spec}` must look like `lo:hi:step` with 0 < lo <= hi and step > 0"));
    let parts: Vec<f64> = spec.split(':').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    let [lo, hi, step] = parts[..] else { return Err(bad()) };
    if !(lo.is_finite() && hi.is_finite() && step.is_finite() && lo > 0.0 && hi >= lo && step > 0.0) {
        return Err(bad());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    // round away float drift so 0.1 + 2 * 0.1 prints as 0.3
    Ok((0..n).map(|i| ((lo + step * i as f64) * 1e9).round() / 1e9).collect())
}

/// One config per (task, value): the task's weight is set to the value and
/// the other two keep the base weights.
pub fn sweep_configs(base: &ExperimentConfig, grid: &[f64]) -> Vec<(Task, f64, ExperimentConfig)> {
    let mut out = Vec::new();
    for task in Task::ALL {
        for &v in grid {
            let mut cfg = base.clone();
            cfg.training.weights.set(task, v);
            cfg.name = format!("{}.alpha_{}={v}", base.name, task.name());
            out.push((task, v, cfg));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_grid_has_ten_points() {
        let g = parse_grid("0.1:1.0:0.1").unwrap();
        assert_eq!(g, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);
        assert_eq!(parse_grid("0.5:0.5:0.1").unwrap(), vec![0.5]);
    }

    #[test]
    fn malformed_grids_are_rejected() {
        for g in ["0.1:1.0", "1.0:0.1:0.1", "0:1:0.1", "0.1:1:0", "a:b:c"] {
            assert!(parse_grid(g).is_err(), "{g}");
        }
    }

    #[test]
    fn sweep_moves_one_weight_at_a_time() {
        let base = ExperimentConfig::default();
        let pts = sweep_configs(&base, &parse_grid("0.1:1.0:0.1").unwrap());
        assert_eq!(pts.len(), 30);
        for (task, v, cfg) in &pts {
            for t in Task::ALL {
                let want = if t == *task { *v } else { base.training.weights.get(t) };
                assert_eq!(cfg.training.weights.get(t), want);
            }
        }
    }
}
