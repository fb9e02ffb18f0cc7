//! Comparison tables over finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::pipeline::RunMetrics;
use crate::error::{Error, Result};
use crate::eval::EvalMetrics;
use crate::task::Task;

pub const METRIC_NAMES: [&str; 7] = ["miou_ss", "pacc_ss", "miou_da", "pacc_da", "map", "ap50", "ap75"];
const METRIC_HEADERS: [&str; 7] = ["mIoU-SS", "pACC-SS", "mIoU-DA", "pACC-DA", "mAP", "AP50", "AP75"];

pub fn metric_values(m: &EvalMetrics) -> [Option<f64>; 7] {
    let seg = |t: Task| m.seg(t).map(|s| (s.miou, s.pacc)).unwrap_or((None, None));
    let (miou_ss, pacc_ss) = seg(Task::Sem);
    let (miou_da, pacc_da) = seg(Task::Driv);
    let det = m.det.as_ref();
    [miou_ss, pacc_ss, miou_da, pacc_da, det.and_then(|d| d.map), det.and_then(|d| d.ap50), det.and_then(|d| d.ap75)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub std: Option<f64>,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Stat { mean, std, values })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub setting: String,
    pub seeds: Vec<u64>,
    pub config_digest: String,
    /// Keyed by [`METRIC_NAMES`]; `None` when any run left the metric undefined.
    pub metrics: BTreeMap<String, Option<Stat>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub eval_digest: String,
    pub rows: Vec<ReportRow>,
}

/// Groups runs by method. All runs must share the held-out set; runs of
/// one method must share a config and use distinct seeds.
pub fn build_report(runs: &[RunMetrics]) -> Result<Report> {
    let first = runs.first().ok_or_else(|| Error::Config("no completed runs to report".into()))?;
    let mut groups: BTreeMap<&str, Vec<&RunMetrics>> = BTreeMap::new();
    for r in runs {
        if r.eval_digest != first.eval_digest || r.setting != first.setting {
            return Err(Error::Config(format!(
                "runs `{}` and `{}` were evaluated on different data and cannot share a table",
                first.method, r.method
            )));
        }
        groups.entry(&r.method).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (method, mut members) in groups {
        members.sort_by_key(|r| r.seed);
        if members.windows(2).any(|w| w[0].seed == w[1].seed) {
            return Err(Error::Config(format!("method `{method}` has two runs with the same seed")));
        }
        if members.iter().any(|r| r.config_digest != members[0].config_digest) {
            return Err(Error::Config(format!("method `{method}` mixes runs of different configs")));
        }
        let per_run: Vec<[Option<f64>; 7]> = members.iter().map(|r| metric_values(&r.metrics)).collect();
        let metrics = METRIC_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let vals: Option<Vec<f64>> = per_run.iter().map(|v| v[i]).collect();
                (name.to_string(), vals.and_then(Stat::of))
            })
            .collect();
        rows.push(ReportRow {
            method: method.into(),
            setting: members[0].setting.clone(),
            seeds: members.iter().map(|r| r.seed).collect(),
            config_digest: members[0].config_digest.clone(),
            metrics,
        });
    }
    Ok(Report { eval_digest: first.eval_digest.clone(), rows })
}

fn cell(s: &Option<Stat>) -> String {
    match s {
        None => "-".into(),
        Some(Stat { mean, std: None, .. }) => format!("{:.1}", 100.0 * mean),
        Some(Stat { mean, std: Some(sd), .. }) => format!("{:.1} ± {:.1}", 100.0 * mean, 100.0 * sd),
    }
}

/// Aligned text table, metrics in percent.
pub fn render_table(report: &Report) -> String {
    let mut header = vec!["method".to_string(), "setting".into(), "seeds".into()];
    header.extend(METRIC_HEADERS.iter().map(|h| h.to_string()));
    let mut lines = vec![header];
    for r in &report.rows {
        let mut line = vec![r.method.clone(), r.setting.clone(), r.seeds.len().to_string()];
        line.extend(METRIC_NAMES.iter().map(|n| cell(&r.metrics[*n])));
        lines.push(line);
    }
    let widths: Vec<usize> =
        (0..lines[0].len()).map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let cells: Vec<String> = l
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| {
                let pad = w - s.chars().count();
                if c < 2 { format!("{s}{}", " ".repeat(pad)) } else { format!("{}{s}", " ".repeat(pad)) }
            })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).expect("string write");
        if i == 0 {
            writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")).expect("string write");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{DetMetrics, SegMetrics};
    use crate::experiment::pipeline::CheckpointDigests;
    use crate::task::PerTask;

    fn run(method: &str, seed: u64, miou: f64) -> RunMetrics {
        let seg = |v: f64| SegMetrics { miou: Some(v), pacc: Some(v), per_class_iou: vec![] };
        RunMetrics {
            method: method.into(),
            setting: "disjoint_normal".into(),
            paradigm: "p".into(),
            budget: "1,35".into(),
            schedule: "zeroing_loss".into(),
            prompt_mode: "none".into(),
            seed,
            config_digest: format!("cfg-{method}"),
            eval_digest: "eval".into(),
            checkpoints: CheckpointDigests { pretrained: "a".into(), teachers: PerTask::new(None, None, None), final_model: "b".into() },
            optimizer_steps: 1,
            metrics: EvalMetrics {
                images: 1,
                det: Some(DetMetrics { map: Some(0.2), ap50: Some(0.4), ap75: None }),
                sem: Some(seg(miou)),
                driv: Some(seg(0.5)),
            },
        }
    }

    #[test]
    fn mean_and_std_match_a_direct_recomputation() {
        let runs = vec![run("a", 2, 0.3), run("a", 0, 0.1), run("a", 1, 0.5), run("b", 0, 0.7)];
        let rep = build_report(&runs).unwrap();
        assert_eq!(rep.rows.len(), 2);
        let a = rep.rows[0].metrics["miou_ss"].clone().unwrap();
        assert_eq!(rep.rows[0].seeds, vec![0, 1, 2]);
        assert!((a.mean - 0.3).abs() < 1e-15);
        assert!((a.std.unwrap() - 0.2).abs() < 1e-15);
        let b = rep.rows[1].metrics["miou_ss"].clone().unwrap();
        assert_eq!((b.mean, b.std), (0.7, None));
        assert_eq!(rep.rows[0].metrics["ap75"], None);
        let table = render_table(&rep);
        assert!(table.contains("30.0 ± 20.0"), "{table}");
        assert!(table.lines().nth(3).unwrap().contains("70.0"));
    }

    #[test]
    fn incompatible_runs_are_rejected() {
        let mut other = run("b", 0, 0.1);
        other.eval_digest = "elsewhere".into();
        assert!(build_report(&[run("a", 0, 0.1), other]).is_err());
        let mut drift = run("a", 1, 0.1);
        drift.config_digest = "changed".into();
        assert!(build_report(&[run("a", 0, 0.1), drift]).is_err());
        assert!(build_report(&[run("a", 0, 0.1), run("a", 0, 0.2)]).is_err());
        assert!(build_report(&[]).is_err());
    }
}
