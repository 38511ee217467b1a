//! CSV tables written by the experiment runners.
//!
//! Every table has a fixed header row. Floats use the shortest decimal form
//! that parses back to the same value, so reports round-trip exactly.
//! Missing values are empty fields. Headers:
//!
//! | table | columns |
//! |---|---|
//! | training log | `epoch,count_loss,cls_loss,total_loss,val_mae,strong_samples,weak_samples` |
//! | evaluation | `name,n,mae,rmse,kappa,tiled` |
//! | size bias | `model,ratio,mean_drift,mean_abs_drift,mae,n` |
//! | size class | `model,ratio,size_class,mean_drift,n` |
//! | threshold sweep | `kappa,mae,rmse,n` |
//! | guidance steps | `run,requested,step,loss,predicted,accepted,step_scale` |
//! | guidance runs | `run,requested,seed,initial_predicted,final_predicted,oracle_count,success,steps` |
//! | ablation | `variant,target,mae,rmse,n,strong_alpha1,strong_beta1,weak_alpha2,weak_beta2,weak_gamma` |

use std::fmt::Display;
use std::fs;
use std::path::Path;

use super::ablation::AblationRow;
use super::config::TargetKind;
use super::guide::{GuideRun, Trajectory};
use super::metrics::{Inference, Metrics};
use super::sweeps::{SizeBiasReport, ThresholdReport};
use super::train::TrainLog;
use crate::error::{Error, Result};

pub const TRAIN_LOG_HEADER: &[&str] = &[
    "epoch",
    "count_loss",
    "cls_loss",
    "total_loss",
    "val_mae",
    "strong_samples",
    "weak_samples",
];
pub const EVAL_HEADER: &[&str] = &["name", "n", "mae", "rmse", "kappa", "tiled"];
pub const SIZE_BIAS_HEADER: &[&str] = &["model", "ratio", "mean_drift", "mean_abs_drift", "mae", "n"];
pub const SIZE_CLASS_HEADER: &[&str] = &["model", "ratio", "size_class", "mean_drift", "n"];
pub const THRESHOLD_HEADER: &[&str] = &["kappa", "mae", "rmse", "n"];
pub const GUIDE_HEADER: &[&str] = &["run", "requested", "step", "loss", "predicted", "accepted", "step_scale"];
pub const GUIDE_RUNS_HEADER: &[&str] = &[
    "run",
    "requested",
    "seed",
    "initial_predicted",
    "final_predicted",
    "oracle_count",
    "success",
    "steps",
];
pub const ABLATION_HEADER: &[&str] = &[
    "variant",
    "target",
    "mae",
    "rmse",
    "n",
    "strong_alpha1",
    "strong_beta1",
    "weak_alpha2",
    "weak_beta2",
    "weak_gamma",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn cell(v: impl Display) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(cell).unwrap_or_default()
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses the output of [`Table::to_csv`]. Fields never contain commas.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Config("empty csv".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(str::to_string).collect();
            if row.len() != header.len() {
                return Err(Error::Config(format!(
                    "csv line {} has {} fields, header has {}",
                    i + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    /// Column values by header name.
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j].as_str()).collect())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn train_log_table(log: &TrainLog) -> Table {
    let mut t = Table::new(TRAIN_LOG_HEADER);
    for e in &log.epochs {
        t.push(vec![
            cell(e.epoch),
            cell(e.count_loss),
            cell(e.cls_loss),
            cell(e.total_loss),
            opt(e.val_mae),
            cell(e.strong_samples),
            cell(e.weak_samples),
        ]);
    }
    t
}

pub fn eval_table(rows: &[(&str, Metrics, Inference)]) -> Table {
    let mut t = Table::new(EVAL_HEADER);
    for (name, m, inf) in rows {
        t.push(vec![
            cell(name),
            cell(m.n),
            cell(m.mae),
            cell(m.rmse),
            cell(inf.kappa),
            cell(inf.tiled),
        ]);
    }
    t
}

pub fn size_bias_tables(report: &SizeBiasReport) -> (Table, Table) {
    let mut rows = Table::new(SIZE_BIAS_HEADER);
    for r in &report.rows {
        rows.push(vec![
            cell(&r.model),
            cell(r.ratio),
            cell(r.mean_drift),
            cell(r.mean_abs_drift),
            cell(r.mae),
            cell(r.n),
        ]);
    }
    let mut classes = Table::new(SIZE_CLASS_HEADER);
    for r in &report.classes {
        classes.push(vec![
            cell(&r.model),
            cell(r.ratio),
            cell(r.size_class),
            cell(r.mean_drift),
            cell(r.n),
        ]);
    }
    (rows, classes)
}

pub fn threshold_table(report: &ThresholdReport) -> Table {
    let mut t = Table::new(THRESHOLD_HEADER);
    for r in &report.rows {
        t.push(vec![
            cell(r.kappa),
            cell(r.metrics.mae),
            cell(r.metrics.rmse),
            cell(r.metrics.n),
        ]);
    }
    t
}

/// One row per trajectory entry of each run.
pub fn guide_table(runs: &[(u32, &Trajectory)]) -> Table {
    let mut t = Table::new(GUIDE_HEADER);
    for (run, &(requested, traj)) in runs.iter().enumerate() {
        for s in &traj.steps {
            t.push(vec![
                cell(run),
                cell(requested),
                cell(s.step),
                cell(s.loss),
                cell(s.predicted),
                cell(s.accepted),
                cell(s.step_scale),
            ]);
        }
    }
    t
}

pub fn guide_runs_table(runs: &[GuideRun]) -> Table {
    let mut t = Table::new(GUIDE_RUNS_HEADER);
    for (i, r) in runs.iter().enumerate() {
        t.push(vec![
            cell(i),
            cell(r.requested),
            cell(r.seed),
            cell(r.initial_predicted),
            cell(r.final_predicted),
            cell(r.oracle_count),
            cell(r.success),
            cell(r.trajectory.steps.len()),
        ]);
    }
    t
}

fn target_name(t: TargetKind) -> &'static str {
    match t {
        TargetKind::Cardinality => "cardinality",
        TargetKind::Density => "density",
    }
}

pub fn ablation_table(rows: &[&AblationRow]) -> Table {
    let mut t = Table::new(ABLATION_HEADER);
    for r in rows {
        let s = r.strong_weights;
        let w = r.weak_weights;
        t.push(vec![
            cell(r.variant),
            cell(target_name(r.target)),
            cell(r.metrics.mae),
            cell(r.metrics.rmse),
            cell(r.metrics.n),
            opt(s.map(|s| s.alpha1)),
            opt(s.map(|s| s.beta1)),
            opt(w.map(|w| w.alpha2)),
            opt(w.map(|w| w.beta2)),
            opt(w.map(|w| w.gamma)),
        ]);
    }
    t
}
