//! Accuracy matrix bookkeeping, BWT and overall accuracy.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::policy::{sample_response, PolicyParams, SamplerConfig};
use crate::tasks::{rule_score, Example, TaskSpec};

/// `rows[j][i]` is the accuracy (percent) of the checkpoint after stage `j`
/// on task `i`. A continual run fills a lower triangle (`rows[j].len() == j + 1`);
/// a joint run has a single row covering every task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub task_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(task_names: Vec<String>) -> Self {
        Self { task_names, rows: Vec::new() }
    }

    /// Builds a lower-triangular matrix from explicit rows.
    pub fn from_rows(task_names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(task_names);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn n_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.is_empty() || row.len() > self.n_tasks() {
            return Err(invalid(format!("row of {} entries for {} tasks", row.len(), self.n_tasks())));
        }
        if let Some(i) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, task: usize, stage: usize) -> Option<f64> {
        self.rows.get(stage)?.get(task).copied()
    }

    /// True for a full sequential triangle with one row per task.
    pub fn is_triangular(&self) -> bool {
        self.rows.len() == self.n_tasks() && self.rows.iter().enumerate().all(|(j, r)| r.len() == j + 1)
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.rows.last().filter(|r| r.len() == self.n_tasks()).map(|r| r.as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["stage".to_string()];
        header.extend(self.task_names.iter().cloned());
        w.write_record(&header).expect("in-memory csv");
        for (j, row) in self.rows.iter().enumerate() {
            let mut rec = vec![(j + 1).to_string()];
            rec.extend((0..self.n_tasks()).map(|i| row.get(i).map_or(String::new(), |x| x.to_string())));
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let names: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let mut row = Vec::new();
            for cell in rec.iter().skip(1) {
                let cell = cell.trim();
                if cell.is_empty() {
                    break;
                }
                row.push(cell.parse::<f64>().map_err(|e| invalid(format!("bad matrix cell {cell:?}: {e}")))?);
            }
            rows.push(row);
        }
        Self::from_rows(names, rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Mean over `i < N` of `a[i][N] - a[i][i]`; `None` when there is no
/// sequence of intermediate checkpoints (single task or joint training).
pub fn bwt(m: &AccuracyMatrix) -> Option<f64> {
    let n = m.n_tasks();
    if n < 2 || !m.is_triangular() {
        return None;
    }
    let last = &m.rows[n - 1];
    let total: f64 = (0..n - 1).map(|i| last[i] - m.rows[i][i]).sum();
    Some(total / (n - 1) as f64)
}

/// Mean of the final row.
pub fn overall_acc(m: &AccuracyMatrix) -> Result<f64> {
    let last = m.final_row().ok_or_else(|| invalid("accuracy matrix has no complete final row"))?;
    Ok(math::mean(last))
}

pub fn per_task_delta(method: &AccuracyMatrix, baseline: &AccuracyMatrix) -> Result<Vec<f64>> {
    if method.task_names != baseline.task_names {
        return Err(invalid("matrices come from different task streams"));
    }
    let a = method.final_row().ok_or_else(|| invalid("method matrix is incomplete"))?;
    let b = baseline.final_row().ok_or_else(|| invalid("baseline matrix is incomplete"))?;
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Greedy-decoded accuracy on `eval_set`, in percent.
pub fn evaluate_task(params: &PolicyParams, task: &TaskSpec, eval_set: &[Example], workers: usize) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(invalid("empty eval set"));
    }
    let cfg = SamplerConfig::greedy(task.max_response_tokens);
    let score = |e: &Example| -> Result<f64> {
        let y = sample_response(params, &e.prompt.tokens, &cfg)?;
        rule_score(task, &e.prompt.tokens, &y.tokens)
    };
    let scores: Vec<f64> = if workers > 1 {
        eval_set.par_iter().map(score).collect::<Result<_>>()?
    } else {
        eval_set.iter().map(score).collect::<Result<_>>()?
    };
    Ok(100.0 * scores.iter().sum::<f64>() / scores.len() as f64)
}
