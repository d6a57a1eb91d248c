use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::runner::{aggregate, prepare_run_dir, write_summary, MethodAggregate, RunRecord};
use crate::diagnostics::{forgetting_vs_kl_probe, DiagRecord, WindowRecord};
use crate::error::{Error, Result};
use crate::math;
use crate::metrics::AccuracyMatrix;
use crate::training::{LossPoint, MethodKind};

struct Job {
    method: String,
    seed: u64,
    matrix: AccuracyMatrix,
    /// Loss traces per stage.
    losses: Vec<Vec<LossPoint>>,
    diag: Vec<DiagRecord>,
    windows: Vec<WindowRecord>,
}

fn listing(dir: &Path) -> String {
    match fs::read_dir(dir) {
        Ok(rd) => {
            let mut names: Vec<String> = rd.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
            names.sort();
            if names.is_empty() {
                "nothing".into()
            } else {
                names.join(", ")
            }
        }
        Err(_) => "directory does not exist".into(),
    }
}

fn missing(found: &[String], problems: &[String]) -> Error {
    Error::Config(format!("report inputs incomplete:\n  {}\nfound:\n  {}", problems.join("\n  "), found.join("\n  ")))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format { path: path.display().to_string(), reason: e.to_string() }))
        .collect()
}

fn load_job(dir: &Path, method: &str, seed: u64) -> Result<Job> {
    let matrix = AccuracyMatrix::read_csv(&dir.join("matrix.csv"))?;
    let mut losses = Vec::new();
    for j in 1.. {
        let p = dir.join(format!("stage-{j}")).join("loss.csv");
        if !p.exists() {
            break;
        }
        let mut r = csv::Reader::from_path(&p)?;
        losses.push(r.deserialize().collect::<std::result::Result<Vec<LossPoint>, _>>()?);
    }
    let diag_path = dir.join("diagnostics.jsonl");
    let diag = if diag_path.exists() { read_jsonl(&diag_path)? } else { Vec::new() };
    let windows = windows_from(&diag);
    Ok(Job { method: method.to_string(), seed, matrix, losses, diag, windows })
}

/// Rebuilds window records from the diagnostics log. Per-task forgetting is
/// not logged there, so it is left empty.
fn windows_from(diag: &[DiagRecord]) -> Vec<WindowRecord> {
    let kls: Vec<&DiagRecord> = diag.iter().filter(|d| d.quantity == "window_kl").collect();
    let fs: Vec<&DiagRecord> = diag.iter().filter(|d| d.quantity == "window_forgetting").collect();
    kls.iter()
        .zip(&fs)
        .map(|(k, f)| WindowRecord {
            stage: k.stage,
            start_step: 0,
            end_step: k.step,
            kl: k.value,
            kl_stderr: k.stderr,
            forgetting: f.value,
            per_task_forgetting: Vec::new(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub out_dir: PathBuf,
    pub aggregates: Vec<MethodAggregate>,
    pub files: Vec<String>,
}

#[derive(Serialize)]
struct ScatterRow<'a> {
    method: &'a str,
    acc: f64,
    bwt: Option<f64>,
}

#[derive(Serialize)]
struct TrajectoryRow<'a> {
    method: &'a str,
    seed: u64,
    stage: usize,
    task: &'a str,
    accuracy: f64,
}

#[derive(Serialize)]
struct LossRow<'a> {
    stage: usize,
    step: usize,
    method: &'a str,
    loss: f64,
}

#[derive(Serialize)]
struct DeltaRow<'a> {
    method: &'a str,
    baseline: &'a str,
    task: &'a str,
    delta: f64,
}

#[derive(Serialize)]
struct KlRow<'a> {
    method: &'a str,
    stage: usize,
    kl_mean: f64,
    seeds: usize,
}

#[derive(Serialize)]
struct CorrelationRow<'a> {
    method: &'a str,
    seed: u64,
    windows: usize,
    spearman: Option<f64>,
}

/// Rebuilds every table and plot-data file from persisted run directories.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path, overwrite: bool) -> Result<ReportSummary> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut found = Vec::new();
    let mut problems = Vec::new();
    let mut jobs: Vec<Job> = Vec::new();
    let mut task_names: Option<Vec<String>> = None;
    for dir in run_dirs {
        let record_path = dir.join("record.json");
        if !record_path.exists() {
            problems.push(format!("{}: no record.json", dir.display()));
            found.push(format!("{}: {}", dir.display(), listing(dir)));
            continue;
        }
        let record = RunRecord::read(dir)?;
        found.push(format!("{}: record.json ({} jobs)", dir.display(), record.jobs.len()));
        match &task_names {
            Some(t) if *t != record.task_names => {
                problems.push(format!("{}: different task stream", dir.display()));
                continue;
            }
            None => task_names = Some(record.task_names.clone()),
            _ => {}
        }
        for j in record.jobs.iter().filter(|j| j.error.is_none()) {
            let jd = dir.join(&j.dir);
            if !jd.join("matrix.csv").exists() {
                problems.push(format!("{}: no matrix.csv", jd.display()));
                found.push(format!("{}: {}", jd.display(), listing(&jd)));
                continue;
            }
            if jobs.iter().any(|x| x.method == j.method && x.seed == j.seed) {
                warn!("{} seed {} appears in several run directories; keeping the first", j.method, j.seed);
                continue;
            }
            jobs.push(load_job(&jd, &j.method, j.seed)?);
        }
    }
    if !problems.is_empty() {
        return Err(missing(&found, &problems));
    }
    let tasks = task_names.unwrap_or_default();
    prepare_run_dir(out, overwrite)?;
    let pairs: Vec<(String, AccuracyMatrix)> = jobs.iter().map(|j| (j.method.clone(), j.matrix.clone())).collect();
    let aggs = aggregate(&pairs)?;
    let mut files = Vec::new();
    let mut emit = |name: &str| {
        files.push(name.to_string());
        out.join(name)
    };

    write_summary(&emit("table.csv"), &tasks, &aggs)?;

    let mut w = csv::Writer::from_path(emit("fig1_scatter.csv"))?;
    for a in &aggs {
        w.serialize(ScatterRow { method: &a.method, acc: a.acc_mean, bwt: a.bwt_mean })?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(emit("fig3_trajectories.csv"))?;
    for j in &jobs {
        for (s, row) in j.matrix.rows.iter().enumerate() {
            for (t, &acc) in row.iter().enumerate() {
                w.serialize(TrajectoryRow { method: &j.method, seed: j.seed, stage: s + 1, task: &tasks[t], accuracy: acc })?;
            }
        }
    }
    w.flush()?;

    // Seed-mean loss per (method, stage, step).
    let mut loss: BTreeMap<(usize, usize), BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for j in &jobs {
        if !order.contains(&j.method.as_str()) {
            order.push(&j.method);
        }
        for (s, trace) in j.losses.iter().enumerate() {
            for p in trace {
                loss.entry((s + 1, p.step)).or_default().entry(&j.method).or_default().push(p.loss);
            }
        }
    }
    let mut w = csv::Writer::from_path(emit("fig4_loss.csv"))?;
    for m in &order {
        for ((stage, step), by) in &loss {
            if let Some(v) = by.get(m) {
                w.serialize(LossRow { stage: *stage, step: *step, method: m, loss: math::mean(v) })?;
            }
        }
    }
    w.flush()?;

    let vanilla: Vec<&MethodAggregate> =
        aggs.iter().filter(|a| a.method.starts_with(MethodKind::VanillaReplay.name())).collect();
    if vanilla.is_empty() {
        warn!("no vanilla-replay run among the inputs; skipping per-task deltas");
    } else {
        let mut w = csv::Writer::from_path(emit("fig5_deltas.csv"))?;
        for a in aggs.iter().filter(|a| !a.method.starts_with(MethodKind::VanillaReplay.name())) {
            // Same budget when available.
            let suffix = a.method.split_once('@').map(|(_, r)| r);
            let base = vanilla
                .iter()
                .find(|v| suffix.is_some() && v.method.split_once('@').map(|(_, r)| r) == suffix)
                .unwrap_or(&vanilla[0]);
            for (t, name) in tasks.iter().enumerate() {
                w.serialize(DeltaRow {
                    method: &a.method,
                    baseline: &base.method,
                    task: name,
                    delta: a.final_row_mean[t] - base.final_row_mean[t],
                })?;
            }
        }
        w.flush()?;
    }

    let with_kl: Vec<&Job> = jobs.iter().filter(|j| j.diag.iter().any(|d| d.quantity == "stage_kl")).collect();
    if !with_kl.is_empty() {
        let mut w = csv::Writer::from_path(emit("kl_stage.csv"))?;
        for m in &order {
            let mut by_stage: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for j in with_kl.iter().filter(|j| j.method == *m) {
                for d in j.diag.iter().filter(|d| d.quantity == "stage_kl") {
                    by_stage.entry(d.stage).or_default().push(d.value);
                }
            }
            for (stage, v) in by_stage {
                w.serialize(KlRow { method: m, stage: stage + 1, kl_mean: math::mean(&v), seeds: v.len() })?;
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(emit("kl_correlation.csv"))?;
        for j in with_kl.iter().filter(|j| !j.windows.is_empty()) {
            let c = forgetting_vs_kl_probe(&j.windows);
            w.serialize(CorrelationRow { method: &j.method, seed: j.seed, windows: j.windows.len(), spearman: c.spearman })?;
        }
        w.flush()?;
    }
    Ok(ReportSummary { out_dir: out.to_path_buf(), aggregates: aggs, files })
}
