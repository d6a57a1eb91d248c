use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{error, info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::diagnostics::{forgetting_vs_kl_probe, DiagRecord};
use crate::error::{Error, Result};
use crate::math;
use crate::metrics::{bwt, overall_acc, AccuracyMatrix};
use crate::policy::save_checkpoint;
use crate::replay::{snapshot_records, write_snapshot};
use crate::tasks::{TaskDataset, TaskStream};
use crate::training::{run_continual, ContinualRun, MethodKind, MethodSpec, RunSettings};

pub const OUTPUT_DIR_ENV: &str = "OPRLAB_OUT";

/// Files excluded from content hashes.
const VOLATILE: &[&str] = &["timing.json"];

/// Flag > environment > config > `runs`.
pub fn resolve_output_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUTPUT_DIR_ENV) {
        return PathBuf::from(p);
    }
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates an empty run directory. An existing non-empty directory is an
/// error unless `overwrite` is set, in which case it is removed first.
pub fn prepare_run_dir(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && fs::read_dir(path)?.next().is_some() {
        if !overwrite {
            return Err(Error::Config(format!(
                "run directory {} already exists; choose another output directory or pass --overwrite",
                path.display()
            )));
        }
        fs::remove_dir_all(path)?;
    }
    fs::create_dir_all(path)?;
    Ok(())
}

pub fn method_slug(m: &MethodSpec) -> String {
    m.label().replace('@', "_rho")
}

/// A config's stream with its datasets, generated once per experiment.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub stream: TaskStream,
    pub datasets: Vec<TaskDataset>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let stream = config.stream()?;
        let datasets = stream.generate()?;
        Ok(Self { config, stream, datasets })
    }

    pub fn settings(&self, seed: u64) -> RunSettings {
        RunSettings {
            arch: self.config.model.arch(&self.stream),
            init_scale: self.config.model.init_scale(),
            seed,
            workers: self.config.workers,
            probe: self.config.diagnostics.kl_probe.clone(),
        }
    }

    pub fn run(&self, method: &MethodSpec, seed: u64) -> Result<ContinualRun> {
        run_continual(&self.stream, &self.datasets, method, &self.config.optim, &self.settings(seed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub method: String,
    pub seed: u64,
    /// Relative to the run directory.
    pub dir: String,
    pub acc: Option<f64>,
    pub bwt: Option<f64>,
    /// Per-stage `KL(end || start)` on historical prompts, when probed.
    pub stage_kl: Vec<Option<f64>>,
    pub kl_forgetting_spearman: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: String,
    pub seeds: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub bwt_mean: Option<f64>,
    pub bwt_std: Option<f64>,
    /// Seed mean of the final accuracy row.
    pub final_row_mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub name: String,
    pub command: String,
    pub config_hash: String,
    pub task_names: Vec<String>,
    pub jobs: Vec<JobRecord>,
    pub aggregates: Vec<MethodAggregate>,
}

impl RunRecord {
    pub fn failed(&self) -> Vec<&JobRecord> {
        self.jobs.iter().filter(|j| j.error.is_some()).collect()
    }

    pub fn aggregate(&self, method: &str) -> Option<&MethodAggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("record.json");
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.display().to_string(), reason: e.to_string() })
    }
}

/// Seed aggregates from `(method, matrix)` pairs, in first-seen method order.
pub fn aggregate(matrices: &[(String, AccuracyMatrix)]) -> Result<Vec<MethodAggregate>> {
    let mut order: Vec<&str> = Vec::new();
    for (m, _) in matrices {
        if !order.contains(&m.as_str()) {
            order.push(m);
        }
    }
    let mut out = Vec::with_capacity(order.len());
    for m in order {
        let ms: Vec<&AccuracyMatrix> = matrices.iter().filter(|(k, _)| k == m).map(|(_, x)| x).collect();
        let accs = ms.iter().map(|x| overall_acc(x)).collect::<Result<Vec<f64>>>()?;
        let bwts: Option<Vec<f64>> = ms.iter().map(|x| bwt(x)).collect();
        let n = ms[0].n_tasks();
        let final_row_mean = (0..n)
            .map(|i| math::mean(&ms.iter().map(|x| x.final_row().map_or(f64::NAN, |r| r[i])).collect::<Vec<_>>()))
            .collect();
        let sd = |v: &[f64]| if v.len() > 1 { math::std_dev(v) } else { 0.0 };
        out.push(MethodAggregate {
            method: m.to_string(),
            seeds: ms.len(),
            acc_mean: math::mean(&accs),
            acc_std: sd(&accs),
            bwt_mean: bwts.as_ref().map(|b| math::mean(b)),
            bwt_std: bwts.as_ref().map(|b| sd(b)),
            final_row_mean,
        });
    }
    Ok(out)
}

fn write_csv_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct WindowRow {
    stage: usize,
    start_step: usize,
    end_step: usize,
    kl: f64,
    kl_stderr: Option<f64>,
    forgetting: f64,
}

/// Writes a finished run:
///
/// ```text
/// matrix.csv  diagnostics.jsonl  windows.csv  timing.json
/// stage-<j>/loss.csv  stage-<j>/checkpoint.json  stage-<j>/buffer.jsonl
/// ```
pub fn write_job(dir: &Path, run: &ContinualRun, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    run.matrix.write_csv(&dir.join("matrix.csv"))?;
    let mut diag = Vec::new();
    let mut windows = Vec::new();
    let mut timing = Vec::new();
    for st in &run.stages {
        let sdir = dir.join(format!("stage-{}", st.stage + 1));
        fs::create_dir_all(&sdir)?;
        write_csv_rows(&sdir.join("loss.csv"), &st.trace)?;
        if cfg.diagnostics.save_checkpoints {
            save_checkpoint(&st.checkpoint, &sdir.join("checkpoint.json"))?;
        }
        if let Some(b) = &st.buffer {
            let pool = if cfg.diagnostics.save_pools { st.pool.as_ref() } else { None };
            write_snapshot(&sdir.join("buffer.jsonl"), &snapshot_records(b, pool))?;
        }
        if let Some(k) = &st.stage_kl {
            diag.push(DiagRecord {
                stage: st.stage,
                step: st.trace.len(),
                quantity: "stage_kl".into(),
                value: k.value,
                mode: k.mode.clone(),
                stderr: k.stderr,
            });
        }
        for w in &st.windows {
            for (q, v, se) in [("window_kl", w.kl, w.kl_stderr), ("window_forgetting", w.forgetting, None)] {
                diag.push(DiagRecord {
                    stage: w.stage,
                    step: w.end_step,
                    quantity: q.into(),
                    value: v,
                    mode: if q == "window_kl" { "mc".into() } else { "exact".into() },
                    stderr: se,
                });
            }
            windows.push(WindowRow {
                stage: w.stage,
                start_step: w.start_step,
                end_step: w.end_step,
                kl: w.kl,
                kl_stderr: w.kl_stderr,
                forgetting: w.forgetting,
            });
        }
        timing.push(st.wall_secs);
    }
    write_jsonl(&dir.join("diagnostics.jsonl"), &diag)?;
    if !windows.is_empty() {
        write_csv_rows(&dir.join("windows.csv"), &windows)?;
    }
    write_json(&dir.join("timing.json"), &serde_json::json!({ "stage_wall_secs": timing }))?;
    Ok(())
}

fn job_record(method: &MethodSpec, seed: u64, dir: String, run: &Result<ContinualRun>) -> JobRecord {
    match run {
        Ok(r) => {
            let windows: Vec<_> = r.stages.iter().flat_map(|s| s.windows.iter().cloned()).collect();
            JobRecord {
                method: method.label(),
                seed,
                dir,
                acc: overall_acc(&r.matrix).ok(),
                bwt: bwt(&r.matrix),
                stage_kl: r.stages.iter().map(|s| s.stage_kl.as_ref().map(|k| k.value)).collect(),
                kl_forgetting_spearman: if windows.is_empty() { None } else { forgetting_vs_kl_probe(&windows).spearman },
                error: None,
            }
        }
        Err(e) => JobRecord {
            method: method.label(),
            seed,
            dir,
            acc: None,
            bwt: None,
            stage_kl: Vec::new(),
            kl_forgetting_spearman: None,
            error: Some(e.to_string()),
        },
    }
}

/// Runs every (method, seed) pair into `run_dir` and writes `record.json`
/// and `summary.csv`. Failed jobs are recorded, not raised.
pub fn run_jobs(exp: &Experiment, methods: &[MethodSpec], command: &str, run_dir: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let mut jobs = Vec::new();
    let mut matrices = Vec::new();
    for m in methods {
        for &seed in &exp.config.seeds {
            let rel = format!("{}/seed-{seed}", method_slug(m));
            info!("{command}: {} seed {seed}", m.label());
            let run = exp.run(m, seed);
            if let Ok(r) = &run {
                write_job(&run_dir.join(&rel), r, &exp.config)?;
                matrices.push((m.label(), r.matrix.clone()));
            } else if let Err(e) = &run {
                error!("{} seed {seed} failed: {e}", m.label());
            }
            jobs.push(job_record(m, seed, rel, &run));
        }
    }
    let record = RunRecord {
        schema_version: exp.config.schema_version,
        name: exp.config.name.clone(),
        command: command.to_string(),
        config_hash: exp.config.hash(),
        task_names: exp.stream.names(),
        jobs,
        aggregates: aggregate(&matrices)?,
    };
    write_json(&run_dir.join("record.json"), &record)?;
    write_summary(&run_dir.join("summary.csv"), &record.task_names, &record.aggregates)?;
    write_json(&run_dir.join("timing.json"), &serde_json::json!({ "wall_secs": start.elapsed().as_secs_f64() }))?;
    Ok(record)
}

/// Table-1 layout: one row per method with the seed-mean final accuracies,
/// ACC and BWT (blank when undefined).
pub fn write_summary(path: &Path, tasks: &[String], aggs: &[MethodAggregate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string(), "seeds".to_string()];
    header.extend(tasks.iter().cloned());
    header.extend(["acc".to_string(), "bwt".to_string()]);
    w.write_record(&header)?;
    for a in aggs {
        let mut row = vec![a.method.clone(), a.seeds.to_string()];
        row.extend(a.final_row_mean.iter().map(|x| format!("{x:.2}")));
        row.push(format!("{:.2}", a.acc_mean));
        row.push(a.bwt_mean.map_or(String::new(), |b| format!("{b:.2}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn start_dir(cfg: &ExperimentConfig, raw: &str, out: &Path, suffix: &str, overwrite: bool) -> Result<PathBuf> {
    let name = if suffix.is_empty() { cfg.name.clone() } else { format!("{}-{suffix}", cfg.name) };
    let dir = out.join(name);
    prepare_run_dir(&dir, overwrite)?;
    fs::write(dir.join("config.toml"), raw)?;
    Ok(dir)
}

pub fn cmd_run(cfg: ExperimentConfig, raw: &str, out: &Path, overwrite: bool) -> Result<(PathBuf, RunRecord)> {
    if cfg.methods.is_empty() {
        return Err(Error::Config("run needs at least one [[methods]] entry".into()));
    }
    let exp = Experiment::new(cfg)?;
    let dir = start_dir(&exp.config, raw, out, "", overwrite)?;
    let methods = exp.config.methods.clone();
    let record = run_jobs(&exp, &methods, "run", &dir)?;
    Ok((dir, record))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub rho: f64,
    pub acc: f64,
    pub bwt: Option<f64>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Whether vanilla-replay ACC is nondecreasing in rho (reported, not required).
    pub vanilla_acc_monotone: Option<bool>,
}

pub fn sweep_report(record: &RunRecord, methods: &[MethodSpec]) -> SweepReport {
    let rows: Vec<SweepRow> = methods
        .iter()
        .filter_map(|m| {
            let a = record.aggregate(&m.label())?;
            Some(SweepRow { method: m.name.name().into(), rho: m.rho, acc: a.acc_mean, bwt: a.bwt_mean, seeds: a.seeds })
        })
        .collect();
    let mut van: Vec<&SweepRow> = rows.iter().filter(|r| r.method == MethodKind::VanillaReplay.name()).collect();
    van.sort_by(|a, b| a.rho.total_cmp(&b.rho));
    let vanilla_acc_monotone = (van.len() >= 2).then(|| van.windows(2).all(|w| w[1].acc >= w[0].acc));
    SweepReport { rows, vanilla_acc_monotone }
}

pub fn cmd_sweep(cfg: ExperimentConfig, raw: &str, out: &Path, overwrite: bool) -> Result<(PathBuf, SweepReport)> {
    let methods = cfg.sweep_methods();
    if methods.is_empty() {
        return Err(Error::Config("sweep needs at least one replay method in [[methods]]".into()));
    }
    let exp = Experiment::new(cfg)?;
    let dir = start_dir(&exp.config, raw, out, "sweep", overwrite)?;
    let record = run_jobs(&exp, &methods, "sweep", &dir)?;
    let report = sweep_report(&record, &methods);
    write_csv_rows(&dir.join("sweep.csv"), &report.rows)?;
    write_json(&dir.join("flags.json"), &serde_json::json!({ "vanilla_acc_monotone": report.vanilla_acc_monotone }))?;
    if report.vanilla_acc_monotone == Some(false) {
        warn!("vanilla-replay ACC is not monotone in rho");
    }
    Ok((dir, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub rho: f64,
    pub acc: f64,
    pub bwt: Option<f64>,
    /// First-boundary rollout pool hash per seed, `;`-joined.
    pub pool_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub pools_match: bool,
    pub top_beats_bottom_mean: Option<bool>,
    pub top_beats_bottom_per_seed: Vec<Option<bool>>,
}

pub fn cmd_ablate(cfg: ExperimentConfig, raw: &str, out: &Path, overwrite: bool) -> Result<(PathBuf, AblationReport)> {
    let exp = Experiment::new(cfg)?;
    let dir = start_dir(&exp.config, raw, out, "ablate", overwrite)?;
    let methods = exp.config.ablate_methods();
    let seeds = exp.config.seeds.clone();
    let mut jobs = Vec::new();
    let mut matrices = Vec::new();
    let mut hashes: Vec<Vec<String>> = vec![Vec::new(); 3];
    let mut per_seed_bwt = vec![Vec::new(); 3];
    for (k, m) in methods.iter().enumerate() {
        for &seed in &seeds {
            let rel = format!("{}/seed-{seed}", method_slug(m));
            let run = exp.run(m, seed);
            if let Ok(r) = &run {
                write_job(&dir.join(&rel), r, &exp.config)?;
                matrices.push((m.label(), r.matrix.clone()));
                hashes[k].push(r.stages.get(1).and_then(|s| s.pool.as_ref()).map_or(String::new(), |p| p.content_hash()));
                per_seed_bwt[k].push(bwt(&r.matrix));
            } else {
                per_seed_bwt[k].push(None);
            }
            jobs.push(job_record(m, seed, rel, &run));
        }
    }
    let aggs = aggregate(&matrices)?;
    let record = RunRecord {
        schema_version: exp.config.schema_version,
        name: exp.config.name.clone(),
        command: "ablate".into(),
        config_hash: exp.config.hash(),
        task_names: exp.stream.names(),
        jobs,
        aggregates: aggs,
    };
    write_json(&dir.join("record.json"), &record)?;
    write_summary(&dir.join("summary.csv"), &record.task_names, &record.aggregates)?;
    let rows: Vec<AblationRow> = ["vanilla", "opr-top", "opr-bottom"]
        .iter()
        .zip(&methods)
        .enumerate()
        .map(|(k, (v, m))| {
            let a = record.aggregate(&m.label());
            AblationRow {
                variant: v.to_string(),
                rho: m.rho,
                acc: a.map_or(f64::NAN, |a| a.acc_mean),
                bwt: a.and_then(|a| a.bwt_mean),
                pool_hash: hashes[k].join(";"),
            }
        })
        .collect();
    let pools_match = !hashes[1].is_empty() && hashes[1] == hashes[2];
    let top_beats_bottom_mean = match (rows[1].bwt, rows[2].bwt) {
        (Some(t), Some(b)) => Some(t > b),
        _ => None,
    };
    let top_beats_bottom_per_seed = per_seed_bwt[1]
        .iter()
        .zip(&per_seed_bwt[2])
        .map(|(t, b)| match (t, b) {
            (Some(t), Some(b)) => Some(t > b),
            _ => None,
        })
        .collect();
    let report = AblationReport { rows, pools_match, top_beats_bottom_mean, top_beats_bottom_per_seed };
    write_csv_rows(&dir.join("ablate.csv"), &report.rows)?;
    write_json(&dir.join("flags.json"), &report)?;
    if !report.pools_match {
        warn!("top and bottom runs saw different first-boundary pools");
    }
    Ok((dir, report))
}

/// SHA-256 over every file of a run directory (relative path and bytes,
/// sorted by path), skipping timing files.
pub fn content_hash(dir: &Path) -> Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                let rel = p.strip_prefix(base).expect("inside base").to_string_lossy().replace('\\', "/");
                out.push((rel, p));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, p) in files {
        if VOLATILE.iter().any(|v| rel.ends_with(v)) {
            continue;
        }
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(fs::read(&p)?);
        h.update([0]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
