//! Replay buffers: on-policy rollouts on historical prompts, scoring,
//! quantile filtering and per-task budget allocation, plus the gold-data
//! buffer used by vanilla replay.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::math::{self, derive_seed};
use crate::policy::{sample_response, PolicyParams, SamplerConfig, Token};
use crate::tasks::{HistoricalPromptPool, TaskDataset, TaskStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    Rule,
    SelfConfidence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferMode {
    TopScore,
    BottomScore,
    Gold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub task_id: usize,
    /// Position of the prompt in its task's historical pool.
    pub prompt_index: usize,
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    pub logprobs: Vec<f64>,
    pub score: f64,
    /// `None` until [`score_rollouts`] runs.
    pub scorer: Option<ScorerKind>,
}

/// One stage's rollouts, all from the same checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutPool {
    pub stage: usize,
    pub checkpoint: String,
    pub records: Vec<RolloutRecord>,
    /// `(task_id, prompt_index)` of prompts removed by the overlong filter.
    pub filtered: Vec<(usize, usize)>,
}

impl RolloutPool {
    pub fn task_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.task_id).collect();
        ids.dedup();
        ids
    }

    pub fn count_for(&self, task_id: usize) -> usize {
        self.records.iter().filter(|r| r.task_id == task_id).count()
    }

    /// Hash of the records, so runs sharing a pool can be compared.
    pub fn content_hash(&self) -> String {
        crate::tasks::hash_json(&self.records)
    }

    /// Per-task Spearman correlation between score and sequence
    /// log-probability; `None` where it is undefined.
    pub fn score_logprob_correlation(&self) -> Vec<(usize, Option<f64>)> {
        self.task_ids()
            .into_iter()
            .map(|t| {
                let recs: Vec<&RolloutRecord> = self.records.iter().filter(|r| r.task_id == t).collect();
                let s: Vec<f64> = recs.iter().map(|r| r.score).collect();
                let l: Vec<f64> = recs.iter().map(|r| r.logprobs.iter().sum()).collect();
                (t, math::spearman(&s, &l))
            })
            .collect()
    }
}

/// SHA-256 of the raw parameter bits.
pub fn params_hash(params: &PolicyParams) -> String {
    let mut h = Sha256::new();
    for v in &params.values {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Samples one response per historical prompt from `params`. Prompts longer
/// than the policy's prompt budget are dropped first.
pub fn rollout_historical(
    params: &PolicyParams,
    pool: &HistoricalPromptPool,
    sampler: &SamplerConfig,
    stage: usize,
    workers: usize,
) -> Result<RolloutPool> {
    sampler.validate()?;
    let max_prompt = params.arch.max_prompt();
    let mut jobs = Vec::new();
    let mut filtered = Vec::new();
    for (task_id, prompts) in &pool.tasks {
        for (idx, p) in prompts.iter().enumerate() {
            if p.len() > max_prompt {
                filtered.push((*task_id, idx));
            } else {
                jobs.push((*task_id, idx, p));
            }
        }
    }
    if !filtered.is_empty() {
        info!("overlong filter removed {} of {} prompts", filtered.len(), filtered.len() + jobs.len());
    }
    if jobs.is_empty() {
        return Err(invalid("historical prompt pool is empty after filtering"));
    }
    let run = |&(task_id, idx, prompt): &(usize, usize, &Vec<Token>)| -> Result<RolloutRecord> {
        let cfg = sampler.with_seed(derive_seed(sampler.seed, &[stage as u64, task_id as u64, idx as u64]));
        let y = sample_response(params, prompt, &cfg)?;
        Ok(RolloutRecord {
            task_id,
            prompt_index: idx,
            prompt: prompt.clone(),
            response: y.tokens,
            logprobs: y.logprobs,
            score: 0.0,
            scorer: None,
        })
    };
    let records = if workers > 1 {
        jobs.par_iter().map(run).collect::<Result<Vec<_>>>()?
    } else {
        jobs.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    Ok(RolloutPool { stage, checkpoint: params_hash(params), records, filtered })
}

/// Length-normalised log-probability of the sampled response.
pub fn self_confidence(logprobs: &[f64]) -> Option<f64> {
    (!logprobs.is_empty()).then(|| logprobs.iter().sum::<f64>() / logprobs.len() as f64)
}

pub fn score_rollouts(records: &mut [RolloutRecord], scorer: ScorerKind, stream: &TaskStream) -> Result<()> {
    if scorer == ScorerKind::SelfConfidence {
        return score_self_confidence(records);
    }
    for (i, r) in records.iter_mut().enumerate() {
        r.score = stream.rule_score(r.task_id, &r.prompt, &r.response)?;
        if !r.score.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        r.scorer = Some(scorer);
    }
    Ok(())
}

/// Self-confidence needs only the logprobs attached at sampling time.
pub fn score_self_confidence(records: &mut [RolloutRecord]) -> Result<()> {
    for (i, r) in records.iter_mut().enumerate() {
        if r.logprobs.len() != r.response.len() {
            return Err(Error::MissingLogprobs(i));
        }
        r.score = self_confidence(&r.logprobs).ok_or(Error::MissingLogprobs(i))?;
        if !r.score.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        r.scorer = Some(ScorerKind::SelfConfidence);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub counts: Vec<usize>,
    /// Budget that no task could absorb.
    pub dropped: usize,
}

/// Splits `b` equally over `tasks` prior tasks, remainder to the earliest,
/// then clips to `caps` and hands the excess out one item at a time
/// left-to-right among tasks still below their cap.
pub fn allocate_budget(b: i64, tasks: usize, caps: &[Option<usize>]) -> Result<Allocation> {
    if b < 0 {
        return Err(invalid(format!("negative budget {b}")));
    }
    if tasks == 0 {
        return Err(invalid("need at least one prior task"));
    }
    if !caps.is_empty() && caps.len() != tasks {
        return Err(invalid("caps must list every prior task"));
    }
    let b = b as usize;
    let cap = |i: usize| caps.get(i).copied().flatten().unwrap_or(usize::MAX);
    let mut counts: Vec<usize> = (0..tasks).map(|i| b / tasks + usize::from(i < b % tasks)).collect();
    let mut free = 0;
    for (i, c) in counts.iter_mut().enumerate() {
        if *c > cap(i) {
            free += *c - cap(i);
            *c = cap(i);
        }
    }
    while free > 0 {
        let mut gave = false;
        for (i, c) in counts.iter_mut().enumerate() {
            if free == 0 {
                break;
            }
            if *c < cap(i) {
                *c += 1;
                free -= 1;
                gave = true;
            }
        }
        if !gave {
            break;
        }
    }
    if free > 0 {
        warn!("replay budget: {free} items dropped, every prior task is at its cap");
    }
    Ok(Allocation { counts, dropped: free })
}

/// Number of replay items for a stage with `n_next` new examples.
pub fn replay_budget(rho: f64, n_next: usize) -> usize {
    (rho * n_next as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferItem {
    pub task_id: usize,
    pub prompt: Vec<Token>,
    /// Training target; gold items carry a trailing EOS.
    pub response: Vec<Token>,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    /// Stage whose training data this buffer is mixed into.
    pub stage: usize,
    pub mode: BufferMode,
    pub budget: usize,
    pub items: Vec<BufferItem>,
    /// Allocated per prior task, in task order.
    pub allocation: Vec<usize>,
    /// Lowest kept score per prior task (top-score mode only).
    pub thresholds: Vec<Option<f64>>,
    pub scorer: Option<ScorerKind>,
    /// Hash of the checkpoint that produced the responses, for OPR buffers.
    pub source_checkpoint: Option<String>,
    /// Indices into the pool's records of the kept items.
    #[serde(default)]
    pub kept: Vec<usize>,
}

impl ReplayBuffer {
    pub fn empty(stage: usize) -> Self {
        Self {
            stage,
            mode: BufferMode::Gold,
            budget: 0,
            items: Vec::new(),
            allocation: Vec::new(),
            thresholds: Vec::new(),
            scorer: None,
            source_checkpoint: None,
            kept: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count_for(&self, task_id: usize) -> usize {
        self.items.iter().filter(|i| i.task_id == task_id).count()
    }

    pub fn threshold_for(&self, task_id: usize) -> Option<f64> {
        self.thresholds.get(task_id).copied().flatten()
    }
}

/// Keeps `allocation[t]` records of each task, highest scores first in top
/// mode and lowest first in bottom mode. Ties keep pool order.
pub fn build_opr_buffer(pool: &RolloutPool, allocation: &[usize], mode: BufferMode, stage: usize) -> Result<ReplayBuffer> {
    if mode == BufferMode::Gold {
        return Err(invalid("gold buffers are built from datasets"));
    }
    let scorer = match pool.records.first() {
        Some(r) => r.scorer,
        None => return Err(invalid("empty rollout pool")),
    };
    let scorer = scorer.ok_or_else(|| invalid("rollouts must be scored before selection"))?;
    if pool.records.iter().any(|r| r.scorer != Some(scorer)) {
        return Err(invalid("rollout pool mixes scorers"));
    }
    let mut kept = Vec::new();
    let mut thresholds = vec![None; allocation.len()];
    for (task_id, &want) in allocation.iter().enumerate() {
        let mut idx: Vec<usize> = (0..pool.records.len()).filter(|&i| pool.records[i].task_id == task_id).collect();
        let score = |i: usize| pool.records[i].score;
        match mode {
            BufferMode::TopScore => idx.sort_by(|&a, &b| score(b).total_cmp(&score(a))),
            _ => idx.sort_by(|&a, &b| score(a).total_cmp(&score(b))),
        }
        if want > idx.len() {
            warn!("task {task_id}: allocation {want} exceeds {} rollouts, clipped", idx.len());
        }
        idx.truncate(want);
        if mode == BufferMode::TopScore {
            thresholds[task_id] = idx.last().map(|&i| score(i));
        }
        kept.extend(idx);
    }
    let items = kept
        .iter()
        .map(|&i| {
            let r = &pool.records[i];
            BufferItem { task_id: r.task_id, prompt: r.prompt.clone(), response: r.response.clone(), score: Some(r.score) }
        })
        .collect();
    Ok(ReplayBuffer {
        stage,
        mode,
        budget: allocation.iter().sum(),
        items,
        allocation: allocation.to_vec(),
        thresholds,
        scorer: Some(scorer),
        source_checkpoint: Some(pool.checkpoint.clone()),
        kept,
    })
}

/// Recomputes every kept item's loss under `params_prev` and checks
/// `loss <= -|y| * tau` through the equivalent `-loss / |y| >= tau`.
/// Returns the number of violations.
pub fn self_confidence_violations(buffer: &ReplayBuffer, params_prev: &PolicyParams) -> Result<usize> {
    let mut bad = 0;
    for item in &buffer.items {
        let tau = buffer.threshold_for(item.task_id).ok_or_else(|| invalid("buffer has no threshold"))?;
        let (total, _) = params_prev.sequence_logprob(&item.prompt, &item.response)?;
        let loss = -total;
        if -loss / item.response.len() as f64 >= tau {
            continue;
        }
        bad += 1;
    }
    Ok(bad)
}

/// Everything Algorithm-1 style replay produces at one stage boundary.
#[derive(Clone, Debug)]
pub struct OprStage {
    pub pool: RolloutPool,
    pub buffer: ReplayBuffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OprConfig {
    pub rho: f64,
    pub scorer: ScorerKind,
    pub mode: BufferMode,
    pub sampler: SamplerConfig,
}

/// Rolls out `params_prev` on the historical pool, scores, allocates
/// `floor(rho * n_next)` items and keeps the selected ones.
pub fn build_opr_stage(
    params_prev: &PolicyParams,
    pool: &HistoricalPromptPool,
    stream: &TaskStream,
    cfg: &OprConfig,
    n_next: usize,
    stage: usize,
    workers: usize,
) -> Result<OprStage> {
    let mut rollouts = rollout_historical(params_prev, pool, &cfg.sampler, stage, workers)?;
    score_rollouts(&mut rollouts.records, cfg.scorer, stream)?;
    let prior = pool.tasks.len();
    let caps: Vec<Option<usize>> = (0..prior).map(|t| Some(rollouts.count_for(t))).collect();
    let alloc = allocate_budget(replay_budget(cfg.rho, n_next) as i64, prior, &caps)?;
    let buffer = build_opr_buffer(&rollouts, &alloc.counts, cfg.mode, stage)?;
    if cfg.scorer == ScorerKind::SelfConfidence && cfg.mode == BufferMode::TopScore {
        let bad = self_confidence_violations(&buffer, params_prev)?;
        if bad > 0 {
            return Err(invalid(format!("{bad} kept items violate the self-confidence loss bound")));
        }
    }
    Ok(OprStage { pool: rollouts, buffer })
}

/// Gold replay: `floor(rho * n_next)` prior training pairs, sampled without
/// replacement per task after allocation.
pub fn build_vanilla_buffer(prior: &[TaskDataset], rho: f64, n_next: usize, seed: u64, stage: usize) -> Result<ReplayBuffer> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(invalid(format!("rho {rho} outside (0, 1]")));
    }
    if prior.is_empty() {
        return Err(invalid("no prior tasks"));
    }
    let caps: Vec<Option<usize>> = prior.iter().map(|d| Some(d.train.len())).collect();
    let alloc = allocate_budget(replay_budget(rho, n_next) as i64, prior.len(), &caps)?;
    let mut items = Vec::new();
    for (d, &k) in prior.iter().zip(&alloc.counts) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stage as u64, d.task.id as u64]));
        for i in sample(&mut rng, d.train.len(), k) {
            let e = &d.train[i];
            items.push(BufferItem {
                task_id: d.task.id,
                prompt: e.prompt.tokens.clone(),
                response: e.target(d.task.alphabet.vocab.eos),
                score: None,
            });
        }
    }
    Ok(ReplayBuffer {
        stage,
        mode: BufferMode::Gold,
        budget: alloc.counts.iter().sum(),
        items,
        allocation: alloc.counts,
        thresholds: vec![None; prior.len()],
        scorer: None,
        source_checkpoint: None,
        kept: Vec::new(),
    })
}

/// One line of a buffer snapshot file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub stage: usize,
    pub task_id: usize,
    pub prompt_tokens: Vec<Token>,
    pub response_tokens: Vec<Token>,
    pub score: Option<f64>,
    pub scorer_kind: String,
    pub kept: bool,
}

fn scorer_name(s: Option<ScorerKind>) -> String {
    match s {
        Some(ScorerKind::Rule) => "rule".into(),
        Some(ScorerKind::SelfConfidence) => "self-confidence".into(),
        None => "gold".into(),
    }
}

/// Snapshot lines: the full rollout pool with `kept` flags for OPR buffers,
/// the buffer items themselves for gold buffers.
pub fn snapshot_records(buffer: &ReplayBuffer, pool: Option<&RolloutPool>) -> Vec<SnapshotRecord> {
    match pool {
        Some(pool) => {
            let mut kept = vec![false; pool.records.len()];
            buffer.kept.iter().for_each(|&i| kept[i] = true);
            pool.records
                .iter()
                .zip(kept)
                .map(|(r, kept)| SnapshotRecord {
                    stage: buffer.stage,
                    task_id: r.task_id,
                    prompt_tokens: r.prompt.clone(),
                    response_tokens: r.response.clone(),
                    score: Some(r.score),
                    scorer_kind: scorer_name(r.scorer),
                    kept,
                })
                .collect()
        }
        None => buffer
            .items
            .iter()
            .map(|it| SnapshotRecord {
                stage: buffer.stage,
                task_id: it.task_id,
                prompt_tokens: it.prompt.clone(),
                response_tokens: it.response.clone(),
                score: it.score,
                scorer_kind: scorer_name(buffer.scorer),
                kept: true,
            })
            .collect(),
    }
}

pub fn write_snapshot(path: &Path, records: &[SnapshotRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Vec<SnapshotRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
