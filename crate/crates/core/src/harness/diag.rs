//! Numerical checks of the KL-shrinkage theory on small tabular policies.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DiagConfig, ExperimentConfig};
use super::runner::prepare_run_dir;
use crate::diagnostics::{kl_grad_identity_check, one_step_bound_check, DiagRecord, OneStepCheck, OneStepOptions};
use crate::error::Result;
use crate::math::derive_seed;
use crate::policy::{enumerate_responses, Arch, PolicyParams, SamplerConfig, TabularArch, Token};
use crate::replay::{
    build_opr_buffer, rollout_historical, score_self_confidence, self_confidence, BufferMode, ReplayBuffer, RolloutPool,
};
use crate::tasks::HistoricalPromptPool;

pub fn diag_arch(cfg: &DiagConfig) -> Arch {
    Arch::Tabular(TabularArch {
        vocab_size: cfg.vocab,
        buckets: cfg.buckets,
        max_prompt: 3,
        max_response: cfg.max_response,
        eos: Some((cfg.vocab - 1) as Token),
    })
}

pub fn diag_policy(cfg: &DiagConfig, scale: f64, seed: u64) -> Result<PolicyParams> {
    PolicyParams::random(diag_arch(cfg), scale, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `n` distinct length-3 prompts (base-`vocab` digits of 0..n, wrapping).
pub fn diag_prompts(n: usize, vocab: usize) -> Vec<Vec<Token>> {
    let space = vocab.pow(3);
    (0..n.min(space))
        .map(|i| (0..3).map(|d| ((i / vocab.pow(d)) % vocab) as Token).collect())
        .collect()
}

/// A self-confidence-scored pool of one temperature-1 rollout per prompt.
pub fn sc_pool(params: &PolicyParams, prompts: &[Vec<Token>], seed: u64) -> Result<RolloutPool> {
    let hist = HistoricalPromptPool { tasks: vec![(0, prompts.to_vec())] };
    let sampler = SamplerConfig { temperature: 1.0, top_p: 1.0, max_new_tokens: params.arch.max_response(), seed };
    let mut pool = rollout_historical(params, &hist, &sampler, 1, 1)?;
    score_self_confidence(&mut pool.records)?;
    Ok(pool)
}

fn keep_count(cfg: &DiagConfig, n: usize) -> usize {
    ((cfg.keep_fraction * n as f64).ceil() as usize).clamp(1, n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBoundIdentityRow {
    pub pool: usize,
    pub records: usize,
    pub kept: usize,
    pub tau: f64,
    /// Records with sampled score `>= tau`.
    pub quantile_selected: usize,
    /// Records with recomputed `loss <= -|y| tau`.
    pub loss_selected: usize,
    /// Size of the symmetric difference of the two sets.
    pub discrepancies: usize,
    pub kept_outside_predicate: usize,
}

/// For each random pool, compares the set picked by the sampled
/// self-confidence threshold with the set picked by the loss bound.
pub fn loss_bound_identity(cfg: &DiagConfig) -> Result<Vec<LossBoundIdentityRow>> {
    let prompts = diag_prompts(cfg.prompts, cfg.vocab);
    let mut rows = Vec::with_capacity(cfg.pools);
    for i in 0..cfg.pools {
        let seed = derive_seed(0xE03, &[i as u64]);
        let p = diag_policy(cfg, cfg.init_scale, seed)?;
        let pool = sc_pool(&p, &prompts, derive_seed(seed, &[1]))?;
        let k = keep_count(cfg, pool.records.len());
        let buffer = build_opr_buffer(&pool, &[k], BufferMode::TopScore, 1)?;
        let tau = buffer.thresholds[0].expect("top buffer records a threshold");
        let mut quantile = Vec::new();
        let mut bounded = Vec::new();
        for (j, r) in pool.records.iter().enumerate() {
            if r.score >= tau {
                quantile.push(j);
            }
            let loss = -p.sequence_logprob(&r.prompt, &r.response)?.0;
            if -loss / r.response.len() as f64 >= tau {
                bounded.push(j);
            }
        }
        let discrepancies = quantile.iter().filter(|j| !bounded.contains(j)).count()
            + bounded.iter().filter(|j| !quantile.contains(j)).count();
        rows.push(LossBoundIdentityRow {
            pool: i,
            records: pool.records.len(),
            kept: buffer.len(),
            tau,
            quantile_selected: quantile.len(),
            loss_selected: bounded.len(),
            discrepancies,
            kept_outside_predicate: buffer.kept.iter().filter(|j| !bounded.contains(j)).count(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientIdentityRow {
    pub seed: u64,
    pub tau: f64,
    pub params: usize,
    pub kept_mass: f64,
    pub max_rel_err: f64,
}

/// A threshold that keeps at least the best response of every prompt.
fn identity_tau(prev: &PolicyParams, prompts: &[Vec<Token>]) -> Result<f64> {
    let mut best = f64::INFINITY;
    let mut all = Vec::new();
    for x in prompts {
        let mut m = f64::NEG_INFINITY;
        for r in enumerate_responses(prev, x, prev.arch.max_response(), 1e5)? {
            let (_, per) = prev.sequence_logprob(x, &r.tokens)?;
            let s = self_confidence(&per).unwrap_or(f64::NEG_INFINITY);
            m = m.max(s);
            all.push(s);
        }
        best = best.min(m);
    }
    all.sort_by(f64::total_cmp);
    Ok(best.min(all[all.len() / 2]))
}

/// Analytic replay gradient under the filtered distribution against the
/// numerical gradient of `KL(q || pi_theta)`.
pub fn gradient_identity(cfg: &DiagConfig) -> Result<Vec<GradientIdentityRow>> {
    let prompts = diag_prompts(3, cfg.vocab);
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        let prev = diag_policy(cfg, 1.0, derive_seed(0xE05, &[s, 0]))?;
        let theta = diag_policy(cfg, 1.0, derive_seed(0xE05, &[s, 1]))?;
        let tau = identity_tau(&prev, &prompts)?;
        let c = kl_grad_identity_check(&theta, &prev, &prompts, tau, 1e5)?;
        rows.push(GradientIdentityRow { seed: s, tau, params: theta.len(), kept_mass: c.z, max_rel_err: c.max_rel_err });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub seed: u64,
    pub buffer: String,
    pub eta: f64,
    pub measured_kl: f64,
    pub bound: f64,
    pub satisfied: bool,
    pub l: f64,
    pub sigma_max: f64,
    pub power_residual: f64,
    pub ell_max: f64,
    pub ell_max_kind: String,
    pub g_norm_sq: f64,
}

#[derive(Clone, Debug)]
pub struct OneStepRun {
    pub seed: u64,
    pub top: OneStepCheck,
    pub bottom: OneStepCheck,
}

pub fn one_step_runs(cfg: &DiagConfig) -> Result<Vec<OneStepRun>> {
    let prompts = diag_prompts(cfg.prompts, cfg.vocab);
    let mut out = Vec::new();
    for &s in &cfg.seeds {
        let p = diag_policy(cfg, cfg.init_scale, derive_seed(0xE06, &[s]))?;
        let pool = sc_pool(&p, &prompts, derive_seed(0xE06, &[s, 1]))?;
        let k = keep_count(cfg, pool.records.len());
        let top = build_opr_buffer(&pool, &[k], BufferMode::TopScore, 1)?;
        let bottom = build_opr_buffer(&pool, &[k], BufferMode::BottomScore, 1)?;
        let opts = OneStepOptions { seed: s, ..OneStepOptions::default() };
        out.push(OneStepRun {
            seed: s,
            top: one_step_bound_check(&p, &top, &cfg.etas, &prompts, &opts)?,
            bottom: one_step_bound_check(&p, &bottom, &cfg.etas, &prompts, &opts)?,
        });
    }
    Ok(out)
}

pub fn bound_rows(runs: &[OneStepRun]) -> Vec<BoundRow> {
    let mut rows = Vec::new();
    for r in runs {
        for (name, c) in [("top", &r.top), ("bottom", &r.bottom)] {
            for b in &c.reports {
                rows.push(BoundRow {
                    seed: r.seed,
                    buffer: name.into(),
                    eta: b.eta,
                    measured_kl: b.measured.value,
                    bound: b.bound,
                    satisfied: b.satisfied,
                    l: b.l,
                    sigma_max: b.sigma_max,
                    power_residual: c.fisher.residual,
                    ell_max: b.ell_max,
                    ell_max_kind: c.ell_max_kind.clone(),
                    g_norm_sq: b.g_norm_sq,
                });
            }
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagSummary {
    pub loss_bound_discrepancies: usize,
    pub loss_bound_pools: usize,
    pub gradient_identity_max_rel_err: f64,
    pub top_slopes: Vec<Option<f64>>,
    pub top_bound_satisfied: bool,
    pub max_power_residual: f64,
    /// Seeds where the bottom buffer moved the policy more at the largest step.
    pub bottom_exceeds_top: usize,
    pub seeds: usize,
}

pub fn cmd_diag(cfg: &ExperimentConfig, raw: &str, out: &Path, overwrite: bool) -> Result<(PathBuf, DiagSummary)> {
    cfg.validate()?;
    let dir = out.join(format!("{}-diag", cfg.name));
    prepare_run_dir(&dir, overwrite)?;
    std::fs::write(dir.join("config.toml"), raw)?;
    let d = &cfg.diag;
    let eq3 = loss_bound_identity(d)?;
    let eq5 = gradient_identity(d)?;
    let runs = one_step_runs(d)?;
    let bounds = bound_rows(&runs);
    let mut w = csv::Writer::from_path(dir.join("loss_bound_identity.csv"))?;
    eq3.iter().try_for_each(|r| w.serialize(r))?;
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("gradient_identity.csv"))?;
    eq5.iter().try_for_each(|r| w.serialize(r))?;
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("bound_report.csv"))?;
    bounds.iter().try_for_each(|r| w.serialize(r))?;
    w.flush()?;
    let mut lines = String::new();
    for b in &bounds {
        let rec = DiagRecord {
            stage: 1,
            step: 1,
            quantity: format!("one_step_kl/{}/seed{}/eta{}", b.buffer, b.seed, b.eta),
            value: b.measured_kl,
            mode: "exact".into(),
            stderr: None,
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    std::fs::write(dir.join("diagnostics.jsonl"), lines)?;
    let last = |c: &OneStepCheck| c.reports.last().map_or(0.0, |r| r.measured.value);
    let summary = DiagSummary {
        loss_bound_discrepancies: eq3.iter().map(|r| r.discrepancies).sum(),
        loss_bound_pools: eq3.len(),
        gradient_identity_max_rel_err: eq5.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
        top_slopes: runs.iter().map(|r| r.top.slope).collect(),
        top_bound_satisfied: runs.iter().all(|r| r.top.reports.iter().all(|b| b.satisfied)),
        max_power_residual: runs.iter().map(|r| r.top.fisher.residual).fold(0.0, f64::max),
        bottom_exceeds_top: runs.iter().filter(|r| last(&r.bottom) > last(&r.top)).count(),
        seeds: runs.len(),
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok((dir, summary))
}

/// Buffers of a pool at the configured keep fraction, for callers that
/// want to run their own checks.
pub fn top_and_bottom(cfg: &DiagConfig, pool: &RolloutPool) -> Result<(ReplayBuffer, ReplayBuffer)> {
    let k = keep_count(cfg, pool.records.len());
    Ok((
        build_opr_buffer(pool, &[k], BufferMode::TopScore, 1)?,
        build_opr_buffer(pool, &[k], BufferMode::BottomScore, 1)?,
    ))
}
