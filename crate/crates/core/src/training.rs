//! Per-stage optimisation and the continual loop over a task stream.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{mean_ce, seq_kl, KlEstimate, KlMode, WindowRecord};
use crate::error::{invalid, Error, Result};
use crate::math::{self, derive_seed};
use crate::metrics::{evaluate_task, AccuracyMatrix};
use crate::policy::{sample_token, Arch, PolicyParams, SamplerConfig, Token};
use crate::replay::{
    build_opr_stage, build_vanilla_buffer, params_hash, BufferMode, OprConfig, ReplayBuffer, RolloutPool, ScorerKind,
};
use crate::tasks::{HistoricalPromptPool, TaskDataset, TaskStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Epochs per task, one entry per stage.
    pub epochs: Vec<usize>,
    /// Multiplier applied to every entry of `epochs`.
    pub epoch_scale: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            optimizer: Optimizer::adam(),
            epochs: vec![5, 3, 7, 5, 3, 5, 5, 7],
            epoch_scale: 3.0,
            batch_size: 32,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self, n_tasks: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("step size must be positive"));
        }
        if self.epochs.len() != n_tasks {
            return Err(invalid(format!("{} epoch entries for {n_tasks} tasks", self.epochs.len())));
        }
        if !(self.epoch_scale > 0.0) {
            return Err(invalid("epoch_scale must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn epochs_for(&self, stage: usize) -> usize {
        ((self.epochs[stage] as f64 * self.epoch_scale).round() as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    SeqSft,
    VanillaReplay,
    Sdft,
    Mtl,
    OprRu,
    OprSc,
    OprLowScore,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::SeqSft => "seq-sft",
            MethodKind::VanillaReplay => "vanilla-replay",
            MethodKind::Sdft => "sdft",
            MethodKind::Mtl => "mtl",
            MethodKind::OprRu => "opr-ru",
            MethodKind::OprSc => "opr-sc",
            MethodKind::OprLowScore => "opr-low-score",
        }
    }

    pub fn is_opr(self) -> bool {
        matches!(self, MethodKind::OprRu | MethodKind::OprSc | MethodKind::OprLowScore)
    }

    pub fn uses_replay(self) -> bool {
        self.is_opr() || self == MethodKind::VanillaReplay
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdftContexts {
    /// KL on the teacher-forced gold contexts of the batch.
    TeacherForced,
    /// KL on responses sampled from the student.
    StudentRollout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: MethodKind,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub sdft_beta: f64,
    #[serde(default = "teacher_forced")]
    pub sdft_contexts: SdftContexts,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

fn teacher_forced() -> SdftContexts {
    SdftContexts::TeacherForced
}

impl MethodSpec {
    fn base(name: MethodKind, rho: f64) -> Self {
        Self { name, rho, sdft_beta: 0.0, sdft_contexts: SdftContexts::TeacherForced, sampler: SamplerConfig::default() }
    }

    pub fn seq_sft() -> Self {
        Self::base(MethodKind::SeqSft, 0.0)
    }

    pub fn mtl() -> Self {
        Self::base(MethodKind::Mtl, 0.0)
    }

    pub fn vanilla(rho: f64) -> Self {
        Self::base(MethodKind::VanillaReplay, rho)
    }

    pub fn opr_ru(rho: f64) -> Self {
        Self::base(MethodKind::OprRu, rho)
    }

    pub fn opr_sc(rho: f64) -> Self {
        Self::base(MethodKind::OprSc, rho)
    }

    pub fn opr_low_score(rho: f64) -> Self {
        Self::base(MethodKind::OprLowScore, rho)
    }

    pub fn sdft(beta: f64) -> Self {
        Self { sdft_beta: beta, ..Self::base(MethodKind::Sdft, 0.0) }
    }

    /// `name` plus the budget for replay methods, e.g. `opr-ru@0.05`.
    pub fn label(&self) -> String {
        if self.name.uses_replay() {
            format!("{}@{}", self.name.name(), self.rho)
        } else {
            self.name.name().to_string()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.uses_replay() {
            if !(self.rho > 0.0 && self.rho <= 1.0) {
                return Err(invalid(format!("{}: rho {} outside (0, 1]", self.name.name(), self.rho)));
            }
        } else if self.rho != 0.0 {
            return Err(invalid(format!("{} takes no replay budget (rho = 0)", self.name.name())));
        }
        match self.name {
            MethodKind::Sdft if !(self.sdft_beta > 0.0) => Err(invalid("sdft needs beta > 0")),
            _ if self.sdft_beta < 0.0 => Err(invalid("sdft_beta must be nonnegative")),
            _ => self.sampler.validate(),
        }
    }

    pub fn opr_config(&self) -> Option<OprConfig> {
        let (scorer, mode) = match self.name {
            MethodKind::OprRu => (ScorerKind::Rule, BufferMode::TopScore),
            MethodKind::OprSc => (ScorerKind::SelfConfidence, BufferMode::TopScore),
            MethodKind::OprLowScore => (ScorerKind::Rule, BufferMode::BottomScore),
            _ => return None,
        };
        Some(OprConfig { rho: self.rho, scorer, mode, sampler: self.sampler.clone() })
    }
}

/// Objective minimised in a stage.
#[derive(Clone, Debug)]
pub enum LossKind<'a> {
    CrossEntropy,
    Sdft { teacher: &'a PolicyParams, beta: f64, contexts: SdftContexts },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub replay_fraction_of_batch: f64,
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub params: PolicyParams,
    pub trace: Vec<LossPoint>,
    pub wall_secs: f64,
    pub steps: usize,
}

/// Settings for one stage of optimisation.
#[derive(Clone, Debug)]
pub struct StageConfig {
    pub lr: f64,
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Clone, Debug)]
pub struct TrainItem {
    pub prompt: Vec<Token>,
    pub target: Vec<Token>,
    pub replay: bool,
}

struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptState {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, opt: Optimizer, lr: f64, params: &mut [f64], grad: &[f64]) {
        match opt {
            Optimizer::Sgd => math::axpy(-lr, grad, params),
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Task examples (targets with EOS) followed by buffer items.
pub fn stage_items(task_data: &TaskDataset, buffer: &ReplayBuffer) -> Vec<TrainItem> {
    let eos = task_data.task.alphabet.vocab.eos;
    let mut items: Vec<TrainItem> = task_data
        .train
        .iter()
        .map(|e| TrainItem { prompt: e.prompt.tokens.clone(), target: e.target(eos), replay: false })
        .collect();
    items.extend(
        buffer
            .items
            .iter()
            .map(|b| TrainItem { prompt: b.prompt.clone(), target: b.response.clone(), replay: true }),
    );
    items
}

/// Trains on `D ∪ B`: both are treated as ordinary examples.
pub fn train_stage(
    params: &PolicyParams,
    task_data: &TaskDataset,
    buffer: &ReplayBuffer,
    cfg: &StageConfig,
    loss: &LossKind,
    probe: Option<&mut dyn FnMut(usize, &PolicyParams) -> Result<()>>,
) -> Result<StageResult> {
    train_items(params, stage_items(task_data, buffer), cfg, loss, probe)
}

/// The optimisation loop shared by every method. `probe` sees the parameters
/// before the first step (step 0) and after every step.
pub fn train_items(
    params: &PolicyParams,
    mut items: Vec<TrainItem>,
    cfg: &StageConfig,
    loss: &LossKind,
    mut probe: Option<&mut dyn FnMut(usize, &PolicyParams) -> Result<()>>,
) -> Result<StageResult> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let start = Instant::now();
    let mut p = params.clone();
    let mut opt = OptState::new(p.len());
    let mut trace = Vec::new();
    let mut step = 0;
    let mut initial: Option<f64> = None;
    if let Some(f) = probe.as_mut() {
        f(0, &p)?;
    }
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64]));
        items.shuffle(&mut rng);
        for chunk in items.chunks(cfg.batch_size) {
            let batch: Vec<(&[Token], &[Token])> = chunk.iter().map(|i| (i.prompt.as_slice(), i.target.as_slice())).collect();
            let (l, g) = match loss {
                LossKind::CrossEntropy => p.ce_loss_and_grad_workers(&batch, cfg.workers)?,
                LossKind::Sdft { teacher, beta, contexts } => {
                    let seed = derive_seed(cfg.seed, &[0x5DF7, step as u64]);
                    sdft_loss_and_grad_with(&p, teacher, &batch, *beta, *contexts, seed, cfg.workers)?
                }
            };
            let init = *initial.get_or_insert(l);
            if !l.is_finite() || l > 1e3 * init.max(1e-12) {
                return Err(Error::Diverged { step, loss: l, initial: init });
            }
            opt.step(cfg.optimizer, cfg.lr, &mut p.values, &g);
            step += 1;
            let replay = chunk.iter().filter(|i| i.replay).count() as f64 / chunk.len() as f64;
            trace.push(LossPoint { step, epoch, loss: l, replay_fraction_of_batch: replay });
            if let Some(f) = probe.as_mut() {
                f(step, &p)?;
            }
        }
    }
    if let Some(i) = p.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    Ok(StageResult { params: p, trace, wall_secs: start.elapsed().as_secs_f64(), steps: step })
}

/// Cross-entropy plus `beta` times the per-token mean of
/// `KL(pi_theta || pi_teacher)` on the batch's teacher-forced contexts.
pub fn sdft_loss_and_grad(
    params: &PolicyParams,
    teacher: &PolicyParams,
    batch: &[(&[Token], &[Token])],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    sdft_loss_and_grad_with(params, teacher, batch, beta, SdftContexts::TeacherForced, 0, 1)
}

pub fn sdft_loss_and_grad_with(
    params: &PolicyParams,
    teacher: &PolicyParams,
    batch: &[(&[Token], &[Token])],
    beta: f64,
    contexts: SdftContexts,
    seed: u64,
    workers: usize,
) -> Result<(f64, Vec<f64>)> {
    if !(beta >= 0.0) {
        return Err(invalid(format!("sdft beta {beta} must be nonnegative")));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    params.same_arch(teacher)?;
    // KL contexts per sample: the gold target or a student sample.
    let ctx: Vec<Vec<Token>> = match contexts {
        SdftContexts::TeacherForced => batch.iter().map(|(_, r)| r.to_vec()).collect(),
        SdftContexts::StudentRollout => batch
            .iter()
            .enumerate()
            .map(|(i, (p, _))| student_context(params, p, derive_seed(seed, &[i as u64])))
            .collect::<Result<_>>()?,
    };
    let n = batch.len() as f64;
    let tokens: usize = ctx.iter().map(Vec::len).sum();
    let kl_w = if tokens > 0 { beta / tokens as f64 } else { 0.0 };
    let v = params.vocab_size();
    let one = |k: usize, g: &mut [f64]| -> Result<(f64, f64)> {
        let (prompt, target) = batch[k];
        let ce = params.sample_loss_grad(prompt, target, g)?;
        if !ce.is_finite() {
            return Err(Error::NonFinite { index: k });
        }
        if beta == 0.0 || ctx[k].is_empty() {
            return Ok((ce, 0.0));
        }
        let teacher_logits = forced_logits(teacher, prompt, &ctx[k])?;
        let mut kl_sum = 0.0;
        let mut lp = vec![0.0; v];
        let mut lq = vec![0.0; v];
        params.teacher_forced(prompt, &ctx[k], Some(g), |t, z, dz| {
            math::log_softmax_into(z, &mut lp);
            math::log_softmax_into(&teacher_logits[t], &mut lq);
            let kl = math::categorical_kl(&lp, &lq);
            kl_sum += kl;
            // The cross-entropy term is already accumulated above with weight 1;
            // rescale the KL gradient so the total matches `ce/n + kl_w * kl` after the /n below.
            for i in 0..v {
                let p = lp[i].exp();
                dz[i] = n * kl_w * p * ((lp[i] - lq[i]) - kl);
            }
        })?;
        Ok((ce, kl_sum))
    };
    let parts: Vec<Result<(f64, f64, Vec<f64>)>> = if workers > 1 && batch.len() > 1 {
        let size = batch.len().div_ceil(workers);
        (0..batch.len())
            .collect::<Vec<_>>()
            .par_chunks(size)
            .map(|ks| {
                let mut g = vec![0.0; params.len()];
                let (mut ce, mut kl) = (0.0, 0.0);
                for &k in ks {
                    let (c, d) = one(k, &mut g)?;
                    ce += c;
                    kl += d;
                }
                Ok((ce, kl, g))
            })
            .collect()
    } else {
        let mut g = vec![0.0; params.len()];
        let (mut ce, mut kl) = (0.0, 0.0);
        let mut res = Ok(());
        for k in 0..batch.len() {
            match one(k, &mut g) {
                Ok((c, d)) => {
                    ce += c;
                    kl += d;
                }
                Err(e) => {
                    res = Err(e);
                    break;
                }
            }
        }
        vec![res.map(|_| (ce, kl, g))]
    };
    let mut grad = vec![0.0; params.len()];
    let (mut ce, mut kl) = (0.0, 0.0);
    for part in parts {
        let (c, d, g) = part?;
        ce += c;
        kl += d;
        math::axpy(1.0, &g, &mut grad);
    }
    grad.iter_mut().for_each(|x| *x /= n);
    Ok((ce / n + kl_w * kl, grad))
}

/// Logits of `params` at every position of `response` given `prompt`.
fn forced_logits(params: &PolicyParams, prompt: &[Token], response: &[Token]) -> Result<Vec<Vec<f64>>> {
    let mut cur = params.cursor(prompt)?;
    let mut out = Vec::with_capacity(response.len());
    for (t, &tok) in response.iter().enumerate() {
        let mut z = vec![0.0; params.vocab_size()];
        params.cursor_logits(&cur, &mut z)?;
        out.push(z);
        if t + 1 < response.len() {
            params.cursor_push(&mut cur, tok)?;
        }
    }
    Ok(out)
}

fn student_context(params: &PolicyParams, prompt: &[Token], seed: u64) -> Result<Vec<Token>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = params.cursor(prompt)?;
    let mut z = vec![0.0; params.vocab_size()];
    let mut out = Vec::new();
    let max = params.arch.max_response();
    while out.len() < max {
        params.cursor_logits(&cur, &mut z)?;
        let tok = sample_token(&z, 1.0, 1.0, &mut rng);
        out.push(tok);
        if Some(tok) == params.arch.eos() || out.len() == max {
            break;
        }
        params.cursor_push(&mut cur, tok)?;
    }
    Ok(out)
}

/// Windowed KL/forgetting measurement during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Steps per window.
    pub window: usize,
    /// Historical prompts per prior task used for KL.
    pub prompts_per_task: usize,
    /// Held-out examples per prior task used for forgetting.
    pub eval_per_task: usize,
    pub mc_samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { window: 50, prompts_per_task: 32, eval_per_task: 32, mc_samples: 1 }
    }
}

/// Everything needed to run one method on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub arch: Arch,
    pub init_scale: f64,
    pub seed: u64,
    pub workers: usize,
    pub probe: Option<ProbeConfig>,
}

#[derive(Clone, Debug)]
pub struct StageRecord {
    pub stage: usize,
    pub trace: Vec<LossPoint>,
    pub wall_secs: f64,
    pub buffer: Option<ReplayBuffer>,
    pub pool: Option<RolloutPool>,
    /// `KL(pi_end || pi_start)` of the stage on historical prompts.
    pub stage_kl: Option<KlEstimate>,
    pub windows: Vec<WindowRecord>,
    pub checkpoint: PolicyParams,
}

#[derive(Clone, Debug)]
pub struct ContinualRun {
    pub method: MethodSpec,
    pub matrix: AccuracyMatrix,
    pub stages: Vec<StageRecord>,
    pub final_params: PolicyParams,
    pub initial_params: PolicyParams,
}

mod labels {
    pub const INIT: u64 = 0x1417;
    pub const SHUFFLE: u64 = 0x5A0F;
    pub const ROLLOUT: u64 = 0x7011;
    pub const VANILLA: u64 = 0x7A11;
    pub const PROBE: u64 = 0x9806;
}

pub fn initial_params(settings: &RunSettings) -> Result<PolicyParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, &[labels::INIT]));
    PolicyParams::random(settings.arch.clone(), settings.init_scale, &mut rng)
}

fn check_fits(stream: &TaskStream, arch: &Arch) -> Result<()> {
    let t = &stream.tasks[0];
    if arch.vocab_size() != stream.alphabet.vocab.size {
        return Err(Error::ArchMismatch(format!(
            "policy vocab {} vs task vocab {}",
            arch.vocab_size(),
            stream.alphabet.vocab.size
        )));
    }
    if arch.max_prompt() < t.max_prompt_tokens || arch.max_response() < t.max_response_tokens {
        return Err(Error::ArchMismatch("policy context is smaller than the task budgets".into()));
    }
    if arch.eos() != Some(stream.alphabet.vocab.eos) {
        return Err(Error::ArchMismatch("policy must stop at the task EOS".into()));
    }
    Ok(())
}

fn evaluate_row(params: &PolicyParams, datasets: &[TaskDataset], workers: usize) -> Result<Vec<f64>> {
    let one = |d: &TaskDataset| evaluate_task(params, &d.task, &d.eval, 1);
    if workers > 1 {
        datasets.par_iter().map(one).collect()
    } else {
        datasets.iter().map(one).collect()
    }
}

struct WindowProbe {
    stage: usize,
    window: usize,
    prompts: Vec<Vec<Token>>,
    per_task_eval: Vec<Vec<(Vec<Token>, Vec<Token>)>>,
    mc_samples: usize,
    seed: u64,
    start_step: usize,
    start_params: Option<PolicyParams>,
    start_ce: Vec<f64>,
    records: Vec<WindowRecord>,
}

impl WindowProbe {
    fn new(stage: usize, datasets: &[TaskDataset], cfg: &ProbeConfig, seed: u64) -> Self {
        let eos = datasets[0].task.alphabet.vocab.eos;
        let prompts = datasets
            .iter()
            .flat_map(|d| d.train.iter().take(cfg.prompts_per_task).map(|e| e.prompt.tokens.clone()))
            .collect();
        let per_task_eval = datasets
            .iter()
            .map(|d| d.eval.iter().take(cfg.eval_per_task).map(|e| (e.prompt.tokens.clone(), e.target(eos))).collect())
            .collect();
        Self {
            stage,
            window: cfg.window.max(1),
            prompts,
            per_task_eval,
            mc_samples: cfg.mc_samples.max(1),
            seed,
            start_step: 0,
            start_params: None,
            start_ce: Vec::new(),
            records: Vec::new(),
        }
    }

    fn ce(&self, p: &PolicyParams) -> Result<Vec<f64>> {
        self.per_task_eval.iter().map(|items| mean_ce(p, items)).collect()
    }

    fn observe(&mut self, step: usize, p: &PolicyParams, last: bool) -> Result<()> {
        if self.start_params.is_none() {
            self.start_ce = self.ce(p)?;
            self.start_params = Some(p.clone());
            self.start_step = step;
            return Ok(());
        }
        if !(last || step - self.start_step >= self.window) || step == self.start_step {
            return Ok(());
        }
        let start = self.start_params.as_ref().unwrap();
        let w = self.records.len() as u64;
        let mode = KlMode::MonteCarlo { samples: self.mc_samples, seed: derive_seed(self.seed, &[self.stage as u64, w]) };
        let kl = seq_kl(p, start, &self.prompts, mode)?;
        let ce = self.ce(p)?;
        let per_task: Vec<f64> = ce.iter().zip(&self.start_ce).map(|(a, b)| a - b).collect();
        self.records.push(WindowRecord {
            stage: self.stage,
            start_step: self.start_step,
            end_step: step,
            kl: kl.value,
            kl_stderr: kl.stderr,
            forgetting: math::mean(&per_task),
            per_task_forgetting: per_task,
        });
        self.start_params = Some(p.clone());
        self.start_ce = ce;
        self.start_step = step;
        Ok(())
    }
}

/// Trains the stream stage by stage, evaluating every seen task after each
/// stage. `datasets` must be the stream's generated datasets.
pub fn run_continual(
    stream: &TaskStream,
    datasets: &[TaskDataset],
    method: &MethodSpec,
    optim: &OptimConfig,
    settings: &RunSettings,
) -> Result<ContinualRun> {
    method.validate()?;
    optim.validate(stream.len())?;
    check_fits(stream, &settings.arch)?;
    if datasets.len() != stream.len() {
        return Err(invalid("one dataset per task required"));
    }
    if method.name == MethodKind::Mtl {
        return run_mtl(stream, datasets, optim, settings);
    }
    let initial = initial_params(settings)?;
    let mut params = initial.clone();
    let mut matrix = AccuracyMatrix::new(stream.names());
    let mut stages = Vec::with_capacity(stream.len());
    let seed = settings.seed;
    for j in 0..stream.len() {
        let n_next = datasets[j].train.len();
        let (buffer, pool) = if j == 0 || !method.name.uses_replay() {
            (ReplayBuffer::empty(j), None)
        } else if let Some(cfg) = method.opr_config() {
            let mut cfg = cfg;
            cfg.sampler.seed = derive_seed(seed, &[labels::ROLLOUT, cfg.sampler.seed]);
            let hist = HistoricalPromptPool::from_datasets(&datasets[..j]);
            let s = build_opr_stage(&params, &hist, stream, &cfg, n_next, j, settings.workers)?;
            if s.buffer.source_checkpoint.as_deref() != Some(params_hash(&params).as_str()) {
                return Err(invalid("replay buffer was not generated by the latest checkpoint"));
            }
            (s.buffer, Some(s.pool))
        } else {
            let b = build_vanilla_buffer(&datasets[..j], method.rho, n_next, derive_seed(seed, &[labels::VANILLA]), j)?;
            (b, None)
        };
        let cfg = StageConfig {
            lr: optim.lr,
            optimizer: optim.optimizer,
            epochs: optim.epochs_for(j),
            batch_size: optim.batch_size,
            seed: derive_seed(seed, &[labels::SHUFFLE, j as u64]),
            workers: settings.workers,
        };
        let teacher = params.clone();
        let loss = match method.name {
            MethodKind::Sdft => LossKind::Sdft { teacher: &teacher, beta: method.sdft_beta, contexts: method.sdft_contexts },
            _ => LossKind::CrossEntropy,
        };
        let mut probe = match (&settings.probe, j) {
            (Some(pc), j) if j > 0 => Some(WindowProbe::new(j, &datasets[..j], pc, derive_seed(seed, &[labels::PROBE]))),
            _ => None,
        };
        let total_steps = {
            let n = n_next + buffer.len();
            cfg.epochs * n.div_ceil(cfg.batch_size)
        };
        let has_probe = probe.is_some();
        let result = {
            let mut hook = |step: usize, p: &PolicyParams| -> Result<()> {
                match probe.as_mut() {
                    Some(w) => w.observe(step, p, step == total_steps),
                    None => Ok(()),
                }
            };
            let hook_ref: Option<&mut dyn FnMut(usize, &PolicyParams) -> Result<()>> =
                if has_probe { Some(&mut hook) } else { None };
            train_stage(&params, &datasets[j], &buffer, &cfg, &loss, hook_ref)?
        };
        let stage_kl = match &probe {
            Some(w) => {
                let mode = KlMode::MonteCarlo {
                    samples: w.mc_samples,
                    seed: derive_seed(seed, &[labels::PROBE, j as u64, u64::MAX]),
                };
                Some(seq_kl(&result.params, &params, &w.prompts, mode)?)
            }
            None => None,
        };
        params = result.params;
        let row = evaluate_row(&params, &datasets[..=j], settings.workers)?;
        info!("{} stage {}: {:?}", method.label(), j + 1, row.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>());
        matrix.push_row(row)?;
        debug!("stage {j} took {:.2}s over {} steps", result.wall_secs, result.steps);
        stages.push(StageRecord {
            stage: j,
            trace: result.trace,
            wall_secs: result.wall_secs,
            buffer: method.name.uses_replay().then_some(buffer).filter(|b| j > 0 || !b.is_empty()),
            pool,
            stage_kl,
            windows: probe.map(|w| w.records).unwrap_or_default(),
            checkpoint: params.clone(),
        });
    }
    Ok(ContinualRun { method: method.clone(), matrix, stages, final_params: params, initial_params: initial })
}

/// Joint training on every task's data in one stage. The epoch count is the
/// mean of the per-task schedule, so the number of example visits matches a
/// continual run over equally sized tasks.
pub fn run_mtl(stream: &TaskStream, datasets: &[TaskDataset], optim: &OptimConfig, settings: &RunSettings) -> Result<ContinualRun> {
    optim.validate(stream.len())?;
    check_fits(stream, &settings.arch)?;
    let initial = initial_params(settings)?;
    let items: Vec<TrainItem> = datasets.iter().flat_map(|d| stage_items(d, &ReplayBuffer::empty(0))).collect();
    let epochs = (0..stream.len()).map(|j| optim.epochs_for(j)).sum::<usize>() as f64 / stream.len() as f64;
    let cfg = StageConfig {
        lr: optim.lr,
        optimizer: optim.optimizer,
        epochs: (epochs.round() as usize).max(1),
        batch_size: optim.batch_size,
        seed: derive_seed(settings.seed, &[labels::SHUFFLE, 0]),
        workers: settings.workers,
    };
    let result = train_items(&initial, items, &cfg, &LossKind::CrossEntropy, None)?;
    let mut matrix = AccuracyMatrix::new(stream.names());
    matrix.push_row(evaluate_row(&result.params, datasets, settings.workers)?)?;
    Ok(ContinualRun {
        method: MethodSpec::mtl(),
        matrix,
        stages: vec![StageRecord {
            stage: 0,
            trace: result.trace,
            wall_secs: result.wall_secs,
            buffer: None,
            pool: None,
            stage_kl: None,
            windows: Vec::new(),
            checkpoint: result.params.clone(),
        }],
        final_params: result.params,
        initial_params: initial,
    })
}
