//! Numerical checks of the replay theory: sequence KL between policies, the
//! per-sample loss bound of self-confidence buffers, the self-bounding
//! gradient inequality, the KL-gradient identity under the filtered
//! distribution, and the one-step Fisher bound.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{self, derive_seed};
use crate::policy::{
    enumerate_responses, fisher_scores, gaussian, response_space_size, sample_token, weighted_fvp, Cursor,
    FisherMode, PolicyParams, Token,
};
use crate::replay::{self_confidence, BufferMode, ReplayBuffer, ScorerKind};

pub const DEFAULT_ENUMERATION_CAP: f64 = 2e5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum KlMode {
    Exact { cap: f64 },
    MonteCarlo { samples: usize, seed: u64 },
}

impl KlMode {
    pub fn exact() -> Self {
        KlMode::Exact { cap: DEFAULT_ENUMERATION_CAP }
    }

    pub fn label(&self) -> &'static str {
        match self {
            KlMode::Exact { .. } => "exact",
            KlMode::MonteCarlo { .. } => "monte-carlo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub mode: String,
    pub stderr: Option<f64>,
    pub prompts: usize,
}

/// `E_x KL(pi_a(.|x) || pi_b(.|x))` over whole responses, through the chain
/// rule `sum_t E_{ctx ~ pi_a} KL(pi_a(.|ctx_t) || pi_b(.|ctx_t))`.
pub fn seq_kl(a: &PolicyParams, b: &PolicyParams, prompts: &[Vec<Token>], mode: KlMode) -> Result<KlEstimate> {
    a.same_arch(b)?;
    if prompts.is_empty() {
        return Err(invalid("no prompts given"));
    }
    let max_len = a.arch.max_response();
    match mode {
        KlMode::Exact { cap } => {
            let states = response_space_size(a.vocab_size(), max_len, a.arch.eos());
            if states > cap {
                return Err(Error::EnumerationCap { states, cap });
            }
            let mut total = 0.0;
            for x in prompts {
                let mut acc = 0.0;
                kl_walk(a, b, &a.cursor(x)?, &b.cursor(x)?, 1.0, 0, max_len, &mut acc)?;
                total += acc;
            }
            Ok(KlEstimate { value: total / prompts.len() as f64, mode: "exact".into(), stderr: None, prompts: prompts.len() })
        }
        KlMode::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(invalid("mc_samples must be positive"));
            }
            let per_prompt: Vec<Vec<f64>> = prompts
                .par_iter()
                .enumerate()
                .map(|(i, x)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
                    (0..samples).map(|_| kl_sample(a, b, x, max_len, &mut rng)).collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?;
            let draws: Vec<f64> = per_prompt.into_iter().flatten().collect();
            let stderr = math::std_dev(&draws) / (draws.len() as f64).sqrt();
            Ok(KlEstimate {
                value: math::mean(&draws),
                mode: "monte-carlo".into(),
                stderr: Some(stderr),
                prompts: prompts.len(),
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn kl_walk(
    a: &PolicyParams,
    b: &PolicyParams,
    ca: &Cursor,
    cb: &Cursor,
    mass: f64,
    depth: usize,
    max_len: usize,
    acc: &mut f64,
) -> Result<()> {
    let v = a.vocab_size();
    let (mut za, mut zb) = (vec![0.0; v], vec![0.0; v]);
    a.cursor_logits(ca, &mut za)?;
    b.cursor_logits(cb, &mut zb)?;
    let (la, lb) = (math::log_softmax(&za), math::log_softmax(&zb));
    *acc += mass * math::categorical_kl(&la, &lb);
    if depth + 1 == max_len {
        return Ok(());
    }
    for tok in 0..v as Token {
        if Some(tok) == a.arch.eos() {
            continue;
        }
        let p = la[tok as usize].exp();
        if p == 0.0 {
            continue;
        }
        let (mut na, mut nb) = (ca.clone(), cb.clone());
        a.cursor_push(&mut na, tok)?;
        b.cursor_push(&mut nb, tok)?;
        kl_walk(a, b, &na, &nb, mass * p, depth + 1, max_len, acc)?;
    }
    Ok(())
}

fn kl_sample(a: &PolicyParams, b: &PolicyParams, x: &[Token], max_len: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let v = a.vocab_size();
    let (mut ca, mut cb) = (a.cursor(x)?, b.cursor(x)?);
    let (mut za, mut zb) = (vec![0.0; v], vec![0.0; v]);
    let mut total = 0.0;
    for t in 0..max_len {
        a.cursor_logits(&ca, &mut za)?;
        b.cursor_logits(&cb, &mut zb)?;
        total += math::categorical_kl(&math::log_softmax(&za), &math::log_softmax(&zb));
        let tok = sample_token(&za, 1.0, 1.0, rng);
        if Some(tok) == a.arch.eos() || t + 1 == max_len {
            break;
        }
        a.cursor_push(&mut ca, tok)?;
        b.cursor_push(&mut cb, tok)?;
    }
    Ok(total)
}

/// Mean teacher-forced cross-entropy of `items` (prompt, target).
pub fn mean_ce(params: &PolicyParams, items: &[(Vec<Token>, Vec<Token>)]) -> Result<f64> {
    if items.is_empty() {
        return Err(invalid("no items"));
    }
    let mut total = 0.0;
    for (p, r) in items {
        total -= params.sequence_logprob(p, r)?.0;
    }
    Ok(total / items.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemBound {
    pub task_id: usize,
    pub loss: f64,
    pub len: usize,
    /// `-|y| * tau` for the item's task.
    pub bound: f64,
    pub satisfied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBoundReport {
    pub items: Vec<ItemBound>,
    pub violations: usize,
    /// Largest kept loss (empirical).
    pub empirical_ell_max: f64,
    /// Largest `-|y| tau` over kept items.
    pub bound_ell_max: f64,
    pub self_confidence: bool,
}

/// Recomputes each kept item's loss under `params_prev` and compares it with
/// `-|y| tau`. For self-confidence buffers the comparison is made as
/// `-loss / |y| >= tau`, the form in which the selection was made.
pub fn verify_loss_bound(buffer: &ReplayBuffer, params_prev: &PolicyParams) -> Result<LossBoundReport> {
    if buffer.mode != BufferMode::TopScore {
        return Err(invalid("loss bounds need a top-score buffer"));
    }
    if buffer.is_empty() {
        return Err(invalid("empty buffer"));
    }
    let sc = buffer.scorer == Some(ScorerKind::SelfConfidence);
    let mut items = Vec::with_capacity(buffer.len());
    for it in &buffer.items {
        let tau = buffer.threshold_for(it.task_id).ok_or_else(|| invalid(format!("task {} has no threshold", it.task_id)))?;
        let (total, _) = params_prev.sequence_logprob(&it.prompt, &it.response)?;
        let len = it.response.len();
        let loss = -total;
        let bound = -(len as f64) * tau;
        let satisfied = if sc { -loss / len as f64 >= tau } else { loss <= bound };
        items.push(ItemBound { task_id: it.task_id, loss, len, bound, satisfied });
    }
    let fold_max = |f: fn(&ItemBound) -> f64| items.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    Ok(LossBoundReport {
        violations: items.iter().filter(|i| !i.satisfied).count(),
        empirical_ell_max: fold_max(|i| i.loss),
        bound_ell_max: fold_max(|i| i.bound),
        self_confidence: sc,
        items,
    })
}

/// Largest per-item loss of a buffer under `params`.
pub fn empirical_ell_max(buffer: &ReplayBuffer, params: &PolicyParams) -> Result<f64> {
    let mut m = f64::NEG_INFINITY;
    for it in &buffer.items {
        m = m.max(-params.sequence_logprob(&it.prompt, &it.response)?.0);
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayGradient {
    pub g: Vec<f64>,
    pub g_norm_sq: f64,
    pub mean_loss: f64,
    pub ell_max: f64,
    pub l: f64,
    /// `|g|^2 <= 2 L E[loss] <= 2 L ell_max`.
    pub chain_holds: bool,
}

pub fn replay_gradient(params: &PolicyParams, buffer: &ReplayBuffer, l: f64) -> Result<ReplayGradient> {
    if buffer.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch: Vec<(&[Token], &[Token])> =
        buffer.items.iter().map(|i| (i.prompt.as_slice(), i.response.as_slice())).collect();
    let (mean_loss, g) = params.ce_loss_and_grad(&batch)?;
    let g_norm_sq = math::norm_sq(&g);
    let ell_max = empirical_ell_max(buffer, params)?;
    let chain_holds = g_norm_sq <= 2.0 * l * mean_loss && mean_loss <= ell_max + 1e-12;
    Ok(ReplayGradient { g, g_norm_sq, mean_loss, ell_max, l, chain_holds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub max_rel_err: f64,
    /// Probability mass of the kept set, averaged over prompts.
    pub z: f64,
}

/// Filtered distribution `q(y|x) = pi_prev(y|x) 1[r(x,y) >= tau] / Z(x)`
/// with the self-confidence score, for every prompt.
pub fn filtered_distribution(
    params_prev: &PolicyParams,
    prompts: &[Vec<Token>],
    tau: f64,
    cap: f64,
) -> Result<Vec<Vec<(Vec<Token>, f64)>>> {
    let mut out = Vec::with_capacity(prompts.len());
    for x in prompts {
        let all = enumerate_responses(params_prev, x, params_prev.arch.max_response(), cap)?;
        let mut kept = Vec::new();
        for r in all {
            let (_, per) = params_prev.sequence_logprob(x, &r.tokens)?;
            if self_confidence(&per).unwrap_or(f64::NEG_INFINITY) >= tau {
                kept.push((r.tokens, r.logprob.exp()));
            }
        }
        let z: f64 = kept.iter().map(|(_, p)| p).sum();
        if kept.is_empty() || z <= 0.0 {
            return Err(Error::EmptySupport);
        }
        kept.iter_mut().for_each(|(_, p)| *p /= z);
        out.push(kept);
    }
    Ok(out)
}

/// `E_x KL(q(.|x) || pi_theta(.|x))` for an enumerated `q`.
pub fn kl_q_pi(params: &PolicyParams, prompts: &[Vec<Token>], q: &[Vec<(Vec<Token>, f64)>]) -> Result<f64> {
    let mut total = 0.0;
    for (x, qx) in prompts.iter().zip(q) {
        for (y, w) in qx {
            if *w > 0.0 {
                total += w * (w.ln() - params.sequence_logprob(x, y)?.0);
            }
        }
    }
    Ok(total / prompts.len() as f64)
}

/// Ridders' polynomial extrapolation of central differences.
pub fn ridders_derivative<F: FnMut(f64) -> Result<f64>>(mut f: F, h0: f64) -> Result<(f64, f64)> {
    const N: usize = 10;
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    let mut a = [[0.0f64; N]; N];
    let mut h = h0;
    a[0][0] = (f(h)? - f(-h)?) / (2.0 * h);
    let mut best = a[0][0];
    let mut err = f64::MAX;
    for i in 1..N {
        h /= CON;
        a[0][i] = (f(h)? - f(-h)?) / (2.0 * h);
        let mut fac = CON2;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON2;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok((best, err))
}

/// Compares `E_x E_{y~q}[grad loss(theta; x, y)]` (analytic) with the
/// numerical gradient of `E_x KL(q || pi_theta)`, where `q` is built from
/// `params_prev` with threshold `tau`. Relative errors use a floor of 1e-6.
pub fn kl_grad_identity_check(
    params: &PolicyParams,
    params_prev: &PolicyParams,
    prompts: &[Vec<Token>],
    tau: f64,
    cap: f64,
) -> Result<IdentityCheck> {
    params.same_arch(params_prev)?;
    let q = filtered_distribution(params_prev, prompts, tau, cap)?;
    let mut lhs = vec![0.0; params.len()];
    let mut g = vec![0.0; params.len()];
    for (x, qx) in prompts.iter().zip(&q) {
        for (y, w) in qx {
            g.iter_mut().for_each(|v| *v = 0.0);
            params.sample_loss_grad(x, y, &mut g)?;
            math::axpy(*w / prompts.len() as f64, &g, &mut lhs);
        }
    }
    let mut rhs = vec![0.0; params.len()];
    let mut probe = params.clone();
    for k in 0..params.len() {
        let base = params.values[k];
        let (d, _) = ridders_derivative(
            |h| {
                probe.values[k] = base + h;
                kl_q_pi(&probe, prompts, &q)
            },
            0.1,
        )?;
        probe.values[k] = base;
        rhs[k] = d;
    }
    let max_rel_err = lhs
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6))
        .fold(0.0, f64::max);
    let z = {
        let mut total = 0.0;
        for x in prompts {
            for r in enumerate_responses(params_prev, x, params_prev.arch.max_response(), cap)? {
                let (_, per) = params_prev.sequence_logprob(x, &r.tokens)?;
                if self_confidence(&per).unwrap_or(f64::NEG_INFINITY) >= tau {
                    total += r.logprob.exp();
                }
            }
        }
        total / prompts.len() as f64
    };
    Ok(IdentityCheck { lhs, rhs, max_rel_err, z })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessEstimate {
    pub l: f64,
    pub probes: usize,
    /// Gradient-difference ratio of each probe, in probe order.
    pub ratios: Vec<f64>,
    pub method: String,
}

/// Largest `|grad(theta + d) - grad(theta)| / |d|` over probe directions of
/// length `delta_scale`. The first probe follows the gradient, the next three
/// are random, and the rest continue a finite-difference power iteration on
/// the Hessian from the previous probe. Each probe sequence is a prefix of
/// the longer ones, so more probes never lower the estimate.
pub fn estimate_smoothness_with<G>(theta: &[f64], mut grad: G, probes: usize, delta_scale: f64, seed: u64) -> Result<SmoothnessEstimate>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if probes < 8 {
        return Err(invalid("smoothness estimation needs at least 8 probes"));
    }
    if !(delta_scale > 0.0) {
        return Err(invalid("delta_scale must be positive"));
    }
    let g0 = grad(theta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(probes);
    let mut shifted = theta.to_vec();
    let mut last_diff: Vec<f64> = Vec::new();
    for i in 0..probes {
        let mut u: Vec<f64> = if i == 0 && math::norm_sq(&g0) > 0.0 {
            g0.clone()
        } else if i >= 4 && math::norm_sq(&last_diff) > 0.0 {
            last_diff.clone()
        } else {
            (0..theta.len()).map(|_| gaussian(&mut rng)).collect()
        };
        let n = math::norm_sq(&u).sqrt();
        u.iter_mut().for_each(|x| *x *= delta_scale / n);
        for ((s, t), d) in shifted.iter_mut().zip(theta).zip(&u) {
            *s = t + d;
        }
        let g1 = grad(&shifted)?;
        last_diff = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
        ratios.push(math::norm_sq(&last_diff).sqrt() / delta_scale);
    }
    let l = ratios.iter().copied().fold(0.0, f64::max);
    if !(l > 0.0) {
        return Err(invalid("loss is flat along every probe"));
    }
    Ok(SmoothnessEstimate { l, probes, ratios, method: "max-gradient-difference-ratio".into() })
}

/// Smoothness of the mean cross-entropy on `batch`.
pub fn estimate_smoothness(
    params: &PolicyParams,
    batch: &[(Vec<Token>, Vec<Token>)],
    probes: usize,
    delta_scale: f64,
    seed: u64,
) -> Result<SmoothnessEstimate> {
    let refs: Vec<(&[Token], &[Token])> = batch.iter().map(|(p, r)| (p.as_slice(), r.as_slice())).collect();
    let mut probe = params.clone();
    estimate_smoothness_with(
        &params.values,
        |theta| {
            probe.values.copy_from_slice(theta);
            Ok(probe.ce_loss_and_grad(&refs)?.1)
        },
        probes,
        delta_scale,
        seed,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherEstimate {
    pub sigma_max: f64,
    pub iterations: usize,
    pub residual: f64,
    pub vector: Vec<f64>,
}

/// Power iteration for the top eigenpair of `F = sum_k w_k s_k s_k^T`,
/// stopping once `|Fv - sigma v| / sigma < tol`.
pub fn power_iteration(scores: &[(f64, Vec<f64>)], dim: usize, max_iters: usize, tol: f64, seed: u64) -> Result<FisherEstimate> {
    if max_iters < 10 {
        return Err(invalid("power iteration needs at least 10 steps"));
    }
    for attempt in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[attempt]));
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
        let n = math::norm_sq(&v).sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        let mut fv = weighted_fvp(scores, &v);
        if math::norm_sq(&fv) == 0.0 {
            continue;
        }
        let mut sigma = 0.0;
        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        while iterations < max_iters {
            iterations += 1;
            let n = math::norm_sq(&fv).sqrt();
            if n == 0.0 {
                break;
            }
            v = fv.iter().map(|x| x / n).collect();
            fv = weighted_fvp(scores, &v);
            sigma = math::dot(&v, &fv);
            let r: f64 = fv.iter().zip(&v).map(|(a, b)| (a - sigma * b).powi(2)).sum();
            residual = r.sqrt() / sigma.abs().max(f64::MIN_POSITIVE);
            if iterations >= 10 && residual < tol {
                break;
            }
        }
        return Ok(FisherEstimate { sigma_max: sigma.max(0.0), iterations, residual, vector: v });
    }
    if scores.iter().all(|(w, s)| *w == 0.0 || math::norm_sq(s) == 0.0) {
        return Ok(FisherEstimate { sigma_max: 0.0, iterations: 0, residual: 0.0, vector: vec![0.0; dim] });
    }
    Err(invalid("power iteration start vectors had no overlap with the Fisher range"))
}

pub fn fisher_sigma_max(
    params: &PolicyParams,
    prompts: &[Vec<Token>],
    mode: FisherMode,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<FisherEstimate> {
    let scores = fisher_scores(params, prompts, mode)?;
    power_iteration(&scores, params.len(), max_iters, tol, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub eta: f64,
    pub ell_max: f64,
    pub g_norm_sq: f64,
    pub l: f64,
    pub sigma_max: f64,
    pub measured: KlEstimate,
    pub bound: f64,
    pub satisfied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepCheck {
    pub reports: Vec<BoundReport>,
    /// Least-squares slope of `ln KL` against `ln eta`.
    pub slope: Option<f64>,
    pub smoothness: SmoothnessEstimate,
    pub fisher: FisherEstimate,
    pub ell_max: f64,
    pub ell_max_kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepOptions {
    pub kl_mode: KlMode,
    pub fisher_mode: FisherMode,
    pub power_iters: usize,
    pub power_tol: f64,
    pub probes: usize,
    pub delta_scale: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for OneStepOptions {
    fn default() -> Self {
        Self {
            kl_mode: KlMode::exact(),
            fisher_mode: FisherMode::Exact { cap: DEFAULT_ENUMERATION_CAP },
            power_iters: 5000,
            power_tol: 1e-6,
            probes: 16,
            delta_scale: 1e-3,
            tolerance: 0.05,
            seed: 0,
        }
    }
}

/// For each step size takes `theta = theta_prev - eta g` with the replay
/// gradient `g` and compares the measured KL on historical prompts with
/// `L sigma_max eta^2 ell_max`.
pub fn one_step_bound_check(
    params_prev: &PolicyParams,
    buffer: &ReplayBuffer,
    etas: &[f64],
    prompts_hist: &[Vec<Token>],
    opts: &OneStepOptions,
) -> Result<OneStepCheck> {
    if etas.is_empty() || etas.iter().any(|e| !(*e > 0.0)) {
        return Err(invalid("step sizes must be positive"));
    }
    let batch: Vec<(Vec<Token>, Vec<Token>)> = buffer.items.iter().map(|i| (i.prompt.clone(), i.response.clone())).collect();
    let smoothness = estimate_smoothness(params_prev, &batch, opts.probes, opts.delta_scale, opts.seed)?;
    let rg = replay_gradient(params_prev, buffer, smoothness.l)?;
    let fisher = fisher_sigma_max(
        params_prev,
        prompts_hist,
        opts.fisher_mode,
        opts.power_iters,
        opts.power_tol,
        derive_seed(opts.seed, &[1]),
    )?;
    let (ell_max, ell_max_kind) = if buffer.scorer == Some(ScorerKind::SelfConfidence) && buffer.mode == BufferMode::TopScore {
        (verify_loss_bound(buffer, params_prev)?.bound_ell_max, "self-confidence-bound")
    } else {
        (rg.ell_max, "empirical")
    };
    let mut reports = Vec::with_capacity(etas.len());
    for &eta in etas {
        let theta = params_prev.displaced(-eta, &rg.g);
        let measured = seq_kl(&theta, params_prev, prompts_hist, opts.kl_mode)?;
        let bound = smoothness.l * fisher.sigma_max * eta * eta * ell_max;
        let satisfied = measured.value <= bound * (1.0 + opts.tolerance);
        reports.push(BoundReport {
            eta,
            ell_max,
            g_norm_sq: rg.g_norm_sq,
            l: smoothness.l,
            sigma_max: fisher.sigma_max,
            measured,
            bound,
            satisfied,
        });
    }
    let slope = loglog_slope(&reports.iter().map(|r| (r.eta, r.measured.value)).collect::<Vec<_>>());
    Ok(OneStepCheck { reports, slope, smoothness, fisher, ell_max, ell_max_kind: ell_max_kind.into() })
}

/// Least-squares slope of `ln y` on `ln x` over points with positive `y`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// KL and forgetting measured over one window of training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub stage: usize,
    pub start_step: usize,
    pub end_step: usize,
    /// `KL(pi_end || pi_start)` on historical prompts.
    pub kl: f64,
    pub kl_stderr: Option<f64>,
    /// Increase of held-out cross-entropy on prior tasks, pooled.
    pub forgetting: f64,
    /// The same increase per prior task.
    pub per_task_forgetting: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pairs: Vec<(f64, f64)>,
    pub spearman: Option<f64>,
    /// Spearman of window KL against each task's forgetting.
    pub per_task: Vec<(usize, Option<f64>)>,
}

pub fn forgetting_vs_kl_probe(windows: &[WindowRecord]) -> CorrelationReport {
    let pairs: Vec<(f64, f64)> = windows.iter().map(|w| (w.kl, w.forgetting)).collect();
    let (k, f): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let n_tasks = windows.iter().map(|w| w.per_task_forgetting.len()).max().unwrap_or(0);
    let per_task = (0..n_tasks)
        .map(|t| {
            let (kk, ff): (Vec<f64>, Vec<f64>) = windows
                .iter()
                .filter_map(|w| w.per_task_forgetting.get(t).map(|&d| (w.kl, d)))
                .unzip();
            (t, math::spearman(&kk, &ff))
        })
        .collect();
    CorrelationReport { spearman: math::spearman(&k, &f), pairs, per_task }
}

/// One line of a diagnostics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagRecord {
    pub stage: usize,
    pub step: usize,
    pub quantity: String,
    pub value: f64,
    pub mode: String,
    pub stderr: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{sample_response, Arch, SamplerConfig, TabularArch};
    use crate::replay::{build_opr_buffer, score_rollouts, RolloutPool, RolloutRecord};
    use crate::tasks::{build_stream, StreamConfig};

    fn tab(vocab: usize, buckets: usize, max_response: usize, eos: Option<Token>) -> Arch {
        Arch::Tabular(TabularArch { vocab_size: vocab, buckets, max_prompt: 4, max_response, eos })
    }

    fn random(arch: Arch, scale: f64, seed: u64) -> PolicyParams {
        PolicyParams::random(arch, scale, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn kl_self_is_zero() {
        let p = random(tab(4, 5, 3, Some(3)), 1.0, 0);
        let k = seq_kl(&p, &p, &[vec![0, 1], vec![2]], KlMode::exact()).unwrap();
        assert_eq!(k.value, 0.0);
        let mc = seq_kl(&p, &p, &[vec![0, 1]], KlMode::MonteCarlo { samples: 10, seed: 1 }).unwrap();
        assert!(mc.value >= -1e-9);
    }

    #[test]
    fn kl_single_position_closed_form() {
        // Bias-only tabular rows: the bias row (index B = 1) holds the logits.
        let arch = tab(2, 1, 1, None);
        let mut a = PolicyParams::zeros(arch.clone()).unwrap();
        a.values[2] = 0.7f64.ln();
        a.values[3] = 0.3f64.ln();
        let b = PolicyParams::zeros(arch).unwrap();
        let k = seq_kl(&a, &b, &[vec![0]], KlMode::exact()).unwrap();
        let want = 0.7 * 1.4f64.ln() + 0.3 * 0.6f64.ln();
        assert!((k.value - want).abs() < 1e-12);
        assert!((k.value - 0.0823).abs() < 5e-5);
    }

    #[test]
    fn kl_exact_matches_sequence_enumeration() {
        let a = random(tab(3, 5, 3, Some(2)), 1.0, 1);
        let b = random(tab(3, 5, 3, Some(2)), 1.0, 2);
        let x = vec![0, 1];
        let k = seq_kl(&a, &b, &[x.clone()], KlMode::exact()).unwrap();
        let direct: f64 = enumerate_responses(&a, &x, 3, 1e4)
            .unwrap()
            .iter()
            .map(|r| r.logprob.exp() * (r.logprob - b.sequence_logprob(&x, &r.tokens).unwrap().0))
            .sum();
        assert!((k.value - direct).abs() < 1e-12);
    }

    #[test]
    fn kl_monte_carlo_agrees_with_exact() {
        let a = random(tab(4, 5, 3, Some(3)), 1.0, 3);
        let b = random(tab(4, 5, 3, Some(3)), 1.0, 4);
        let prompts = vec![vec![0, 1], vec![2, 2]];
        let exact = seq_kl(&a, &b, &prompts, KlMode::exact()).unwrap();
        let mc = seq_kl(&a, &b, &prompts, KlMode::MonteCarlo { samples: 5000, seed: 5 }).unwrap();
        assert!((mc.value - exact.value).abs() < 3.0 * mc.stderr.unwrap(), "{} vs {}", mc.value, exact.value);
    }

    #[test]
    fn exact_kl_cap_error() {
        let a = random(tab(6, 3, 3, None), 1.0, 0);
        assert!(matches!(seq_kl(&a, &a, &[vec![0]], KlMode::Exact { cap: 10.0 }), Err(Error::EnumerationCap { .. })));
    }

    /// Scored self-confidence pool from a tabular policy.
    fn sc_pool(p: &PolicyParams, prompts: &[Vec<Token>], seed: u64) -> RolloutPool {
        let stream = build_stream(&StreamConfig::toy()).unwrap();
        let cfg = SamplerConfig { temperature: 1.0, top_p: 1.0, max_new_tokens: 4, seed };
        let mut records = Vec::new();
        for (i, x) in prompts.iter().enumerate() {
            let y = sample_response(p, x, &cfg.with_seed(derive_seed(seed, &[i as u64]))).unwrap();
            records.push(RolloutRecord {
                task_id: 0,
                prompt_index: i,
                prompt: x.clone(),
                response: y.tokens,
                logprobs: y.logprobs,
                score: 0.0,
                scorer: None,
            });
        }
        score_rollouts(&mut records, ScorerKind::SelfConfidence, &stream).unwrap();
        RolloutPool { stage: 1, checkpoint: String::new(), records, filtered: vec![] }
    }

    fn prompts(n: usize) -> Vec<Vec<Token>> {
        (0..n).map(|i| vec![(i % 4) as Token, ((i / 4) % 4) as Token, (i % 3) as Token]).collect()
    }

    #[test]
    fn loss_bound_on_self_confidence_buffers() {
        let p = random(tab(4, 7, 3, Some(3)), 1.0, 6);
        let pool = sc_pool(&p, &prompts(40), 1);
        let top = build_opr_buffer(&pool, &[10], BufferMode::TopScore, 1).unwrap();
        let rep = verify_loss_bound(&top, &p).unwrap();
        assert_eq!(rep.violations, 0);
        assert!(rep.self_confidence);
        let bottom = build_opr_buffer(&pool, &[10], BufferMode::BottomScore, 1).unwrap();
        assert!(empirical_ell_max(&bottom, &p).unwrap() > rep.empirical_ell_max);
        assert!(verify_loss_bound(&bottom, &p).is_err());

        let single = build_opr_buffer(&pool, &[1], BufferMode::TopScore, 1).unwrap();
        let r = verify_loss_bound(&single, &p).unwrap();
        let it = &r.items[0];
        assert!((it.loss - it.bound).abs() <= 1e-12 * it.loss.abs().max(1.0));
    }

    #[test]
    fn replay_gradient_fixtures() {
        let p = random(tab(4, 7, 3, Some(3)), 1.0, 7);
        let pool = sc_pool(&p, &prompts(20), 2);
        let buf = build_opr_buffer(&pool, &[8], BufferMode::TopScore, 1).unwrap();
        let rg = replay_gradient(&p, &buf, 1.0).unwrap();
        let batch: Vec<(&[Token], &[Token])> = buf.items.iter().map(|i| (i.prompt.as_slice(), i.response.as_slice())).collect();
        assert_eq!(rg.g, p.ce_loss_and_grad(&batch).unwrap().1);
        assert!(matches!(replay_gradient(&p, &ReplayBuffer::empty(1), 1.0), Err(Error::EmptyBatch)));
    }

    #[test]
    fn fitted_buffer_has_small_gradient_and_loss() {
        let mut p = random(tab(4, 31, 2, Some(3)), 0.5, 8);
        let pool = sc_pool(&p, &prompts(6), 3);
        let buf = build_opr_buffer(&pool, &[3], BufferMode::TopScore, 1).unwrap();
        let batch: Vec<(&[Token], &[Token])> = buf.items.iter().map(|i| (i.prompt.as_slice(), i.response.as_slice())).collect();
        for _ in 0..3000 {
            let (_, g) = p.ce_loss_and_grad(&batch).unwrap();
            math::axpy(-2.0, &g, &mut p.values);
        }
        let rg = replay_gradient(&p, &buf, 1.0).unwrap();
        assert!(rg.g_norm_sq < 1e-6 && rg.ell_max < 1e-2, "{} {}", rg.g_norm_sq, rg.ell_max);
    }

    #[test]
    fn self_bounding_chain_on_random_pairs() {
        let mut holds = 0;
        for s in 0..20 {
            let p = random(tab(4, 5, 2, Some(3)), 1.0, 100 + s);
            let pool = sc_pool(&p, &prompts(12), s);
            let buf = build_opr_buffer(&pool, &[6], BufferMode::TopScore, 1).unwrap();
            let batch: Vec<(Vec<Token>, Vec<Token>)> = buf.items.iter().map(|i| (i.prompt.clone(), i.response.clone())).collect();
            let l = estimate_smoothness(&p, &batch, 16, 1e-3, s).unwrap().l;
            if replay_gradient(&p, &buf, l).unwrap().chain_holds {
                holds += 1;
            }
        }
        assert_eq!(holds, 20);
    }

    #[test]
    fn identity_unfiltered_at_prev_is_zero() {
        let p = random(tab(4, 5, 2, None), 1.0, 9);
        let c = kl_grad_identity_check(&p, &p, &[vec![0, 1]], f64::NEG_INFINITY, 1e4).unwrap();
        assert!(c.lhs.iter().all(|x| x.abs() < 1e-12));
        assert!(c.rhs.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn identity_holds_off_prev() {
        let prev = random(tab(4, 5, 2, None), 1.0, 10);
        let theta = random(tab(4, 5, 2, None), 1.0, 11);
        let prompts = vec![vec![0, 1], vec![3]];
        let q = filtered_distribution(&prev, &prompts, -1.2, 1e4).unwrap();
        assert!(q.iter().all(|qx| qx.len() < 16));
        let c = kl_grad_identity_check(&theta, &prev, &prompts, -1.2, 1e4).unwrap();
        assert!(c.max_rel_err < 1e-8, "{}", c.max_rel_err);
    }

    #[test]
    fn empty_support_is_an_error() {
        let p = random(tab(4, 5, 2, None), 1.0, 12);
        assert!(matches!(kl_grad_identity_check(&p, &p, &[vec![0]], 1.0, 1e4), Err(Error::EmptySupport)));
    }

    #[test]
    fn smoothness_of_quadratic() {
        let lambda = 3.5;
        let theta = vec![0.3, -1.0, 2.0, 0.5];
        let est = estimate_smoothness_with(&theta, |t| Ok(t.iter().map(|x| lambda * x).collect()), 8, 1e-3, 0).unwrap();
        assert!((est.l - lambda).abs() < 1e-6);
        let more = estimate_smoothness_with(&theta, |t| Ok(t.iter().map(|x| lambda * x).collect()), 16, 1e-3, 0).unwrap();
        assert!(more.l >= est.l);
        assert!(estimate_smoothness_with(&theta, |t| Ok(t.to_vec()), 4, 1e-3, 0).is_err());
    }

    #[test]
    fn smoothness_is_stable_under_halving() {
        let p = random(tab(4, 5, 2, Some(3)), 1.0, 13);
        let batch = vec![(vec![0, 1], vec![2, 1]), (vec![2], vec![3])];
        let a = estimate_smoothness(&p, &batch, 16, 1e-3, 4).unwrap().l;
        let b = estimate_smoothness(&p, &batch, 16, 5e-4, 4).unwrap().l;
        assert!((a - b).abs() < 0.1 * a);
        let c = estimate_smoothness(&p, &batch, 32, 1e-3, 4).unwrap().l;
        assert!(c >= a);
    }

    #[test]
    fn sigma_of_fair_coin_is_half() {
        let p = [0.5, 0.5];
        let scores: Vec<(f64, Vec<f64>)> = (0..2)
            .map(|k| (p[k], (0..2).map(|j| f64::from(j == k) - p[j]).collect()))
            .collect();
        let est = power_iteration(&scores, 2, 100, 1e-12, 0).unwrap();
        assert!((est.sigma_max - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sigma_bounds_rayleigh_quotients() {
        let p = random(tab(4, 5, 2, None), 1.0, 14);
        let pr = prompts(3);
        let scores = fisher_scores(&p, &pr, FisherMode::Exact { cap: 1e4 }).unwrap();
        let est = power_iteration(&scores, p.len(), 5000, 1e-9, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let v: Vec<f64> = (0..p.len()).map(|_| gaussian(&mut rng)).collect();
            let rq = math::dot(&v, &weighted_fvp(&scores, &v)) / math::norm_sq(&v);
            assert!(est.sigma_max >= rq - 1e-12);
        }
    }

    #[test]
    fn slope_of_exact_square() {
        let pts: Vec<(f64, f64)> = [1e-4, 1e-3, 1e-2].iter().map(|&e| (e, 3.0 * e * e)).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_step_kl_vanishes_with_eta_and_bottom_moves_more() {
        // A peaked policy, as after fine-tuning.
        let p = random(tab(4, 5, 2, None), 3.0, 15);
        let pr = prompts(48);
        let pool = sc_pool(&p, &pr, 4);
        let top = build_opr_buffer(&pool, &[12], BufferMode::TopScore, 1).unwrap();
        let bottom = build_opr_buffer(&pool, &[12], BufferMode::BottomScore, 1).unwrap();
        let opts = OneStepOptions::default();
        let etas = [1e-6, 1e-3];
        let t = one_step_bound_check(&p, &top, &etas, &pr, &opts).unwrap();
        assert!(t.reports[0].measured.value < 1e-10);
        let b = one_step_bound_check(&p, &bottom, &etas, &pr, &opts).unwrap();
        assert!(b.reports[1].measured.value > t.reports[1].measured.value, "{:?} {:?} {} {}", b.reports[1].measured, t.reports[1].measured, b.reports[1].g_norm_sq, t.reports[1].g_norm_sq);
    }

    #[test]
    fn frozen_windows_are_zero() {
        let w = WindowRecord {
            stage: 1,
            start_step: 0,
            end_step: 5,
            kl: 0.0,
            kl_stderr: None,
            forgetting: 0.0,
            per_task_forgetting: vec![0.0],
        };
        let r = forgetting_vs_kl_probe(&[w.clone(), w]);
        assert_eq!(r.pairs, vec![(0.0, 0.0), (0.0, 0.0)]);
        assert_eq!(r.spearman, None);
    }
}
