use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PolicyParams, Token};
use crate::error::{invalid, Result};
use crate::math;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// 0 selects greedy argmax decoding.
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { temperature: 0.1, top_p: 1.0, max_new_tokens: 16, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { temperature: 0.0, top_p: 1.0, max_new_tokens, seed: 0 }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature must be a finite nonnegative number"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(invalid("top_p must lie in (0, 1]"));
        }
        if self.max_new_tokens == 0 {
            return Err(invalid("max_new_tokens must be positive"));
        }
        Ok(())
    }
}

/// A sampled response with log-probabilities under the untempered policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<Token>,
    pub logprobs: Vec<f64>,
}

/// Argmax with ties broken toward the lowest token id.
pub fn greedy_token(logits: &[f64]) -> Token {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best as Token
}

/// Nucleus set for a probability vector: tokens sorted by probability
/// (descending, ties by ascending id), the shortest prefix whose mass reaches
/// `top_p`, renormalized.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(Token, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push((i as Token, probs[i]));
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    kept.iter().map(|&(t, p)| (t, p / mass)).collect()
}

/// Draws one token from `logits` under temperature and top-p.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, top_p: f64, rng: &mut R) -> Token {
    if temperature == 0.0 {
        return greedy_token(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let probs = math::softmax(&scaled);
    let support = if top_p >= 1.0 {
        probs.iter().enumerate().map(|(i, &p)| (i as Token, p)).collect()
    } else {
        nucleus(&probs, top_p)
    };
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(t, p) in &support {
        acc += p;
        if u < acc {
            return t;
        }
    }
    // Rounding can leave `acc` a hair below 1; fall back to the last positive-mass token.
    support.iter().rev().find(|(_, p)| *p > 0.0).map(|&(t, _)| t).unwrap_or(0)
}

/// Samples one response. Generation stops after the architecture's EOS token
/// or after `max_new_tokens` (capped by the response budget).
pub fn sample_response(params: &PolicyParams, prompt: &[Token], cfg: &SamplerConfig) -> Result<Rollout> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_response_with(params, prompt, cfg, &mut rng)
}

pub(crate) fn sample_response_with<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[Token],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Rollout> {
    let limit = cfg.max_new_tokens.min(params.arch.max_response());
    let eos = params.arch.eos();
    let mut cur = params.cursor(prompt)?;
    let mut z = vec![0.0; params.vocab_size()];
    let mut lp = vec![0.0; params.vocab_size()];
    let mut out = Rollout { tokens: Vec::with_capacity(limit), logprobs: Vec::with_capacity(limit) };
    for step in 0..limit {
        params.cursor_logits(&cur, &mut z)?;
        let tok = sample_token(&z, cfg.temperature, cfg.top_p, rng);
        math::log_softmax_into(&z, &mut lp);
        out.tokens.push(tok);
        out.logprobs.push(lp[tok as usize]);
        if Some(tok) == eos || step + 1 == limit {
            break;
        }
        params.cursor_push(&mut cur, tok)?;
    }
    Ok(out)
}
