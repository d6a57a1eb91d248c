use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampler::sample_response_with;
use super::{enumerate_responses, PolicyParams, SamplerConfig, Token};
use crate::error::{invalid, Result};
use crate::math;

/// How the expectation over responses is taken.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum FisherMode {
    /// Sum over every response; `cap` bounds the per-prompt response space.
    Exact { cap: f64 },
    /// `samples` responses per prompt drawn at temperature 1.
    MonteCarlo { samples: usize, seed: u64 },
}

/// `grad log pi(response | prompt)`.
pub fn score_vector(params: &PolicyParams, prompt: &[Token], response: &[Token]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; params.len()];
    params.sample_loss_grad(prompt, response, &mut g)?;
    g.iter_mut().for_each(|x| *x = -*x);
    Ok(g)
}

/// Weighted score vectors whose second moment is the (estimated) Fisher
/// matrix averaged over `prompts`: `F = sum_k w_k s_k s_k^T`.
pub fn fisher_scores(params: &PolicyParams, prompts: &[Vec<Token>], mode: FisherMode) -> Result<Vec<(f64, Vec<f64>)>> {
    if prompts.is_empty() {
        return Err(invalid("no prompts given"));
    }
    let per_prompt = 1.0 / prompts.len() as f64;
    let mut out = Vec::new();
    match mode {
        FisherMode::Exact { cap } => {
            for x in prompts {
                for r in enumerate_responses(params, x, params.arch.max_response(), cap)? {
                    let w = per_prompt * r.logprob.exp();
                    out.push((w, score_vector(params, x, &r.tokens)?));
                }
            }
        }
        FisherMode::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(invalid("mc_samples must be positive"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = SamplerConfig {
                temperature: 1.0,
                top_p: 1.0,
                max_new_tokens: params.arch.max_response(),
                seed,
            };
            let w = per_prompt / samples as f64;
            for x in prompts {
                for _ in 0..samples {
                    let y = sample_response_with(params, x, &cfg, &mut rng)?;
                    out.push((w, score_vector(params, x, &y.tokens)?));
                }
            }
        }
    }
    Ok(out)
}

/// `sum_k w_k (s_k . v) s_k`.
pub fn weighted_fvp(scores: &[(f64, Vec<f64>)], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (w, s) in scores {
        let c = w * math::dot(s, v);
        if c != 0.0 {
            math::axpy(c, s, &mut out);
        }
    }
    out
}

/// Fisher-vector product `F(theta) v` with
/// `F = E_x E_{y ~ pi(.|x)} [grad log pi grad log pi^T]`. Exact under
/// [`FisherMode::Exact`], unbiased under [`FisherMode::MonteCarlo`].
pub fn fisher_vector_product(
    params: &PolicyParams,
    prompts: &[Vec<Token>],
    v: &[f64],
    mode: FisherMode,
) -> Result<Vec<f64>> {
    if v.len() != params.len() {
        return Err(invalid("direction has the wrong length"));
    }
    if math::norm_sq(v) == 0.0 {
        return Err(invalid("direction must be nonzero"));
    }
    let scores = fisher_scores(params, prompts, mode)?;
    Ok(weighted_fvp(&scores, v))
}
