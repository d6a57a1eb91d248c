use super::{Cursor, PolicyParams, Token};
use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedResponse {
    pub tokens: Vec<Token>,
    pub logprob: f64,
}

/// Number of distinct responses of at most `max_len` tokens under the
/// termination rule (stop at `eos`, if any).
pub fn response_space_size(vocab: usize, max_len: usize, eos: Option<Token>) -> f64 {
    let v = vocab as f64;
    match eos {
        None => v.powi(max_len as i32),
        Some(_) => {
            // Non-EOS prefixes of length k < max_len followed by EOS, plus full-length sequences.
            let mut total = 0.0;
            for k in 0..max_len {
                total += (v - 1.0).powi(k as i32);
            }
            total + (v - 1.0).powi(max_len as i32 - 1) * v - (v - 1.0).powi(max_len as i32 - 1)
        }
    }
}

/// Every response the policy can emit for `prompt` with at most `max_len`
/// tokens, with exact log-probabilities. Fails when the space exceeds `cap`.
pub fn enumerate_responses(
    params: &PolicyParams,
    prompt: &[Token],
    max_len: usize,
    cap: f64,
) -> Result<Vec<EnumeratedResponse>> {
    let max_len = max_len.min(params.arch.max_response());
    let states = response_space_size(params.vocab_size(), max_len, params.arch.eos());
    if states > cap {
        return Err(Error::EnumerationCap { states, cap });
    }
    let mut out = Vec::with_capacity(states as usize);
    let cur = params.cursor(prompt)?;
    let mut prefix = Vec::with_capacity(max_len);
    walk(params, &cur, max_len, 0.0, &mut prefix, &mut out)?;
    Ok(out)
}

fn walk(
    params: &PolicyParams,
    cur: &Cursor,
    max_len: usize,
    logp: f64,
    prefix: &mut Vec<Token>,
    out: &mut Vec<EnumeratedResponse>,
) -> Result<()> {
    let v = params.vocab_size();
    let mut z = vec![0.0; v];
    params.cursor_logits(cur, &mut z)?;
    let lp = math::log_softmax(&z);
    let eos = params.arch.eos();
    for tok in 0..v as Token {
        let l = logp + lp[tok as usize];
        prefix.push(tok);
        if Some(tok) == eos || prefix.len() == max_len {
            out.push(EnumeratedResponse { tokens: prefix.clone(), logprob: l });
        } else {
            let mut next = cur.clone();
            params.cursor_push(&mut next, tok)?;
            walk(params, &next, max_len, l, prefix, out)?;
        }
        prefix.pop();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{sample_response, Arch, SamplerConfig, TabularArch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn arch(vocab: usize, max_response: usize, eos: Option<Token>) -> Arch {
        Arch::Tabular(TabularArch { vocab_size: vocab, buckets: 13, max_prompt: 4, max_response, eos })
    }

    #[test]
    fn space_sizes() {
        assert_eq!(response_space_size(4, 2, None), 16.0);
        // eos: [e], [a e], [a b] for a != e -> 1 + 3 + 3*3 = 13
        assert_eq!(response_space_size(4, 2, Some(0)), 13.0);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for eos in [None, Some(1)] {
            let p = PolicyParams::random(arch(4, 3, eos), 1.0, &mut rng).unwrap();
            let all = enumerate_responses(&p, &[2, 3], 3, 1e5).unwrap();
            assert_eq!(all.len() as f64, response_space_size(4, 3, eos));
            let s: f64 = all.iter().map(|r| r.logprob.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
            for r in &all {
                let (total, _) = p.sequence_logprob(&[2, 3], &r.tokens).unwrap();
                assert!((total - r.logprob).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cap_is_enforced() {
        let p = PolicyParams::zeros(arch(6, 3, None)).unwrap();
        assert!(matches!(enumerate_responses(&p, &[0], 3, 100.0), Err(Error::EnumerationCap { .. })));
    }

    #[test]
    fn sampler_matches_enumerated_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = PolicyParams::random(arch(5, 3, Some(4)), 0.8, &mut rng).unwrap();
        let prompt = [1, 2];
        let all = enumerate_responses(&p, &prompt, 3, 1e5).unwrap();
        let n = 50_000u64;
        let mut counts: HashMap<Vec<Token>, u64> = HashMap::new();
        for seed in 0..n {
            let cfg = SamplerConfig { temperature: 1.0, top_p: 1.0, max_new_tokens: 3, seed };
            *counts.entry(sample_response(&p, &prompt, &cfg).unwrap().tokens).or_default() += 1;
        }
        assert_eq!(counts.values().sum::<u64>(), n);
        for r in &all {
            let prob = r.logprob.exp();
            let se = (prob * (1.0 - prob) / n as f64).sqrt();
            let freq = *counts.get(&r.tokens).unwrap_or(&0) as f64 / n as f64;
            assert!((freq - prob).abs() <= 3.0 * se + 1e-12, "{:?}: {freq} vs {prob}", r.tokens);
        }
    }
}
