//! Tiny autoregressive categorical policies with exact log-probabilities,
//! analytic gradients, temperature/top-p sampling and Fisher-vector products.
//!
//! Two backends share one interface:
//!
//! * [`TabularArch`]: per-position logits are a sum of rows selected by hashed
//!   context features. Small enough for exhaustive enumeration of the response
//!   space, which the diagnostics rely on.
//! * [`MlpArch`]: a one- or two-layer tanh network over slot embeddings of the
//!   prompt (left- and right-aligned) and the response prefix. Used by the
//!   continual-learning experiments.
//!
//! A policy conditions on a prompt and generates a response token by token.
//! Everything is computed in `f64`.

mod checkpoint;
mod enumerate;
mod fisher;
mod mlp;
mod sampler;
mod tabular;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use enumerate::{enumerate_responses, response_space_size, EnumeratedResponse};
pub use fisher::{fisher_scores, fisher_vector_product, score_vector, weighted_fvp, FisherMode};
pub use mlp::MlpArch;
pub use sampler::{greedy_token, nucleus, sample_response, sample_token, Rollout, SamplerConfig};
pub use tabular::TabularArch;

pub type Token = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prompt,
    Response,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<Token>,
    pub role: Role,
}

impl TokenSeq {
    pub fn prompt(tokens: Vec<Token>) -> Self {
        Self { tokens, role: Role::Prompt }
    }

    pub fn response(tokens: Vec<Token>) -> Self {
        Self { tokens, role: Role::Response }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Token vocabulary shared by the task stream. Reserved ids occupy `0..4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub pad: Token,
    pub bos: Token,
    pub eos: Token,
    pub sep: Token,
}

impl Vocab {
    pub const MIN_SIZE: usize = 8;
    pub const MAX_SIZE: usize = 64;

    pub fn new(size: usize) -> Result<Self> {
        if !(Self::MIN_SIZE..=Self::MAX_SIZE).contains(&size) {
            return Err(invalid(format!(
                "vocab size {size} outside [{}, {}]",
                Self::MIN_SIZE,
                Self::MAX_SIZE
            )));
        }
        Ok(Self { size, pad: 0, bos: 1, eos: 2, sep: 3 })
    }

    /// First id available for non-reserved tokens.
    pub fn first_free(&self) -> Token {
        4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum Arch {
    Tabular(TabularArch),
    Mlp(MlpArch),
}

impl Arch {
    pub fn vocab_size(&self) -> usize {
        match self {
            Arch::Tabular(a) => a.vocab_size,
            Arch::Mlp(a) => a.vocab_size,
        }
    }

    pub fn max_prompt(&self) -> usize {
        match self {
            Arch::Tabular(a) => a.max_prompt,
            Arch::Mlp(a) => a.max_prompt,
        }
    }

    pub fn max_response(&self) -> usize {
        match self {
            Arch::Tabular(a) => a.max_response,
            Arch::Mlp(a) => a.max_response,
        }
    }

    /// Total context budget: prompt slots plus response slots.
    pub fn context_len(&self) -> usize {
        self.max_prompt() + self.max_response()
    }

    /// Token that terminates generation, if any. Without one, responses
    /// always have exactly `max_new_tokens` tokens.
    pub fn eos(&self) -> Option<Token> {
        match self {
            Arch::Tabular(a) => a.eos,
            Arch::Mlp(a) => a.eos,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Arch::Tabular(a) => a.param_count(),
            Arch::Mlp(a) => a.param_count(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Arch::Tabular(a) => a.validate(),
            Arch::Mlp(a) => a.validate(),
        }
    }
}

/// Flat parameter vector together with the architecture that interprets it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub arch: Arch,
    pub values: Vec<f64>,
}

/// Incremental decoding state for one prompt.
#[derive(Clone, Debug)]
pub struct Cursor {
    inner: CursorInner,
    len: usize,
}

#[derive(Clone, Debug)]
enum CursorInner {
    Tabular(tabular::State),
    Mlp(mlp::State),
}

impl Cursor {
    /// Number of response tokens pushed so far.
    pub fn position(&self) -> usize {
        self.len
    }
}

impl PolicyParams {
    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(Self { arch, values: vec![0.0; n] })
    }

    /// Random initialization. Tabular rows are i.i.d. normal-ish with the
    /// given scale; MLP weights use fan-in scaling multiplied by `scale`.
    pub fn random<R: Rng + ?Sized>(arch: Arch, scale: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        match &p.arch {
            Arch::Tabular(_) => {
                for v in p.values.iter_mut() {
                    *v = scale * gaussian(rng);
                }
            }
            Arch::Mlp(a) => a.init(&mut p.values, scale, rng),
        }
        Ok(p)
    }

    pub fn from_values(arch: Arch, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(Error::ArchMismatch(format!(
                "expected {} values, got {}",
                arch.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("parameter values must be finite"));
        }
        Ok(Self { arch, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.arch.vocab_size()
    }

    /// Returns a copy with `values + alpha * direction`.
    pub fn displaced(&self, alpha: f64, direction: &[f64]) -> Self {
        let mut out = self.clone();
        math::axpy(alpha, direction, &mut out.values);
        out
    }

    pub fn same_arch(&self, other: &Self) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::ArchMismatch("parameter vectors have different architectures".into()));
        }
        Ok(())
    }

    fn check_tokens(&self, toks: &[Token]) -> Result<()> {
        let size = self.vocab_size();
        match toks.iter().find(|&&t| t as usize >= size) {
            Some(&t) => Err(Error::TokenOutOfRange { token: t, size }),
            None => Ok(()),
        }
    }

    /// Starts incremental decoding for `prompt`.
    pub fn cursor(&self, prompt: &[Token]) -> Result<Cursor> {
        if prompt.len() > self.arch.max_prompt() {
            return Err(Error::ContextOverflow { len: prompt.len(), max: self.arch.max_prompt() });
        }
        self.check_tokens(prompt)?;
        let inner = match &self.arch {
            Arch::Tabular(a) => CursorInner::Tabular(a.begin(prompt)),
            Arch::Mlp(a) => CursorInner::Mlp(a.begin(&self.values, prompt)),
        };
        Ok(Cursor { inner, len: 0 })
    }

    /// Next-token logits at the cursor's position.
    pub fn cursor_logits(&self, cur: &Cursor, out: &mut [f64]) -> Result<()> {
        if cur.len >= self.arch.max_response() {
            return Err(Error::ContextOverflow {
                len: cur.len + 1,
                max: self.arch.max_response(),
            });
        }
        match (&self.arch, &cur.inner) {
            (Arch::Tabular(a), CursorInner::Tabular(s)) => a.logits(&self.values, s, out),
            (Arch::Mlp(a), CursorInner::Mlp(s)) => a.logits(&self.values, s, out),
            _ => return Err(Error::ArchMismatch("cursor from another backend".into())),
        }
        Ok(())
    }

    pub fn cursor_push(&self, cur: &mut Cursor, token: Token) -> Result<()> {
        if token as usize >= self.vocab_size() {
            return Err(Error::TokenOutOfRange { token, size: self.vocab_size() });
        }
        if cur.len >= self.arch.max_response() {
            return Err(Error::ContextOverflow {
                len: cur.len + 1,
                max: self.arch.max_response(),
            });
        }
        match (&self.arch, &mut cur.inner) {
            (Arch::Tabular(a), CursorInner::Tabular(s)) => a.push(s, token),
            (Arch::Mlp(a), CursorInner::Mlp(s)) => a.push(&self.values, s, token),
            _ => return Err(Error::ArchMismatch("cursor from another backend".into())),
        }
        cur.len += 1;
        Ok(())
    }

    /// Logits for the next token after `prompt` followed by `prefix`.
    pub fn next_token_logits(&self, prompt: &[Token], prefix: &[Token]) -> Result<Vec<f64>> {
        let mut cur = self.cursor(prompt)?;
        if prefix.len() >= self.arch.max_response() {
            return Err(Error::ContextOverflow {
                len: prompt.len() + prefix.len() + 1,
                max: self.arch.context_len(),
            });
        }
        for &t in prefix {
            self.cursor_push(&mut cur, t)?;
        }
        let mut out = vec![0.0; self.vocab_size()];
        self.cursor_logits(&cur, &mut out)?;
        Ok(out)
    }

    /// Teacher-forced pass over `response`. At each position `t` the callback
    /// receives the logits and writes the loss gradient with respect to them
    /// into its third argument (pre-zeroed). When `grad` is given, those
    /// logit gradients are back-propagated and accumulated into it.
    pub fn teacher_forced<F>(
        &self,
        prompt: &[Token],
        response: &[Token],
        grad: Option<&mut [f64]>,
        mut f: F,
    ) -> Result<()>
    where
        F: FnMut(usize, &[f64], &mut [f64]),
    {
        if prompt.len() > self.arch.max_prompt() {
            return Err(Error::ContextOverflow { len: prompt.len(), max: self.arch.max_prompt() });
        }
        if response.len() > self.arch.max_response() {
            return Err(Error::ContextOverflow {
                len: prompt.len() + response.len(),
                max: self.arch.context_len(),
            });
        }
        self.check_tokens(prompt)?;
        self.check_tokens(response)?;
        if let Some(g) = &grad {
            if g.len() != self.values.len() {
                return Err(Error::ArchMismatch("gradient buffer has the wrong length".into()));
            }
        }
        match &self.arch {
            Arch::Tabular(a) => a.teacher_forced(&self.values, prompt, response, grad, &mut f),
            Arch::Mlp(a) => a.teacher_forced(&self.values, prompt, response, grad, &mut f),
        }
        Ok(())
    }

    /// Log-probability of `response` given `prompt`: `(total, per_token)`.
    /// `total` equals minus the per-sample cross-entropy loss.
    pub fn sequence_logprob(&self, prompt: &[Token], response: &[Token]) -> Result<(f64, Vec<f64>)> {
        if response.is_empty() {
            return Err(Error::EmptyResponse);
        }
        let mut per_token = Vec::with_capacity(response.len());
        let mut lp = vec![0.0; self.vocab_size()];
        self.teacher_forced(prompt, response, None, |t, z, _| {
            math::log_softmax_into(z, &mut lp);
            per_token.push(lp[response[t] as usize]);
        })?;
        // Sequential log-space accumulation.
        let total = per_token.iter().sum();
        Ok((total, per_token))
    }

    /// Per-sample loss `-log pi(response | prompt)` and its gradient, accumulated into `grad`.
    pub fn sample_loss_grad(&self, prompt: &[Token], response: &[Token], grad: &mut [f64]) -> Result<f64> {
        if response.is_empty() {
            return Err(Error::EmptyResponse);
        }
        let mut loss = 0.0;
        let mut lp = vec![0.0; self.vocab_size()];
        self.teacher_forced(prompt, response, Some(grad), |t, z, dz| {
            math::log_softmax_into(z, &mut lp);
            let y = response[t] as usize;
            loss -= lp[y];
            for (d, &l) in dz.iter_mut().zip(&lp) {
                *d = l.exp();
            }
            dz[y] -= 1.0;
        })?;
        Ok(loss)
    }

    /// Mean cross-entropy over `batch` and its exact gradient.
    pub fn ce_loss_and_grad(&self, batch: &[(&[Token], &[Token])]) -> Result<(f64, Vec<f64>)> {
        self.ce_loss_and_grad_workers(batch, 1)
    }

    /// As [`Self::ce_loss_and_grad`], partitioning the batch into `workers`
    /// contiguous chunks evaluated in parallel and reduced in chunk order.
    /// `workers == 1` is the bit-reproducible reference path.
    pub fn ce_loss_and_grad_workers(
        &self,
        batch: &[(&[Token], &[Token])],
        workers: usize,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = batch.len() as f64;
        let chunk = |offset: usize, items: &[(&[Token], &[Token])]| -> Result<(f64, Vec<f64>)> {
            let mut g = vec![0.0; self.len()];
            let mut loss = 0.0;
            for (k, (p, r)) in items.iter().enumerate() {
                let l = self.sample_loss_grad(p, r, &mut g)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite { index: offset + k });
                }
                loss += l;
            }
            Ok((loss, g))
        };
        let (loss, mut grad) = if workers <= 1 || batch.len() < 2 {
            chunk(0, batch)?
        } else {
            use rayon::prelude::*;
            let size = batch.len().div_ceil(workers);
            let parts: Vec<Result<(f64, Vec<f64>)>> = batch
                .par_chunks(size)
                .enumerate()
                .map(|(c, items)| chunk(c * size, items))
                .collect();
            let mut loss = 0.0;
            let mut grad = vec![0.0; self.len()];
            for part in parts {
                let (l, g) = part?;
                loss += l;
                math::axpy(1.0, &g, &mut grad);
            }
            (loss, grad)
        };
        for g in grad.iter_mut() {
            *g /= n;
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { index: i % batch.len() });
        }
        Ok((loss / n, grad))
    }

    /// Jacobian-vector product of the next-token logits in direction `v`,
    /// assembled from one reverse pass per output logit.
    pub fn logits_jvp(&self, prompt: &[Token], prefix: &[Token], v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.len() {
            return Err(invalid("direction has the wrong length"));
        }
        let t_target = prefix.len();
        let mut out = vec![0.0; self.vocab_size()];
        let mut row = vec![0.0; self.len()];
        // A dummy trailing token makes the target position part of the pass.
        let mut resp = prefix.to_vec();
        resp.push(0);
        for (k, o) in out.iter_mut().enumerate() {
            row.iter_mut().for_each(|x| *x = 0.0);
            self.teacher_forced(prompt, &resp, Some(&mut row), |t, _z, dz| {
                if t == t_target {
                    dz[k] = 1.0;
                }
            })?;
            *o = math::dot(&row, v);
        }
        Ok(out)
    }
}

/// Box-Muller standard normal draw.
pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_diff, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tabular(vocab: usize, buckets: usize, max_response: usize, eos: Option<Token>) -> Arch {
        Arch::Tabular(TabularArch { vocab_size: vocab, buckets, max_prompt: 8, max_response, eos })
    }

    pub(crate) fn small_mlp(layers: usize) -> Arch {
        Arch::Mlp(MlpArch {
            vocab_size: 8,
            embed_dim: 3,
            hidden_dim: 5,
            layers,
            max_prompt: 4,
            max_response: 4,
            eos: Some(2),
            pad: 0,
        })
    }

    #[test]
    fn zero_params_give_uniform_logits() {
        for arch in [tabular(8, 7, 4, Some(2)), small_mlp(1), small_mlp(2)] {
            let p = PolicyParams::zeros(arch).unwrap();
            let z = p.next_token_logits(&[1, 5, 3], &[4]).unwrap();
            assert!(z.iter().all(|&v| v == z[0]));
        }
    }

    #[test]
    fn logits_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PolicyParams::random(small_mlp(2), 1.0, &mut rng).unwrap();
        let a = p.next_token_logits(&[1, 5, 3], &[4, 6]).unwrap();
        let b = p.next_token_logits(&[1, 5, 3], &[4, 6]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_overflow_is_an_error() {
        let p = PolicyParams::zeros(small_mlp(1)).unwrap();
        assert!(matches!(
            p.next_token_logits(&[1, 2, 3, 4, 5], &[]),
            Err(Error::ContextOverflow { .. })
        ));
        assert!(matches!(
            p.next_token_logits(&[1], &[4, 4, 4, 4]),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn jvp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for arch in [tabular(8, 9, 4, Some(2)), small_mlp(1), small_mlp(2)] {
            let p = PolicyParams::random(arch, 0.7, &mut rng).unwrap();
            let v: Vec<f64> = (0..p.len()).map(|_| gaussian(&mut rng)).collect();
            let jvp = p.logits_jvp(&[1, 6, 3], &[5, 7], &v).unwrap();
            let eps = 1e-5;
            let up = p.displaced(eps, &v).next_token_logits(&[1, 6, 3], &[5, 7]).unwrap();
            let dn = p.displaced(-eps, &v).next_token_logits(&[1, 6, 3], &[5, 7]).unwrap();
            for k in 0..jvp.len() {
                let fd = (up[k] - dn[k]) / (2.0 * eps);
                assert!(rel_err(jvp[k], fd) < 1e-4, "k={k} jvp={} fd={fd}", jvp[k]);
            }
        }
    }

    #[test]
    fn uniform_sequence_logprob() {
        let p = PolicyParams::zeros(tabular(8, 5, 4, None)).unwrap();
        let (total, per) = p.sequence_logprob(&[1, 2], &[3, 4, 5]).unwrap();
        assert!((total - 3.0 * (1.0f64 / 8.0).ln()).abs() < 1e-12);
        assert!((total + 6.2383).abs() < 1e-4);
        assert_eq!(per.len(), 3);
        assert!(per.iter().all(|&x| x <= 0.0));
    }

    #[test]
    fn empty_response_is_rejected() {
        let p = PolicyParams::zeros(small_mlp(1)).unwrap();
        assert!(matches!(p.sequence_logprob(&[1], &[]), Err(Error::EmptyResponse)));
        assert!(matches!(p.ce_loss_and_grad(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn logprob_equals_product_of_enumerated_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = PolicyParams::random(small_mlp(2), 1.0, &mut rng).unwrap();
        let prompt = [1u32, 6, 3];
        let response = [4u32, 7, 2];
        let (total, _) = p.sequence_logprob(&prompt, &response).unwrap();
        // Independent route: explicit softmax probabilities per position.
        let mut prod = 1.0;
        for t in 0..response.len() {
            let z = p.next_token_logits(&prompt, &response[..t]).unwrap();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
            prod *= (z[response[t] as usize] - m).exp() / denom;
        }
        assert!((total.exp() - prod).abs() < 1e-14);
    }

    #[test]
    fn repeated_sample_batch_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = PolicyParams::random(small_mlp(1), 1.0, &mut rng).unwrap();
        let item: (&[Token], &[Token]) = (&[1, 5, 3], &[6, 2]);
        let (l1, g1) = p.ce_loss_and_grad(&[item]).unwrap();
        let (l4, g4) = p.ce_loss_and_grad(&[item; 4]).unwrap();
        assert!((l1 - l4).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g4) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let archs = [
            tabular(8, 24, 4, Some(2)), // 200 parameters
            small_mlp(1),
            small_mlp(2),
        ];
        assert_eq!(archs[0].param_count(), 200);
        let prompts: Vec<Vec<Token>> = vec![vec![1, 5, 3], vec![1, 7, 6, 3]];
        let responses: Vec<Vec<Token>> = vec![vec![4, 6, 2], vec![7, 2]];
        let batch: Vec<(&[Token], &[Token])> =
            prompts.iter().zip(&responses).map(|(p, r)| (p.as_slice(), r.as_slice())).collect();
        for arch in archs {
            for _ in 0..3 {
                let p = PolicyParams::random(arch.clone(), 0.8, &mut rng).unwrap();
                let (_, g) = p.ce_loss_and_grad(&batch).unwrap();
                let fd = central_diff(&p.values, 1e-5, |v| {
                    let q = PolicyParams { arch: arch.clone(), values: v.to_vec() };
                    q.ce_loss_and_grad(&batch).unwrap().0
                });
                for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
                    assert!(rel_err(*a, *b) < 1e-4, "coord {i}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn parallel_workers_agree_with_single_worker() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PolicyParams::random(small_mlp(2), 1.0, &mut rng).unwrap();
        let prompts: Vec<Vec<Token>> = (0..9).map(|i| vec![1, 4 + (i % 4) as Token, 3]).collect();
        let resp: Vec<Token> = vec![5, 2];
        let batch: Vec<(&[Token], &[Token])> = prompts.iter().map(|p| (p.as_slice(), resp.as_slice())).collect();
        let (l1, g1) = p.ce_loss_and_grad_workers(&batch, 1).unwrap();
        let (l3, g3) = p.ce_loss_and_grad_workers(&batch, 3).unwrap();
        assert!((l1 - l3).abs() < 1e-12);
        assert!(g1.iter().zip(&g3).all(|(a, b)| (a - b).abs() < 1e-12));
        let (_, again) = p.ce_loss_and_grad_workers(&batch, 3).unwrap();
        assert_eq!(g3, again);
    }

    #[test]
    fn overfit_sample_drives_loss_and_grad_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = PolicyParams::random(small_mlp(1), 0.5, &mut rng).unwrap();
        let item: (&[Token], &[Token]) = (&[1, 5, 3], &[6, 4, 2]);
        for _ in 0..4000 {
            let (_, g) = p.ce_loss_and_grad(&[item]).unwrap();
            math::axpy(-0.5, &g, &mut p.values);
        }
        let (loss, g) = p.ce_loss_and_grad(&[item]).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
        assert!(math::norm_sq(&g).sqrt() < 1e-2);
    }

    #[test]
    fn vocab_invariants() {
        assert!(Vocab::new(7).is_err());
        assert!(Vocab::new(65).is_err());
        let v = Vocab::new(8).unwrap();
        let ids = [v.pad, v.bos, v.eos, v.sep];
        assert!(ids.iter().all(|&i| (i as usize) < v.size));
        let mut sorted = ids.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
    }
}
