use serde::{Deserialize, Serialize};

use super::Token;
use crate::error::{invalid, Result};
use crate::math::mix64;

/// Hashed-feature softmax policy.
///
/// At response position `t` the logits are `W[a] + W[b] + W[bias]`, where
/// `a` hashes `(t, previous token)` and `b` hashes `(t, prompt)` into
/// `buckets` rows. Parameter count is `(buckets + 1) * vocab_size`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularArch {
    pub vocab_size: usize,
    pub buckets: usize,
    pub max_prompt: usize,
    pub max_response: usize,
    #[serde(default)]
    pub eos: Option<Token>,
}

#[derive(Clone, Debug)]
pub(crate) struct State {
    fingerprint: u64,
    prev: u64,
    t: usize,
}

const NO_PREV: u64 = u64::MAX;

impl TabularArch {
    pub fn param_count(&self) -> usize {
        (self.buckets + 1) * self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.buckets == 0 || self.max_response == 0 {
            return Err(invalid("tabular arch needs vocab >= 2, buckets >= 1, max_response >= 1"));
        }
        if let Some(e) = self.eos {
            if e as usize >= self.vocab_size {
                return Err(invalid("eos id outside vocabulary"));
            }
        }
        Ok(())
    }

    pub(crate) fn begin(&self, prompt: &[Token]) -> State {
        let fingerprint = prompt.iter().fold(mix64(0x7AB1E), |h, &t| mix64(h ^ t as u64));
        State { fingerprint, prev: NO_PREV, t: 0 }
    }

    fn rows(&self, s: &State) -> [usize; 3] {
        let t = s.t as u64;
        let a = mix64(mix64(1 ^ (t << 8)) ^ s.prev) % self.buckets as u64;
        let b = mix64(mix64(2 ^ (t << 8)) ^ s.fingerprint) % self.buckets as u64;
        [a as usize, b as usize, self.buckets]
    }

    pub(crate) fn logits(&self, values: &[f64], s: &State, out: &mut [f64]) {
        let v = self.vocab_size;
        out.iter_mut().for_each(|x| *x = 0.0);
        for r in self.rows(s) {
            for (o, w) in out.iter_mut().zip(&values[r * v..(r + 1) * v]) {
                *o += w;
            }
        }
    }

    pub(crate) fn push(&self, s: &mut State, token: Token) {
        s.prev = token as u64;
        s.t += 1;
    }

    pub(crate) fn teacher_forced(
        &self,
        values: &[f64],
        prompt: &[Token],
        response: &[Token],
        mut grad: Option<&mut [f64]>,
        f: &mut dyn FnMut(usize, &[f64], &mut [f64]),
    ) {
        let v = self.vocab_size;
        let mut s = self.begin(prompt);
        let mut z = vec![0.0; v];
        let mut dz = vec![0.0; v];
        for (t, &tok) in response.iter().enumerate() {
            self.logits(values, &s, &mut z);
            dz.iter_mut().for_each(|x| *x = 0.0);
            f(t, &z, &mut dz);
            if let Some(g) = grad.as_deref_mut() {
                for r in self.rows(&s) {
                    for (gi, d) in g[r * v..(r + 1) * v].iter_mut().zip(&dz) {
                        *gi += d;
                    }
                }
            }
            self.push(&mut s, tok);
        }
    }
}
