use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gaussian, Token};
use crate::error::{invalid, Result};

/// Slot-embedding MLP.
///
/// The input has `2 * max_prompt + max_response` slots: the prompt
/// left-aligned, the prompt right-aligned, and the response prefix. Each
/// occupied slot contributes `embed[token] * W_in[slot]`; `pad` tokens and
/// empty slots contribute nothing. A learned per-position vector is added to
/// the first hidden pre-activation. Hidden layers use tanh.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub max_prompt: usize,
    pub max_response: usize,
    #[serde(default)]
    pub eos: Option<Token>,
    pub pad: Token,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    embed: usize,
    w_in: usize,
    b1: usize,
    pos: usize,
    w2: usize,
    b2: usize,
    w_out: usize,
    b_out: usize,
    total: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct State {
    /// b1 + prompt contribution + response-prefix contribution.
    pre: Vec<f64>,
    t: usize,
}

impl MlpArch {
    fn slots(&self) -> usize {
        2 * self.max_prompt + self.max_response
    }

    fn layout(&self) -> Layout {
        let (v, d, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        let embed = 0;
        let w_in = embed + v * d;
        let b1 = w_in + self.slots() * d * h;
        let pos = b1 + h;
        let w2 = pos + self.max_response * h;
        let (b2, w_out) = if self.layers == 2 { (w2 + h * h, w2 + h * h + h) } else { (w2, w2) };
        let b_out = w_out + h * v;
        Layout { embed, w_in, b1, pos, w2, b2, w_out, b_out, total: b_out + v }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(invalid("mlp arch needs vocab >= 2 and nonzero widths"));
        }
        if !(1..=2).contains(&self.layers) {
            return Err(invalid("mlp arch supports 1 or 2 hidden layers"));
        }
        if self.max_response == 0 || self.max_prompt == 0 {
            return Err(invalid("mlp arch needs nonzero prompt and response budgets"));
        }
        if self.pad as usize >= self.vocab_size || self.eos.is_some_and(|e| e as usize >= self.vocab_size) {
            return Err(invalid("reserved id outside vocabulary"));
        }
        Ok(())
    }

    pub(crate) fn init<R: Rng + ?Sized>(&self, values: &mut [f64], scale: f64, rng: &mut R) {
        let l = self.layout();
        let (d, h) = (self.embed_dim, self.hidden_dim);
        let mut fill = |range: std::ops::Range<usize>, std: f64| {
            for x in &mut values[range] {
                *x = std * gaussian(rng);
            }
        };
        fill(l.embed..l.w_in, scale);
        // Typical occupancy is about one prompt's worth of slots.
        fill(l.w_in..l.b1, scale / ((2 * self.max_prompt * d) as f64).sqrt());
        if self.layers == 2 {
            fill(l.w2..l.b2, scale / (h as f64).sqrt());
        }
        fill(l.w_out..l.b_out, scale / (h as f64).sqrt());
    }

    fn prompt_slots(&self, prompt: &[Token]) -> impl Iterator<Item = (usize, Token)> + '_ {
        let n = prompt.len();
        let p = self.max_prompt;
        let left: Vec<(usize, Token)> = prompt.iter().enumerate().map(|(s, &t)| (s, t)).collect();
        let right: Vec<(usize, Token)> = prompt.iter().enumerate().map(|(s, &t)| (p + (p - n) + s, t)).collect();
        left.into_iter().chain(right).filter(move |&(_, t)| t != self.pad)
    }

    fn response_slot(&self, s: usize) -> usize {
        2 * self.max_prompt + s
    }

    #[inline]
    fn add_slot(&self, values: &[f64], l: &Layout, slot: usize, tok: Token, acc: &mut [f64]) {
        let (d, h) = (self.embed_dim, self.hidden_dim);
        let e = &values[l.embed + tok as usize * d..l.embed + (tok as usize + 1) * d];
        for (k, &ek) in e.iter().enumerate() {
            let row = &values[l.w_in + (slot * d + k) * h..l.w_in + (slot * d + k + 1) * h];
            for (a, w) in acc.iter_mut().zip(row) {
                *a += ek * w;
            }
        }
    }

    #[inline]
    fn back_slot(&self, values: &[f64], l: &Layout, slot: usize, tok: Token, dpre: &[f64], grad: &mut [f64]) {
        let (d, h) = (self.embed_dim, self.hidden_dim);
        let eoff = l.embed + tok as usize * d;
        for k in 0..d {
            let ek = values[eoff + k];
            let roff = l.w_in + (slot * d + k) * h;
            let row = &values[roff..roff + h];
            let mut de = 0.0;
            for (w, dp) in row.iter().zip(dpre) {
                de += w * dp;
            }
            grad[eoff + k] += de;
            for (g, dp) in grad[roff..roff + h].iter_mut().zip(dpre) {
                *g += ek * dp;
            }
        }
    }

    pub(crate) fn begin(&self, values: &[f64], prompt: &[Token]) -> State {
        let l = self.layout();
        let mut pre = values[l.b1..l.b1 + self.hidden_dim].to_vec();
        for (slot, tok) in self.prompt_slots(prompt) {
            self.add_slot(values, &l, slot, tok, &mut pre);
        }
        State { pre, t: 0 }
    }

    pub(crate) fn push(&self, values: &[f64], s: &mut State, token: Token) {
        if token != self.pad {
            let l = self.layout();
            self.add_slot(values, &l, self.response_slot(s.t), token, &mut s.pre);
        }
        s.t += 1;
    }

    /// Hidden activations for position `t` given the running pre-activation.
    fn hidden(&self, values: &[f64], l: &Layout, pre: &[f64], t: usize, h1: &mut [f64], h2: &mut [f64]) {
        let h = self.hidden_dim;
        let pos = &values[l.pos + t * h..l.pos + (t + 1) * h];
        for ((o, p), q) in h1.iter_mut().zip(pre).zip(pos) {
            *o = (p + q).tanh();
        }
        if self.layers == 2 {
            h2.copy_from_slice(&values[l.b2..l.b2 + h]);
            for (i, &a) in h1.iter().enumerate() {
                let row = &values[l.w2 + i * h..l.w2 + (i + 1) * h];
                for (o, w) in h2.iter_mut().zip(row) {
                    *o += a * w;
                }
            }
            for o in h2.iter_mut() {
                *o = o.tanh();
            }
        }
    }

    fn output(&self, values: &[f64], l: &Layout, top: &[f64], out: &mut [f64]) {
        let v = self.vocab_size;
        out.copy_from_slice(&values[l.b_out..l.b_out + v]);
        for (i, &a) in top.iter().enumerate() {
            let row = &values[l.w_out + i * v..l.w_out + (i + 1) * v];
            for (o, w) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
    }

    pub(crate) fn logits(&self, values: &[f64], s: &State, out: &mut [f64]) {
        let l = self.layout();
        let h = self.hidden_dim;
        let mut h1 = vec![0.0; h];
        let mut h2 = vec![0.0; if self.layers == 2 { h } else { 0 }];
        self.hidden(values, &l, &s.pre, s.t, &mut h1, &mut h2);
        let top = if self.layers == 2 { &h2 } else { &h1 };
        self.output(values, &l, top, out);
    }

    pub(crate) fn teacher_forced(
        &self,
        values: &[f64],
        prompt: &[Token],
        response: &[Token],
        mut grad: Option<&mut [f64]>,
        f: &mut dyn FnMut(usize, &[f64], &mut [f64]),
    ) {
        let l = self.layout();
        let (h, v) = (self.hidden_dim, self.vocab_size);
        let mut s = self.begin(values, prompt);
        let mut h1 = vec![0.0; h];
        let mut h2 = vec![0.0; if self.layers == 2 { h } else { 0 }];
        let mut z = vec![0.0; v];
        let mut dz = vec![0.0; v];
        let mut dtop = vec![0.0; h];
        let mut dpre = vec![0.0; h];
        let mut dpre_sum = vec![0.0; h];
        let mut dpre2 = vec![0.0; if self.layers == 2 { h } else { 0 }];
        let mut any_grad = false;

        for (t, &tok) in response.iter().enumerate() {
            self.hidden(values, &l, &s.pre, t, &mut h1, &mut h2);
            let top = if self.layers == 2 { &h2 } else { &h1 };
            self.output(values, &l, top, &mut z);
            dz.iter_mut().for_each(|x| *x = 0.0);
            f(t, &z, &mut dz);

            if let Some(g) = grad.as_deref_mut() {
                if dz.iter().any(|&x| x != 0.0) {
                    any_grad = true;
                    // Output layer.
                    for (i, &a) in top.iter().enumerate() {
                        let wrow = &values[l.w_out + i * v..l.w_out + (i + 1) * v];
                        let mut acc = 0.0;
                        for (w, d) in wrow.iter().zip(&dz) {
                            acc += w * d;
                        }
                        dtop[i] = acc;
                        for (gg, d) in g[l.w_out + i * v..l.w_out + (i + 1) * v].iter_mut().zip(&dz) {
                            *gg += a * d;
                        }
                    }
                    for (gg, d) in g[l.b_out..l.b_out + v].iter_mut().zip(&dz) {
                        *gg += d;
                    }
                    // Second hidden layer.
                    if self.layers == 2 {
                        for j in 0..h {
                            dpre2[j] = dtop[j] * (1.0 - h2[j] * h2[j]);
                            g[l.b2 + j] += dpre2[j];
                        }
                        for (i, &a) in h1.iter().enumerate() {
                            let off = l.w2 + i * h;
                            let mut acc = 0.0;
                            for j in 0..h {
                                acc += values[off + j] * dpre2[j];
                                g[off + j] += a * dpre2[j];
                            }
                            dpre[i] = acc * (1.0 - a * a);
                        }
                    } else {
                        for i in 0..h {
                            dpre[i] = dtop[i] * (1.0 - h1[i] * h1[i]);
                        }
                    }
                    // First-layer biases, position vectors and response slots.
                    for i in 0..h {
                        g[l.b1 + i] += dpre[i];
                        g[l.pos + t * h + i] += dpre[i];
                        dpre_sum[i] += dpre[i];
                    }
                    for (sidx, &rt) in response[..t].iter().enumerate() {
                        if rt != self.pad {
                            self.back_slot(values, &l, self.response_slot(sidx), rt, &dpre, g);
                        }
                    }
                }
            }
            self.push(values, &mut s, tok);
        }

        // Prompt slots are shared by every position: one deferred update.
        if let (Some(g), true) = (grad, any_grad) {
            for (slot, tok) in self.prompt_slots(prompt) {
                self.back_slot(values, &l, slot, tok, &dpre_sum, g);
            }
        }
    }
}
