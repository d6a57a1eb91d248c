//! Synthetic verifiable task stream.
//!
//! Every prompt has the shape `[BOS, marker(kind), c_1 .. c_n, SEP]` where the
//! marker identifies the task and `c_i` are content tokens. Gold responses are
//! a pure function of the prompt, so scoring never needs stored labels.

mod io;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::math::derive_seed;
use crate::policy::{Token, TokenSeq, Vocab};

pub use io::{export_datasets, import_datasets, DatasetRecord, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    #[serde(rename = "successor-mod-v")]
    SuccessorModV,
    ParityClassify,
    MaxToken,
    Dedup,
    #[serde(rename = "caesar-shift-k")]
    CaesarShift,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::Sort,
        TaskKind::SuccessorModV,
        TaskKind::ParityClassify,
        TaskKind::MaxToken,
        TaskKind::Dedup,
        TaskKind::CaesarShift,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::SuccessorModV => "successor-mod-v",
            TaskKind::ParityClassify => "parity-classify",
            TaskKind::MaxToken => "max-token",
            TaskKind::Dedup => "dedup",
            TaskKind::CaesarShift => "caesar-shift-k",
        }
    }

    /// Classification kinds emit a single label token.
    pub fn is_classification(self) -> bool {
        matches!(self, TaskKind::ParityClassify | TaskKind::MaxToken)
    }

    pub fn default_metric(self) -> MetricKind {
        match self {
            TaskKind::Copy | TaskKind::Reverse | TaskKind::Sort | TaskKind::Dedup => MetricKind::EditSimilarity,
            _ => MetricKind::ExactMatch,
        }
    }

    /// Longest gold response (without EOS) for `content_len` content tokens.
    pub fn max_gold_len(self, content_len: usize) -> usize {
        if self.is_classification() {
            1
        } else {
            content_len
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown task kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    ExactMatch,
    EditSimilarity,
}

/// Token layout shared by all tasks: reserved ids, one marker per kind, then
/// `content_size` content tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    pub vocab: Vocab,
    pub content_size: usize,
}

impl Alphabet {
    pub fn new(content_size: usize) -> Result<Self> {
        if content_size < 4 {
            return Err(invalid("need at least 4 content tokens"));
        }
        let vocab = Vocab::new(4 + TaskKind::ALL.len() + content_size)?;
        Ok(Self { vocab, content_size })
    }

    pub fn marker(&self, kind: TaskKind) -> Token {
        self.vocab.first_free() + kind.index() as Token
    }

    fn content_base(&self) -> Token {
        self.vocab.first_free() + TaskKind::ALL.len() as Token
    }

    pub fn content(&self, i: usize) -> Token {
        debug_assert!(i < self.content_size);
        self.content_base() + i as Token
    }

    pub fn content_index(&self, t: Token) -> Option<usize> {
        let base = self.content_base();
        (t >= base && ((t - base) as usize) < self.content_size).then(|| (t - base) as usize)
    }

    /// Class labels used by the parity task.
    pub fn class_a(&self) -> Token {
        self.content(0)
    }

    pub fn class_b(&self) -> Token {
        self.content(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub kind: TaskKind,
    pub metric: MetricKind,
    /// Inclusive range of content-token counts per prompt.
    pub prompt_len: [usize; 2],
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub alphabet: Alphabet,
    /// Shift for caesar-shift-k.
    pub shift: usize,
    /// Content index counted by parity-classify.
    pub parity_marker: usize,
    /// Token budgets the policy must respect.
    pub max_prompt_tokens: usize,
    pub max_response_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub prompt: TokenSeq,
    /// Gold response without the trailing EOS.
    pub gold: TokenSeq,
}

impl Example {
    /// Training target: the gold response followed by EOS.
    pub fn target(&self, eos: Token) -> Vec<Token> {
        let mut t = self.gold.tokens.clone();
        t.push(eos);
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task: TaskSpec,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl TaskDataset {
    pub fn content_hash(&self) -> String {
        hash_json(self)
    }
}

pub(crate) fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.prompt_len;
        if lo == 0 || lo > hi {
            return Err(invalid(format!("task {}: bad prompt length range {lo}..={hi}", self.id)));
        }
        if hi + 3 > self.max_prompt_tokens {
            return Err(invalid(format!(
                "task {}: prompts of {} tokens exceed the {}-token prompt budget",
                self.id,
                hi + 3,
                self.max_prompt_tokens
            )));
        }
        if self.kind.max_gold_len(hi) + 1 > self.max_response_tokens {
            return Err(invalid(format!(
                "task {}: gold responses do not fit the {}-token response budget",
                self.id, self.max_response_tokens
            )));
        }
        if self.kind == TaskKind::CaesarShift && self.shift % self.alphabet.content_size == 0 {
            return Err(invalid("caesar shift must be nonzero modulo the content size"));
        }
        if self.parity_marker >= self.alphabet.content_size {
            return Err(invalid("parity marker outside content alphabet"));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(invalid("n_train and n_eval must be positive"));
        }
        Ok(())
    }

    fn content_of(&self, prompt: &[Token]) -> Result<Vec<usize>> {
        let a = &self.alphabet;
        let v = &a.vocab;
        let malformed = || invalid(format!("prompt {prompt:?} is not a {} prompt", self.kind));
        if prompt.len() < 3 || prompt[0] != v.bos || prompt[1] != a.marker(self.kind) || *prompt.last().unwrap() != v.sep {
            return Err(malformed());
        }
        prompt[2..prompt.len() - 1].iter().map(|&t| a.content_index(t).ok_or_else(malformed)).collect()
    }

    /// The unique gold response for `prompt`, without EOS.
    pub fn solve(&self, prompt: &[Token]) -> Result<Vec<Token>> {
        let c = self.content_of(prompt)?;
        let a = &self.alphabet;
        let n = a.content_size;
        let idx: Vec<usize> = match self.kind {
            TaskKind::Copy => c,
            TaskKind::Reverse => c.into_iter().rev().collect(),
            TaskKind::Sort => {
                let mut s = c;
                s.sort_unstable();
                s
            }
            TaskKind::SuccessorModV => c.into_iter().map(|x| (x + 1) % n).collect(),
            TaskKind::CaesarShift => c.into_iter().map(|x| (x + self.shift) % n).collect(),
            TaskKind::Dedup => {
                let mut seen = HashSet::new();
                c.into_iter().filter(|x| seen.insert(*x)).collect()
            }
            TaskKind::MaxToken => vec![*c.iter().max().unwrap_or(&0)],
            TaskKind::ParityClassify => {
                let count = c.iter().filter(|&&x| x == self.parity_marker).count();
                return Ok(vec![if count % 2 == 0 { a.class_a() } else { a.class_b() }]);
            }
        };
        Ok(idx.into_iter().map(|i| a.content(i)).collect())
    }

    pub fn make_prompt(&self, content: &[usize]) -> Vec<Token> {
        let a = &self.alphabet;
        let mut p = Vec::with_capacity(content.len() + 3);
        p.push(a.vocab.bos);
        p.push(a.marker(self.kind));
        p.extend(content.iter().map(|&i| a.content(i)));
        p.push(a.vocab.sep);
        p
    }

    fn sample_content<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.gen_range(self.prompt_len[0]..=self.prompt_len[1]);
        let n = self.alphabet.content_size;
        (0..len)
            .map(|_| {
                if self.kind == TaskKind::ParityClassify && rng.gen_bool(PARITY_MARKER_RATE) {
                    self.parity_marker
                } else {
                    rng.gen_range(0..n)
                }
            })
            .collect()
    }

    /// Number of distinct prompts the spec can produce.
    pub fn prompt_space(&self) -> f64 {
        let n = self.alphabet.content_size as f64;
        (self.prompt_len[0]..=self.prompt_len[1]).map(|l| n.powi(l as i32)).sum()
    }
}

/// Extra probability mass on the parity marker so both classes are common.
const PARITY_MARKER_RATE: f64 = 0.3;

/// Generates `n_train + n_eval` distinct prompts with their gold responses.
pub fn generate_task_dataset(spec: &TaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let needed = spec.n_train + spec.n_eval;
    if (needed as f64) > 0.5 * spec.prompt_space() {
        return Err(invalid(format!(
            "task {}: {needed} distinct prompts requested from a space of {}",
            spec.id,
            spec.prompt_space()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(needed);
    let mut examples = Vec::with_capacity(needed);
    while examples.len() < needed {
        let prompt = spec.make_prompt(&spec.sample_content(&mut rng));
        if seen.insert(prompt.clone()) {
            let gold = spec.solve(&prompt)?;
            examples.push(Example { prompt: TokenSeq::prompt(prompt), gold: TokenSeq::response(gold) });
        }
    }
    let eval = examples.split_off(spec.n_train);
    Ok(TaskDataset { task: spec.clone(), train: examples, eval })
}

/// Drops trailing EOS/PAD tokens.
pub fn strip_terminal(vocab: &Vocab, response: &[Token]) -> Vec<Token> {
    let mut end = response.len();
    while end > 0 && (response[end - 1] == vocab.eos || response[end - 1] == vocab.pad) {
        end -= 1;
    }
    response[..end].to_vec()
}

pub fn levenshtein(a: &[Token], b: &[Token]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - levenshtein / max_len`; 1 when both are empty.
pub fn edit_similarity(a: &[Token], b: &[Token]) -> f64 {
    let m = a.len().max(b.len());
    if m == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / m as f64
}

/// The task's own metric in `[0, 1]` for a response to `prompt`.
pub fn rule_score(task: &TaskSpec, prompt: &[Token], response: &[Token]) -> Result<f64> {
    let gold = task.solve(prompt)?;
    let resp = strip_terminal(&task.alphabet.vocab, response);
    Ok(match task.metric {
        MetricKind::ExactMatch => f64::from(resp == gold),
        MetricKind::EditSimilarity => edit_similarity(&resp, &gold),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub kinds: Vec<TaskKind>,
    /// Per-task metric override; defaults follow [`TaskKind::default_metric`].
    #[serde(default)]
    pub metrics: Option<Vec<MetricKind>>,
    pub n_train: usize,
    pub n_eval: usize,
    pub prompt_len: [usize; 2],
    pub content_size: usize,
    pub caesar_shift: usize,
    pub max_prompt_tokens: usize,
    pub max_response_tokens: usize,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            kinds: vec![
                TaskKind::ParityClassify,
                TaskKind::MaxToken,
                TaskKind::Sort,
                TaskKind::Copy,
                TaskKind::Reverse,
                TaskKind::SuccessorModV,
                TaskKind::CaesarShift,
                TaskKind::Dedup,
            ],
            metrics: None,
            n_train: 2000,
            n_eval: 500,
            prompt_len: [3, 6],
            content_size: 16,
            caesar_shift: 3,
            max_prompt_tokens: 9,
            max_response_tokens: 16,
            seed: 0,
        }
    }
}

impl StreamConfig {
    /// Two-task stream used by quick runs and tests.
    pub fn toy() -> Self {
        Self {
            kinds: vec![TaskKind::Reverse, TaskKind::ParityClassify],
            n_train: 200,
            n_eval: 100,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub alphabet: Alphabet,
    pub tasks: Vec<TaskSpec>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, id: usize) -> Result<&TaskSpec> {
        self.tasks.get(id).ok_or(Error::UnknownTask(id))
    }

    pub fn content_hash(&self) -> String {
        hash_json(self)
    }

    /// Builds a stream from explicit specs (any length, including one task).
    pub fn from_specs(tasks: Vec<TaskSpec>) -> Result<Self> {
        let first = tasks.first().ok_or_else(|| invalid("stream needs at least one task"))?;
        let alphabet = first.alphabet;
        let mut kinds = HashSet::new();
        for (i, t) in tasks.iter().enumerate() {
            if t.id != i {
                return Err(invalid(format!("task at position {i} has id {}", t.id)));
            }
            if !kinds.insert(t.kind) {
                return Err(invalid(format!("duplicate task kind {}", t.kind)));
            }
            if t.alphabet != alphabet {
                return Err(invalid("tasks must share one alphabet"));
            }
            t.validate()?;
        }
        Ok(Self { alphabet, tasks })
    }

    pub fn generate(&self) -> Result<Vec<TaskDataset>> {
        self.tasks.iter().map(generate_task_dataset).collect()
    }

    /// Rule score for a response to a prompt of task `task_id`.
    pub fn rule_score(&self, task_id: usize, prompt: &[Token], response: &[Token]) -> Result<f64> {
        rule_score(self.task(task_id)?, prompt, response)
    }

    pub fn names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.kind.name().to_string()).collect()
    }
}

/// Tasks in the fixed order given by `config`.
pub fn build_stream(config: &StreamConfig) -> Result<TaskStream> {
    if config.kinds.len() < 2 {
        return Err(invalid("a stream needs at least two tasks"));
    }
    if let Some(m) = &config.metrics {
        if m.len() != config.kinds.len() {
            return Err(invalid("metrics list must match kinds list"));
        }
    }
    let alphabet = Alphabet::new(config.content_size)?;
    let specs = config
        .kinds
        .iter()
        .enumerate()
        .map(|(id, &kind)| TaskSpec {
            id,
            kind,
            metric: config.metrics.as_ref().map_or(kind.default_metric(), |m| m[id]),
            prompt_len: config.prompt_len,
            n_train: config.n_train,
            n_eval: config.n_eval,
            seed: derive_seed(config.seed, &[0x7A5C, id as u64, kind.index() as u64]),
            alphabet,
            shift: config.caesar_shift,
            parity_marker: 2,
            max_prompt_tokens: config.max_prompt_tokens,
            max_response_tokens: config.max_response_tokens,
        })
        .collect();
    TaskStream::from_specs(specs)
}

/// Training prompts of tasks `0..=upto`, gold labels dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalPromptPool {
    pub tasks: Vec<(usize, Vec<Vec<Token>>)>,
}

impl HistoricalPromptPool {
    pub fn from_datasets(datasets: &[TaskDataset]) -> Self {
        let tasks = datasets
            .iter()
            .map(|d| {
                let mut seen = HashSet::new();
                let prompts =
                    d.train.iter().map(|e| e.prompt.tokens.clone()).filter(|p| seen.insert(p.clone())).collect();
                (d.task.id, prompts)
            })
            .collect();
        Self { tasks }
    }

    pub fn len(&self) -> usize {
        self.tasks.iter().map(|(_, p)| p.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        let stream = build_stream(&StreamConfig::default()).unwrap();
        let mut s = stream.tasks.into_iter().find(|t| t.kind == kind).unwrap();
        s.n_train = 50;
        s.n_eval = 20;
        s
    }

    fn toks(s: &TaskSpec, content: &[usize]) -> Vec<Token> {
        content.iter().map(|&i| s.alphabet.content(i)).collect()
    }

    #[test]
    fn reverse_definition() {
        let s = spec(TaskKind::Reverse);
        let prompt = s.make_prompt(&[3, 7, 5]);
        assert_eq!(s.solve(&prompt).unwrap(), toks(&s, &[5, 7, 3]));
    }

    #[test]
    fn kind_definitions() {
        let cases = [
            (TaskKind::Copy, vec![4, 1, 4], vec![4, 1, 4]),
            (TaskKind::Sort, vec![4, 1, 9, 1], vec![1, 1, 4, 9]),
            (TaskKind::SuccessorModV, vec![15, 0, 3], vec![0, 1, 4]),
            (TaskKind::CaesarShift, vec![14, 2], vec![1, 5]),
            (TaskKind::Dedup, vec![3, 3, 5, 3, 6], vec![3, 5, 6]),
            (TaskKind::MaxToken, vec![3, 11, 5], vec![11]),
        ];
        for (kind, input, want) in cases {
            let s = spec(kind);
            assert_eq!(s.solve(&s.make_prompt(&input)).unwrap(), toks(&s, &want), "{kind}");
        }
    }

    #[test]
    fn parity_counts_marker() {
        let s = spec(TaskKind::ParityClassify);
        let m = s.parity_marker;
        let even = s.make_prompt(&[m, 5, m, 7]);
        let odd = s.make_prompt(&[m, 5, 6]);
        assert_eq!(s.solve(&even).unwrap(), vec![s.alphabet.class_a()]);
        assert_eq!(s.solve(&odd).unwrap(), vec![s.alphabet.class_b()]);
        assert_eq!(s.solve(&s.make_prompt(&[5, 6, 7])).unwrap(), vec![s.alphabet.class_a()]);
    }

    #[test]
    fn scores() {
        let s = spec(TaskKind::Reverse);
        let prompt = s.make_prompt(&[1, 2, 3, 4]);
        let gold = s.solve(&prompt).unwrap();
        let eos = s.alphabet.vocab.eos;
        let mut with_eos = gold.clone();
        with_eos.push(eos);
        assert_eq!(rule_score(&s, &prompt, &with_eos).unwrap(), 1.0);
        let mut off = gold.clone();
        off[3] = s.alphabet.content(9);
        assert_eq!(rule_score(&s, &prompt, &off).unwrap(), 0.75);

        let e = spec(TaskKind::SuccessorModV);
        let prompt = e.make_prompt(&[1, 2, 3]);
        let mut g = e.solve(&prompt).unwrap();
        assert_eq!(rule_score(&e, &prompt, &g).unwrap(), 1.0);
        g[1] = e.alphabet.content(0);
        assert_eq!(rule_score(&e, &prompt, &g).unwrap(), 0.0);
    }

    #[test]
    fn edit_similarity_fixture() {
        assert_eq!(edit_similarity(&[1, 2, 3, 4], &[1, 2, 3, 9]), 0.75);
        assert_eq!(edit_similarity(&[], &[]), 1.0);
        assert_eq!(levenshtein(&[1, 2, 3], &[2, 3]), 1);
    }

    #[test]
    fn malformed_prompt_is_an_error() {
        let s = spec(TaskKind::Copy);
        assert!(s.solve(&[1, 2, 3]).is_err());
        let other = spec(TaskKind::Sort);
        assert!(s.solve(&other.make_prompt(&[1, 2])).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let s = spec(TaskKind::Dedup);
        let a = generate_task_dataset(&s).unwrap();
        let b = generate_task_dataset(&s).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.train.len(), 50);
        let train: HashSet<_> = a.train.iter().map(|e| &e.prompt).collect();
        assert!(a.eval.iter().all(|e| !train.contains(&e.prompt)));
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut s = spec(TaskKind::Copy);
        s.prompt_len = [3, 7];
        assert!(generate_task_dataset(&s).is_err());
        let mut s = spec(TaskKind::Copy);
        s.prompt_len = [1, 1];
        s.n_train = 100;
        assert!(generate_task_dataset(&s).is_err());
    }

    #[test]
    fn stream_construction() {
        let stream = build_stream(&StreamConfig::default()).unwrap();
        assert_eq!(stream.len(), 8);
        assert_eq!(stream.tasks.iter().map(|t| t.id).collect::<Vec<_>>(), (0..8).collect::<Vec<_>>());
        assert_eq!(stream.content_hash(), build_stream(&StreamConfig::default()).unwrap().content_hash());
        let toy = build_stream(&StreamConfig::toy()).unwrap();
        assert_eq!(toy.len(), 2);

        let mut dup = StreamConfig::toy();
        dup.kinds = vec![TaskKind::Copy, TaskKind::Copy];
        assert!(build_stream(&dup).is_err());
        let mut single = StreamConfig::toy();
        single.kinds.truncate(1);
        assert!(build_stream(&single).is_err());
        assert!(matches!(toy.rule_score(5, &[], &[]), Err(Error::UnknownTask(5))));
    }

    #[test]
    fn historical_pool_keeps_training_prompts() {
        let stream = build_stream(&StreamConfig::toy()).unwrap();
        let data = stream.generate().unwrap();
        let pool = HistoricalPromptPool::from_datasets(&data);
        assert_eq!(pool.tasks.len(), 2);
        for ((id, prompts), d) in pool.tasks.iter().zip(&data) {
            assert_eq!(*id, d.task.id);
            let want: Vec<Vec<Token>> = d.train.iter().map(|e| e.prompt.tokens.clone()).collect();
            assert_eq!(prompts, &want);
        }
    }

    proptest! {
        #[test]
        fn gold_scores_one_and_fits_budget(kind_idx in 0usize..8, seed in any::<u64>()) {
            let mut s = spec(TaskKind::ALL[kind_idx]);
            s.seed = seed;
            s.n_train = 30;
            s.n_eval = 10;
            let d = generate_task_dataset(&s).unwrap();
            for e in d.train.iter().chain(&d.eval) {
                prop_assert_eq!(rule_score(&s, &e.prompt.tokens, &e.gold.tokens).unwrap(), 1.0);
                prop_assert!(e.gold.len() + 1 <= s.max_response_tokens);
                prop_assert!(e.prompt.len() <= s.max_prompt_tokens);
                prop_assert!(e.gold.tokens.iter().all(|&t| (t as usize) < s.alphabet.vocab.size));
            }
        }
    }
}
