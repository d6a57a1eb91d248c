//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines are always
//! printed.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oprlab::diagnostics::forgetting_vs_kl_probe;
use oprlab::harness::{self, gradient_identity, loss_bound_identity, one_step_runs, DiagConfig, Experiment, ExperimentConfig};
use oprlab::metrics::{bwt, overall_acc, AccuracyMatrix};
use oprlab::policy::{nucleus, sample_response, sample_token, Arch, MlpArch, PolicyParams, SamplerConfig, TabularArch, Token};
use oprlab::replay::{allocate_budget, build_opr_stage, build_vanilla_buffer, BufferMode, OprConfig, ScorerKind};
use oprlab::tasks::HistoricalPromptPool;
use oprlab::training::{MethodSpec, ProbeConfig};

type Outcome = (bool, String);

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------- 1

const TASKS: [&str; 8] = ["C-STA", "FOMC", "MeBa", "Py150", "SciQA", "NG-cm", "NG-ds", "20Min"];

fn vanilla_table() -> Vec<Vec<f64>> {
    vec![
        vec![55.82],
        vec![54.51, 73.54],
        vec![50.93, 69.76, 69.04],
        vec![50.92, 69.25, 58.29, 67.02],
        vec![51.36, 65.50, 61.92, 65.10, 94.99],
        vec![52.64, 68.78, 60.55, 66.30, 92.72, 71.60],
        vec![52.74, 68.20, 60.09, 66.28, 92.12, 65.28, 77.54],
        vec![53.51, 69.91, 59.74, 64.78, 93.42, 65.03, 77.08, 40.72],
    ]
}

fn seq_sft_table() -> Vec<Vec<f64>> {
    vec![
        vec![55.89],
        vec![54.37, 73.69],
        vec![49.88, 65.80, 68.30],
        vec![47.70, 33.72, 42.26, 66.80],
        vec![17.40, 0.00, 51.93, 62.83, 95.09],
        vec![50.74, 65.78, 47.89, 66.27, 92.40, 62.96],
        vec![50.95, 67.09, 44.98, 63.19, 80.41, 63.58, 77.92],
        vec![46.23, 28.41, 59.23, 63.09, 85.74, 61.64, 77.15, 39.93],
    ]
}

fn criterion_metric_fixtures() -> Outcome {
    let names: Vec<String> = TASKS.iter().map(|s| s.to_string()).collect();
    let seq = AccuracyMatrix::from_rows(names.clone(), seq_sft_table()).unwrap();
    let van = AccuracyMatrix::from_rows(names, vanilla_table()).unwrap();
    let (sb, sa, vb) = (bwt(&seq).unwrap(), overall_acc(&seq).unwrap(), bwt(&van).unwrap());
    let ok = close(sb, -11.31, 0.005) && close(sa, 57.68, 0.005) && close(vb, -3.73, 0.005);
    (ok, format!("seq-sft BWT {sb:.4} ACC {sa:.4}; vanilla BWT {vb:.4}"))
}

// ---------------------------------------------------------------- 2

fn central_diff(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + eps;
            let up = f(&p);
            p[i] = x[i] - eps;
            let dn = f(&p);
            p[i] = x[i];
            (up - dn) / (2.0 * eps)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gradient_rel_err(arch: &Arch, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = PolicyParams::random(arch.clone(), 0.5, &mut rng).unwrap();
    let v = arch.vocab_size() as Token;
    let batch: Vec<(Vec<Token>, Vec<Token>)> = (0..4)
        .map(|_| {
            let p: Vec<Token> = (0..3).map(|_| rng.gen_range(0..v)).collect();
            let r: Vec<Token> = (0..2).map(|_| rng.gen_range(0..v)).collect();
            (p, r)
        })
        .collect();
    let refs: Vec<(&[Token], &[Token])> = batch.iter().map(|(p, r)| (p.as_slice(), r.as_slice())).collect();
    let (_, g) = params.ce_loss_and_grad(&refs).unwrap();
    let fd = central_diff(&params.values, 1e-5, |x| {
        let q = PolicyParams::from_values(arch.clone(), x.to_vec()).unwrap();
        q.ce_loss_and_grad(&refs).unwrap().0
    });
    let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&g).max(norm(&fd)).max(1e-12)
}

fn criterion_gradients() -> Outcome {
    let tab = Arch::Tabular(TabularArch { vocab_size: 5, buckets: 7, max_prompt: 3, max_response: 2, eos: Some(4) });
    let mlp = Arch::Mlp(MlpArch {
        vocab_size: 6,
        embed_dim: 3,
        hidden_dim: 5,
        layers: 2,
        max_prompt: 3,
        max_response: 2,
        eos: Some(5),
        pad: 0,
    });
    let mut worst = BTreeMap::new();
    for (name, arch) in [("tabular", &tab), ("mlp", &mlp)] {
        let e = (0..3).map(|s| gradient_rel_err(arch, 100 + s)).fold(0.0, f64::max);
        worst.insert(name, e);
    }
    let ok = worst.values().all(|&e| e < 1e-4);
    (ok, format!("max relative error over 3 points: {worst:?}"))
}

// ---------------------------------------------------------------- 3-5

fn criterion_loss_bound_identity() -> Outcome {
    let rows = loss_bound_identity(&DiagConfig::default()).unwrap();
    let disc: usize = rows.iter().map(|r| r.discrepancies + r.kept_outside_predicate).sum();
    let nonempty = rows.iter().all(|r| r.kept > 0 && r.quantile_selected == r.loss_selected);
    let ok = rows.len() >= 10 && disc == 0 && nonempty;
    (ok, format!("{} pools, {} discrepancies", rows.len(), disc))
}

fn criterion_gradient_identity() -> Outcome {
    let cfg = DiagConfig::default();
    let rows = gradient_identity(&cfg).unwrap();
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let ok = cfg.vocab <= 4 && cfg.max_response <= 2 && rows.len() >= 5 && worst < 1e-8;
    (ok, format!("{} configs, vocab {}, length {}, max relative error {worst:.2e}", rows.len(), cfg.vocab, cfg.max_response))
}

fn criterion_one_step_scaling() -> Outcome {
    let cfg = DiagConfig::default();
    let lo = cfg.etas.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = cfg.etas.iter().cloned().fold(0.0, f64::max);
    let runs = one_step_runs(&cfg).unwrap();
    let mut slopes = Vec::new();
    let mut ok = lo <= 1e-4 && hi >= 1e-2 && !runs.is_empty();
    let mut worst_ratio: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    for r in &runs {
        let s = r.top.slope.unwrap_or(f64::NAN);
        slopes.push(s);
        ok &= (s - 2.0).abs() <= 0.1;
        worst_residual = worst_residual.max(r.top.fisher.residual);
        for b in &r.top.reports {
            worst_ratio = worst_ratio.max(b.measured.value / b.bound);
        }
    }
    ok &= worst_ratio <= 1.05 && worst_residual < 1e-3;
    let slopes: Vec<String> = slopes.iter().map(|s| format!("{s:.3}")).collect();
    (ok, format!("slopes [{}], max KL/bound {worst_ratio:.3}, max power residual {worst_residual:.1e}", slopes.join(", ")))
}

// ---------------------------------------------------------------- 6-8

struct JobSummary {
    bwt: f64,
    stage_kl: Vec<Option<f64>>,
    spearman: Option<f64>,
}

struct Grid {
    seeds: Vec<u64>,
    jobs: BTreeMap<(String, u64), JobSummary>,
    /// Wall seconds for the criterion-6 and criterion-7 subsets.
    ablate_secs: f64,
    main_secs: f64,
}

impl Grid {
    fn bwt(&self, label: &str, seed: u64) -> f64 {
        self.jobs[&(label.to_string(), seed)].bwt
    }

    fn mean_bwt(&self, label: &str) -> f64 {
        self.seeds.iter().map(|&s| self.bwt(label, s)).sum::<f64>() / self.seeds.len() as f64
    }
}

fn run_all(exp: &Experiment, methods: &[MethodSpec], jobs: &mut BTreeMap<(String, u64), JobSummary>) -> f64 {
    let t = Instant::now();
    for m in methods {
        for &seed in &exp.config.seeds {
            if jobs.contains_key(&(m.label(), seed)) {
                continue;
            }
            let run = exp.run(m, seed).unwrap();
            let windows: Vec<_> = run.stages.iter().flat_map(|s| s.windows.clone()).collect();
            let spearman = if windows.is_empty() { None } else { forgetting_vs_kl_probe(&windows).spearman };
            let stage_kl = run.stages.iter().map(|s| s.stage_kl.as_ref().map(|k| k.value)).collect();
            jobs.insert((m.label(), seed), JobSummary { bwt: bwt(&run.matrix).unwrap(), stage_kl, spearman });
        }
    }
    t.elapsed().as_secs_f64()
}

fn grid() -> &'static Grid {
    static GRID: OnceLock<Grid> = OnceLock::new();
    GRID.get_or_init(|| {
        let (mut cfg, _) = ExperimentConfig::load(&repo_root().join("configs/main.toml")).unwrap();
        cfg.workers = 1;
        if cfg.diagnostics.kl_probe.is_none() {
            cfg.diagnostics.kl_probe = Some(ProbeConfig::default());
        }
        let seeds = cfg.seeds.clone();
        let exp = Experiment::new(cfg).unwrap();
        let mut jobs = BTreeMap::new();
        let ablate = [MethodSpec::vanilla(0.10), MethodSpec::opr_ru(0.10), MethodSpec::opr_low_score(0.10)];
        let ablate_secs = run_all(&exp, &ablate, &mut jobs);
        let mut main = vec![MethodSpec::seq_sft()];
        for rho in [0.01, 0.05] {
            main.push(MethodSpec::vanilla(rho));
            main.push(MethodSpec::opr_ru(rho));
        }
        let main_secs = run_all(&exp, &main, &mut jobs);
        Grid { seeds, jobs, ablate_secs, main_secs }
    })
}

fn criterion_falsification() -> Outcome {
    let g = grid();
    let (top, van, bot) = ("opr-ru@0.1", "vanilla-replay@0.1", "opr-low-score@0.1");
    let (t, v, b) = (g.mean_bwt(top), g.mean_bwt(van), g.mean_bwt(bot));
    let per_seed: Vec<bool> = g.seeds.iter().map(|&s| g.bwt(top, s) > g.bwt(bot, s)).collect();
    let ok = g.seeds.len() >= 3 && t > v && b < v && per_seed.iter().all(|&x| x) && g.ablate_secs < 1800.0;
    (
        ok,
        format!(
            "seed-mean BWT top {t:.2}, vanilla {v:.2}, bottom {b:.2}; top > bottom per seed {per_seed:?}; {:.0}s",
            g.ablate_secs
        ),
    )
}

fn criterion_main_ordering() -> Outcome {
    let g = grid();
    let seq = g.mean_bwt("seq-sft");
    let mut ok = seq <= -10.0 && g.main_secs < 3600.0;
    let mut parts = vec![format!("seq-sft {seq:.2}")];
    for rho in ["0.01", "0.05"] {
        let v = g.mean_bwt(&format!("vanilla-replay@{rho}"));
        let r = g.mean_bwt(&format!("opr-ru@{rho}"));
        ok &= seq.abs() > v.abs() && v.abs() > r.abs();
        parts.push(format!("rho {rho}: vanilla {v:.2}, opr-ru {r:.2}"));
    }
    (ok, format!("seed-mean BWT {}; {:.0}s", parts.join("; "), g.main_secs))
}

fn mean_stage_kl(g: &Grid, label: &str) -> Vec<Option<f64>> {
    let runs: Vec<&JobSummary> = g.seeds.iter().map(|&s| &g.jobs[&(label.to_string(), s)]).collect();
    (0..runs[0].stage_kl.len())
        .map(|j| {
            let v: Option<Vec<f64>> = runs.iter().map(|r| r.stage_kl[j]).collect();
            v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

fn criterion_kl_shrinkage() -> Outcome {
    let g = grid();
    let seq = mean_stage_kl(g, "seq-sft");
    let mut ok = true;
    let mut parts = Vec::new();
    for rho in ["0.01", "0.05"] {
        let ru = mean_stage_kl(g, &format!("opr-ru@{rho}"));
        let mut matched = 0;
        let mut wins = 0;
        for (a, b) in ru.iter().zip(&seq) {
            if let (Some(a), Some(b)) = (a, b) {
                matched += 1;
                wins += usize::from(a < b);
            }
        }
        ok &= matched > 0 && wins == matched;
        parts.push(format!("rho {rho}: KL(opr-ru) < KL(seq-sft) at {wins}/{matched} stages"));
    }
    let rhos: Vec<Option<f64>> = g.seeds.iter().map(|&s| g.jobs[&("seq-sft".to_string(), s)].spearman).collect();
    ok &= rhos.iter().all(|r| r.is_some_and(|r| r > 0.0));
    let rhos: Vec<String> = rhos.iter().map(|r| r.map_or("-".into(), |r| format!("{r:.3}"))).collect();
    (ok, format!("{}; seq-sft window Spearman [{}]", parts.join("; "), rhos.join(", ")))
}

// ---------------------------------------------------------------- 9

fn greedy_decode(params: &PolicyParams, prompt: &[Token], max_new: usize, eos: Token) -> Vec<Token> {
    let mut out = Vec::new();
    while out.len() < max_new {
        let z = params.next_token_logits(prompt, &out).unwrap();
        let mut best = 0;
        for i in 1..z.len() {
            if z[i] > z[best] {
                best = i;
            }
        }
        out.push(best as Token);
        if best as Token == eos {
            break;
        }
    }
    out
}

fn criterion_sampler_allocator() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut argmax_ok = true;
    for _ in 0..200 {
        let z: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let best = (0..7).fold(0, |b, i| if z[i] > z[b] { i } else { b });
        argmax_ok &= sample_token(&z, 0.0, 1.0, &mut rng) as usize == best;
    }
    let arch = Arch::Mlp(MlpArch {
        vocab_size: 6,
        embed_dim: 4,
        hidden_dim: 8,
        layers: 1,
        max_prompt: 4,
        max_response: 5,
        eos: Some(5),
        pad: 0,
    });
    let params = PolicyParams::random(arch, 2.0, &mut rng).unwrap();
    for i in 0..20u64 {
        let prompt: Vec<Token> = (0..3).map(|_| rng.gen_range(0..5)).collect();
        let cfg = SamplerConfig { temperature: 0.0, top_p: 1.0, max_new_tokens: 5, seed: i };
        argmax_ok &= sample_response(&params, &prompt, &cfg).unwrap().tokens == greedy_decode(&params, &prompt, 5, 5);
    }
    ok &= argmax_ok;
    notes.push(format!("temperature 0 = argmax: {argmax_ok}"));

    let set = nucleus(&[0.6, 0.3, 0.1], 0.5);
    let only_zero = (0..500).all(|_| sample_token(&[0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()], 1.0, 0.5, &mut rng) == 0);
    let nucleus_ok = set.len() == 1 && set[0].0 == 0 && close(set[0].1, 1.0, 1e-12) && only_zero;
    ok &= nucleus_ok;
    notes.push(format!("top-p 0.5 nucleus {set:?}"));

    let a = allocate_budget(50, 3, &[None; 3]).unwrap().counts;
    let b = allocate_budget(5, 4, &[Some(1), None, None, None]).unwrap().counts;
    ok &= a == [17, 17, 16] && b == [1, 2, 1, 1];
    notes.push(format!("allocations {a:?} {b:?}"));

    let (cfg, _) = ExperimentConfig::load(&repo_root().join("configs/toy.toml")).unwrap();
    let exp = Experiment::new(cfg).unwrap();
    let v1 = build_vanilla_buffer(&exp.datasets[..1], 0.1, 100, 7, 1).unwrap();
    let v2 = build_vanilla_buffer(&exp.datasets[..1], 0.1, 100, 7, 1).unwrap();
    let arch = exp.config.model.arch(&exp.stream);
    let p = PolicyParams::random(arch, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let hist = HistoricalPromptPool::from_datasets(&exp.datasets[..1]);
    let oc = OprConfig {
        rho: 0.1,
        scorer: ScorerKind::Rule,
        mode: BufferMode::TopScore,
        sampler: SamplerConfig { temperature: 1.0, ..SamplerConfig::default() },
    };
    let o1 = build_opr_stage(&p, &hist, &exp.stream, &oc, 100, 1, 1).unwrap();
    let o2 = build_opr_stage(&p, &hist, &exp.stream, &oc, 100, 1, 1).unwrap();
    let det = v1 == v2 && o1.buffer == o2.buffer && o1.pool == o2.pool && !v1.is_empty() && !o1.buffer.is_empty();
    ok &= det;
    notes.push(format!("buffer determinism: {det}"));
    (ok, notes.join("; "))
}

// ---------------------------------------------------------------- 10

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "matrix.csv" || n == "buffer.jsonl") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_reproducibility() -> Outcome {
    let path = repo_root().join("configs/toy.toml");
    let (mut cfg, raw) = ExperimentConfig::load(&path).unwrap();
    cfg.workers = 1;
    cfg.methods.push(MethodSpec::opr_sc(0.1));
    cfg.methods.push(MethodSpec::sdft(1.0));
    let tmp = tempfile::tempdir().unwrap();
    let (a, _) = harness::cmd_run(cfg.clone(), &raw, &tmp.path().join("a"), false).unwrap();
    let (b, _) = harness::cmd_run(cfg, &raw, &tmp.path().join("b"), false).unwrap();
    let (fa, fb) = (files_under(&a), files_under(&b));
    let buffers = fa.keys().filter(|k| k.ends_with("buffer.jsonl")).count();
    let same_hash = harness::content_hash(&a).unwrap() == harness::content_hash(&b).unwrap();
    let ok = fa == fb && buffers > 0 && same_hash;
    (ok, format!("{} matrix/buffer files compared, identical: {}, content hash equal: {same_hash}", fa.len(), fa == fb))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("metric fixtures", criterion_metric_fixtures),
        ("finite-difference gradients", criterion_gradients),
        ("self-confidence loss-bound identity", criterion_loss_bound_identity),
        ("filtered-KL gradient identity", criterion_gradient_identity),
        ("one-step KL scaling and bound", criterion_one_step_scaling),
        ("top vs bottom falsification ordering", criterion_falsification),
        ("main BWT ordering", criterion_main_ordering),
        ("KL shrinkage and KL/forgetting correlation", criterion_kl_shrinkage),
        ("sampler and allocator contracts", criterion_sampler_allocator),
        ("single-worker reproducibility", criterion_reproducibility),
    ];
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("criterion {:>2}", i + 1);
        if !args.is_empty() && !args.iter().any(|a| name.contains(a.as_str()) || id.ends_with(a.as_str())) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += usize::from(!ok);
        println!("{} {id} ({name}): {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
