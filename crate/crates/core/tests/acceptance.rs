//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{draw, gradient_errors, specs, Bigram};
use siu_core::attacks::{min_k_mean, min_k_prob, mia_protocol, multihop_jailbreak, rouge_l};
use siu_core::experiment::{prepare_base, run_cell, run_experiment, BaseModel, CellOutcome, ConceptSelection, ExperimentConfig};
use siu_core::losses::{dmk_from_rows, dmk_loss, evaluate_loss, ga_kl_loss, ga_loss, masked_kl_row, DualMask, LossSpec};
use siu_core::metrics::{c_dis_from_probs, diversity, first_token_tv, fluency, fluency_items, masked_perplexity, specificity};
use siu_core::model::{answer_rows, LanguageModel, ModelParams};
use siu_core::trainer::{retrain_oracle, TrainConfig, MULTI_CONCEPT_STEPS, UNLEARN_STEPS};
use siu_core::{build_forget_set, build_pretrain_corpus, build_world, Method, QaKind, Token, WorldConfig};

const SEEDS: [u64; 3] = [1, 2, 3];
const CONCEPT: usize = 0;
const TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

fn gradient_audit() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut checked = 0;
    for seed in 0..100 {
        let d = draw(10_000 + seed);
        for (_, spec) in specs(&d) {
            let (rel, abs) = gradient_errors(&d, &spec);
            worst = worst.max(rel);
            worst_abs = worst_abs.max(abs);
            checked += d.params.data.len();
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("{checked} partial derivatives, worst relative error {worst:.2e}, worst absolute difference {worst_abs:.2e}, {secs:.1}s"),
    )
}

/// Log-rows of `m` at every answer position of a draw.
fn rows_of(m: &ModelParams, d: &common::Draw) -> Vec<Vec<f64>> {
    let tokens: Vec<Token> = d.prompt.iter().chain(&d.answer).copied().collect();
    m.logprob_rows(d.image.as_ref(), &tokens, &answer_rows(d.prompt.len(), d.answer.len())).unwrap()
}

fn kl_by_hand(p: &[f64], q: &[f64], keep: impl Fn(usize) -> bool) -> f64 {
    (0..p.len()).filter(|v| keep(*v)).map(|v| p[v] * (p[v] / q[v]).ln()).sum()
}

fn loss_identities() -> Outcome {
    let mut bad = Vec::new();
    for seed in 0..100 {
        let d = draw(20_000 + seed);
        let seq = d.seq();
        let n = d.answer.len();
        let v = d.params.dims.vocab_size;

        let same = dmk_loss(&d.params, &d.params, seq, &d.mask).unwrap();
        if same.dmk != 0.0 {
            bad.push(format!("draw {seed}: dmk(θ,θ) = {:e}", same.dmk));
        }
        let off = DualMask { token_mask: vec![false; n], vocab_mask: d.mask.vocab_mask.clone() };
        let z = dmk_loss(&d.params, &d.reference, seq, &off).unwrap();
        if z.dmk != 0.0 || z.kl_terms != 0 {
            bad.push(format!("draw {seed}: K_S = 0 gives {:e}", z.dmk));
        }
        let full = dmk_loss(&d.params, &d.reference, seq, &DualMask::ones(n, v)).unwrap();
        let p: Vec<Vec<f64>> = rows_of(&d.reference, &d).iter().map(|r| r.iter().map(|x| x.exp()).collect()).collect();
        let lq = rows_of(&d.params, &d);
        let mut sum = 0.0;
        for (t, (pr, qr)) in p.iter().zip(&lq).enumerate() {
            let c = masked_kl_row(pr, qr, &vec![true; v]).value;
            if c < 0.0 {
                bad.push(format!("draw {seed}: position {t} contributes {c:e}"));
            }
            sum += c;
        }
        if (sum - full.dmk).abs() > 1e-10 {
            bad.push(format!("draw {seed}: full-mask DMK {} vs position sum {sum}", full.dmk));
        }
        let masked = dmk_loss(&d.params, &d.reference, seq, &d.mask).unwrap();
        if masked.kl_terms != d.mask.term_count() {
            bad.push(format!("draw {seed}: {} terms, expected {}", masked.kl_terms, d.mask.term_count()));
        }
        let ga = ga_loss(&d.params, seq).unwrap();
        if ga_kl_loss(&d.params, &d.reference, seq, 0.0).unwrap() != ga {
            bad.push(format!("draw {seed}: GA+KL with weight 0 differs from GA"));
        }
        let ce = evaluate_loss(&d.params, seq, &LossSpec::cross_entropy()).unwrap().total;
        let total = evaluate_loss(&d.params, seq, &LossSpec::total(&d.reference, &d.mask, 0.9, 0.75)).unwrap().total;
        if (total - (0.9 * ce + 0.75 * masked.dmk)).abs() > 1e-12 {
            bad.push(format!("draw {seed}: total {total} vs recombined {}", 0.9 * ce + 0.75 * masked.dmk));
        }
    }

    // KL(P‖uniform) summed by hand.
    let p = [0.4, 0.3, 0.2, 0.1];
    let oracle = 0.4 * (0.4f64 / 0.25).ln() + 0.3 * (0.3f64 / 0.25).ln() + 0.2 * (0.2f64 / 0.25).ln() + 0.1 * (0.1f64 / 0.25).ln();
    let got = dmk_from_rows(&[p.to_vec()], &[vec![0.25f64.ln(); 4]], &DualMask::ones(1, 4)).value;
    if !close(got, oracle) {
        bad.push(format!("KL(P‖U) {got} vs {oracle}"));
    }

    // Reference rows of a pretrained vision-language model answering "who is
    // in the picture?" about a former president. Vocabulary:
    // [Donald, Trump, top token, other, other].
    let start = vec![0.06, 0.08, 0.57, 0.20, 0.09];
    let after_president = vec![0.22, 0.02, 0.42, 0.20, 0.14];
    let after_donald = vec![0.68, 0.31, 0.004, 0.003, 0.003];
    let p_rows = vec![start.clone(), after_president.clone(), after_donald.clone()];
    let q = [0.1, 0.1, 0.5, 0.2, 0.1];
    let lq_rows = vec![q.iter().map(|x: &f64| x.ln()).collect::<Vec<f64>>(); 3];
    let all = DualMask::ones(3, 5);
    let whole = dmk_from_rows(&p_rows, &lq_rows, &all);
    let row = |p: &[f64]| kl_by_hand(p, &q, |_| true);
    let oracle_whole = row(&start) + row(&after_president) + row(&after_donald);
    if !close(whole.value, oracle_whole) || whole.terms != 15 {
        bad.push(format!("table rows: {} vs {oracle_whole}", whole.value));
    }
    let token_masked = DualMask { token_mask: vec![true, false, true], vocab_mask: vec![true; 5] };
    let r = dmk_from_rows(&p_rows, &lq_rows, &token_masked);
    if !close(r.value, oracle_whole - row(&after_president)) || r.terms != 10 {
        bad.push(format!("masking the post-title position: {} vs {}", r.value, oracle_whole - row(&after_president)));
    }
    let name_masked = vec![false, false, true, true, true];
    let r = masked_kl_row(&start, &lq_rows[0], &name_masked);
    let oracle_start = row(&start) - start[0] * (start[0] / q[0]).ln() - start[1] * (start[1] / q[1]).ln();
    if !close(r.value, oracle_start) || r.terms != 3 {
        bad.push(format!("masking the name tokens at the start: {} vs {oracle_start}", r.value));
    }

    let n = bad.len();
    outcome(n == 0, if n == 0 { "100 draws and 4 fixtures".into() } else { bad.join("; ") })
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn lcs_brute(a: &[Token], b: &[Token]) -> usize {
    let is_sub = |s: &[Token]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .map(|m| (0..a.len()).filter(|i| m & (1 << i) != 0).map(|i| a[i]).collect::<Vec<_>>())
        .filter(|s| is_sub(s))
        .map(|s| s.len())
        .max()
        .unwrap_or(0)
}

fn toks(xs: &[u32]) -> Vec<Token> {
    xs.iter().map(|x| Token(*x)).collect()
}

fn metric_oracles() -> Outcome {
    let mut bad = Vec::new();
    let mut check = |what: &str, got: f64, want: f64| {
        if !close(got, want) {
            bad.push(format!("{what}: {got} vs {want}"));
        }
    };

    // Fluency.
    let lp = [0.5f64.ln(), 0.25f64.ln(), -3.0, 0.125f64.ln()];
    check("fluency 4-token", masked_perplexity(&lp, &[false, false, true, false], 128), 2f64.powf(13.0 / 4.0));
    check("fluency uniform", masked_perplexity(&[-(128f64).ln(); 5], &[false; 5], 128), 128.0);
    check("fluency all masked", masked_perplexity(&[-0.1, -7.0, -2.0], &[true; 3], 50), 50.0);
    check("fluency halves", masked_perplexity(&[0.5f64.ln(); 6], &[false; 6], 128), 2.0);

    // Diversity.
    let uniq = |outs: &[Vec<Token>]| {
        let s: HashSet<Token> = outs.iter().flatten().copied().collect();
        100.0 * s.len() as f64 / outs.iter().map(Vec::len).sum::<usize>() as f64
    };
    for outs in [
        vec![toks(&[7, 7, 7, 7])],
        vec![toks(&[1, 2, 3, 4, 5])],
        vec![toks(&[1, 2, 3, 4]), toks(&[3, 4, 5, 6])],
        vec![toks(&[9, 1]), toks(&[1, 1, 9]), toks(&[4])],
    ] {
        check("diversity", diversity(&outs), uniq(&outs));
    }
    check("diversity repeated", diversity(&[toks(&[7, 7, 7, 7])]), 25.0);
    check("diversity half shared", diversity(&[toks(&[1, 2, 3, 4]), toks(&[3, 4, 5, 6])]), 75.0);

    // C-Dis.
    check("c-dis single", c_dis_from_probs(&[(0.9, 0.009)]), 0.9 * 100f64.ln());
    check("c-dis identical", c_dis_from_probs(&[(0.3, 0.3), (0.7, 0.7)]), 0.0);
    check(
        "c-dis mean",
        c_dis_from_probs(&[(0.9, 0.009), (0.5, 0.25)]),
        (0.9 * 100f64.ln() + 0.5 * 2f64.ln()) / 2.0,
    );
    let increasing = c_dis_from_probs(&[(0.9, 0.001)]) > c_dis_from_probs(&[(0.9, 0.009)]);
    check("c-dis increasing in the drop", f64::from(u8::from(increasing)), 1.0);

    // Min-K%.
    let bigram = Bigram::random(5, 7);
    for text in [[0u32, 3, 1], [4, 4, 2], [2, 0, 0]] {
        let text = toks(&text);
        let per: Vec<f64> = (1..3).map(|i| bigram.logp[text[i - 1].index()][text[i].index()]).collect();
        check("min-k 34%", min_k_prob(&bigram, None, &text, 34.0).unwrap(), per[0].min(per[1]));
        check("min-k 100%", min_k_prob(&bigram, None, &text, 100.0).unwrap(), (per[0] + per[1]) / 2.0);
    }
    let uniform = Bigram::uniform(5);
    for k in [1.0, 20.0, 34.0, 100.0] {
        check("min-k uniform", min_k_prob(&uniform, None, &toks(&[0, 1, 2, 3]), k).unwrap(), -(5f64).ln());
    }
    check("min-k 40% of five", min_k_mean(&[-1.0, -5.0, -2.0, -4.0, -3.0], 40.0).unwrap(), -4.5);

    // ROUGE-L.
    check("rouge fixture", rouge_l(&toks(&[0, 1, 2, 3]), &toks(&[0, 2, 3])), 6.0 / 7.0);
    check("rouge identical", rouge_l(&toks(&[4, 2, 4]), &toks(&[4, 2, 4])), 1.0);
    check("rouge disjoint", rouge_l(&toks(&[1, 2]), &toks(&[3, 4, 5])), 0.0);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    for _ in 0..20 {
        use rand::Rng;
        let seq = |rng: &mut rand_chacha::ChaCha8Rng| {
            let n = rng.random_range(1..8);
            (0..n).map(|_| Token(rng.random_range(0..4))).collect::<Vec<_>>()
        };
        let (a, b) = (seq(&mut rng), seq(&mut rng));
        let l = lcs_brute(&a, &b) as f64;
        let want = if l == 0.0 { 0.0 } else { 2.0 * l / (a.len() + b.len()) as f64 };
        check("rouge brute force", rouge_l(&a, &b), want);
    }

    let n = bad.len();
    outcome(n == 0, if n == 0 { "all fixtures reproduced to 1e-9".into() } else { bad.join("; ") })
}

struct SeedRun {
    base: BaseModel,
    base_specificity: f64,
    base_fluency: f64,
    base_multihop: f64,
    siu: CellOutcome,
    ga: CellOutcome,
    ga_kl: CellOutcome,
}

fn seed_run(cfg: &ExperimentConfig, seed: u64) -> SeedRun {
    let base = prepare_base(cfg, seed).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    let params = &base.pretrained.params;
    let world = &base.world;
    let forget = build_forget_set(world, CONCEPT).unwrap();
    let items = fluency_items(params, world, &[&forget]).unwrap();
    let base_fluency = fluency(params, &items, &[world.concept(CONCEPT).unwrap()]).unwrap().perplexity;
    let cell = |m| run_cell(&base, &[CONCEPT], &cfg.unlearn_config(m, UNLEARN_STEPS, seed), cfg.k_percent).unwrap();
    SeedRun {
        base_specificity: specificity(params, world, &[CONCEPT]).unwrap(),
        base_fluency,
        base_multihop: multihop_jailbreak(params, world, CONCEPT).unwrap(),
        siu: cell(Method::Siu),
        ga: cell(Method::Ga),
        ga_kl: cell(Method::GaKl),
        base,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Which of specificity, fluency and diversity a cell keeps within bounds.
fn utility_ok(r: &SeedRun, c: &CellOutcome) -> [bool; 3] {
    let m = &c.metrics;
    [
        (m.specificity - r.base_specificity).abs() <= 5.0,
        m.fluency <= 2.0 * r.base_fluency,
        m.diversity >= 80.0,
    ]
}

fn end_to_end(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let mut lines = Vec::new();
    for r in runs {
        let m = &r.siu.metrics;
        lines.push(format!(
            "seed {}: SIU EM {:.1} spec {:.1} (base {:.1}) flu {:.2} (base {:.2}) div {:.1}; GA spec {:.1} flu {:.3e} div {:.1}; C-Dis GA+KL {:.3} SIU {:.3}",
            r.base.seed,
            m.em,
            m.specificity,
            r.base_specificity,
            m.fluency,
            r.base_fluency,
            m.diversity,
            r.ga.metrics.specificity,
            r.ga.metrics.fluency,
            r.ga.metrics.diversity,
            r.ga_kl.metrics.c_dis,
            m.c_dis
        ));
    }
    let em = mean(runs.iter().map(|r| r.siu.metrics.em));
    let spec_gap = mean(runs.iter().map(|r| r.siu.metrics.specificity - r.base_specificity));
    let flu_ratio = mean(runs.iter().map(|r| r.siu.metrics.fluency / r.base_fluency));
    let div = mean(runs.iter().map(|r| r.siu.metrics.diversity));
    let siu_ok = em >= 90.0 && spec_gap.abs() <= 5.0 && flu_ratio <= 2.0 && div >= 80.0;
    let siu_per_seed = runs
        .iter()
        .filter(|r| r.siu.metrics.em >= 90.0 && utility_ok(r, &r.siu).iter().all(|x| *x))
        .count();
    let ga_violations = runs.iter().filter(|r| utility_ok(r, &r.ga).iter().any(|x| !x)).count();
    let cdis_order = runs.iter().filter(|r| r.ga_kl.metrics.c_dis < r.siu.metrics.c_dis).count();
    let fast = elapsed < Duration::from_secs(600);
    let pass = siu_ok && ga_violations >= 2 && cdis_order >= 2 && fast;
    outcome(
        pass,
        format!(
            "SIU over seeds: EM {em:.1}, specificity gap {spec_gap:+.1}, fluency ratio {flu_ratio:.2}, diversity {div:.1} \
             (all four hold in {siu_per_seed}/3 seeds individually); GA breaks utility in {ga_violations}/3; \
             GA+KL C-Dis below SIU in {cdis_order}/3; {:.0}s\n    {}",
            elapsed.as_secs_f64(),
            lines.join("\n    ")
        ),
    )
}

fn alignment(cfg: &ExperimentConfig, runs: &[SeedRun]) -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for r in runs {
        let b = &r.base;
        let oracle = retrain_oracle(&b.world, &b.corpus, CONCEPT, &TrainConfig { seed: b.seed, ..cfg.pretrain.clone() }).unwrap();
        let test = &build_forget_set(&b.world, CONCEPT).unwrap().test;
        let siu = first_token_tv(&r.siu.run.unlearned, &oracle.params, test).unwrap();
        let base = first_token_tv(&b.pretrained.params, &oracle.params, test).unwrap();
        wins += usize::from(siu < base);
        lines.push(format!("seed {}: TV(SIU, oracle) {siu:.3} vs TV(base, oracle) {base:.3}", b.seed));
    }
    outcome(wins >= 2, format!("SIU closer to the oracle in {wins}/3 seeds; {}", lines.join("; ")))
}

fn range(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - xs.iter().copied().fold(f64::INFINITY, f64::min)
}

fn step_sweep(cfg: &ExperimentConfig, runs: &[SeedRun]) -> Outcome {
    let curve = |m: Method| -> Vec<f64> {
        cfg.steps_sweep
            .iter()
            .map(|&st| {
                mean(runs.iter().map(|r| {
                    let c = run_cell(&r.base, &[CONCEPT], &cfg.unlearn_config(m, st, r.base.seed), cfg.k_percent).unwrap();
                    c.metrics.specificity
                }))
            })
            .collect()
    };
    let siu = curve(Method::Siu);
    let ga = curve(Method::Ga);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(" ");
    outcome(
        range(&siu) < range(&ga),
        format!(
            "specificity range SIU {:.1} vs GA {:.1} over steps {:?} (SIU [{}], GA [{}])",
            range(&siu),
            range(&ga),
            cfg.steps_sweep,
            fmt(&siu),
            fmt(&ga)
        ),
    )
}

fn multi_concept(cfg: &ExperimentConfig, runs: &[SeedRun]) -> Outcome {
    let mut ok = 0;
    let mut lines = Vec::new();
    for r in runs {
        let b = &r.base;
        let ids = ConceptSelection::All.resolve(&b.world).unwrap();
        let base_spec = specificity(&b.pretrained.params, &b.world, &ids).unwrap();
        let spec = |m| {
            run_cell(b, &ids, &cfg.unlearn_config(m, MULTI_CONCEPT_STEPS, b.seed), cfg.k_percent).unwrap().metrics.specificity
        };
        let (siu, ga) = (spec(Method::Siu), spec(Method::Ga));
        let good = (siu - base_spec).abs() <= 10.0 && ga < 0.5 * base_spec;
        ok += usize::from(good);
        lines.push(format!("seed {}: {} concepts, base {base_spec:.1}, SIU {siu:.1}, GA {ga:.1}", b.seed, ids.len()));
    }
    outcome(ok == runs.len(), format!("holds in {ok}/{} seeds; {}", runs.len(), lines.join("; ")))
}

fn attacks(runs: &[SeedRun]) -> Outcome {
    let mut identical_ok = true;
    let mut lines = Vec::new();
    for r in runs {
        let b = &r.base;
        let params = &b.pretrained.params;
        let queries: Vec<_> = build_forget_set(&b.world, CONCEPT)
            .unwrap()
            .test
            .into_iter()
            .filter(|q| q.kind == QaKind::Recognition)
            .collect();
        let same = mia_protocol(params, params, &b.world, &queries, 20.0).unwrap();
        identical_ok &= same.n_suspicious == queries.len() && same.rouge_l_mean == 1.0;
        lines.push(format!(
            "seed {}: identical {}/{} suspicious ROUGE-L {:.2}; SIU {}/{} suspicious ROUGE-L {:.3}; multihop base {:.2} SIU {:.2}",
            b.seed,
            same.n_suspicious,
            queries.len(),
            same.rouge_l_mean,
            r.siu.attacks.mia.n_suspicious,
            r.siu.attacks.mia.n_queries,
            r.siu.attacks.mia.rouge_l_mean,
            r.base_multihop,
            r.siu.attacks.multihop
        ));
    }
    let rouge = mean(runs.iter().map(|r| r.siu.attacks.mia.rouge_l_mean));
    let drop = mean(runs.iter().map(|r| r.base_multihop - r.siu.attacks.multihop));
    outcome(
        identical_ok && rouge < 0.5 && drop >= 0.5,
        format!(
            "identical models {}; SIU ROUGE-L {rouge:.3}; multihop drop {drop:.2}\n    {}",
            if identical_ok { "ok" } else { "wrong" },
            lines.join("\n    ")
        ),
    )
}

/// Every file under `dir`, relative path and bytes, sorted by path.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(cfg: &ExperimentConfig, runs: &[SeedRun]) -> Outcome {
    let mut bad = Vec::new();
    let seed = runs[0].base.seed;
    let wc = WorldConfig { seed, ..cfg.world.clone() };
    let w1 = build_world(&wc).unwrap();
    let w2 = build_world(&wc).unwrap();
    if serde_json::to_vec(&w1).unwrap() != serde_json::to_vec(&w2).unwrap() {
        bad.push("world");
    }
    let c1 = build_pretrain_corpus(&w1, wc.per_concept).unwrap();
    if serde_json::to_vec(&c1).unwrap() != serde_json::to_vec(&build_pretrain_corpus(&w2, wc.per_concept).unwrap()).unwrap() {
        bad.push("corpus");
    }
    let again = seed_run(cfg, seed);
    let first = &runs[0];
    let bytes = |p: &ModelParams| serde_json::to_vec(p).unwrap();
    if bytes(&again.base.pretrained.params) != bytes(&first.base.pretrained.params) {
        bad.push("pretraining");
    }
    for (a, b) in [(&again.siu, &first.siu), (&again.ga, &first.ga), (&again.ga_kl, &first.ga_kl)] {
        if bytes(&a.run.unlearned) != bytes(&b.run.unlearned) {
            bad.push("unlearning");
        }
        if serde_json::to_vec(&a.metrics).unwrap() != serde_json::to_vec(&b.metrics).unwrap() {
            bad.push("evaluation");
        }
        if serde_json::to_vec(&a.attacks).unwrap() != serde_json::to_vec(&b.attacks).unwrap() {
            bad.push("attacks");
        }
    }
    // Two runs into the same directory, so paths recorded in the output
    // match too.
    let dir = tempfile::tempdir().unwrap();
    let small = ExperimentConfig { n_trials: 1, methods: vec![Method::Siu, Method::Ga], out_dir: dir.path().join("out"), ..cfg.clone() };
    let mut trees = Vec::new();
    for _ in 0..2 {
        run_experiment(&small).unwrap();
        trees.push(tree(&small.out_dir));
        std::fs::remove_dir_all(&small.out_dir).unwrap();
    }
    let t1 = &trees[0];
    if t1.is_empty() || trees[0] != trees[1] {
        bad.push("experiment output tree");
    }
    bad.dedup();
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("world, corpus, checkpoints, reports and {} experiment files identical across runs", t1.len())
        } else {
            format!("differs: {}", bad.join(", "))
        },
    )
}

fn main() {
    let cfg = ExperimentConfig::default();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n} ({name}): {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    report(1, "gradient audit", gradient_audit());
    report(2, "loss identities", loss_identities());
    report(3, "metric oracles", metric_oracles());

    let t = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| seed_run(&cfg, s)).collect();
    let elapsed = t.elapsed();
    report(4, "end-to-end ordering", end_to_end(&runs, elapsed));
    report(5, "alignment with the retrained oracle", alignment(&cfg, &runs));
    report(6, "step-sweep stability", step_sweep(&cfg, &runs));
    report(7, "multi-concept unlearning", multi_concept(&cfg, &runs));
    report(8, "membership inference and jailbreaks", attacks(&runs));
    report(9, "determinism", determinism(&cfg, &runs));

    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| r.0.to_string()).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
    } else {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
