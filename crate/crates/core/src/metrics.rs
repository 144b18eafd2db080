//! Forgetting, utility and output-quality metrics.

use serde::{Deserialize, Serialize};

use crate::corpus::{
    factual_probes, recognition_probes, ConceptSpec, ConceptWorld, ForgetSet, PseudoImage, QAPair, QaKind, Template,
};
use crate::error::{Error, Result};
use crate::model::{answer_logprobs, generate, LanguageModel, Decode};
use crate::vocab::{Lexicon, Token};

/// Longest answer decoded by any metric.
pub const MAX_ANSWER: usize = 8;
/// Recognition probes per concept used by specificity.
pub const SPECIFICITY_PROBES: usize = 6;
/// Perplexities above this are reported as infinite.
pub const FLUENCY_INF: f64 = 1e6;
const C_DIS_FLOOR: f64 = 1e-12;

/// Greedy answer to `q`, including the end token if one was produced.
pub fn greedy_answer(model: &dyn LanguageModel, lex: &Lexicon, q: &QAPair) -> Result<Vec<Token>> {
    generate(model, q.image.as_ref(), &q.prompt_tokens, &Decode::greedy(MAX_ANSWER, lex.eos))
}

pub fn strip_eos(lex: &Lexicon, out: &[Token]) -> Vec<Token> {
    out.iter().copied().filter(|t| *t != lex.eos).collect()
}

pub fn contains_name_token(out: &[Token], concept: &ConceptSpec) -> bool {
    out.iter().any(|t| concept.is_name_token(*t))
}

pub fn contains_full_name(out: &[Token], concept: &ConceptSpec) -> bool {
    out.windows(concept.true_name.len()).any(|w| w == concept.true_name.as_slice())
}

/// Whether the answer to a forget query shows the concept was forgotten:
/// recognition answers must not name it, yes/no answers must say no.
pub fn is_forgotten(out: &[Token], q: &QAPair, concept: &ConceptSpec, lex: &Lexicon) -> bool {
    match q.kind {
        QaKind::Yesno => out.first() == Some(&lex.no) && !contains_name_token(out, concept),
        _ => !contains_name_token(out, concept),
    }
}

fn percent(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

/// Share of forget queries answered in the forgotten way.
pub fn forgotten_rate(model: &dyn LanguageModel, world: &ConceptWorld, queries: &[QAPair], concept: usize) -> Result<f64> {
    let spec = world.concept(concept)?;
    let mut hits = 0;
    for q in queries {
        let out = greedy_answer(model, &world.lexicon, q)?;
        hits += usize::from(is_forgotten(&out, q, spec, &world.lexicon));
    }
    Ok(percent(hits, queries.len()))
}

/// Forgetting on the training image, asked through every phrasing.
pub fn efficacy(model: &dyn LanguageModel, world: &ConceptWorld, forget: &ForgetSet) -> Result<f64> {
    forgotten_rate(model, world, &forget.train_queries(world)?, forget.concept_id)
}

/// Exact-match forgetting on the held-out forget queries.
pub fn exact_match(model: &dyn LanguageModel, world: &ConceptWorld, test: &[QAPair], concept: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("forget test set"));
    }
    forgotten_rate(model, world, test, concept)
}

/// Teacher-forced probability of the full name at a recognition query's
/// answer slot.
pub fn name_probability(model: &dyn LanguageModel, q: &QAPair, concept: &ConceptSpec) -> Result<f64> {
    let lp = answer_logprobs(model, q.image.as_ref(), &q.prompt_tokens, &concept.true_name)?;
    Ok(lp.iter().sum::<f64>().exp())
}

/// `mean P log(P / Q)` over `(P, Q)` pairs, with both floored.
pub fn c_dis_from_probs(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let s: f64 = pairs
        .iter()
        .map(|&(p, q)| {
            let (p, q) = (p.max(C_DIS_FLOOR), q.max(C_DIS_FLOOR));
            p * (p / q).ln()
        })
        .sum();
    s / pairs.len() as f64
}

/// Drop in the name's probability from `base` to `unlearned`, averaged over
/// the recognition queries of `test`. Positive when the name became less
/// likely.
pub fn c_dis(
    base: &dyn LanguageModel,
    unlearned: &dyn LanguageModel,
    world: &ConceptWorld,
    test: &[QAPair],
    concept: usize,
) -> Result<f64> {
    let spec = world.concept(concept)?;
    let mut pairs = Vec::new();
    for q in test.iter().filter(|q| q.kind == QaKind::Recognition) {
        pairs.push((name_probability(base, q, spec)?, name_probability(unlearned, q, spec)?));
    }
    Ok(c_dis_from_probs(&pairs))
}

/// Held-out probes about every concept not in `forgotten`.
pub fn specificity_probes(world: &ConceptWorld, forgotten: &[usize]) -> Result<Vec<QAPair>> {
    let kept: Vec<usize> = (0..world.concepts.len()).filter(|c| !forgotten.contains(c)).collect();
    if kept.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "specificity needs at least 2 non-forgotten concepts, {} left",
            kept.len()
        )));
    }
    let mut out = Vec::new();
    for c in kept {
        out.extend(recognition_probes(world, c, SPECIFICITY_PROBES)?);
        out.extend(factual_probes(world, c)?);
    }
    Ok(out)
}

/// Percentage of probes whose most likely first answer token is the
/// expected name or value token.
pub fn slot_accuracy(model: &dyn LanguageModel, probes: &[QAPair]) -> Result<f64> {
    let mut hits = 0;
    for q in probes {
        let rows = model.logprob_rows(q.image.as_ref(), &q.prompt_tokens, &[q.prompt_tokens.len() - 1])?;
        let row = &rows[0];
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        hits += usize::from(Token::from(best) == q.answer_tokens[0]);
    }
    Ok(percent(hits, probes.len()))
}

/// Accuracy on knowledge about the concepts that were not unlearned.
pub fn specificity(model: &dyn LanguageModel, world: &ConceptWorld, forgotten: &[usize]) -> Result<f64> {
    slot_accuracy(model, &specificity_probes(world, forgotten)?)
}

/// Total-variation distance between two log-distributions over the same
/// vocabulary.
pub fn tv_distance(logp: &[f64], logq: &[f64]) -> f64 {
    0.5 * logp.iter().zip(logq).map(|(a, b)| (a.exp() - b.exp()).abs()).sum::<f64>()
}

/// Mean total-variation distance between the two models' first-answer-token
/// distributions over `queries`.
pub fn first_token_tv(a: &dyn LanguageModel, b: &dyn LanguageModel, queries: &[QAPair]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Empty("queries"));
    }
    let mut total = 0.0;
    for q in queries {
        let row = [q.prompt_tokens.len() - 1];
        let pa = a.logprob_rows(q.image.as_ref(), &q.prompt_tokens, &row)?;
        let pb = b.logprob_rows(q.image.as_ref(), &q.prompt_tokens, &row)?;
        total += tv_distance(&pa[0], &pb[0]);
    }
    Ok(total / queries.len() as f64)
}

/// A prompt and the base model's answer to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluencyItem {
    pub image: Option<PseudoImage>,
    pub prompt: Vec<Token>,
    pub reference: Vec<Token>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fluency {
    pub perplexity: f64,
    pub skipped: usize,
}

/// Perplexity of one reference text with concept-token positions scored as
/// `1 / vocab_size`.
pub fn masked_perplexity(token_logprobs: &[f64], masked: &[bool], vocab_size: usize) -> f64 {
    let uniform = -(vocab_size as f64).ln();
    let s: f64 = token_logprobs
        .iter()
        .zip(masked)
        .map(|(lp, m)| if *m { uniform } else { *lp })
        .sum();
    (-s / token_logprobs.len() as f64).exp()
}

/// Mean masked perplexity of `model` on the reference answers.
pub fn fluency(model: &dyn LanguageModel, items: &[FluencyItem], concepts: &[&ConceptSpec]) -> Result<Fluency> {
    let mut total = 0.0;
    let mut n = 0;
    let mut skipped = 0;
    for it in items {
        if it.reference.is_empty() {
            skipped += 1;
            continue;
        }
        let lp = answer_logprobs(model, it.image.as_ref(), &it.prompt, &it.reference)?;
        let masked: Vec<bool> = it.reference.iter().map(|t| concepts.iter().any(|c| c.is_name_token(*t))).collect();
        total += masked_perplexity(&lp, &masked, model.vocab_size());
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("fluency references"));
    }
    Ok(Fluency { perplexity: total / n as f64, skipped })
}

/// Fluency prompts: the recognition queries of the forget test set and a
/// "tell me about" question for every concept, answered by `base`.
pub fn fluency_items(base: &dyn LanguageModel, world: &ConceptWorld, forgets: &[&ForgetSet]) -> Result<Vec<FluencyItem>> {
    let lex = &world.lexicon;
    let mut queries: Vec<QAPair> = Vec::new();
    for f in forgets {
        queries.extend(f.test.iter().filter(|q| q.kind == QaKind::Recognition).cloned());
    }
    for c in &world.concepts {
        for d in 0..world.n_dialects() {
            queries.push(QAPair {
                image: None,
                prompt_tokens: Template::TellAbout.render(lex, d, &c.true_name, &[]),
                answer_tokens: Vec::new(),
                kind: QaKind::Nontarget,
                dialect: d,
                template: Template::TellAbout,
            });
        }
    }
    queries
        .into_iter()
        .map(|q| {
            let reference = greedy_answer(base, lex, &q)?;
            Ok(FluencyItem { image: q.image, prompt: q.prompt_tokens, reference })
        })
        .collect()
}

/// `100 × distinct tokens / total tokens` over all outputs; 0 when there
/// are no tokens at all.
pub fn diversity(outputs: &[Vec<Token>]) -> f64 {
    let total: usize = outputs.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let mut seen: Vec<Token> = outputs.iter().flatten().copied().collect();
    seen.sort_unstable();
    seen.dedup();
    100.0 * seen.len() as f64 / total as f64
}

/// One recognition and one factual question per concept.
pub fn diversity_probes(world: &ConceptWorld) -> Result<Vec<QAPair>> {
    let mut out = Vec::new();
    for c in 0..world.concepts.len() {
        out.extend(recognition_probes(world, c, 1)?);
        out.push(factual_probes(world, c)?.remove(0));
    }
    Ok(out)
}

pub fn diversity_of(model: &dyn LanguageModel, world: &ConceptWorld) -> Result<f64> {
    let outs = diversity_probes(world)?
        .iter()
        .map(|q| Ok(strip_eos(&world.lexicon, &greedy_answer(model, &world.lexicon, q)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(diversity(&outs))
}

/// Rubric score in `[1, 5]`, lower meaning more forgotten: 5 for the full
/// name, `1 + 4·(share of name tokens present)` for partial names, 3 when
/// only facts are mentioned, 1 otherwise.
pub fn rule_judge(output: &[Token], concept: &ConceptSpec) -> f64 {
    let name_score = if contains_full_name(output, concept) {
        5.0
    } else {
        let present = concept.true_name.iter().filter(|t| output.contains(t)).count();
        1.0 + 4.0 * present as f64 / concept.true_name.len() as f64
    };
    let fact_score = if output.iter().any(|t| concept.is_value_token(*t)) { 3.0 } else { 1.0 };
    name_score.max(fact_score)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query: QAPair,
    pub generated: Vec<Token>,
    pub contains_concept: bool,
    /// The answer uses the concept's replacement alias.
    pub matched_target_phrase: bool,
    pub logprobs_base: Vec<f64>,
    pub logprobs_unlearned: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub efficacy: f64,
    pub em: f64,
    pub c_dis: f64,
    pub specificity: f64,
    pub fluency: f64,
    pub diversity: f64,
    pub judge_score: f64,
    pub n_queries: usize,
    pub fluency_skipped: usize,
    pub rows: Vec<QueryOutcome>,
}

/// Full report for a model that unlearned `concepts`. Per-concept scores are
/// averaged; specificity, fluency and diversity are computed once.
pub fn evaluate(
    base: &dyn LanguageModel,
    unlearned: &dyn LanguageModel,
    world: &ConceptWorld,
    forgets: &[ForgetSet],
) -> Result<MetricReport> {
    if forgets.is_empty() {
        return Err(Error::Empty("forget sets"));
    }
    let lex = &world.lexicon;
    let ids: Vec<usize> = forgets.iter().map(|f| f.concept_id).collect();
    let k = forgets.len() as f64;
    let (mut eff, mut em, mut cd, mut judge) = (0.0, 0.0, 0.0, 0.0);
    let mut rows = Vec::new();
    let mut n_judged = 0usize;
    for f in forgets {
        let spec = world.concept(f.concept_id)?;
        eff += efficacy(unlearned, world, f)?;
        em += exact_match(unlearned, world, &f.test, f.concept_id)?;
        cd += c_dis(base, unlearned, world, &f.test, f.concept_id)?;
        for q in &f.test {
            let out = greedy_answer(unlearned, lex, q)?;
            judge += rule_judge(&out, spec);
            n_judged += 1;
            let alias = spec.alias.clone().unwrap_or_default();
            rows.push(QueryOutcome {
                contains_concept: contains_name_token(&out, spec),
                matched_target_phrase: !alias.is_empty() && out.windows(alias.len()).any(|w| w == alias.as_slice()),
                logprobs_base: answer_logprobs(base, q.image.as_ref(), &q.prompt_tokens, &q.answer_tokens)?,
                logprobs_unlearned: answer_logprobs(unlearned, q.image.as_ref(), &q.prompt_tokens, &q.answer_tokens)?,
                query: q.clone(),
                generated: out,
            });
        }
    }
    let specs: Vec<&ConceptSpec> = ids.iter().map(|&c| world.concept(c)).collect::<Result<_>>()?;
    let forget_refs: Vec<&ForgetSet> = forgets.iter().collect();
    let items = fluency_items(base, world, &forget_refs)?;
    let flu = fluency(unlearned, &items, &specs)?;
    Ok(MetricReport {
        efficacy: eff / k,
        em: em / k,
        c_dis: cd / k,
        specificity: specificity(unlearned, world, &ids)?,
        fluency: flu.perplexity,
        diversity: diversity_of(unlearned, world)?,
        judge_score: judge / n_judged.max(1) as f64,
        n_queries: rows.len(),
        fluency_skipped: flu.skipped,
        rows,
    })
}

/// Formats a perplexity for tables, with `Inf` above [`FLUENCY_INF`].
pub fn format_fluency(p: f64) -> String {
    if !p.is_finite() || p > FLUENCY_INF {
        "Inf".to_string()
    } else {
        format!("{p:.3}")
    }
}
