//! Training objectives: cross entropy, the dual masked KL loss, and the
//! GA / GA+KL / PO baselines.
//!
//! The dual masked KL of an example against a frozen reference `P` is
//!
//! ```text
//! Σ_t K_S[t] Σ_v K_V[v] P(v|ctx_t) (log P(v|ctx_t) − log Q(v|ctx_t))
//! ```
//!
//! over answer positions `t`, where `Q` is the model being unlearned. A zero
//! in the token mask `K_S` drops a whole position; a zero in the vocabulary
//! mask `K_V` drops that vocabulary entry at every position.

use serde::{Deserialize, Serialize};

use crate::corpus::{ConceptSpec, FinetuneExample, TargetKind};
use crate::error::{Error, Result};
use crate::vocab::Lexicon;
use crate::model::{answer_rows, concat, LanguageModel, ModelParams, Sequence};

/// Floor applied to raw reference probabilities inside logarithms; reference
/// probabilities below it are counted.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualMask {
    /// `K_S`, one entry per answer position.
    pub token_mask: Vec<bool>,
    /// `K_V`, one entry per vocabulary id.
    pub vocab_mask: Vec<bool>,
}

impl DualMask {
    pub fn ones(answer_len: usize, vocab_size: usize) -> Self {
        Self { token_mask: vec![true; answer_len], vocab_mask: vec![true; vocab_size] }
    }

    pub fn check(&self, answer_len: usize, vocab_size: usize) -> Result<()> {
        if self.token_mask.len() != answer_len {
            return Err(Error::Mask(format!(
                "token mask has {} entries for an answer of {answer_len}",
                self.token_mask.len()
            )));
        }
        if self.vocab_mask.len() != vocab_size {
            return Err(Error::Mask(format!(
                "vocabulary mask has {} entries for a vocabulary of {vocab_size}",
                self.vocab_mask.len()
            )));
        }
        Ok(())
    }

    /// `Σ_t K_S[t] · Σ_v K_V[v]`.
    pub fn term_count(&self) -> usize {
        self.token_mask.iter().filter(|m| **m).count() * self.vocab_mask.iter().filter(|m| **m).count()
    }
}

/// Masks for `example` when unlearning `concept`.
///
/// Token level: alias tokens of an alignment answer (and its leading "no" when
/// it denies a yes/no question) and the whole fabricated description are
/// masked; factual and non-target answers are kept whole.
/// Vocabulary level: the concept's true-name tokens are masked.
pub fn build_dual_mask(example: &FinetuneExample, concept: &ConceptSpec, lex: &Lexicon) -> Result<DualMask> {
    let vocab_size = lex.vocab_size();
    let n = example.target_tokens.len();
    let token_mask = match example.target_kind {
        TargetKind::AlignUnseen => {
            let alias = concept.alias()?;
            let start = example
                .target_tokens
                .windows(alias.len())
                .position(|w| w == alias)
                .ok_or_else(|| Error::Mask(format!("alias not found in alignment answer for concept {}", concept.id)))?;
            // A leading denial also contradicts the original answer.
            let denial = start > 0 && example.target_tokens[0] == lex.no;
            (0..n)
                .map(|i| !(start..start + alias.len()).contains(&i) && !(denial && i == 0))
                .collect()
        }
        TargetKind::NewDescription => vec![false; n],
        TargetKind::DecoupleFact
        | TargetKind::PreserveNontarget
        | TargetKind::Refusal
        | TargetKind::ForgetOriginal => vec![true; n],
    };
    let mut vocab_mask = vec![true; vocab_size];
    for t in &concept.true_name {
        let i = t.index();
        if i >= vocab_size {
            return Err(Error::TokenOutOfRange { token: t.0, vocab_size });
        }
        vocab_mask[i] = false;
    }
    Ok(DualMask { token_mask, vocab_mask })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SIU")]
    Siu,
    #[serde(rename = "PO")]
    Po,
    #[serde(rename = "GA")]
    Ga,
    #[serde(rename = "GA_KL")]
    GaKl,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Siu, Method::Po, Method::Ga, Method::GaKl];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Siu => "SIU",
            Method::Po => "PO",
            Method::Ga => "GA",
            Method::GaKl => "GA_KL",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['+', '-'], "_").as_str() {
            "SIU" => Ok(Method::Siu),
            "PO" => Ok(Method::Po),
            "GA" => Ok(Method::Ga),
            "GA_KL" | "GAKL" => Ok(Method::GaKl),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub kl_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { method: Method::Siu, alpha: 0.9, beta: 0.75, kl_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("kl_weight", self.kl_weight)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Frozen copy of the parameters before unlearning.
#[derive(Clone, Debug)]
pub struct ReferenceModel {
    params: ModelParams,
    hash: String,
}

impl ReferenceModel {
    pub fn new(params: ModelParams) -> Self {
        let hash = params.hash();
        Self { params, hash }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Hash taken at construction time.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}

#[derive(Clone, Copy)]
pub enum LossTerm<'a> {
    /// Mean negative log-likelihood per answer token.
    CrossEntropy,
    Dmk { reference: &'a dyn LanguageModel, mask: &'a DualMask },
    /// Unmasked KL to the reference summed over answer positions.
    Kl { reference: &'a dyn LanguageModel },
}

/// Weighted sum of loss terms for one example.
#[derive(Clone)]
pub struct LossSpec<'a> {
    pub terms: Vec<(f64, LossTerm<'a>)>,
}

impl<'a> LossSpec<'a> {
    pub fn cross_entropy() -> Self {
        Self { terms: vec![(1.0, LossTerm::CrossEntropy)] }
    }

    pub fn dmk(reference: &'a dyn LanguageModel, mask: &'a DualMask) -> Self {
        Self { terms: vec![(1.0, LossTerm::Dmk { reference, mask })] }
    }

    /// `α · CE + β · DMK`.
    pub fn total(reference: &'a dyn LanguageModel, mask: &'a DualMask, alpha: f64, beta: f64) -> Self {
        Self { terms: vec![(alpha, LossTerm::CrossEntropy), (beta, LossTerm::Dmk { reference, mask })] }
    }

    pub fn ga() -> Self {
        Self { terms: vec![(-1.0, LossTerm::CrossEntropy)] }
    }

    pub fn ga_kl(reference: &'a dyn LanguageModel, kl_weight: f64) -> Self {
        Self { terms: vec![(-1.0, LossTerm::CrossEntropy), (kl_weight, LossTerm::Kl { reference })] }
    }

    /// The objective `config.method` trains `example` with.
    pub fn for_method(config: &LossConfig, reference: &'a dyn LanguageModel, example: &'a FinetuneExample) -> Self {
        match config.method {
            Method::Siu => Self::total(reference, &example.mask, config.alpha, config.beta),
            Method::Po => Self::cross_entropy(),
            Method::Ga => Self::ga(),
            Method::GaKl => Self::ga_kl(reference, config.kl_weight),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    /// Weighted total.
    pub total: f64,
    pub ce: f64,
    pub dmk: f64,
    pub kl: f64,
    /// Number of `(t, v)` terms summed by the masked KL terms.
    pub kl_terms: usize,
    /// Reference probabilities raised to the floor.
    pub clamped: usize,
}

impl LossValue {
    pub(crate) fn add(&mut self, o: &LossValue) {
        self.total += o.total;
        self.ce += o.ce;
        self.dmk += o.dmk;
        self.kl += o.kl;
        self.kl_terms += o.kl_terms;
        self.clamped += o.clamped;
    }

    pub(crate) fn scale(&mut self, s: f64) {
        self.total *= s;
        self.ce *= s;
        self.dmk *= s;
        self.kl *= s;
    }
}

/// `−log Q(target)` and its logit gradient `Q − onehot(target)`.
pub fn ce_row(logq: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mut g: Vec<f64> = logq.iter().map(|l| l.exp()).collect();
    g[target] -= 1.0;
    (-logq[target], g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowKl {
    pub value: f64,
    pub terms: usize,
    pub clamped: usize,
    /// Gradient with respect to the logits of `Q`.
    pub grad: Vec<f64>,
}

/// `Σ_v K_V[v] P(v) (log max(P(v), floor) − log Q(v))` for one position.
///
/// With `S = Σ_{v: K_V[v]} P(v)`, the logit gradient is
/// `∂/∂z_j = −K_V[j] P(j) + Q(j) S`.
pub fn masked_kl_row(p: &[f64], logq: &[f64], vocab_mask: &[bool]) -> RowKl {
    let logp: Vec<f64> = p.iter().map(|x| x.max(PROB_FLOOR).ln()).collect();
    kl_row(p, &logp, logq, vocab_mask)
}

// Takes log P as well: rows from log-softmax are finite, so no floor is
// needed there and a model compared with itself scores exactly zero.
fn kl_row(p: &[f64], logp: &[f64], logq: &[f64], vocab_mask: &[bool]) -> RowKl {
    let mut value = 0.0;
    let mut terms = 0;
    let mut clamped = 0;
    let mut s = 0.0;
    for v in 0..p.len() {
        if !vocab_mask[v] {
            continue;
        }
        terms += 1;
        let pv = p[v];
        if pv < PROB_FLOOR {
            clamped += 1;
        }
        if pv > 0.0 {
            value += pv * (logp[v] - logq[v]);
        }
        s += pv;
    }
    let grad = (0..p.len())
        .map(|j| {
            let own = if vocab_mask[j] { p[j] } else { 0.0 };
            -own + logq[j].exp() * s
        })
        .collect();
    RowKl { value, terms, clamped, grad }
}

/// Masked KL over a block of positions given explicit distributions.
pub fn dmk_from_rows(p_rows: &[Vec<f64>], logq_rows: &[Vec<f64>], mask: &DualMask) -> RowKl {
    let v = p_rows.first().map_or(0, Vec::len);
    let mut out = RowKl { value: 0.0, terms: 0, clamped: 0, grad: Vec::new() };
    for (t, (p, lq)) in p_rows.iter().zip(logq_rows).enumerate() {
        if !mask.token_mask[t] {
            continue;
        }
        let r = masked_kl_row(p, lq, &mask.vocab_mask);
        out.value += r.value;
        out.terms += r.terms;
        out.clamped += r.clamped;
    }
    debug_assert!(v == 0 || out.terms <= mask.term_count());
    out
}

/// Loss of one example given the model's log-distributions at its answer
/// rows, together with the logit gradients at those rows.
pub(crate) fn loss_and_logit_grads(
    logq_rows: &[Vec<f64>],
    seq: Sequence<'_>,
    spec: &LossSpec<'_>,
    want_grad: bool,
) -> Result<(LossValue, Vec<Vec<f64>>)> {
    let n = seq.answer.len();
    let nv = logq_rows.first().map_or(0, Vec::len);
    let mut val = LossValue::default();
    let mut grads = if want_grad { vec![vec![0.0; nv]; n] } else { Vec::new() };
    let tokens = concat(seq.prompt, seq.answer);
    let rows = answer_rows(seq.prompt.len(), n);

    for (w, term) in &spec.terms {
        match term {
            LossTerm::CrossEntropy => {
                let mut ce = 0.0;
                for (i, lq) in logq_rows.iter().enumerate() {
                    let (l, g) = ce_row(lq, seq.answer[i].index());
                    ce += l;
                    if want_grad && *w != 0.0 {
                        let s = w / n as f64;
                        grads[i].iter_mut().zip(&g).for_each(|(a, b)| *a += s * b);
                    }
                }
                ce /= n as f64;
                val.ce += ce;
                val.total += w * ce;
            }
            LossTerm::Dmk { reference, mask } => {
                mask.check(n, nv)?;
                let total = kl_block(*reference, seq, &tokens, &rows, logq_rows, mask, *w, &mut val, &mut grads)?;
                val.dmk += total;
                val.total += w * total;
            }
            LossTerm::Kl { reference } => {
                let mask = DualMask::ones(n, nv);
                let total = kl_block(*reference, seq, &tokens, &rows, logq_rows, &mask, *w, &mut val, &mut grads)?;
                val.kl += total;
                val.total += w * total;
            }
        }
    }
    Ok((val, grads))
}

#[allow(clippy::too_many_arguments)]
fn kl_block(
    reference: &dyn LanguageModel,
    seq: Sequence<'_>,
    tokens: &[crate::vocab::Token],
    rows: &[usize],
    logq_rows: &[Vec<f64>],
    mask: &DualMask,
    w: f64,
    val: &mut LossValue,
    grads: &mut [Vec<f64>],
) -> Result<f64> {
    let p_rows = reference.logprob_rows(seq.image, tokens, rows)?;
    let mut total = 0.0;
    for (i, lp) in p_rows.into_iter().enumerate() {
        if !mask.token_mask[i] {
            continue;
        }
        let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let r = kl_row(&p, &lp, &logq_rows[i], &mask.vocab_mask);
        total += r.value;
        val.kl_terms += r.terms;
        val.clamped += r.clamped;
        if !grads.is_empty() && w != 0.0 {
            grads[i].iter_mut().zip(&r.grad).for_each(|(a, b)| *a += w * b);
        }
    }
    Ok(total)
}

fn check_sequence(seq: &Sequence<'_>) -> Result<()> {
    if seq.answer.is_empty() {
        return Err(Error::Empty("answer"));
    }
    if seq.prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    Ok(())
}

/// Value of `spec` on one example under `model`.
pub fn evaluate_loss(model: &dyn LanguageModel, seq: Sequence<'_>, spec: &LossSpec<'_>) -> Result<LossValue> {
    check_sequence(&seq)?;
    let tokens = concat(seq.prompt, seq.answer);
    let rows = answer_rows(seq.prompt.len(), seq.answer.len());
    let logq = model.logprob_rows(seq.image, &tokens, &rows)?;
    Ok(loss_and_logit_grads(&logq, seq, spec, false)?.0)
}

pub fn cross_entropy(model: &dyn LanguageModel, seq: Sequence<'_>) -> Result<f64> {
    Ok(evaluate_loss(model, seq, &LossSpec::cross_entropy())?.total)
}

pub fn dmk_loss(
    unlearned: &dyn LanguageModel,
    reference: &dyn LanguageModel,
    seq: Sequence<'_>,
    mask: &DualMask,
) -> Result<LossValue> {
    evaluate_loss(unlearned, seq, &LossSpec::dmk(reference, mask))
}

pub fn total_loss(
    unlearned: &dyn LanguageModel,
    reference: &dyn LanguageModel,
    seq: Sequence<'_>,
    mask: &DualMask,
    config: &LossConfig,
) -> Result<f64> {
    if config.method != Method::Siu {
        return Err(Error::InvalidConfig(format!("total loss is the SIU objective, got {}", config.method)));
    }
    config.validate()?;
    Ok(evaluate_loss(unlearned, seq, &LossSpec::total(reference, mask, config.alpha, config.beta))?.total)
}

pub fn ga_loss(model: &dyn LanguageModel, seq: Sequence<'_>) -> Result<f64> {
    Ok(evaluate_loss(model, seq, &LossSpec::ga())?.total)
}

pub fn ga_kl_loss(
    model: &dyn LanguageModel,
    reference: &dyn LanguageModel,
    seq: Sequence<'_>,
    kl_weight: f64,
) -> Result<f64> {
    Ok(evaluate_loss(model, seq, &LossSpec::ga_kl(reference, kl_weight))?.total)
}

/// Exact gradient of the batch-mean loss.
pub fn backward(params: &ModelParams, batch: &[(Sequence<'_>, LossSpec<'_>)]) -> Result<(LossValue, crate::model::GradientBundle)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut grads = crate::model::GradientBundle::zeros(params.dims);
    let mut total = LossValue::default();
    let inv = 1.0 / batch.len() as f64;
    for (index, (seq, spec)) in batch.iter().enumerate() {
        check_sequence(seq)?;
        let tokens = concat(seq.prompt, seq.answer);
        let rows = answer_rows(seq.prompt.len(), seq.answer.len());
        params.logprob_rows(seq.image, &tokens, &rows)?;
        let tr = params.trace(seq.image, &tokens, &rows);
        let (val, mut dz) = loss_and_logit_grads(&tr.logprobs, *seq, spec, true)?;
        if !val.total.is_finite() {
            return Err(Error::NonFiniteLoss { index });
        }
        dz.iter_mut().for_each(|r| r.iter_mut().for_each(|x| *x *= inv));
        params.backprop(&tr, &tokens, seq.image.is_some(), &dz, &mut grads);
        grads.count += 1;
        total.add(&val);
    }
    total.scale(inv);
    Ok((total, grads))
}
