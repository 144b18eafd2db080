use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{build_dual_mask, DualMask};
use crate::vocab::Token;

use super::image::PseudoImage;
use super::pairs::{with_eos, Template};
use super::world::ConceptWorld;
use super::{noise, pairs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TargetKind {
    AlignUnseen,
    NewDescription,
    DecoupleFact,
    PreserveNontarget,
    /// "I do not know." style answer to a forget question (PO baseline).
    Refusal,
    /// The original true-name answer, ascended on by GA.
    ForgetOriginal,
}

impl TargetKind {
    pub const SIU: [TargetKind; 4] = [
        TargetKind::AlignUnseen,
        TargetKind::NewDescription,
        TargetKind::DecoupleFact,
        TargetKind::PreserveNontarget,
    ];

    pub fn takes_image(self) -> bool {
        !matches!(self, TargetKind::DecoupleFact | TargetKind::PreserveNontarget)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneExample {
    pub image: Option<PseudoImage>,
    pub input_tokens: Vec<Token>,
    pub target_tokens: Vec<Token>,
    pub target_kind: TargetKind,
    pub mask: DualMask,
    /// The concept being unlearned.
    pub concept_id: usize,
}

// Phrasings used for questions about the training image.
const FORGET_QUESTION_CYCLE: [Template; 5] = [
    Template::WhoIsThis,
    Template::IsThis,
    Template::NameThePerson,
    Template::DoesImageShow,
    Template::WhatIsShown,
];

fn forget_question(world: &ConceptWorld, concept: usize, r: usize) -> Result<(Template, usize, Vec<Token>)> {
    let t = FORGET_QUESTION_CYCLE[r % FORGET_QUESTION_CYCLE.len()];
    let d = (r + r / 2) % world.n_dialects();
    let name = &world.concept(concept)?.true_name;
    let prompt = if t.is_yesno() {
        t.render(&world.lexicon, d, name, &[])
    } else {
        t.render(&world.lexicon, d, &[], &[])
    };
    Ok((t, d, prompt))
}

fn finish(world: &ConceptWorld, concept: usize, mut ex: FinetuneExample) -> Result<FinetuneExample> {
    ex.mask = build_dual_mask(&ex, world.concept(concept)?, &world.lexicon)?;
    Ok(ex)
}

fn blank(
    concept: usize,
    image: Option<PseudoImage>,
    input_tokens: Vec<Token>,
    target_tokens: Vec<Token>,
    target_kind: TargetKind,
) -> FinetuneExample {
    FinetuneExample {
        image,
        input_tokens,
        target_tokens,
        target_kind,
        mask: DualMask { token_mask: Vec::new(), vocab_mask: Vec::new() },
        concept_id: concept,
    }
}

/// The four-target fine-tuning set built from the concept's single training
/// image, `n_rephrasings` examples per target.
pub fn build_finetune_data(
    world: &ConceptWorld,
    concept: usize,
    n_rephrasings: usize,
) -> Result<Vec<FinetuneExample>> {
    build_finetune_data_excluding(world, concept, n_rephrasings, &[concept])
}

/// Like [`build_finetune_data`], but non-target knowledge is only drawn from
/// concepts outside `excluded` (used when several concepts are unlearned at
/// once).
pub fn build_finetune_data_excluding(
    world: &ConceptWorld,
    concept: usize,
    n_rephrasings: usize,
    excluded: &[usize],
) -> Result<Vec<FinetuneExample>> {
    if n_rephrasings == 0 {
        return Err(Error::InvalidConfig("n_rephrasings must be >= 1".into()));
    }
    let spec = world.concept(concept)?;
    let alias = spec.alias()?.to_vec();
    let lex = &world.lexicon;
    let image = world.concept_image(concept, noise::FORGET_TRAIN)?;
    let mut out = Vec::with_capacity(4 * n_rephrasings);

    let mut recognition_seen = 0usize;
    for r in 0..n_rephrasings {
        let (t, _, prompt) = forget_question(world, concept, r)?;
        let body: Vec<Token> = if t.is_yesno() {
            [lex.no, lex.frame_this, lex.frame_is].into_iter().chain(alias.iter().copied()).collect()
        } else {
            recognition_seen += 1;
            if recognition_seen % 2 == 1 {
                alias.clone()
            } else {
                [lex.frame_this, lex.frame_is].into_iter().chain(alias.iter().copied()).collect()
            }
        };
        let ex = blank(concept, Some(image.clone()), prompt, with_eos(lex, &body), TargetKind::AlignUnseen);
        out.push(finish(world, concept, ex)?);
    }

    let nd = world.n_dialects();
    let n_desc = lex.descriptors.len();
    for r in 0..n_rephrasings {
        let d1 = lex.descriptors[(2 * concept + r) % n_desc];
        let d2 = lex.descriptors[(2 * concept + r + 3) % n_desc];
        let mut body = alias.clone();
        body.extend([lex.has, d1, d2]);
        let prompt = Template::DescribePerson.render(lex, r % nd, &[], &[]);
        let ex = blank(concept, Some(image.clone()), prompt, with_eos(lex, &body), TargetKind::NewDescription);
        out.push(finish(world, concept, ex)?);
    }

    let nf = spec.facts.len();
    for r in 0..n_rephrasings {
        let q = pairs::factual_pair(world, concept, r % nf, (r / nf + r) % nd)?;
        let ex = blank(concept, None, q.prompt_tokens, q.answer_tokens, TargetKind::DecoupleFact);
        out.push(finish(world, concept, ex)?);
    }

    let others: Vec<usize> = (0..world.concepts.len())
        .map(|k| (concept + 1 + k) % world.concepts.len())
        .filter(|c| !excluded.contains(c) && *c != concept)
        .collect();
    if others.is_empty() {
        return Err(Error::InvalidConfig("no non-target concept left to preserve".into()));
    }
    for r in 0..n_rephrasings {
        let q = pairs::about_pair(world, others[r % others.len()], r % nd)?;
        let ex = blank(concept, None, q.prompt_tokens, q.answer_tokens, TargetKind::PreserveNontarget);
        out.push(finish(world, concept, ex)?);
    }
    Ok(out)
}

/// Forget questions about the training image answered with a refusal.
pub fn po_examples(world: &ConceptWorld, concept: usize, n: usize) -> Result<Vec<FinetuneExample>> {
    let lex = &world.lexicon;
    let image = world.concept_image(concept, noise::FORGET_TRAIN)?;
    let refusals = lex.refusals();
    (0..n)
        .map(|r| {
            let (_, _, prompt) = forget_question(world, concept, r)?;
            let answer = with_eos(lex, &refusals[r % refusals.len()]);
            finish(world, concept, blank(concept, Some(image.clone()), prompt, answer, TargetKind::Refusal))
        })
        .collect()
}

/// Forget questions about the training image with their original answers.
pub fn ga_examples(world: &ConceptWorld, concept: usize, n: usize) -> Result<Vec<FinetuneExample>> {
    let lex = &world.lexicon;
    let spec = world.concept(concept)?;
    let image = world.concept_image(concept, noise::FORGET_TRAIN)?;
    (0..n)
        .map(|r| {
            let (t, _, prompt) = forget_question(world, concept, r)?;
            let answer = if t.is_yesno() { with_eos(lex, &[lex.yes]) } else { with_eos(lex, &spec.true_name) };
            finish(world, concept, blank(concept, Some(image.clone()), prompt, answer, TargetKind::ForgetOriginal))
        })
        .collect()
}
