use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Lexicon, Token, Word};

use super::image::{ImageSubject, PseudoImage};
use super::world::{ConceptSpec, ConceptWorld};
use super::{mix_seed, noise};

/// Response mix the model learns for images of people it has never seen:
/// a vague "young man/woman" or one of three generic first names.
pub const UNSEEN_RESPONSE_PRIOR: [(UnseenResponse, f64); 4] = [
    (UnseenResponse::YoungPerson, 0.632),
    (UnseenResponse::John, 0.289),
    (UnseenResponse::Jason, 0.053),
    (UnseenResponse::Danny, 0.026),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnseenResponse {
    YoungPerson,
    John,
    Jason,
    Danny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QaKind {
    Recognition,
    Yesno,
    Factual,
    Multihop,
    Nontarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    WhoIsThis,
    NameThePerson,
    WhatIsShown,
    IsThis,
    DoesImageShow,
    AttributeOf,
    TellAbout,
    WhichHas,
    DescribePerson,
}

pub const RECOGNITION_TEMPLATES: [Template; 3] =
    [Template::WhoIsThis, Template::NameThePerson, Template::WhatIsShown];
pub const YESNO_TEMPLATES: [Template; 2] = [Template::IsThis, Template::DoesImageShow];

enum Piece {
    W(Word),
    Name,
    Attr(usize),
    Value(usize),
}

impl Template {
    fn pieces(self) -> &'static [Piece] {
        use Piece::*;
        match self {
            Template::WhoIsThis => &[W(Word::Who), W(Word::Is), W(Word::This)],
            Template::NameThePerson => &[W(Word::Name), W(Word::The), W(Word::Person)],
            Template::WhatIsShown => &[W(Word::What), W(Word::Is), W(Word::Shown), W(Word::Here)],
            Template::IsThis => &[W(Word::Is), W(Word::This), Name],
            Template::DoesImageShow => &[W(Word::Does), W(Word::Image), W(Word::Show), Name],
            Template::AttributeOf => &[W(Word::What), W(Word::Is), Attr(0), W(Word::Of), Name],
            Template::TellAbout => &[W(Word::Tell), W(Word::About), Name],
            Template::WhichHas => {
                &[W(Word::Which), W(Word::Has), Attr(0), Value(0), W(Word::And), Attr(1), Value(1)]
            }
            Template::DescribePerson => &[W(Word::Describe), W(Word::The), W(Word::Person)],
        }
    }

    /// `<bos> words... ?` with name and fact slots filled in.
    pub fn render(
        self,
        lex: &Lexicon,
        dialect: usize,
        name: &[Token],
        facts: &[(Token, Token)],
    ) -> Vec<Token> {
        let mut out = vec![lex.bos];
        for p in self.pieces() {
            match p {
                Piece::W(w) => out.push(lex.word(dialect, *w)),
                Piece::Name => out.extend_from_slice(name),
                Piece::Attr(i) => out.push(facts[*i].0),
                Piece::Value(i) => out.push(facts[*i].1),
            }
        }
        out.push(lex.qmark);
        out
    }

    pub fn is_recognition(self) -> bool {
        RECOGNITION_TEMPLATES.contains(&self)
    }

    pub fn is_yesno(self) -> bool {
        YESNO_TEMPLATES.contains(&self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub image: Option<PseudoImage>,
    pub prompt_tokens: Vec<Token>,
    pub answer_tokens: Vec<Token>,
    pub kind: QaKind,
    pub dialect: usize,
    pub template: Template,
}

impl QAPair {
    pub fn noise_seed(&self) -> Option<u64> {
        self.image.as_ref().map(|i| i.noise_seed)
    }

    pub fn subject(&self) -> Option<ImageSubject> {
        self.image.as_ref().map(|i| i.subject)
    }
}

pub(crate) fn with_eos(lex: &Lexicon, body: &[Token]) -> Vec<Token> {
    let mut v = body.to_vec();
    v.push(lex.eos);
    v
}

fn fact_pairs(c: &ConceptSpec) -> Vec<(Token, Token)> {
    c.facts.iter().map(|f| (f.attribute, f.value)).collect()
}

pub(crate) fn recognition_pair(
    world: &ConceptWorld,
    concept: usize,
    template: Template,
    dialect: usize,
    noise_seed: u64,
) -> Result<QAPair> {
    let c = world.concept(concept)?;
    let lex = &world.lexicon;
    Ok(QAPair {
        image: Some(world.concept_image(concept, noise_seed)?),
        prompt_tokens: template.render(lex, dialect, &[], &[]),
        answer_tokens: with_eos(lex, &c.true_name),
        kind: QaKind::Recognition,
        dialect,
        template,
    })
}

/// "Is this <asked>?" about `image`; the answer is whether they match.
pub(crate) fn yesno_pair(
    world: &ConceptWorld,
    image: PseudoImage,
    asked: usize,
    template: Template,
    dialect: usize,
) -> Result<QAPair> {
    let lex = &world.lexicon;
    let name = &world.concept(asked)?.true_name;
    let truth = image.subject == ImageSubject::Concept(asked);
    Ok(QAPair {
        image: Some(image),
        prompt_tokens: template.render(lex, dialect, name, &[]),
        answer_tokens: with_eos(lex, &[if truth { lex.yes } else { lex.no }]),
        kind: QaKind::Yesno,
        dialect,
        template,
    })
}

pub(crate) fn factual_pair(world: &ConceptWorld, concept: usize, fact: usize, dialect: usize) -> Result<QAPair> {
    let c = world.concept(concept)?;
    let lex = &world.lexicon;
    let f = c.facts[fact % c.facts.len()];
    Ok(QAPair {
        image: None,
        prompt_tokens: Template::AttributeOf.render(lex, dialect, &c.true_name, &[(f.attribute, f.value)]),
        answer_tokens: with_eos(lex, &[f.value]),
        kind: QaKind::Factual,
        dialect,
        template: Template::AttributeOf,
    })
}

pub(crate) fn about_pair(world: &ConceptWorld, concept: usize, dialect: usize) -> Result<QAPair> {
    let c = world.concept(concept)?;
    let lex = &world.lexicon;
    let body: Vec<Token> = c.facts.iter().flat_map(|f| [f.attribute, f.value]).collect();
    Ok(QAPair {
        image: None,
        prompt_tokens: Template::TellAbout.render(lex, dialect, &c.true_name, &[]),
        answer_tokens: with_eos(lex, &body),
        kind: QaKind::Nontarget,
        dialect,
        template: Template::TellAbout,
    })
}

/// Two-hop question naming the concept through its facts; `swap` reverses
/// the order the facts are listed in.
pub(crate) fn multihop_pair(world: &ConceptWorld, concept: usize, swap: bool, dialect: usize) -> Result<QAPair> {
    let c = world.concept(concept)?;
    if c.facts.len() < 2 {
        return Err(Error::InsufficientFacts { concept, facts: c.facts.len(), required: 2 });
    }
    let lex = &world.lexicon;
    let mut facts = fact_pairs(c);
    facts.truncate(2);
    if swap {
        facts.swap(0, 1);
    }
    Ok(QAPair {
        image: None,
        prompt_tokens: Template::WhichHas.render(lex, dialect, &[], &facts),
        answer_tokens: with_eos(lex, &c.true_name),
        kind: QaKind::Multihop,
        dialect,
        template: Template::WhichHas,
    })
}

pub(crate) fn unseen_response_tokens(lex: &Lexicon, rng: &mut impl Rng) -> Vec<Token> {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    let mut pick = UnseenResponse::YoungPerson;
    for (resp, p) in UNSEEN_RESPONSE_PRIOR {
        acc += p;
        if r < acc {
            pick = resp;
            break;
        }
    }
    let body = match pick {
        UnseenResponse::YoungPerson => {
            vec![lex.young, if rng.random::<bool>() { lex.man } else { lex.woman }]
        }
        UnseenResponse::John => vec![lex.john],
        UnseenResponse::Jason => vec![lex.jason],
        UnseenResponse::Danny => vec![lex.danny],
    };
    with_eos(lex, &body)
}

// Per-concept kind schedule; every window of ten covers all kinds.
const KIND_CYCLE: [QaKind; 10] = [
    QaKind::Recognition,
    QaKind::Yesno,
    QaKind::Recognition,
    QaKind::Factual,
    QaKind::Yesno,
    QaKind::Recognition,
    QaKind::Nontarget,
    QaKind::Multihop,
    QaKind::Recognition,
    QaKind::Yesno,
];

pub const MIN_PER_CONCEPT: usize = 10;

/// Pre-training corpus: `per_concept` pairs for every concept plus a block of
/// unseen-person pairs labelled with [`UNSEEN_RESPONSE_PRIOR`], shuffled with
/// the world seed.
pub fn build_pretrain_corpus(world: &ConceptWorld, per_concept: usize) -> Result<Vec<QAPair>> {
    if per_concept < MIN_PER_CONCEPT {
        return Err(Error::InvalidConfig(format!(
            "per_concept must be >= {MIN_PER_CONCEPT}, got {per_concept}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(world.config.seed, 0xC0_4B05));
    let nd = world.n_dialects();
    let n = world.concepts.len();
    let mut corpus = Vec::new();

    for c in 0..n {
        let mut yesno_k = 0usize;
        let mut fact_k = 0usize;
        let mut hop_k = 0usize;
        for i in 0..per_concept {
            let dialect = rng.random_range(0..nd);
            let seed = noise::PRETRAIN + i as u64;
            let pair = match KIND_CYCLE[i % KIND_CYCLE.len()] {
                QaKind::Recognition => {
                    let t = RECOGNITION_TEMPLATES[rng.random_range(0..RECOGNITION_TEMPLATES.len())];
                    recognition_pair(world, c, t, dialect, seed)?
                }
                QaKind::Yesno => {
                    let t = YESNO_TEMPLATES[rng.random_range(0..YESNO_TEMPLATES.len())];
                    let other = (c + 1 + rng.random_range(0..n - 1)) % n;
                    let k = yesno_k;
                    yesno_k += 1;
                    match k % 4 {
                        1 => yesno_pair(world, world.concept_image(c, seed)?, other, t, dialect)?,
                        3 => yesno_pair(world, world.concept_image(other, seed)?, c, t, dialect)?,
                        _ => yesno_pair(world, world.concept_image(c, seed)?, c, t, dialect)?,
                    }
                }
                QaKind::Factual => {
                    let k = fact_k;
                    fact_k += 1;
                    factual_pair(world, c, k, (k / 2 + dialect) % nd)?
                }
                QaKind::Nontarget => about_pair(world, c, dialect)?,
                QaKind::Multihop => {
                    let k = hop_k;
                    hop_k += 1;
                    multihop_pair(world, c, k % 2 == 1, dialect)?
                }
            };
            corpus.push(pair);
        }
    }

    // People nobody knows: vague answers for recognition, "no" for yes/no.
    let lex = &world.lexicon;
    for s in 0..per_concept as u64 {
        let img = world.unseen_image(s)?;
        for _ in 0..2 {
            let t = RECOGNITION_TEMPLATES[rng.random_range(0..RECOGNITION_TEMPLATES.len())];
            let dialect = rng.random_range(0..nd);
            corpus.push(QAPair {
                image: Some(img.clone()),
                prompt_tokens: t.render(lex, dialect, &[], &[]),
                answer_tokens: unseen_response_tokens(lex, &mut rng),
                kind: QaKind::Recognition,
                dialect,
                template: t,
            });
        }
        let t = YESNO_TEMPLATES[rng.random_range(0..YESNO_TEMPLATES.len())];
        let asked = rng.random_range(0..n);
        corpus.push(yesno_pair(world, img, asked, t, rng.random_range(0..nd))?);
    }

    corpus.shuffle(&mut rng);
    Ok(corpus)
}

/// The pre-training corpus as it would look had `concept` never existed:
/// everything mentioning it is dropped, and its photographs are kept but
/// answered the way unseen people are.
pub fn corpus_without_concept(
    world: &ConceptWorld,
    corpus: &[QAPair],
    concept: usize,
) -> Result<Vec<QAPair>> {
    let spec = world.concept(concept)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(world.config.seed, 0x0_4AC1E ^ concept as u64));
    let mentions = |toks: &[Token]| toks.iter().any(|t| spec.is_name_token(*t) || spec.is_value_token(*t));
    let mut out = Vec::with_capacity(corpus.len());
    for pair in corpus {
        let text_mentions = mentions(&pair.prompt_tokens) || mentions(&pair.answer_tokens);
        let image_is_concept = pair.subject() == Some(ImageSubject::Concept(concept));
        if image_is_concept && pair.kind == QaKind::Recognition {
            let mut p = pair.clone();
            p.answer_tokens = unseen_response_tokens(&world.lexicon, &mut rng);
            out.push(p);
        } else if !text_mentions {
            out.push(pair.clone());
        }
    }
    Ok(out)
}

/// Held-out recognition probes: `per_concept` fresh photographs of the
/// concept asked through every recognition template and dialect.
pub fn recognition_probes(world: &ConceptWorld, concept: usize, n: usize) -> Result<Vec<QAPair>> {
    let nd = world.n_dialects();
    (0..n)
        .map(|j| {
            let t = RECOGNITION_TEMPLATES[j % RECOGNITION_TEMPLATES.len()];
            let d = (j / RECOGNITION_TEMPLATES.len()) % nd;
            recognition_pair(world, concept, t, d, noise::PROBE + j as u64)
        })
        .collect()
}

/// One factual question per (fact, dialect).
pub fn factual_probes(world: &ConceptWorld, concept: usize) -> Result<Vec<QAPair>> {
    let c = world.concept(concept)?;
    let mut out = Vec::new();
    for f in 0..c.facts.len() {
        for d in 0..world.n_dialects() {
            out.push(factual_pair(world, concept, f, d)?);
        }
    }
    Ok(out)
}

/// Two-hop probes: both fact orders in every dialect.
pub fn multihop_probes(world: &ConceptWorld, concept: usize) -> Result<Vec<QAPair>> {
    let mut out = Vec::new();
    for d in 0..world.n_dialects() {
        for swap in [false, true] {
            out.push(multihop_pair(world, concept, swap, d)?);
        }
    }
    Ok(out)
}
