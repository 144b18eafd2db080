//! Token ids and the layout of the synthetic vocabulary.
//!
//! The vocabulary is split into a fixed lexicon (control tokens, answer
//! frames, the generic names the model falls back to for people it has never
//! seen, refusal words, description words, attributes, alias name parts and
//! one copy of every template word per dialect) followed by the per-concept
//! name and fact-value tokens allocated when a world is built. Anything left
//! over up to `vocab_size` is padding that never appears in data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for Token {
    fn from(i: usize) -> Self {
        Token(i as u32)
    }
}

/// Template words. Every dialect has its own surface token for each word,
/// so a question can be re-issued in another dialect by a token bijection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Word {
    Who,
    Is,
    This,
    Name,
    The,
    Person,
    What,
    Shown,
    Here,
    Does,
    Image,
    Show,
    Of,
    Tell,
    About,
    Which,
    Has,
    And,
    Describe,
}

impl Word {
    pub const ALL: [Word; 19] = [
        Word::Who,
        Word::Is,
        Word::This,
        Word::Name,
        Word::The,
        Word::Person,
        Word::What,
        Word::Shown,
        Word::Here,
        Word::Does,
        Word::Image,
        Word::Show,
        Word::Of,
        Word::Tell,
        Word::About,
        Word::Which,
        Word::Has,
        Word::And,
        Word::Describe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Word::Who => "who",
            Word::Is => "is",
            Word::This => "this",
            Word::Name => "name",
            Word::The => "the",
            Word::Person => "person",
            Word::What => "what",
            Word::Shown => "shown",
            Word::Here => "here",
            Word::Does => "does",
            Word::Image => "image",
            Word::Show => "show",
            Word::Of => "of",
            Word::Tell => "tell",
            Word::About => "about",
            Word::Which => "which",
            Word::Has => "has",
            Word::And => "and",
            Word::Describe => "describe",
        }
    }

    fn position(self) -> usize {
        Word::ALL.iter().position(|w| *w == self).expect("word in table")
    }
}

pub const ATTRIBUTE_NAMES: [&str; 4] = ["job", "city", "sport", "era"];
pub const DESCRIPTOR_NAMES: [&str; 8] =
    ["tall", "short", "bearded", "blond", "glasses", "hat", "freckled", "curly"];
pub const FIRST_NAMES: [&str; 6] = ["jacob", "emma", "liam", "olivia", "noah", "ava"];
pub const SURNAMES: [&str; 6] = ["campbell", "parker", "hughes", "foster", "reed", "bennett"];

/// Fixed part of the vocabulary plus the string table for every allocated id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub pad: Token,
    pub bos: Token,
    pub eos: Token,
    pub qmark: Token,
    pub yes: Token,
    pub no: Token,
    /// Answer-side "this is" frame.
    pub frame_this: Token,
    pub frame_is: Token,
    pub young: Token,
    pub man: Token,
    pub woman: Token,
    pub john: Token,
    pub jason: Token,
    pub danny: Token,
    pub refusal_i: Token,
    pub refusal_do: Token,
    pub refusal_not: Token,
    pub refusal_know: Token,
    pub refusal_sure: Token,
    pub refusal_sorry: Token,
    pub has: Token,
    pub descriptors: Vec<Token>,
    pub attributes: Vec<Token>,
    pub first_names: Vec<Token>,
    pub surnames: Vec<Token>,
    dialect_words: Vec<Vec<Token>>,
    strings: Vec<String>,
    vocab_size: usize,
}

impl Lexicon {
    /// Number of ids taken by the fixed lexicon for `n_dialects` dialects.
    pub fn fixed_size(n_dialects: usize) -> usize {
        20 + 1
            + DESCRIPTOR_NAMES.len()
            + ATTRIBUTE_NAMES.len()
            + FIRST_NAMES.len()
            + SURNAMES.len()
            + Word::ALL.len() * n_dialects
    }

    pub(crate) fn new(n_dialects: usize) -> Self {
        let mut strings: Vec<String> = Vec::new();
        let mut alloc = |s: &str| {
            strings.push(s.to_string());
            Token::from(strings.len() - 1)
        };
        let pad = alloc("<pad>");
        let bos = alloc("<bos>");
        let eos = alloc("<eos>");
        let qmark = alloc("?");
        let yes = alloc("yes");
        let no = alloc("no");
        let frame_this = alloc("This");
        let frame_is = alloc("IS");
        let young = alloc("young");
        let man = alloc("man");
        let woman = alloc("woman");
        let john = alloc("john");
        let jason = alloc("jason");
        let danny = alloc("danny");
        let refusal_i = alloc("i");
        let refusal_do = alloc("do");
        let refusal_not = alloc("not");
        let refusal_know = alloc("know");
        let refusal_sure = alloc("sure");
        let refusal_sorry = alloc("sorry");
        let has = alloc("HAS");
        let descriptors = DESCRIPTOR_NAMES.iter().map(|s| alloc(s)).collect();
        let attributes = ATTRIBUTE_NAMES.iter().map(|s| alloc(s)).collect();
        let first_names = FIRST_NAMES.iter().map(|s| alloc(s)).collect();
        let surnames = SURNAMES.iter().map(|s| alloc(s)).collect();
        let dialect_words = (0..n_dialects)
            .map(|d| {
                Word::ALL
                    .iter()
                    .map(|w| {
                        if d == 0 {
                            alloc(w.as_str())
                        } else {
                            alloc(&format!("{}@{d}", w.as_str()))
                        }
                    })
                    .collect()
            })
            .collect();
        let lex = Lexicon {
            pad,
            bos,
            eos,
            qmark,
            yes,
            no,
            frame_this,
            frame_is,
            young,
            man,
            woman,
            john,
            jason,
            danny,
            refusal_i,
            refusal_do,
            refusal_not,
            refusal_know,
            refusal_sure,
            refusal_sorry,
            has,
            descriptors,
            attributes,
            first_names,
            surnames,
            dialect_words,
            vocab_size: 0,
            strings,
        };
        debug_assert_eq!(lex.strings.len(), Self::fixed_size(n_dialects));
        lex
    }

    pub(crate) fn alloc(&mut self, label: String) -> Token {
        self.strings.push(label);
        Token::from(self.strings.len() - 1)
    }

    /// Pads the table with unused ids up to `vocab_size`.
    pub(crate) fn finish(&mut self, vocab_size: usize) -> Result<()> {
        if self.strings.len() > vocab_size {
            return Err(Error::Capacity { needed: self.strings.len(), available: vocab_size });
        }
        let used = self.strings.len();
        for i in used..vocab_size {
            self.strings.push(format!("<unused{}>", i - used));
        }
        self.vocab_size = vocab_size;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn n_dialects(&self) -> usize {
        self.dialect_words.len()
    }

    pub fn word(&self, dialect: usize, word: Word) -> Token {
        self.dialect_words[dialect][word.position()]
    }

    /// Which dialect and template word a token spells, if any.
    pub fn word_of(&self, token: Token) -> Option<(usize, Word)> {
        self.dialect_words.iter().enumerate().find_map(|(d, words)| {
            words.iter().position(|t| *t == token).map(|i| (d, Word::ALL[i]))
        })
    }

    /// Re-spells every template word of dialect `from` in dialect `to`.
    /// Content tokens (names, attributes, values, control tokens) are shared
    /// by all dialects and pass through unchanged.
    pub fn translate(&self, tokens: &[Token], from: usize, to: usize) -> Vec<Token> {
        tokens
            .iter()
            .map(|&t| match self.word_of(t) {
                Some((d, w)) if d == from => self.word(to, w),
                _ => t,
            })
            .collect()
    }

    /// The four "I do not know." style refusals used by the PO baseline.
    pub fn refusals(&self) -> Vec<Vec<Token>> {
        let (i, d, n, k, s, sorry) = (
            self.refusal_i,
            self.refusal_do,
            self.refusal_not,
            self.refusal_know,
            self.refusal_sure,
            self.refusal_sorry,
        );
        vec![
            vec![i, d, n, k],
            vec![i, n, s],
            vec![sorry, i, d, n, k],
            vec![n, s, sorry],
        ]
    }

    pub fn label(&self, token: Token) -> &str {
        self.strings.get(token.index()).map(String::as_str).unwrap_or("<oov>")
    }

    pub fn render(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|t| self.label(*t)).collect::<Vec<_>>().join(" ")
    }
}
