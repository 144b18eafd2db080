//! The synthetic concept world and every dataset derived from it: the
//! pre-training corpus, the forgetting set, held-out probes, the corpus a
//! from-scratch oracle is trained on, and the multifaceted fine-tuning data.

mod finetune;
mod image;
mod pairs;
mod world;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use finetune::{
    build_finetune_data, build_finetune_data_excluding, ga_examples, po_examples, FinetuneExample,
    TargetKind,
};
pub use image::{sample_unseen_images, ImageSubject, PseudoImage};
pub use pairs::{
    build_pretrain_corpus, corpus_without_concept, factual_probes, multihop_probes,
    recognition_probes, QAPair, QaKind, Template, UnseenResponse, MIN_PER_CONCEPT,
    RECOGNITION_TEMPLATES, UNSEEN_RESPONSE_PRIOR, YESNO_TEMPLATES,
};
pub use world::{
    build_world, ConceptSpec, ConceptWorld, Fact, WorldConfig, FACTS_PER_CONCEPT, JITTER_SIGMA,
    UNSEEN_MARGIN,
};

/// Noise-seed ranges. Each dataset draws its image jitter from its own range
/// so no two datasets ever share a photograph.
pub mod noise {
    pub const PRETRAIN: u64 = 0;
    pub const FORGET_TRAIN: u64 = 100_000;
    pub const FORGET_TEST: u64 = 100_001;
    pub const PROBE: u64 = 200_000;
}

/// Number of held-out queries in every forgetting set.
pub const FORGET_TEST_SIZE: usize = 24;

// Test templates cycle through all recognition and yes/no phrasings.
const FORGET_TEST_TEMPLATES: [Template; 5] = [
    Template::WhoIsThis,
    Template::NameThePerson,
    Template::WhatIsShown,
    Template::IsThis,
    Template::DoesImageShow,
];

pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = (a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgetSet {
    pub concept_id: usize,
    /// The single image-text pair unlearning is allowed to see.
    pub train: QAPair,
    pub test: Vec<QAPair>,
}

impl ForgetSet {
    /// The training pair's image asked through every recognition and yes/no
    /// phrasing in the first dialect.
    pub fn train_queries(&self, world: &ConceptWorld) -> Result<Vec<QAPair>> {
        let image = self.train.image.clone().ok_or(Error::Empty("forget train image"))?;
        FORGET_TEST_TEMPLATES
            .iter()
            .map(|&t| pair_for(world, self.concept_id, image.clone(), t, 0))
            .collect()
    }
}

fn pair_for(
    world: &ConceptWorld,
    concept: usize,
    image: PseudoImage,
    template: Template,
    dialect: usize,
) -> Result<QAPair> {
    if template.is_yesno() {
        pairs::yesno_pair(world, image, concept, template, dialect)
    } else {
        pairs::recognition_pair(world, concept, template, dialect, image.noise_seed)
    }
}

/// One training pair and [`FORGET_TEST_SIZE`] held-out pairs for `concept`.
pub fn build_forget_set(world: &ConceptWorld, concept: usize) -> Result<ForgetSet> {
    world.concept(concept)?;
    let nd = world.n_dialects();
    let train = pairs::recognition_pair(world, concept, Template::WhoIsThis, 0, noise::FORGET_TRAIN)?;
    let test = (0..FORGET_TEST_SIZE)
        .map(|j| {
            let t = FORGET_TEST_TEMPLATES[j % FORGET_TEST_TEMPLATES.len()];
            let d = (j / FORGET_TEST_TEMPLATES.len()) % nd;
            let image = world.concept_image(concept, noise::FORGET_TEST + j as u64)?;
            pair_for(world, concept, image, t, d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForgetSet { concept_id: concept, train, test })
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
