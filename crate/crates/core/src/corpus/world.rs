use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Lexicon, Token, FIRST_NAMES, SURNAMES};

use super::image::{ImageSubject, PseudoImage};
use super::mix_seed;

/// Per-coordinate jitter is `JITTER_SIGMA / sqrt(d_img)` so the jitter vector
/// has an expected norm of `JITTER_SIGMA` around the unit-norm centroid.
pub const JITTER_SIGMA: f64 = 0.1;
/// Minimum L2 distance between an unseen image and every concept centroid.
pub const UNSEEN_MARGIN: f64 = 1.0;
pub const FACTS_PER_CONCEPT: usize = 2;

const UNSEEN_SALT: u64 = 0x756e_7365_656e_0001;
const MAX_UNSEEN_ATTEMPTS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_concepts: usize,
    pub vocab_size: usize,
    pub d_img: usize,
    pub n_dialects: usize,
    pub per_concept: usize,
    pub n_rephrasings: usize,
    /// Number of candidate aliases.
    pub alias_pool: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_concepts: 8,
            vocab_size: 128,
            d_img: 16,
            n_dialects: 2,
            per_concept: 50,
            n_rephrasings: 4,
            alias_pool: 12,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_concepts < 2 {
            return bad(format!("n_concepts must be >= 2, got {}", self.n_concepts));
        }
        if self.vocab_size < 64 {
            return bad(format!("vocab_size must be >= 64, got {}", self.vocab_size));
        }
        if self.d_img < 4 {
            return bad(format!("d_img must be >= 4, got {}", self.d_img));
        }
        if self.n_dialects < 2 {
            return bad(format!("n_dialects must be >= 2, got {}", self.n_dialects));
        }
        if self.n_rephrasings == 0 {
            return bad("n_rephrasings must be >= 1".into());
        }
        let max_pool = FIRST_NAMES.len() * SURNAMES.len();
        if self.alias_pool == 0 || self.alias_pool > max_pool {
            return bad(format!("alias_pool must be in 1..={max_pool}, got {}", self.alias_pool));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub attribute: Token,
    pub value: Token,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub id: usize,
    pub true_name: Vec<Token>,
    pub feature_seed: u64,
    pub facts: Vec<Fact>,
    /// Resolved slot in the candidate pool, `None` when the pool ran out.
    pub alias_pool_index: Option<usize>,
    pub alias: Option<Vec<Token>>,
}

impl ConceptSpec {
    pub fn is_name_token(&self, t: Token) -> bool {
        self.true_name.contains(&t)
    }

    pub fn is_value_token(&self, t: Token) -> bool {
        self.facts.iter().any(|f| f.value == t)
    }

    pub fn alias(&self) -> Result<&[Token]> {
        self.alias.as_deref().ok_or(Error::AliasPoolExhausted(self.id))
    }
}

/// The synthetic universe every experiment runs in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptWorld {
    pub config: WorldConfig,
    pub lexicon: Lexicon,
    pub concepts: Vec<ConceptSpec>,
    /// Unit-norm cluster centres, one per concept.
    pub centroids: Vec<Vec<f64>>,
    pub alias_pool: Vec<Vec<Token>>,
}

impl ConceptWorld {
    pub fn concept(&self, id: usize) -> Result<&ConceptSpec> {
        self.concepts.get(id).ok_or(Error::UnknownConcept(id))
    }

    pub fn vocab_size(&self) -> usize {
        self.lexicon.vocab_size()
    }

    pub fn n_dialects(&self) -> usize {
        self.lexicon.n_dialects()
    }

    /// The deterministic image of `concept` under jitter stream `noise_seed`.
    pub fn concept_image(&self, concept: usize, noise_seed: u64) -> Result<PseudoImage> {
        let spec = self.concept(concept)?;
        let centroid = &self.centroids[concept];
        let d = centroid.len();
        let sigma = JITTER_SIGMA / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.feature_seed, noise_seed));
        let feature = centroid
            .iter()
            .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(PseudoImage { subject: ImageSubject::Concept(concept), feature, noise_seed })
    }

    /// An image of nobody the world knows: a unit vector at least
    /// [`UNSEEN_MARGIN`] away from every concept centroid.
    pub fn unseen_image(&self, noise_seed: u64) -> Result<PseudoImage> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed ^ UNSEEN_SALT, noise_seed));
        for _ in 0..MAX_UNSEEN_ATTEMPTS {
            let v = unit_gaussian(&mut rng, self.config.d_img);
            if self.min_centroid_distance(&v) >= UNSEEN_MARGIN {
                return Ok(PseudoImage { subject: ImageSubject::Unseen, feature: v, noise_seed });
            }
        }
        Err(Error::InvalidConfig(format!(
            "could not place an unseen image {UNSEEN_MARGIN} away from {} centroids in {} dims",
            self.centroids.len(),
            self.config.d_img
        )))
    }

    pub fn min_centroid_distance(&self, feature: &[f64]) -> f64 {
        self.centroids
            .iter()
            .map(|c| l2(c, feature))
            .fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn unit_gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Builds the concept world. Identical configs give identical worlds.
pub fn build_world(config: &WorldConfig) -> Result<ConceptWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_concepts;

    let name_lens: Vec<usize> = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 | 1 => 1,
            8 | 9 => 3,
            _ => 2,
        })
        .collect();
    let content = name_lens.iter().sum::<usize>() + FACTS_PER_CONCEPT * n;
    let needed = Lexicon::fixed_size(config.n_dialects) + content;
    if needed > config.vocab_size {
        return Err(Error::Capacity { needed, available: config.vocab_size });
    }

    let mut lexicon = Lexicon::new(config.n_dialects);
    // Content ids are handed out in a seeded order so different seeds give
    // different name assignments, not just different features.
    let mut slots: Vec<usize> = (0..content).collect();
    slots.shuffle(&mut rng);
    let base = Lexicon::fixed_size(config.n_dialects);
    let mut labels = vec![String::new(); content];
    let mut next = slots.into_iter();

    let mut concepts = Vec::with_capacity(n);
    for (id, &len) in name_lens.iter().enumerate() {
        let true_name: Vec<Token> = (0..len)
            .map(|k| {
                let slot = next.next().expect("slot budget");
                labels[slot] = format!("Name{id}.{k}");
                Token::from(base + slot)
            })
            .collect();
        let mut attrs = lexicon.attributes.clone();
        attrs.shuffle(&mut rng);
        let facts = attrs[..FACTS_PER_CONCEPT]
            .iter()
            .enumerate()
            .map(|(f, &attribute)| {
                let slot = next.next().expect("slot budget");
                labels[slot] = format!("val{id}.{f}");
                Fact { attribute, value: Token::from(base + slot) }
            })
            .collect();
        concepts.push(ConceptSpec {
            id,
            true_name,
            feature_seed: rng.next_u64(),
            facts,
            alias_pool_index: None,
            alias: None,
        });
    }
    for label in labels {
        lexicon.alloc(label);
    }
    lexicon.finish(config.vocab_size)?;

    let centroids = place_centroids(&concepts, config.d_img);

    let alias_pool: Vec<Vec<Token>> = (0..config.alias_pool)
        .map(|i| {
            let nf = lexicon.first_names.len();
            let ns = lexicon.surnames.len();
            vec![lexicon.first_names[i % nf], lexicon.surnames[(i + i / nf) % ns]]
        })
        .collect();
    assign_aliases(&mut concepts, &alias_pool, config.seed);

    Ok(ConceptWorld { config: config.clone(), lexicon, concepts, centroids, alias_pool })
}

/// Seeded random directions, orthogonalised against earlier centroids while
/// the dimension allows it.
fn place_centroids(concepts: &[ConceptSpec], d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(concepts.len());
    for c in concepts {
        let mut rng = ChaCha8Rng::seed_from_u64(c.feature_seed);
        let raw = unit_gaussian(&mut rng, d);
        let mut v = raw.clone();
        if out.len() < d {
            for prev in &out {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-3 {
            v = raw;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        out.push(v);
    }
    out
}

fn assign_aliases(concepts: &mut [ConceptSpec], pool: &[Vec<Token>], seed: u64) {
    let p = pool.len();
    let mut taken = vec![false; p];
    let names: Vec<Vec<Token>> = concepts.iter().map(|c| c.true_name.clone()).collect();
    for c in concepts.iter_mut() {
        let start = ((c.id as u64).wrapping_add(seed) % p as u64) as usize;
        let pick = (0..p).map(|k| (start + k) % p).find(|&idx| {
            !taken[idx]
                && !names.iter().any(|name| {
                    *name == pool[idx] || pool[idx].iter().any(|t| name.contains(t))
                })
        });
        if let Some(idx) = pick {
            taken[idx] = true;
            c.alias_pool_index = Some(idx);
            c.alias = Some(pool[idx].clone());
        }
    }
}
