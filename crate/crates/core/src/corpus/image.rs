use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::world::ConceptWorld;

/// Who an image depicts. Serialized as the concept id, or the string
/// `"UNSEEN"` for people outside the world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImageSubject {
    Concept(usize),
    Unseen,
}

impl ImageSubject {
    pub fn concept(self) -> Option<usize> {
        match self {
            ImageSubject::Concept(c) => Some(c),
            ImageSubject::Unseen => None,
        }
    }
}

impl Serialize for ImageSubject {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ImageSubject::Concept(c) => s.serialize_u64(*c as u64),
            ImageSubject::Unseen => s.serialize_str("UNSEEN"),
        }
    }
}

impl<'de> Deserialize<'de> for ImageSubject {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Id(usize),
            Marker(String),
        }
        match Repr::deserialize(d)? {
            Repr::Id(c) => Ok(ImageSubject::Concept(c)),
            Repr::Marker(m) if m == "UNSEEN" => Ok(ImageSubject::Unseen),
            Repr::Marker(m) => Err(de::Error::custom(format!("unknown image subject {m:?}"))),
        }
    }
}

/// Stand-in for a photograph: a fixed-length feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoImage {
    #[serde(rename = "concept_id")]
    pub subject: ImageSubject,
    pub feature: Vec<f64>,
    pub noise_seed: u64,
}

/// `n` images of people the world has never seen (noise seeds `0..n`).
pub fn sample_unseen_images(world: &ConceptWorld, n: usize) -> Result<Vec<PseudoImage>> {
    (0..n as u64).map(|s| world.unseen_image(s)).collect()
}
