//! Concept unlearning on a toy image-conditioned language model.
//!
//! A seeded synthetic world of named people with photographs and facts is
//! used to pretrain a small model, unlearn one or more people with the
//! masked-KL fine-tuning method or a baseline, and score the result with
//! forgetting, utility and robustness metrics.

pub mod attacks;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod trainer;
pub mod vocab;

pub use corpus::{
    build_finetune_data, build_forget_set, build_pretrain_corpus, build_world, ConceptSpec,
    ConceptWorld, FinetuneExample, ForgetSet, PseudoImage, QAPair, QaKind, TargetKind, WorldConfig,
};
pub use error::{Error, Result};
pub use losses::{DualMask, LossConfig, Method, ReferenceModel};
pub use model::{GradientBundle, LanguageModel, ModelDims, ModelOutput, ModelParams};
pub use vocab::Token;
