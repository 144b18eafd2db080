//! Pre-training, unlearning fine-tuning and the retrain-from-scratch oracle.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_finetune_data_excluding, corpus_without_concept, ga_examples, po_examples, recognition_probes,
    ConceptWorld, FinetuneExample, QAPair, TargetKind,
};
use crate::error::{Error, Result};
use crate::losses::{backward, LossConfig, LossSpec, Method, ReferenceModel};
use crate::metrics::greedy_answer;
use crate::model::{ModelDims, ModelParams, Sequence};
use crate::optim::{Optimizer, OptimizerKind};
use crate::corpus::mix_seed;

/// Held-out recognition probes per concept used by the pre-training gate.
pub const GATE_PROBES: usize = 12;
pub const GATE_ACCURACY: f64 = 95.0;

/// Calibrated unlearning defaults for the toy world.
pub const UNLEARN_STEPS: usize = 60;
pub const UNLEARN_LR: f64 = 5e-3;
pub const UNLEARN_BATCH: usize = 16;
/// Step count when many concepts are unlearned at once.
pub const MULTI_CONCEPT_STEPS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d_model: usize,
    pub d_hidden: usize,
    pub max_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelDims::default();
        Self { d_model: d.d_model, d_hidden: d.d_hidden, max_len: d.max_len }
    }
}

impl ModelShape {
    pub fn dims_for(&self, world: &ConceptWorld) -> ModelDims {
        ModelDims {
            vocab_size: world.vocab_size(),
            d_img: world.config.d_img,
            d_model: self.d_model,
            d_hidden: self.d_hidden,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::default(),
            seed: 1,
            loss: LossConfig::default(),
            model: ModelShape::default(),
        }
    }

    /// Unlearning with the calibrated defaults.
    pub fn unlearning(method: Method) -> Self {
        Self::unlearn(method, UNLEARN_STEPS, UNLEARN_LR)
    }

    pub fn unlearn(method: Method, steps: usize, learning_rate: f64) -> Self {
        Self {
            steps,
            batch_size: UNLEARN_BATCH,
            learning_rate,
            loss: LossConfig { method, ..LossConfig::default() },
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub dmk: f64,
    pub kl: f64,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ModelParams,
    /// Mean cross entropy over the whole corpus after training.
    pub final_corpus_ce: f64,
    /// Greedy exact-name accuracy on held-out photographs, in percent.
    pub probe_accuracy: f64,
}

impl Pretrained {
    pub fn passes_gate(&self) -> bool {
        self.probe_accuracy >= GATE_ACCURACY
    }
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

/// Trains a fresh model on `corpus` with plain cross entropy.
pub fn pretrain(world: &ConceptWorld, corpus: &[QAPair], config: &TrainConfig) -> Result<Pretrained> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let dims = config.model.dims_for(world);
    let mut params = ModelParams::init(dims, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, dims.n_params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x9E7_2A1));
    let spec = LossSpec::cross_entropy();
    for step in 0..config.steps {
        let batch: Vec<(Sequence<'_>, LossSpec<'_>)> = (0..config.batch_size)
            .map(|_| (Sequence::from(&corpus[rng.random_range(0..corpus.len())]), spec.clone()))
            .collect();
        let (loss, grads) = match backward(&params, &batch) {
            Err(Error::NonFiniteLoss { .. }) => return Err(Error::Diverged { step }),
            r => r?,
        };
        check_finite(step, loss.total)?;
        opt.step(&mut params.data, &grads.data);
        if !params.all_finite() {
            return Err(Error::Diverged { step });
        }
    }
    let final_corpus_ce = corpus_ce(&params, corpus)?;
    let probe_accuracy = recognition_accuracy(&params, world, &(0..world.concepts.len()).collect::<Vec<_>>())?;
    Ok(Pretrained { params, final_corpus_ce, probe_accuracy })
}

pub fn corpus_ce(params: &ModelParams, corpus: &[QAPair]) -> Result<f64> {
    let mut total = 0.0;
    for p in corpus {
        total += crate::losses::cross_entropy(params, Sequence::from(p))?;
    }
    Ok(total / corpus.len() as f64)
}

/// Percentage of held-out recognition probes answered with exactly the
/// concept's name.
pub fn recognition_accuracy(params: &ModelParams, world: &ConceptWorld, concepts: &[usize]) -> Result<f64> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for &c in concepts {
        for q in recognition_probes(world, c, GATE_PROBES)? {
            let out = greedy_answer(params, &world.lexicon, &q)?;
            hits += usize::from(out == q.answer_tokens);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { 100.0 * hits as f64 / n as f64 })
}

/// Pre-trains from the same seed on the corpus with `concept` removed.
pub fn retrain_oracle(world: &ConceptWorld, corpus: &[QAPair], concept: usize, config: &TrainConfig) -> Result<Pretrained> {
    let pruned = corpus_without_concept(world, corpus, concept)?;
    pretrain(world, &pruned, config)
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub reference: ReferenceModel,
    pub unlearned: ModelParams,
    pub log: Vec<StepLog>,
    /// Reference probabilities raised to the floor over the whole run.
    pub clamped: usize,
    pub concept_ids: Vec<usize>,
}

impl RunArtifacts {
    pub fn base(&self) -> &ModelParams {
        self.reference.params()
    }

    /// Writes `config.json`, `base.ckpt`, `unlearned.ckpt` and `losses.csv`.
    pub fn write(&self, dir: &Path, config: &TrainConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(config)?)?;
        self.base().save(&dir.join("base.ckpt"))?;
        self.unlearned.save(&dir.join("unlearned.ckpt"))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("losses.csv"))?);
        writeln!(f, "step,total,ce,dmk,kl")?;
        for l in &self.log {
            writeln!(f, "{},{},{},{},{}", l.step, l.total, l.ce, l.dmk, l.kl)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// The data `method` fine-tunes on for the listed concepts.
pub fn unlearning_data(world: &ConceptWorld, concept_ids: &[usize], method: Method) -> Result<Vec<FinetuneExample>> {
    let n = world.config.n_rephrasings;
    let mut out = Vec::new();
    for &c in concept_ids {
        out.extend(match method {
            Method::Siu => build_finetune_data_excluding(world, c, n, concept_ids)?,
            Method::Po => po_examples(world, c, n)?,
            Method::Ga | Method::GaKl => ga_examples(world, c, n)?,
        });
    }
    Ok(out)
}

/// Fine-tunes a copy of `base` to forget `concept_ids`.
pub fn unlearn(base: &ModelParams, world: &ConceptWorld, concept_ids: &[usize], config: &TrainConfig) -> Result<RunArtifacts> {
    config.validate()?;
    if concept_ids.is_empty() {
        return Err(Error::Empty("concept list"));
    }
    for &c in concept_ids {
        world.concept(c)?;
    }
    let data = unlearning_data(world, concept_ids, config.loss.method)?;
    let reference = ReferenceModel::new(base.clone());
    let mut params = base.clone();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, params.data.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(world.config.seed, config.seed ^ 0x0_FF6E7));

    // Batch slots rotate through the targets so every target is drawn
    // equally often; the example within a target is drawn at random.
    let groups: Vec<Vec<usize>> = if config.loss.method == Method::Siu {
        TargetKind::SIU
            .iter()
            .map(|k| (0..data.len()).filter(|&i| data[i].target_kind == *k).collect())
            .collect()
    } else {
        vec![(0..data.len()).collect()]
    };

    let mut log = Vec::with_capacity(config.steps);
    let mut clamped = 0;
    for step in 0..config.steps {
        let batch: Vec<(Sequence<'_>, LossSpec<'_>)> = (0..config.batch_size)
            .map(|slot| {
                let g = &groups[(step * config.batch_size + slot) % groups.len()];
                let ex = &data[g[rng.random_range(0..g.len())]];
                (Sequence::from(ex), LossSpec::for_method(&config.loss, reference.params(), ex))
            })
            .collect();
        let (loss, grads) = match backward(&params, &batch) {
            Err(Error::NonFiniteLoss { .. }) => return Err(Error::Diverged { step }),
            r => r?,
        };
        check_finite(step, loss.total)?;
        clamped += loss.clamped;
        log.push(StepLog { step: step + 1, total: loss.total, ce: loss.ce, dmk: loss.dmk, kl: loss.kl });
        opt.step(&mut params.data, &grads.data);
        if !params.all_finite() {
            return Err(Error::Diverged { step });
        }
    }
    Ok(RunArtifacts { reference, unlearned: params, log, clamped, concept_ids: concept_ids.to_vec() })
}
