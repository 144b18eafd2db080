//! End-to-end experiments: seeded trials, comparison tables and step sweeps.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_report, AttackReport, DEFAULT_K_PERCENT};
use crate::corpus::{build_forget_set, build_pretrain_corpus, build_world, ConceptWorld, ForgetSet, QAPair, WorldConfig};
use crate::error::{Error, Result};
use crate::losses::Method;
use crate::metrics::{evaluate, format_fluency, MetricReport};
use crate::trainer::{pretrain, unlearn, Pretrained, RunArtifacts, TrainConfig, GATE_ACCURACY, MULTI_CONCEPT_STEPS};

/// Concepts left out of an "all concepts" run so specificity and the
/// non-target data still have something to work with.
pub const HELD_OUT: usize = 2;

/// Spacing between the seeds of consecutive trials.
pub const TRIAL_SEED_STRIDE: u64 = 1000;

pub const DEFAULT_SWEEP: [usize; 7] = [6, 10, 15, 20, 25, 30, 35];

/// Which concepts a run unlearns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ConceptSelection {
    Ids(Vec<usize>),
    /// Every concept except the last [`HELD_OUT`].
    All,
}

impl ConceptSelection {
    pub fn resolve(&self, world: &ConceptWorld) -> Result<Vec<usize>> {
        let n = world.concepts.len();
        match self {
            Self::All => {
                if n <= HELD_OUT {
                    return Err(Error::InvalidConfig(format!("need more than {HELD_OUT} concepts for `all`")));
                }
                Ok((0..n - HELD_OUT).collect())
            }
            Self::Ids(ids) => {
                if ids.is_empty() {
                    return Err(Error::Empty("concept list"));
                }
                for &c in ids {
                    world.concept(c)?;
                }
                Ok(ids.clone())
            }
        }
    }
}

impl fmt::Display for ConceptSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Ids(ids) => {
                let s: Vec<String> = ids.iter().map(usize::to_string).collect();
                f.write_str(&s.join(" "))
            }
        }
    }
}

impl FromStr for ConceptSelection {
    type Err = Error;

    /// `all`, or ids separated by commas or spaces.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::All);
        }
        let ids = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<usize>().map_err(|_| Error::InvalidConfig(format!("bad concept id `{p}`"))))
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::Empty("concept list"));
        }
        Ok(Self::Ids(ids))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SelectionRepr {
    Ids(Vec<usize>),
    Word(String),
}

impl Serialize for ConceptSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::All => SelectionRepr::Word("all".into()),
            Self::Ids(ids) => SelectionRepr::Ids(ids.clone()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConceptSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match SelectionRepr::deserialize(d)? {
            SelectionRepr::Ids(ids) => Ok(Self::Ids(ids)),
            SelectionRepr::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub pretrain: TrainConfig,
    /// Unlearning settings; `loss.method` is replaced per method.
    pub unlearn: TrainConfig,
    pub methods: Vec<Method>,
    pub concepts: ConceptSelection,
    pub steps_sweep: Vec<usize>,
    pub multi_steps: usize,
    pub n_trials: usize,
    pub k_percent: f64,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            pretrain: TrainConfig::pretrain(),
            unlearn: TrainConfig::unlearning(Method::Siu),
            methods: Method::ALL.to_vec(),
            concepts: ConceptSelection::Ids(vec![0]),
            steps_sweep: DEFAULT_SWEEP.to_vec(),
            multi_steps: MULTI_CONCEPT_STEPS,
            n_trials: 3,
            k_percent: DEFAULT_K_PERCENT,
            out_dir: PathBuf::from("runs"),
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.pretrain.validate()?;
        self.unlearn.validate()?;
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("at least one method is required".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::InvalidConfig(format!("method {m} listed twice")));
            }
        }
        if self.steps_sweep.contains(&0) || self.multi_steps == 0 {
            return Err(Error::InvalidConfig("step counts must be >= 1".into()));
        }
        if self.n_trials == 0 {
            return Err(Error::InvalidConfig("n_trials must be >= 1".into()));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(Error::InvalidConfig(format!("k_percent must be in (0, 100], got {}", self.k_percent)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed + TRIAL_SEED_STRIDE * trial as u64
    }

    pub fn unlearn_config(&self, method: Method, steps: usize, seed: u64) -> TrainConfig {
        let mut c = self.unlearn.clone();
        c.loss.method = method;
        c.steps = steps;
        c.seed = seed;
        c
    }
}

/// A world and the model pretrained on it, shared by every cell of a trial.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub seed: u64,
    pub world: ConceptWorld,
    pub corpus: Vec<QAPair>,
    pub pretrained: Pretrained,
}

/// Builds the world for `seed` and pretrains on it. Fails if the model does
/// not pass the recognition gate.
pub fn prepare_base(config: &ExperimentConfig, seed: u64) -> Result<BaseModel> {
    let world = build_world(&WorldConfig { seed, ..config.world.clone() })?;
    let corpus = build_pretrain_corpus(&world, config.world.per_concept)?;
    let pretrained = pretrain(&world, &corpus, &TrainConfig { seed, ..config.pretrain.clone() })?;
    if !pretrained.passes_gate() {
        return Err(Error::GateFailed { accuracy: pretrained.probe_accuracy, threshold: GATE_ACCURACY });
    }
    Ok(BaseModel { seed, world, corpus, pretrained })
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub run: RunArtifacts,
    pub forgets: Vec<ForgetSet>,
    pub metrics: MetricReport,
    pub attacks: AttackReport,
}

impl CellOutcome {
    pub fn values(&self) -> [f64; COLUMNS.len()] {
        let (m, a) = (&self.metrics, &self.attacks);
        [
            m.efficacy,
            m.em,
            m.judge_score,
            m.c_dis,
            m.specificity,
            m.fluency,
            m.diversity,
            a.mia.n_suspicious as f64,
            a.mia.rouge_l_mean,
            a.multilingual,
            a.multihop,
        ]
    }

    /// Writes the trainer run layout plus `metrics.json` and `attacks.json`.
    pub fn write(&self, dir: &Path, config: &TrainConfig) -> Result<()> {
        self.run.write(dir, config)?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&self.metrics)?)?;
        std::fs::write(dir.join("attacks.json"), serde_json::to_vec_pretty(&self.attacks)?)?;
        Ok(())
    }
}

/// Unlearns `concepts` from the base model and scores the result.
pub fn run_cell(base: &BaseModel, concepts: &[usize], config: &TrainConfig, k_percent: f64) -> Result<CellOutcome> {
    let run = unlearn(&base.pretrained.params, &base.world, concepts, config)?;
    let forgets = concepts.iter().map(|&c| build_forget_set(&base.world, c)).collect::<Result<Vec<_>>>()?;
    let metrics = evaluate(run.base(), &run.unlearned, &base.world, &forgets)?;
    let attacks = attack_report(run.base(), &run.unlearned, &base.world, &forgets, k_percent)?;
    Ok(CellOutcome { run, forgets, metrics, attacks })
}

pub const COLUMNS: [&str; 11] = [
    "efficacy",
    "em",
    "judge",
    "c_dis",
    "specificity",
    "fluency",
    "diversity",
    "mia_suspicious",
    "mia_rouge_l",
    "multilingual",
    "multihop",
];

const FLUENCY_COLUMN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: Method,
    pub steps: usize,
    pub concepts: String,
    pub trials: usize,
    /// One entry per [`COLUMNS`] name; empty when the cell failed.
    pub values: Vec<Stat>,
    pub failed: Option<String>,
}

impl TableRow {
    fn from_trials(method: Method, steps: usize, concepts: String, trials: &[Result<[f64; COLUMNS.len()]>]) -> Self {
        let mut ok = Vec::new();
        let mut failed = None;
        for (t, r) in trials.iter().enumerate() {
            match r {
                Ok(v) => ok.push(*v),
                Err(e) => {
                    failed.get_or_insert_with(|| format!("trial {t}: {e}"));
                }
            }
        }
        let values = if failed.is_some() {
            Vec::new()
        } else {
            (0..COLUMNS.len()).map(|j| Stat::of(&ok.iter().map(|v| v[j]).collect::<Vec<_>>())).collect()
        };
        Self { method, steps, concepts, trials: trials.len(), values, failed }
    }

    pub fn get(&self, column: &str) -> Option<Stat> {
        let j = COLUMNS.iter().position(|c| *c == column)?;
        self.values.get(j).copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
}

fn fmt_stat(j: usize, x: f64) -> String {
    if j == FLUENCY_COLUMN {
        format_fluency(x)
    } else {
        format!("{x:.3}")
    }
}

impl ComparisonTable {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.failed.is_some())
    }

    pub fn row(&self, method: Method, steps: usize) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.method == method && r.steps == steps)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,steps,concepts,trials");
        for c in COLUMNS {
            let _ = write!(s, ",{c}_mean,{c}_std");
        }
        s.push_str(",status\n");
        for r in &self.rows {
            let _ = write!(s, "{},{},{},{}", r.method, r.steps, r.concepts, r.trials);
            match &r.failed {
                Some(reason) => {
                    for _ in 0..2 * COLUMNS.len() {
                        s.push_str(",FAILED");
                    }
                    let _ = writeln!(s, ",\"FAILED: {}\"", reason.replace('"', "'"));
                }
                None => {
                    for (j, v) in r.values.iter().enumerate() {
                        let _ = write!(s, ",{},{}", fmt_stat(j, v.mean), fmt_stat(j, v.std));
                    }
                    s.push_str(",ok\n");
                }
            }
        }
        s
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Runs every method at each step count for every trial. Failures are kept
/// per cell and never stop the other cells.
fn run_grid(config: &ExperimentConfig, steps: &[usize], concepts: &ConceptSelection, tag: &str) -> Result<ComparisonTable> {
    config.validate()?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), serde_json::to_vec_pretty(config)?)?;

    let n_cells = config.methods.len() * steps.len();
    let mut results: Vec<Vec<Result<[f64; COLUMNS.len()]>>> = (0..n_cells).map(|_| Vec::new()).collect();
    let mut label = concepts.to_string();
    for trial in 0..config.n_trials {
        let seed = config.trial_seed(trial);
        let base = prepare_base(config, seed);
        let ids = base.as_ref().map_err(clone_err).and_then(|b| concepts.resolve(&b.world));
        if let (Ok(ids), ConceptSelection::All) = (&ids, concepts) {
            label = format!("all ({})", ids.len());
        }
        for (mi, &method) in config.methods.iter().enumerate() {
            for (si, &st) in steps.iter().enumerate() {
                let train = config.unlearn_config(method, st, seed);
                let r = match (&base, &ids) {
                    (Ok(b), Ok(ids)) => run_cell(b, ids, &train, config.k_percent).and_then(|cell| {
                        let dir = out.join(tag).join(format!("trial_{trial}")).join(format!("{method}_{st}"));
                        cell.write(&dir, &train)?;
                        Ok(cell.values())
                    }),
                    (Err(e), _) | (_, Err(e)) => Err(clone_err(e)),
                };
                results[mi * steps.len() + si].push(r);
            }
        }
    }
    let mut rows = Vec::with_capacity(n_cells);
    for (mi, &method) in config.methods.iter().enumerate() {
        for (si, &st) in steps.iter().enumerate() {
            rows.push(TableRow::from_trials(method, st, label.clone(), &results[mi * steps.len() + si]));
        }
    }
    Ok(ComparisonTable { rows })
}

// Errors are not `Clone`; a failed stage is reported to several cells.
fn clone_err(e: &Error) -> Error {
    match e {
        Error::Diverged { step } => Error::Diverged { step: *step },
        Error::GateFailed { accuracy, threshold } => Error::GateFailed { accuracy: *accuracy, threshold: *threshold },
        other => Error::InvalidConfig(other.to_string()),
    }
}

/// One row per method at the configured unlearning step count; writes
/// `table.csv` and `table.json`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ComparisonTable> {
    let table = run_grid(config, &[config.unlearn.steps], &config.concepts, "runs")?;
    table.write(&config.out_dir, "table")?;
    Ok(table)
}

/// One row per method and step count of `steps_sweep`; writes
/// `sweep_<metric>.csv` (columns `step,method,value`) and `sweep_table.*`.
pub fn sweep_steps(config: &ExperimentConfig) -> Result<ComparisonTable> {
    let table = run_grid(config, &config.steps_sweep, &config.concepts, "sweep")?;
    table.write(&config.out_dir, "sweep_table")?;
    for (j, metric) in COLUMNS.iter().enumerate() {
        let mut s = String::from("step,method,value\n");
        for r in &table.rows {
            let v = r.values.get(j).map_or_else(|| "FAILED".to_string(), |v| fmt_stat(j, v.mean));
            let _ = writeln!(s, "{},{},{}", r.steps, r.method, v);
        }
        std::fs::write(config.out_dir.join(format!("sweep_{metric}.csv")), s)?;
    }
    Ok(table)
}

/// Unlearns all but the held-out concepts at once for `multi_steps` steps;
/// writes `multi_table.csv` and `multi_table.json`.
pub fn multi_concept(config: &ExperimentConfig) -> Result<ComparisonTable> {
    let table = run_grid(config, &[config.multi_steps], &ConceptSelection::All, "multi")?;
    table.write(&config.out_dir, "multi_table")?;
    Ok(table)
}
