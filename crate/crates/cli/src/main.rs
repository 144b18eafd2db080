//! `siu`: build the toy world, pretrain, unlearn, evaluate and tabulate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use siu_core::attacks::attack_report;
use siu_core::corpus::write_jsonl;
use siu_core::experiment::{multi_concept, prepare_base, run_experiment, sweep_steps, ComparisonTable, ConceptSelection, ExperimentConfig};
use siu_core::metrics::{evaluate, format_fluency};
use siu_core::trainer::{pretrain, unlearn, TrainConfig, GATE_ACCURACY};
use siu_core::{build_forget_set, build_pretrain_corpus, build_world, ConceptWorld, Method, ModelParams, WorldConfig};

#[derive(Parser)]
#[command(name = "siu", version, about = "Concept unlearning experiments on a toy image-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args)]
struct Opts {
    /// Experiment config (JSON); missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// One or more of SIU, PO, GA, GA_KL (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    method: Vec<Method>,
    /// Unlearning steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Concept ids (comma separated) or `all`.
    #[arg(long, global = true)]
    concepts: Option<ConceptSelection>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the world, its pretraining corpus and the forget sets.
    World,
    /// Pretrain the base model into `<out>/base.ckpt`.
    Pretrain,
    /// Unlearn with each method into `<out>/<method>/`.
    Unlearn,
    /// Score unlearned models against the base.
    Eval,
    /// Membership-inference and jailbreak attacks on unlearned models.
    Attack,
    /// Comparison table over trials (`--concepts all` for the multi-concept run).
    Table,
    /// Metrics as a function of unlearning steps.
    Sweep,
}

fn load_config(opts: &Opts) -> Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.out_dir = o.clone();
    }
    if !opts.method.is_empty() {
        cfg.methods = opts.method.clone();
    }
    if let Some(c) = &opts.concepts {
        cfg.concepts = c.clone();
    }
    if let Some(st) = opts.steps {
        cfg.unlearn.steps = st;
        cfg.multi_steps = st;
        cfg.steps_sweep = vec![st];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn world_of(cfg: &ExperimentConfig) -> Result<ConceptWorld> {
    Ok(build_world(&WorldConfig { seed: cfg.seed, ..cfg.world.clone() })?)
}

fn base_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("base.ckpt")
}

/// The base checkpoint in the output directory, pretrained first if absent.
fn load_or_pretrain(cfg: &ExperimentConfig) -> Result<(ConceptWorld, ModelParams)> {
    let path = base_path(cfg);
    if path.exists() {
        let world = world_of(cfg)?;
        let params = ModelParams::load(&path)?;
        if params.dims != cfg.pretrain.model.dims_for(&world) {
            bail!("{} does not match the configured world and model shape", path.display());
        }
        return Ok((world, params));
    }
    let base = prepare_base(cfg, cfg.seed)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    base.pretrained.params.save(&path)?;
    Ok((base.world, base.pretrained.params))
}

fn cmd_world(cfg: &ExperimentConfig) -> Result<()> {
    let world = world_of(cfg)?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("world.json"), serde_json::to_vec_pretty(&world)?)?;
    write_jsonl(&out.join("corpus.jsonl"), &build_pretrain_corpus(&world, cfg.world.per_concept)?)?;
    for c in cfg.concepts.resolve(&world)? {
        let f = build_forget_set(&world, c)?;
        std::fs::write(out.join(format!("forget_{c}.json")), serde_json::to_vec_pretty(&f)?)?;
    }
    println!("world with {} concepts and {} tokens written to {}", world.concepts.len(), world.vocab_size(), out.display());
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let world = world_of(cfg)?;
    let corpus = build_pretrain_corpus(&world, cfg.world.per_concept)?;
    let pre = pretrain(&world, &corpus, &TrainConfig { seed: cfg.seed, ..cfg.pretrain.clone() })?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    pre.params.save(&base_path(cfg))?;
    let summary = serde_json::json!({
        "final_corpus_ce": pre.final_corpus_ce,
        "probe_accuracy": pre.probe_accuracy,
        "hash": pre.params.hash(),
    });
    std::fs::write(cfg.out_dir.join("pretrain.json"), serde_json::to_vec_pretty(&summary)?)?;
    println!("corpus CE {:.4}, recognition accuracy {:.1}%", pre.final_corpus_ce, pre.probe_accuracy);
    if !pre.passes_gate() {
        bail!("recognition accuracy below the {GATE_ACCURACY}% gate");
    }
    Ok(())
}

fn cmd_unlearn(cfg: &ExperimentConfig) -> Result<()> {
    let (world, base) = load_or_pretrain(cfg)?;
    let ids = cfg.concepts.resolve(&world)?;
    for &m in &cfg.methods {
        let train = cfg.unlearn_config(m, cfg.unlearn.steps, cfg.seed);
        let run = unlearn(&base, &world, &ids, &train).with_context(|| format!("unlearning with {m}"))?;
        run.write(&cfg.out_dir.join(m.to_string()), &train)?;
        let last = run.log.last().map_or(f64::NAN, |l| l.total);
        println!("{m}: {} steps, final loss {last:.4}", run.log.len());
    }
    Ok(())
}

fn load_unlearned(cfg: &ExperimentConfig, m: Method) -> Result<ModelParams> {
    let p = cfg.out_dir.join(m.to_string()).join("unlearned.ckpt");
    ModelParams::load(&p).with_context(|| format!("loading {} (run `siu unlearn` first)", p.display()))
}

fn forgets(cfg: &ExperimentConfig, world: &ConceptWorld) -> Result<Vec<siu_core::ForgetSet>> {
    Ok(cfg.concepts.resolve(world)?.into_iter().map(|c| build_forget_set(world, c)).collect::<siu_core::Result<_>>()?)
}

fn cmd_eval(cfg: &ExperimentConfig) -> Result<()> {
    let (world, base) = load_or_pretrain(cfg)?;
    let fs = forgets(cfg, &world)?;
    for &m in &cfg.methods {
        let model = load_unlearned(cfg, m)?;
        let r = evaluate(&base, &model, &world, &fs)?;
        std::fs::write(cfg.out_dir.join(m.to_string()).join("metrics.json"), serde_json::to_vec_pretty(&r)?)?;
        println!(
            "{m}: efficacy {:.1} EM {:.1} judge {:.2} C-Dis {:.3} specificity {:.1} fluency {} diversity {:.1}",
            r.efficacy,
            r.em,
            r.judge_score,
            r.c_dis,
            r.specificity,
            format_fluency(r.fluency),
            r.diversity
        );
    }
    Ok(())
}

fn cmd_attack(cfg: &ExperimentConfig) -> Result<()> {
    let (world, base) = load_or_pretrain(cfg)?;
    let fs = forgets(cfg, &world)?;
    for &m in &cfg.methods {
        let model = load_unlearned(cfg, m)?;
        let a = attack_report(&base, &model, &world, &fs, cfg.k_percent)?;
        std::fs::write(cfg.out_dir.join(m.to_string()).join("attacks.json"), serde_json::to_vec_pretty(&a)?)?;
        println!(
            "{m}: suspicious {}/{} ROUGE-L {:.3} multilingual {:.2} multihop {:.2}",
            a.mia.n_suspicious, a.mia.n_queries, a.mia.rouge_l_mean, a.multilingual, a.multihop
        );
    }
    Ok(())
}

fn report(table: &ComparisonTable, out: &Path) -> ExitCode {
    print!("{}", table.to_csv());
    eprintln!("results written to {}", out.display());
    if table.any_failed() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.opts)?;
    match cli.command {
        Command::World => cmd_world(&cfg)?,
        Command::Pretrain => cmd_pretrain(&cfg)?,
        Command::Unlearn => cmd_unlearn(&cfg)?,
        Command::Eval => cmd_eval(&cfg)?,
        Command::Attack => cmd_attack(&cfg)?,
        Command::Table => {
            let table = if cfg.concepts == ConceptSelection::All { multi_concept(&cfg)? } else { run_experiment(&cfg)? };
            return Ok(report(&table, &cfg.out_dir));
        }
        Command::Sweep => return Ok(report(&sweep_steps(&cfg)?, &cfg.out_dir)),
    }
    Ok(ExitCode::SUCCESS)
}
