//! Command-line driver: corpus synthesis, pre-training of the base model,
//! data construction, training, decoding, evaluation and the full loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use faithgen_core::corpus::{load_corpus, load_instances, save_corpus, save_instances};
use faithgen_core::evolve::{
    make_synthetic_corpus, output_dir, pretrain, run_evolution, train_epochs, IterationPlan,
    PretrainConfig, SyntheticWorld, WorldConfig,
};
use faithgen_core::harness::{
    evaluate, load_answers, save_answers, AnswerRecord, CommandJudge, ProxyJudge,
};
use faithgen_core::inference::{generate_answer, DecodeMode, InferenceConfig, TokenDecode};
use faithgen_core::lm::{
    context_index, seed_for_key, ItemContext, LmBackend, SamplingConfig, ToyLm,
};
use faithgen_core::prestage::{build_prestage_dataset, save_stats, PrestageConfig};
use faithgen_core::treesample::{
    extract_pairs, grow_tree, save_tree, select_best_path, TreeConfig,
};
use faithgen_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "faithgen",
    version,
    about = "Sentence-level faithful answer generation with a toy LM"
)]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with planted knowledge conflicts.
    Synth(SynthArgs),
    /// Train the base model on the synthetic world.
    Pretrain(PretrainArgs),
    /// Build pre-stage contrastive pairs from gold answers.
    Prestage(PrestageArgs),
    /// Mine pairs from sampled answer trees.
    Treesample(TreeArgs),
    /// Train a checkpoint on a pair dataset.
    Train(TrainArgs),
    /// Decode answers for a corpus.
    Generate(GenerateArgs),
    /// Score answers against a corpus.
    Evaluate(EvaluateArgs),
    /// Run the whole self-evolution loop.
    Evolve(EvolveArgs),
}

#[derive(Args)]
struct WorldArgs {
    /// Seed of the synthetic world (entities, priors, vocabulary).
    #[arg(long, default_value_t = WorldConfig::default().seed)]
    world_seed: u64,
}

impl WorldArgs {
    fn world(&self) -> SyntheticWorld {
        SyntheticWorld::new(WorldConfig {
            seed: self.world_seed,
            ..WorldConfig::default()
        })
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long, default_value_t = 50)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    passage_docs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrestageArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to write pair counts.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Keep random negatives instead of filtering by reduction ratio.
    #[arg(long)]
    no_filter: bool,
}

#[derive(Args)]
struct TreeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TreeConfig::default().branching)]
    branching: usize,
    #[arg(long, default_value_t = TreeConfig::default().max_depth)]
    depth: usize,
    /// Write one JSON tree per item into this directory.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = IterationPlan::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = IterationPlan::default().batch_size)]
    batch: usize,
    #[arg(long, default_value_t = IterationPlan::default().objective_lambda)]
    lambda: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenMode {
    Beam,
    Greedy,
    Sample,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output JSONL; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "hierarchical")]
    mode: DecodeMode,
    #[arg(long, default_value_t = 3)]
    beams: usize,
    #[arg(long, default_value_t = 3)]
    width: usize,
    #[arg(long, default_value_t = 6)]
    max_steps: usize,
    /// How candidate sentences are proposed inside hierarchical decoding.
    #[arg(long, value_enum, default_value_t = TokenMode::Beam)]
    token_decode: TokenMode,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeKind {
    Proxy,
    ExternalCommand,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    answers: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = JudgeKind::Proxy)]
    judge: JudgeKind,
    /// Shell command for the external judge: one JSON request per line in,
    /// one JSON response per line out.
    #[arg(long)]
    judge_command: Option<String>,
    /// JSON report path; the CSV is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvolveArgs {
    /// JSON iteration plan; defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory; falls back to FAITHGEN_OUT, then ./faithgen-run.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => {
            let corpus = make_synthetic_corpus(&a.world.world(), a.size, seed.unwrap_or(1));
            save_corpus(&corpus, &a.out)?;
            log::info!("wrote {} items to {}", corpus.len(), a.out.display());
        }
        Command::Pretrain(a) => {
            let world = a.world.world();
            let mut cfg = PretrainConfig::for_vocab(world.vocab().len());
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(d) = a.passage_docs {
                cfg.passage_docs = d;
            }
            let (model, losses) = pretrain(&world, &cfg)?;
            model.save(&a.out)?;
            log::info!(
                "pretrained {} parameters, losses {losses:?}",
                model.params().count()
            );
        }
        Command::Prestage(a) => {
            let model = ToyLm::load(&a.model)?;
            let corpus = load_corpus(&a.corpus)?;
            let cfg = PrestageConfig {
                filter: !a.no_filter,
                ..PrestageConfig::default()
            };
            let out =
                build_prestage_dataset(&model, &corpus, model.vocab(), &cfg, seed.unwrap_or(0))?;
            save_instances(&out.instances, model.vocab(), &a.out)?;
            if let Some(p) = &a.stats {
                save_stats(&out.stats, p)?;
            }
            log::info!(
                "{} pre-stage pairs from {} items",
                out.instances.len(),
                out.stats.items
            );
        }
        Command::Treesample(a) => {
            let model = ToyLm::load(&a.model)?;
            let corpus = load_corpus(&a.corpus)?;
            let vocab = model.vocab();
            let cfg = TreeConfig {
                branching: a.branching,
                max_depth: a.depth,
                ..TreeConfig::default()
            };
            if let Some(d) = &a.dump_dir {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let mut instances = Vec::new();
            for item in &corpus {
                let ictx = ItemContext::from_item(item, vocab);
                let tree = grow_tree(
                    &model,
                    &ictx,
                    &cfg,
                    seed_for_key(seed.unwrap_or(0), &item.id),
                )?;
                let best = select_best_path(&tree, vocab, &item.short_answer_sets).ok();
                if let Some(b) = &best {
                    instances.extend(extract_pairs(&tree, b, &item.id)?);
                }
                if let Some(d) = &a.dump_dir {
                    save_tree(
                        &tree,
                        best.as_ref(),
                        vocab,
                        &item.id,
                        d.join(format!("{}.json", item.id)),
                    )?;
                }
            }
            save_instances(&instances, vocab, &a.out)?;
            log::info!("{} tree pairs from {} items", instances.len(), corpus.len());
        }
        Command::Train(a) => {
            let mut model = ToyLm::load(&a.model)?;
            let corpus = load_corpus(&a.corpus)?;
            let contexts = context_index(&corpus, model.vocab());
            let instances = load_instances(&a.instances, model.vocab())?;
            let plan = IterationPlan {
                epochs_per_iteration: a.epochs,
                learning_rate: a.lr,
                batch_size: a.batch,
                objective_lambda: a.lambda,
                ..IterationPlan::default()
            };
            plan.validate()?;
            let (loss, _) =
                train_epochs(&mut model, &instances, &contexts, &plan, seed.unwrap_or(0))?;
            model.save(&a.out)?;
            log::info!(
                "trained on {} pairs: lm {:.4}, disc {:.4}, total {:.4}",
                instances.len(),
                loss.lm_term,
                loss.disc_term,
                loss.total
            );
        }
        Command::Generate(a) => generate(&a, seed.unwrap_or(0))?,
        Command::Evaluate(a) => {
            let answers = load_answers(&a.answers)?;
            let corpus = load_corpus(&a.corpus)?;
            let report = match a.judge {
                JudgeKind::Proxy => evaluate(&answers, &corpus, &mut ProxyJudge, false)?,
                JudgeKind::ExternalCommand => {
                    let cmd = a.judge_command.as_deref().ok_or_else(|| {
                        Error::Config("--judge external-command needs --judge-command".into())
                    })?;
                    evaluate(&answers, &corpus, &mut CommandJudge::spawn(cmd)?, false)?
                }
            };
            report.save_json(&a.out)?;
            let csv = a.csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
            report.save_csv(&csv)?;
            log::info!(
                "em recall {:.4}, hit {:.4}, faithfulness {:.4}",
                report.em_recall,
                report.hit,
                report.faithfulness_proxy
            );
        }
        Command::Evolve(a) => {
            let mut plan = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str::<IterationPlan>(&text)?
                }
                None => IterationPlan::default(),
            };
            if let Some(s) = seed {
                plan.seed = s;
            }
            let base = ToyLm::load(&a.model)?;
            let corpus = load_corpus(&a.corpus)?;
            let dir = a.out.clone().unwrap_or_else(|| output_dir("faithgen-run"));
            let manifest = run_evolution(&plan, &corpus, &base, &dir)?;
            for r in &manifest.iterations {
                log::info!(
                    "iteration {}: faithfulness {:.4}",
                    r.iteration,
                    r.metrics.faithfulness_proxy
                );
            }
            log::info!("run written to {}", dir.display());
        }
    }
    Ok(())
}

fn generate(a: &GenerateArgs, seed: u64) -> Result<()> {
    let model = ToyLm::load(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    let mut cfg = InferenceConfig::new(a.beams, a.width);
    cfg.max_steps = a.max_steps;
    cfg.token_decode = match a.token_decode {
        TokenMode::Beam => TokenDecode::Beam { width: a.width },
        TokenMode::Greedy => TokenDecode::Greedy,
        TokenMode::Sample => {
            let s = SamplingConfig::default();
            TokenDecode::Sample {
                top_p: s.top_p,
                temperature: s.temperature,
                seed,
            }
        }
    };
    cfg.validate()?;
    let mut answers = Vec::with_capacity(corpus.len());
    for item in &corpus {
        let ictx = ItemContext::from_item(item, model.vocab());
        let g = generate_answer(&model, &ictx, a.mode, &cfg)?;
        answers.push(AnswerRecord {
            id: item.id.clone(),
            answer: g.text,
            path_score: Some(g.path_score),
            mode: Some(a.mode.name().to_string()),
        });
    }
    match &a.out {
        Some(p) => save_answers(&answers, p),
        None => write_stdout(&answers),
    }
}

fn write_stdout(answers: &[AnswerRecord]) -> Result<()> {
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for a in answers {
        writeln!(w, "{}", serde_json::to_string(a)?)
            .map_err(|e| Error::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}
