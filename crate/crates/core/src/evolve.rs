//! The self-evolution driver and the synthetic world it runs on.
//!
//! The world is a set of landmarks with three facts each (construction year,
//! architect, town). An initial model is pretrained on closed-book answers
//! that state each landmark's "prior" facts, and on passage-conditioned
//! answers that sometimes copy the passage and sometimes fall back to the
//! prior, and sometimes add a remark about the landmark that copies or
//! ignores the passages. Corpus items plant passages whose facts often
//! contradict the prior, so faithfulness (copying the passage) and
//! correctness (exact match on the planted values) are both measurable.
//!
//! [`run_evolution`] then trains iteration 1 on pre-stage pairs and every
//! later iteration on pairs mined from trees sampled by the previous
//! checkpoint, evaluating after each iteration.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{save_instances, ContrastiveInstance, QaItem, Segmentation};
use crate::error::{Error, Result};
use crate::harness::{evaluate, save_answers, AnswerRecord, EvalReport, ProxyJudge};
use crate::inference::{generate_answer, DecodeMode, InferenceConfig};
use crate::lm::{
    context_index, derive_seed, seed_for_key, train_step, ContextIndex, ItemContext, LmBackend,
    LmContext, ToyConfig, ToyLm,
};
use crate::objective::{CombinedObjective, LossBreakdown, DEFAULT_LAMBDA};
use crate::prestage::{build_prestage_dataset, PrestageConfig, PrestageStats};
use crate::treesample::{extract_pairs, grow_tree, select_best_path, TreeConfig};
use crate::vocab::{TokenId, Vocab, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    Year,
    Architect,
    Town,
}

pub const ASPECTS: [Aspect; 3] = [Aspect::Year, Aspect::Architect, Aspect::Town];

impl Aspect {
    fn index(self) -> usize {
        self as usize
    }

    /// The value is always preceded by a cue word unique to its aspect and
    /// followed by a free-form tail.
    pub fn fact(self, entity: &str, value: &str, tail: &str) -> String {
        match self {
            Aspect::Year => format!("{entity} was built in year {value} {tail}."),
            Aspect::Architect => format!("{entity} was designed by architect {value} {tail}."),
            Aspect::Town => format!("{entity} stands in town {value} {tail}."),
        }
    }

    fn question(self, entity: &str) -> String {
        match self {
            Aspect::Year => format!("when was {entity} built"),
            Aspect::Architect => format!("who designed {entity}"),
            Aspect::Town => format!("where does {entity} stand"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    /// Parametric value per aspect.
    pub prior: [String; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub entities: usize,
    /// Probability that an item asks about two aspects rather than one.
    pub two_aspect_fraction: f64,
    /// Probability that a passage value contradicts the prior.
    pub conflict_rate: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            entities: 60,
            two_aspect_fraction: 0.5,
            conflict_rate: 0.7,
            seed: 7,
        }
    }
}

const SYLLABLES: [&str; 12] = [
    "va", "ro", "me", "li", "to", "ka", "du", "ne", "si", "pa", "lo", "ri",
];
const KINDS: [&str; 4] = ["tower", "bridge", "hall", "gate"];
const ARCHITECTS: [&str; 16] = [
    "adler", "brandt", "corvo", "dahl", "elsen", "falk", "gorin", "holm", "ivers", "jansen",
    "kober", "lund", "moreau", "norberg", "ostrow", "pryce",
];
const TOWNS: [&str; 16] = [
    "amber", "brook", "cedar", "dunmore", "eastby", "fenwick", "glenn", "harlow", "ivy", "kestrel",
    "linden", "marsh", "northam", "oakley", "pembury", "redcliff",
];
/// Tails start with distinct words, so only the first word is uncertain once
/// a tail is chosen.
const TAILS: [&str; 12] = [
    "after the great fire",
    "during a long winter",
    "with help from the guild",
    "despite heavy rain",
    "beside the old harbor",
    "under a new charter",
    "for the river trade",
    "amid fierce debate",
    "using local granite",
    "before the railway arrived",
    "through public donations",
    "at enormous cost",
];
const ADJECTIVES: [&str; 10] = [
    "old", "green", "tall", "quiet", "bright", "narrow", "famous", "stone", "round", "small",
];
const NOUNS: [&str; 10] = [
    "bells", "arches", "windows", "gardens", "stairs", "domes", "murals", "clocks", "lamps",
    "doors",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub entities: Vec<Entity>,
    pub years: Vec<String>,
    pub architects: Vec<String>,
    pub towns: Vec<String>,
}

/// One question setting: which aspects are asked and what the passages say.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub entity: usize,
    pub asked: Vec<Aspect>,
    pub passage_values: [String; 3],
    /// Tail attached to each planted fact.
    pub tails: [String; 3],
    /// Remark about a feature of the landmark, stated in the passages.
    pub remark: String,
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let years: Vec<String> = (0..24).map(|i| (1800 + 8 * i).to_string()).collect();
        let architects: Vec<String> = ARCHITECTS.iter().map(|s| s.to_string()).collect();
        let towns: Vec<String> = TOWNS.iter().map(|s| s.to_string()).collect();
        let mut names: Vec<String> = SYLLABLES
            .iter()
            .flat_map(|a| SYLLABLES.iter().map(move |b| format!("{a}{b}")))
            .filter(|n| n.len() == 4)
            .collect();
        names.shuffle(&mut rng);
        let entities = (0..config.entities)
            .map(|i| Entity {
                name: format!(
                    "the {} {}",
                    names[i % names.len()],
                    KINDS[(i / names.len() + i) % KINDS.len()]
                ),
                prior: [
                    years.choose(&mut rng).unwrap().clone(),
                    architects.choose(&mut rng).unwrap().clone(),
                    towns.choose(&mut rng).unwrap().clone(),
                ],
            })
            .collect();
        SyntheticWorld {
            config,
            entities,
            years,
            architects,
            towns,
        }
    }

    pub fn pool(&self, aspect: Aspect) -> &[String] {
        match aspect {
            Aspect::Year => &self.years,
            Aspect::Architect => &self.architects,
            Aspect::Town => &self.towns,
        }
    }

    /// Every word the world can produce.
    pub fn vocab(&self) -> Vocab {
        let mut texts: Vec<String> = Vec::new();
        for e in &self.entities {
            for a in ASPECTS {
                texts.push(format!("{}?", a.question(&e.name)));
                texts.push(a.fact(&e.name, &e.prior[a.index()], TAILS[0]));
            }
        }
        for a in ASPECTS {
            texts.extend(self.pool(a).iter().cloned());
        }
        texts.push("and it is known for its".into());
        texts.extend(TAILS.iter().map(|s| s.to_string()));
        texts.extend(ADJECTIVES.iter().chain(NOUNS.iter()).map(|s| s.to_string()));
        Vocab::build(texts.iter().map(String::as_str))
    }

    /// A random remark about some feature of a landmark.
    pub fn filler<R: Rng>(&self, rng: &mut R) -> String {
        format!(
            "it is known for its {} {}.",
            ADJECTIVES.choose(rng).unwrap(),
            NOUNS.choose(rng).unwrap()
        )
    }

    pub fn scenario<R: Rng>(&self, entity: usize, rng: &mut R) -> Scenario {
        let mut order = ASPECTS.to_vec();
        order.shuffle(rng);
        let n = if rng.gen_bool(self.config.two_aspect_fraction) {
            2
        } else {
            1
        };
        let asked = order[..n].to_vec();
        let prior = &self.entities[entity].prior;
        let passage_values = ASPECTS.map(|a| {
            let p = &prior[a.index()];
            if rng.gen_bool(self.config.conflict_rate) {
                let others: Vec<&String> = self.pool(a).iter().filter(|v| *v != p).collect();
                (*others.choose(rng).unwrap()).clone()
            } else {
                p.clone()
            }
        });
        let tails = ASPECTS.map(|_| random_tail(rng));
        let remark = self.filler(rng);
        Scenario {
            entity,
            asked,
            passage_values,
            tails,
            remark,
        }
    }

    pub fn question(&self, s: &Scenario) -> String {
        let name = &self.entities[s.entity].name;
        let parts: Vec<String> = s.asked.iter().map(|a| a.question(name)).collect();
        format!("{}?", parts.join(" and "))
    }

    /// Two passages holding all three planted facts in random order, the
    /// second one closing with the remark.
    pub fn passages<R: Rng>(&self, s: &Scenario, rng: &mut R) -> Vec<String> {
        let name = &self.entities[s.entity].name;
        let mut facts: Vec<String> = ASPECTS
            .iter()
            .map(|a| a.fact(name, &s.passage_values[a.index()], &s.tails[a.index()]))
            .collect();
        facts.shuffle(rng);
        vec![facts[..2].join(" "), format!("{} {}", facts[2], s.remark)]
    }

    pub fn item<R: Rng>(&self, id: String, s: &Scenario, rng: &mut R) -> QaItem {
        let name = &self.entities[s.entity].name;
        let gold: Vec<String> = s
            .asked
            .iter()
            .map(|a| a.fact(name, &s.passage_values[a.index()], &s.tails[a.index()]))
            .collect();
        QaItem {
            id,
            question: self.question(s),
            passages: self.passages(s, rng),
            gold_answer: Some(gold.join(" ")),
            short_answer_sets: s
                .asked
                .iter()
                .map(|a| vec![s.passage_values[a.index()].clone()])
                .collect(),
        }
    }
}

fn random_tail<R: Rng>(rng: &mut R) -> String {
    TAILS.choose(rng).unwrap().to_string()
}

/// `size` items over distinct landmarks (cycling when `size` exceeds the
/// world), each with planted passages and a gold answer copied from them.
pub fn make_synthetic_corpus(world: &SyntheticWorld, size: usize, seed: u64) -> Vec<QaItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..world.entities.len()).collect();
    order.shuffle(&mut rng);
    (0..size)
        .map(|i| {
            let s = world.scenario(order[i % order.len()], &mut rng);
            world.item(format!("syn-{i:04}"), &s, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ToyConfig,
    /// Closed-book answers per landmark, stating prior values.
    pub closed_book_docs: usize,
    /// Passage-conditioned answers over random scenarios.
    pub passage_docs: usize,
    /// Probability that a pretraining answer copies the passage value.
    pub faithful_rate: f64,
    /// Probability of a remark after each fact sentence.
    pub filler_rate: f64,
    /// Probability that a remark copies the passage rather than inventing one.
    pub remark_copy_rate: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn for_vocab(vocab_size: usize) -> Self {
        PretrainConfig {
            model: ToyConfig::new(vocab_size),
            closed_book_docs: 4,
            passage_docs: 2000,
            faithful_rate: 0.4,
            filler_rate: 0.3,
            remark_copy_rate: 0.5,
            epochs: 15,
            learning_rate: 3e-3,
            batch_size: 8,
            seed: 11,
        }
    }
}

/// `(context layout, answer tokens ending in end-of-sequence)` pairs.
pub fn pretraining_documents(
    world: &SyntheticWorld,
    cfg: &PretrainConfig,
) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    let vocab = world.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut docs = Vec::new();
    let answer = |sentences: &[String]| {
        let mut t = vocab.tokenize(&sentences.join(" "));
        t.push(EOS);
        t
    };
    for (ei, e) in world.entities.iter().enumerate() {
        for _ in 0..cfg.closed_book_docs {
            let s = world.scenario(ei, &mut rng);
            let facts: Vec<String> = s
                .asked
                .iter()
                .map(|a| a.fact(&e.name, &e.prior[a.index()], &random_tail(&mut rng)))
                .collect();
            let ctx = LmContext {
                question: vocab.tokenize(&world.question(&s)),
                passages: None,
                prefix: vec![],
            };
            docs.push((ctx.layout(), answer(&facts)));
        }
    }
    for _ in 0..cfg.passage_docs {
        let ei = rng.gen_range(0..world.entities.len());
        let e = &world.entities[ei];
        let s = world.scenario(ei, &mut rng);
        let passages = world.passages(&s, &mut rng);
        let mut sentences = Vec::new();
        for a in &s.asked {
            let i = a.index();
            let fact = if rng.gen_bool(cfg.faithful_rate) {
                a.fact(&e.name, &s.passage_values[i], &s.tails[i])
            } else {
                a.fact(&e.name, &e.prior[i], &random_tail(&mut rng))
            };
            sentences.push(fact);
            if rng.gen_bool(cfg.filler_rate) {
                sentences.push(if rng.gen_bool(cfg.remark_copy_rate) {
                    s.remark.clone()
                } else {
                    world.filler(&mut rng)
                });
            }
        }
        let ctx = LmContext {
            question: vocab.tokenize(&world.question(&s)),
            passages: Some(passages.iter().map(|p| vocab.tokenize(p)).collect()),
            prefix: vec![],
        };
        docs.push((ctx.layout(), answer(&sentences)));
    }
    docs
}

/// Trains the initial model on [`pretraining_documents`]. Returns the model
/// and the mean loss of each epoch.
pub fn pretrain(world: &SyntheticWorld, cfg: &PretrainConfig) -> Result<(ToyLm, Vec<f64>)> {
    let vocab = world.vocab();
    let mut mcfg = cfg.model.clone();
    mcfg.vocab_size = vocab.len();
    let mut model = ToyLm::new(mcfg, vocab)?;
    let mut docs = pretraining_documents(world, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        docs.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for batch in docs.chunks(cfg.batch_size.max(1)) {
            let (loss, grads) = model.lm_gradient(batch)?;
            model.apply_gradient(&grads, cfg.learning_rate)?;
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches.max(1) as f64;
        log::info!("pretraining epoch {epoch}: mean loss {mean:.4}");
        epoch_losses.push(mean);
    }
    model.reset_optimizer();
    Ok((model, epoch_losses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationPlan {
    pub num_iterations: usize,
    pub epochs_per_iteration: usize,
    pub objective_lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub prestage_config: PrestageConfig,
    pub tree_config: TreeConfig,
    pub inference_config: InferenceConfig,
    /// Unit of optimisation for data construction.
    pub segmentation: Segmentation,
    /// Train each iteration from the initial model instead of the previous
    /// checkpoint.
    #[serde(default)]
    pub restart_from_base: bool,
    /// Also evaluate hierarchical decoding at the final checkpoint.
    #[serde(default = "yes")]
    pub final_hierarchical: bool,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for IterationPlan {
    fn default() -> Self {
        IterationPlan {
            num_iterations: 3,
            epochs_per_iteration: 1,
            objective_lambda: DEFAULT_LAMBDA,
            learning_rate: 6e-5,
            batch_size: 4,
            prestage_config: PrestageConfig::default(),
            tree_config: TreeConfig::default(),
            inference_config: InferenceConfig::default(),
            segmentation: Segmentation::Sentence,
            restart_from_base: false,
            final_hierarchical: true,
            seed: 0,
        }
    }
}

impl IterationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.num_iterations == 0 || self.epochs_per_iteration == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "iterations, epochs and batch size must be positive".into(),
            ));
        }
        if self.learning_rate.is_nan()
            || self.learning_rate < 0.0
            || self.objective_lambda.is_nan()
            || self.objective_lambda < 0.0
        {
            return Err(Error::Config(
                "learning rate and lambda must be non-negative".into(),
            ));
        }
        self.tree_config.validate()?;
        self.inference_config.validate()?;
        self.prestage_config.sampling.validate()
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// The same plan, optimising whole answers: every answer is a single unit,
/// trees are one level deep and pairs are whole-answer pairs.
pub fn answer_level_mode(plan: &IterationPlan) -> IterationPlan {
    let mut p = plan.clone();
    let seg = Segmentation::Answer;
    p.segmentation = seg;
    p.prestage_config.segmentation = seg;
    p.prestage_config.sampling.segmentation = seg;
    p.tree_config.sampling.segmentation = seg;
    p.tree_config.max_depth = 1;
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub em_recall: f64,
    pub hit: f64,
    pub faithfulness_proxy: f64,
}

impl From<&EvalReport> for Metrics {
    fn from(r: &EvalReport) -> Self {
        Metrics {
            em_recall: r.em_recall,
            hit: r.hit,
            faithfulness_proxy: r.faithfulness_proxy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub iteration: usize,
    /// Relative to the run directory.
    pub path: String,
    pub config_hash: String,
    pub params_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub data_source: String,
    pub dataset_path: String,
    pub dataset_size: usize,
    /// Parameters digest of the checkpoint that generated the dataset.
    pub generated_by: String,
    /// Parameters digest the iteration's training started from.
    pub trained_from: String,
    pub train_log_path: String,
    pub mean_loss: LossBreakdown,
    pub answers_path: String,
    pub eval_path: String,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prestage_stats: Option<PrestageStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trees_without_path: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub plan_hash: String,
    pub plan: IterationPlan,
    pub corpus_items: usize,
    pub checkpoints: Vec<CheckpointRecord>,
    pub base_metrics: Option<Metrics>,
    pub iterations: Vec<IterationRecord>,
    pub final_hierarchical: Option<Metrics>,
    pub complete: bool,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write_text(
            &dir.join("manifest.json"),
            &(serde_json::to_string_pretty(self)? + "\n"),
        )
    }

    /// Greedy faithfulness after each iteration, in order.
    pub fn faithfulness_trend(&self) -> Vec<f64> {
        self.iterations
            .iter()
            .map(|r| r.metrics.faithfulness_proxy)
            .collect()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn rel(dir: &str, file: &str) -> String {
    format!("{dir}/{file}")
}

#[derive(Serialize)]
struct StepLog {
    step: u64,
    lm: f64,
    disc: f64,
    total: f64,
}

/// Trains `epochs` shuffled passes over `instances`. Returns the mean loss
/// and the per-step log lines.
pub fn train_epochs(
    model: &mut ToyLm,
    instances: &[ContrastiveInstance],
    contexts: &ContextIndex,
    plan: &IterationPlan,
    seed: u64,
) -> Result<(LossBreakdown, Vec<String>)> {
    let obj = CombinedObjective::new(plan.objective_lambda);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut mean = LossBreakdown::zero(plan.objective_lambda);
    let mut lines = Vec::new();
    let mut steps = 0usize;
    for epoch in 0..plan.epochs_per_iteration {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(plan.batch_size) {
            let batch: Vec<ContrastiveInstance> =
                chunk.iter().map(|&i| instances[i].clone()).collect();
            let loss = train_step(model, &batch, contexts, &obj, plan.learning_rate)?;
            lines.push(serde_json::to_string(&StepLog {
                step: model.step_count(),
                lm: loss.lm_term,
                disc: loss.disc_term,
                total: loss.total,
            })?);
            mean.accumulate(&loss, 1.0);
            steps += 1;
        }
    }
    if steps > 0 {
        let inv = 1.0 / steps as f64;
        mean = LossBreakdown {
            lm_term: mean.lm_term * inv,
            disc_term: mean.disc_term * inv,
            total: mean.total * inv,
            lambda: plan.objective_lambda,
        };
    }
    Ok((mean, lines))
}

/// Generates an answer for every item and scores them with the proxy judge.
pub fn evaluate_model(
    model: &ToyLm,
    items: &[QaItem],
    mode: DecodeMode,
    cfg: &InferenceConfig,
) -> Result<(Vec<AnswerRecord>, EvalReport)> {
    let vocab = model.vocab();
    let mut answers = Vec::with_capacity(items.len());
    for item in items {
        let ictx = ItemContext::from_item(item, vocab);
        let g = generate_answer(model, &ictx, mode, cfg)?;
        answers.push(AnswerRecord {
            id: item.id.clone(),
            answer: g.text,
            path_score: Some(g.path_score),
            mode: Some(mode.name().to_string()),
        });
    }
    let report = evaluate(&answers, items, &mut ProxyJudge, true)?;
    Ok((answers, report))
}

/// Pairs mined from one sampled tree per item with `model`.
pub fn tree_dataset(
    model: &ToyLm,
    items: &[QaItem],
    cfg: &TreeConfig,
    seed: u64,
) -> Result<(Vec<ContrastiveInstance>, usize)> {
    let vocab = model.vocab();
    let mut out = Vec::new();
    let mut missing = 0usize;
    for item in items {
        let ictx = ItemContext::from_item(item, vocab);
        let tree = grow_tree(model, &ictx, cfg, seed_for_key(seed, &item.id))?;
        if let Some(e) = &tree.error {
            log::warn!("tree for {} is partial: {e}", item.id);
        }
        match select_best_path(&tree, vocab, &item.short_answer_sets) {
            Ok(best) => out.extend(extract_pairs(&tree, &best, &item.id)?),
            Err(Error::EmptyTree) => missing += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, missing))
}

fn save_checkpoint(model: &ToyLm, dir: &Path, iteration: usize) -> Result<CheckpointRecord> {
    let sub = format!("iter{iteration}");
    std::fs::create_dir_all(dir.join(&sub)).map_err(|e| Error::io(dir.join(&sub), e))?;
    let path = rel(&sub, "checkpoint.json");
    model.save(dir.join(&path))?;
    Ok(CheckpointRecord {
        iteration,
        path,
        config_hash: model.config().hash(),
        params_digest: model.params().digest(),
    })
}

/// Runs the whole loop, writing every artifact under `out_dir`. The manifest
/// is rewritten after each stage, so a failure leaves the completed stages
/// recorded.
pub fn run_evolution(
    plan: &IterationPlan,
    corpus: &[QaItem],
    base: &ToyLm,
    out_dir: &Path,
) -> Result<RunManifest> {
    plan.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vocab = base.vocab().clone();
    let mut items = corpus.to_vec();
    items.sort_by(|a, b| a.id.cmp(&b.id));
    let contexts = context_index(&items, &vocab);
    write_text(
        &out_dir.join("plan.json"),
        &(serde_json::to_string_pretty(plan)? + "\n"),
    )?;

    let mut manifest = RunManifest {
        plan_hash: plan.hash(),
        plan: plan.clone(),
        corpus_items: items.len(),
        checkpoints: vec![save_checkpoint(base, out_dir, 0)?],
        base_metrics: None,
        iterations: Vec::new(),
        final_hierarchical: None,
        complete: false,
    };
    let eval_cfg = InferenceConfig {
        segmentation: Segmentation::Sentence,
        ..plan.inference_config
    };
    let (_, base_report) = evaluate_model(base, &items, DecodeMode::Greedy, &eval_cfg)?;
    manifest.base_metrics = Some(Metrics::from(&base_report));
    manifest.save(out_dir)?;

    let mut model = base.clone();
    model.reset_optimizer();
    for t in 1..=plan.num_iterations {
        let iter_seed = derive_seed(plan.seed, &[t as u64]);
        let sub = format!("iter{t}");
        let generator = model.params().digest();
        let (instances, source, prestage_stats, missing) = if t == 1 {
            let out =
                build_prestage_dataset(&model, &items, &vocab, &plan.prestage_config, iter_seed)?;
            (out.instances, "prestage", Some(out.stats), None)
        } else {
            let (inst, missing) = tree_dataset(&model, &items, &plan.tree_config, iter_seed)?;
            (inst, "tree", None, Some(missing))
        };
        std::fs::create_dir_all(out_dir.join(&sub))
            .map_err(|e| Error::io(out_dir.join(&sub), e))?;
        let dataset_path = rel(&sub, "instances.jsonl");
        save_instances(&instances, &vocab, out_dir.join(&dataset_path))?;
        log::info!("iteration {t}: {} {source} instances", instances.len());

        if plan.restart_from_base {
            model = base.clone();
            model.reset_optimizer();
        }
        let trained_from = model.params().digest();
        let (mean_loss, log_lines) = if instances.is_empty() {
            log::warn!("iteration {t} has no training instances");
            (LossBreakdown::zero(plan.objective_lambda), Vec::new())
        } else {
            train_epochs(
                &mut model,
                &instances,
                &contexts,
                plan,
                derive_seed(iter_seed, &[7]),
            )?
        };
        let train_log_path = rel(&sub, "train_log.jsonl");
        let mut log_text = log_lines.join("\n");
        if !log_text.is_empty() {
            log_text.push('\n');
        }
        write_text(&out_dir.join(&train_log_path), &log_text)?;
        manifest
            .checkpoints
            .push(save_checkpoint(&model, out_dir, t)?);

        let (answers, report) = evaluate_model(&model, &items, DecodeMode::Greedy, &eval_cfg)?;
        let answers_path = rel(&sub, "answers.jsonl");
        save_answers(&answers, out_dir.join(&answers_path))?;
        let eval_path = rel(&sub, "eval.json");
        report.save_json(out_dir.join(&eval_path))?;
        report.save_csv(out_dir.join(rel(&sub, "eval.csv")))?;
        log::info!(
            "iteration {t}: faithfulness {:.4}, em recall {:.4}",
            report.faithfulness_proxy,
            report.em_recall
        );
        manifest.iterations.push(IterationRecord {
            iteration: t,
            data_source: source.into(),
            dataset_path,
            dataset_size: instances.len(),
            generated_by: generator,
            trained_from,
            train_log_path,
            mean_loss,
            answers_path,
            eval_path,
            metrics: Metrics::from(&report),
            prestage_stats,
            trees_without_path: missing,
        });
        manifest.save(out_dir)?;
    }

    if plan.final_hierarchical {
        let (answers, report) =
            evaluate_model(&model, &items, DecodeMode::Hierarchical, &eval_cfg)?;
        save_answers(&answers, out_dir.join("final_hierarchical_answers.jsonl"))?;
        report.save_json(out_dir.join("final_hierarchical_eval.json"))?;
        manifest.final_hierarchical = Some(Metrics::from(&report));
    }
    manifest.complete = true;
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Output directory from `FAITHGEN_OUT`, else `default`.
pub fn output_dir(default: impl Into<PathBuf>) -> PathBuf {
    std::env::var_os("FAITHGEN_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| default.into())
}
