//! Iteration-0 dataset: gold answer sentences as targets, closed-book samples
//! from the initial model as negatives, filtered by how much the passages
//! reduce each sentence's negative log-likelihood.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContrastiveInstance, QaItem, Segmentation};
use crate::error::{Error, Result};
use crate::lm::{
    derive_seed, sample_sentence, seed_for_key, ItemContext, LmBackend, LmContext, SamplingConfig,
};
use crate::scoring::faithfulness_score;
use crate::vocab::{Sentence, TokenId, Vocab};

pub const DEFAULT_NEGATIVES: usize = 6;
pub const DEFAULT_KEEP: usize = 2;

/// Mean negative log-likelihood of `output` continuing `ctx`.
pub fn nll<B: LmBackend>(backend: &B, ctx: &LmContext, output: &[TokenId]) -> Result<f64> {
    if output.is_empty() {
        return Err(Error::Empty("output sequence"));
    }
    let lps = backend.token_logprobs(ctx, output)?;
    Ok(-lps.iter().sum::<f64>() / lps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeCandidate {
    pub sentence: Sentence,
    pub nll_with_passages: f64,
    pub nll_without_passages: f64,
    pub reduction_ratio: f64,
}

/// Scores `[prefix, sentence]` with and without passages. The prefix is part
/// of the scored span, so the conditioning prefix is empty.
pub fn reduction_ratio<B: LmBackend>(
    backend: &B,
    item: &ItemContext,
    prefix: &[Sentence],
    sentence: &Sentence,
) -> Result<NegativeCandidate> {
    let span: Vec<TokenId> = prefix
        .iter()
        .chain(std::iter::once(sentence))
        .flat_map(|s| s.tokens().iter().copied())
        .collect();
    let with = nll(backend, &item.context(true, &[]), &span)?;
    let without = nll(backend, &item.context(false, &[]), &span)?;
    if without <= 0.0 || !with.is_finite() || !without.is_finite() {
        return Err(Error::InvalidLogProb {
            value: without,
            reason: "closed-book NLL must be positive and finite",
        });
    }
    Ok(NegativeCandidate {
        sentence: sentence.clone(),
        nll_with_passages: with,
        nll_without_passages: without,
        reduction_ratio: (with - without) / without,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrestageConfig {
    pub negatives: usize,
    pub keep: usize,
    pub sampling: SamplingConfig,
    /// `false` is the unfiltered baseline: `keep` random candidates per target.
    pub filter: bool,
    /// Drop pairs whose target does not already out-score the negative under
    /// the passage-conditioned faithfulness score.
    pub require_preference: bool,
    pub segmentation: Segmentation,
}

impl Default for PrestageConfig {
    fn default() -> Self {
        PrestageConfig {
            negatives: DEFAULT_NEGATIVES,
            keep: DEFAULT_KEEP,
            sampling: SamplingConfig::default(),
            filter: true,
            require_preference: true,
            segmentation: Segmentation::Sentence,
        }
    }
}

/// Closed-book samples conditioned on the question and prefix only. Samples
/// equal to the target, and repeats, are dropped.
pub fn sample_negatives<B: LmBackend>(
    backend: &B,
    item: &ItemContext,
    prefix: &[Sentence],
    target: &Sentence,
    count: usize,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Vec<Sentence>> {
    Ok(
        sample_negatives_traced(backend, item, prefix, target, count, sampling, seed)?
            .into_iter()
            .map(|(s, _)| s)
            .collect(),
    )
}

/// Like [`sample_negatives`], also returning the seed that drew each sample.
pub fn sample_negatives_traced<B: LmBackend>(
    backend: &B,
    item: &ItemContext,
    prefix: &[Sentence],
    target: &Sentence,
    count: usize,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Vec<(Sentence, u64)>> {
    let ctx = item.context(false, prefix);
    let mut out: Vec<(Sentence, u64)> = Vec::with_capacity(count);
    for i in 0..count {
        let s = negative_seed(seed, i);
        let sampled = sample_sentence(backend, &ctx, sampling, s)?;
        if sampled.sentence == *target || out.iter().any(|(o, _)| *o == sampled.sentence) {
            continue;
        }
        out.push((sampled.sentence, s));
    }
    Ok(out)
}

/// Seed of the `index`-th negative drawn for one target.
pub fn negative_seed(target_seed: u64, index: usize) -> u64 {
    derive_seed(target_seed, &[index as u64])
}

/// Candidates whose reduction ratio strictly exceeds the target's, most
/// negative first, at most `keep`.
pub fn filter_candidates<B: LmBackend>(
    backend: &B,
    item: &ItemContext,
    prefix: &[Sentence],
    target: &Sentence,
    candidates: &[Sentence],
    keep: usize,
) -> Result<Vec<NegativeCandidate>> {
    let target_ratio = reduction_ratio(backend, item, prefix, target)?.reduction_ratio;
    let mut kept = Vec::new();
    for c in candidates {
        let scored = reduction_ratio(backend, item, prefix, c)?;
        if scored.reduction_ratio > target_ratio {
            kept.push(scored);
        }
    }
    // stable: equal ratios keep sampling order
    kept.sort_by(|a, b| b.reduction_ratio.total_cmp(&a.reduction_ratio));
    kept.truncate(keep);
    Ok(kept)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrestageStats {
    pub items: usize,
    pub gold_sentences: usize,
    pub kept_pairs: usize,
    /// Gold sentences left without any negative.
    pub filtered_out: usize,
}

/// Where one emitted negative came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeProvenance {
    pub sentence_index: usize,
    pub sample_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrestageOutput {
    pub instances: Vec<ContrastiveInstance>,
    pub provenance: Vec<NegativeProvenance>,
    pub stats: PrestageStats,
}

/// Seed for one gold sentence of one item.
pub fn target_seed(seed: u64, item_id: &str, sentence_index: usize) -> u64 {
    derive_seed(seed_for_key(seed, item_id), &[sentence_index as u64])
}

pub fn build_prestage_dataset<B: LmBackend>(
    backend: &B,
    items: &[QaItem],
    vocab: &Vocab,
    cfg: &PrestageConfig,
    seed: u64,
) -> Result<PrestageOutput> {
    let mut out = PrestageOutput {
        instances: Vec::new(),
        provenance: Vec::new(),
        stats: PrestageStats::default(),
    };
    let mut order: Vec<&QaItem> = items.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    for item in order {
        let Some(gold) = item.gold_sentences(vocab, cfg.segmentation) else {
            log::warn!("item {} has no gold answer; skipped", item.id);
            continue;
        };
        out.stats.items += 1;
        let ictx = ItemContext::from_item(item, vocab);
        let before = out.instances.len();
        for (i, target) in gold.iter().enumerate() {
            out.stats.gold_sentences += 1;
            let prefix = &gold[..i];
            let tseed = target_seed(seed, &item.id, i);
            let sampled = sample_negatives_traced(
                backend,
                &ictx,
                prefix,
                target,
                cfg.negatives,
                &cfg.sampling,
                tseed,
            )?;
            let mut chosen: Vec<(Sentence, u64)> = if cfg.filter {
                let cands: Vec<Sentence> = sampled.iter().map(|(s, _)| s.clone()).collect();
                filter_candidates(backend, &ictx, prefix, target, &cands, cfg.keep)?
                    .into_iter()
                    .map(|k| {
                        let s = sampled
                            .iter()
                            .find(|(c, _)| *c == k.sentence)
                            .expect("candidate")
                            .1;
                        (k.sentence, s)
                    })
                    .collect()
            } else {
                let mut all = sampled;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tseed, &[u64::MAX]));
                all.shuffle(&mut rng);
                all.truncate(cfg.keep);
                all
            };
            if cfg.require_preference && !chosen.is_empty() {
                let ctx = ictx.context(true, prefix);
                let st = faithfulness_score(backend, &ctx, target.tokens())?;
                let mut keep = Vec::with_capacity(chosen.len());
                for (neg, s) in chosen {
                    if st.value > faithfulness_score(backend, &ctx, neg.tokens())?.value {
                        keep.push((neg, s));
                    }
                }
                chosen = keep;
            }
            if chosen.is_empty() {
                out.stats.filtered_out += 1;
            }
            for (negative, sample_seed) in chosen {
                out.instances.push(ContrastiveInstance {
                    item_id: item.id.clone(),
                    prefix: prefix.to_vec(),
                    target: target.clone(),
                    negative,
                    with_passages: true,
                });
                out.provenance.push(NegativeProvenance {
                    sentence_index: i,
                    sample_seed,
                });
            }
        }
        if out.instances.len() == before {
            log::warn!("item {} contributed no pre-stage pairs", item.id);
        }
    }
    out.stats.kept_pairs = out.instances.len();
    Ok(out)
}

pub fn save_stats(stats: &PrestageStats, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(stats)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
