//! Answer generation: greedy decoding and the two-level search that keeps the
//! N sentence prefixes with the best mean faithfulness score, extending each
//! with M candidate sentences per step.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Segmentation, SentenceSequence};
use crate::error::{Error, Result};
use crate::lm::{
    argmax, boundary, decode_sentence, derive_seed, sample_sentence, Boundary, DecodeState,
    ItemContext, LmBackend, SampledSentence, SamplingConfig,
};
use crate::scoring::{path_score, FaithfulnessScore, PathScore};
use crate::vocab::{Sentence, TokenId};

/// How candidate sentences are produced inside one beam expansion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TokenDecode {
    Greedy,
    /// The `width` most probable complete sentences.
    Beam {
        width: usize,
    },
    Sample {
        top_p: f64,
        temperature: f64,
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub num_beams: usize,
    pub beam_width: usize,
    pub max_steps: usize,
    /// Token cap for one sentence.
    pub max_tokens: usize,
    pub token_decode: TokenDecode,
    #[serde(default)]
    pub segmentation: Segmentation,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig::new(3, 3)
    }
}

impl InferenceConfig {
    /// `n` beams of width `m`, token-level beam search of width `m`.
    pub fn new(n: usize, m: usize) -> Self {
        InferenceConfig {
            num_beams: n,
            beam_width: m,
            max_steps: 6,
            max_tokens: 64,
            token_decode: TokenDecode::Beam { width: m },
            segmentation: Segmentation::Sentence,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_beams == 0
            || self.beam_width == 0
            || self.max_steps == 0
            || self.max_tokens == 0
        {
            return Err(Error::Config(
                "beam counts, steps and token cap must be positive".into(),
            ));
        }
        match self.token_decode {
            TokenDecode::Beam { width: 0 } => {
                Err(Error::Config("token beam width must be positive".into()))
            }
            TokenDecode::Sample {
                top_p, temperature, ..
            } => SamplingConfig {
                top_p,
                temperature,
                max_tokens: self.max_tokens,
                segmentation: self.segmentation,
            }
            .validate(),
            _ => Ok(()),
        }
    }

    pub fn token_cap(&self) -> usize {
        self.max_steps * self.max_tokens
    }
}

/// A partial answer in the sentence-level search.
#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    pub sentences: SentenceSequence,
    pub scores: Option<PathScore>,
    pub finished: bool,
    pub truncated: bool,
    pub tokens_used: usize,
}

impl Beam {
    pub fn empty() -> Self {
        Beam {
            sentences: SentenceSequence::default(),
            scores: None,
            finished: false,
            truncated: false,
            tokens_used: 0,
        }
    }

    pub fn normalized(&self) -> f64 {
        self.scores
            .as_ref()
            .map_or(f64::NEG_INFINITY, |s| s.normalized)
    }
}

/// Finished output of any decoding mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub sentences: Vec<Sentence>,
    pub text: String,
    pub path_score: f64,
    pub finished: bool,
    pub truncated: bool,
}

impl Generation {
    fn from_beam<B: LmBackend>(backend: &B, beam: &Beam) -> Self {
        Generation {
            sentences: beam.sentences.sentences().to_vec(),
            text: backend.vocab().render_answer(beam.sentences.sentences()),
            path_score: beam.normalized(),
            finished: beam.finished,
            truncated: beam.truncated,
        }
    }
}

/// Token-by-token argmax with passages, stopping at end-of-sequence, a
/// truncated sentence, or `max_steps` sentences.
pub fn generate_greedy<B: LmBackend>(
    backend: &B,
    item: &ItemContext,
    max_steps: usize,
    max_tokens: usize,
    seg: Segmentation,
) -> Result<Generation> {
    let mut state = backend.start(&item.context(true, &[]))?;
    let mut beam = Beam::empty();
    let mut scores = Vec::new();
    while beam.sentences.len() < max_steps {
        let s = decode_sentence(backend, &mut state, max_tokens, seg, |lps| {
            argmax(lps) as TokenId
        })?;
        scores.push(FaithfulnessScore::from_token_logprobs(&s.logprobs)?);
        beam.tokens_used += s.sentence.len();
        beam.sentences.push(s.sentence)?;
        beam.finished = s.terminal;
        beam.truncated = s.truncated;
        if s.terminal || s.truncated {
            break;
        }
    }
    beam.scores = Some(path_score(&scores)?);
    Ok(Generation::from_beam(backend, &beam))
}

/// Upper bound on partial sentences popped by the token-level search before
/// the remaining candidates are completed greedily.
const TOKEN_SEARCH_BUDGET: usize = 256;

struct Frontier {
    score: f64,
    seq: u64,
    parent: usize,
    token: TokenId,
    logprob: f64,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    // max-heap: higher score first, then earlier insertion
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.seq.cmp(&self.seq))
    }
}

struct Partial<S> {
    tokens: Vec<TokenId>,
    logprobs: Vec<f64>,
    state: S,
}

/// The `k` highest-probability complete sentences, best first. Best-first
/// search over prefixes: since log-probabilities are never positive, the
/// first `k` completions popped are the exact top `k`.
pub fn top_sentences<B: LmBackend>(
    backend: &B,
    item: &ItemContext,
    prefix: &[Sentence],
    k: usize,
    max_tokens: usize,
    seg: Segmentation,
) -> Result<Vec<SampledSentence>> {
    let root = backend.start(&item.context(true, prefix))?;
    let mut arena: Vec<Partial<B::State<'_>>> = Vec::new();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push_children =
        |heap: &mut BinaryHeap<Frontier>, parent: usize, base: f64, state: &B::State<'_>| {
            for (tok, &lp) in state.next_logprobs().iter().enumerate() {
                if lp.is_finite() {
                    heap.push(Frontier {
                        score: base + lp,
                        seq,
                        parent,
                        token: tok as TokenId,
                        logprob: lp,
                    });
                    seq += 1;
                }
            }
        };
    push_children(&mut heap, 0, 0.0, &root);
    arena.push(Partial {
        tokens: Vec::new(),
        logprobs: Vec::new(),
        state: root,
    });
    let mut done = Vec::new();
    let mut pops = 0usize;
    while done.len() < k {
        let Some(f) = heap.pop() else { break };
        pops += 1;
        let parent = &arena[f.parent];
        let mut tokens = parent.tokens.clone();
        tokens.push(f.token);
        let mut logprobs = parent.logprobs.clone();
        logprobs.push(f.logprob);
        let finish = |terminal, truncated, tokens, logprobs| SampledSentence {
            sentence: Sentence(tokens),
            terminal,
            truncated,
            logprobs,
        };
        match boundary(backend, seg, f.token) {
            Boundary::Eos => {
                done.push(finish(true, false, tokens, logprobs));
                continue;
            }
            Boundary::SentenceEnd => {
                done.push(finish(false, false, tokens, logprobs));
                continue;
            }
            Boundary::Continue => {}
        }
        if parent.state.position() >= backend.window() || tokens.len() >= max_tokens {
            done.push(finish(false, true, tokens, logprobs));
            continue;
        }
        let mut state = parent.state.clone();
        state.push(f.token)?;
        if pops >= TOKEN_SEARCH_BUDGET {
            let rest =
                decode_sentence(backend, &mut state, max_tokens - tokens.len(), seg, |lps| {
                    argmax(lps) as TokenId
                })?;
            tokens.extend_from_slice(rest.sentence.tokens());
            logprobs.extend_from_slice(&rest.logprobs);
            // a sentence cut by the remaining allowance is truncated overall
            let truncated = rest.truncated;
            done.push(finish(rest.terminal, truncated, tokens, logprobs));
            continue;
        }
        push_children(&mut heap, arena.len(), f.score, &state);
        arena.push(Partial {
            tokens,
            logprobs,
            state,
        });
    }
    if pops >= TOKEN_SEARCH_BUDGET {
        log::debug!("token-level search budget exhausted; completed greedily");
        let total = |s: &SampledSentence| s.logprobs.iter().sum::<f64>();
        done.sort_by(|a, b| total(b).total_cmp(&total(a)));
        done.dedup_by(|a, b| a.sentence == b.sentence);
    }
    Ok(done)
}

/// Up to `m` candidate next sentences for an unfinished beam.
pub fn expand_beam<B: LmBackend>(
    backend: &B,
    item: &ItemContext,
    beam: &Beam,
    m: usize,
    cfg: &InferenceConfig,
    call_seed: u64,
) -> Result<Vec<SampledSentence>> {
    if beam.finished {
        return Err(Error::FinishedBeam);
    }
    let prefix = beam.sentences.sentences();
    let remaining = cfg
        .token_cap()
        .saturating_sub(beam.tokens_used)
        .min(cfg.max_tokens);
    if remaining == 0 {
        return Ok(Vec::new());
    }
    match cfg.token_decode {
        TokenDecode::Greedy => {
            let mut state = backend.start(&item.context(true, prefix))?;
            let s = decode_sentence(backend, &mut state, remaining, cfg.segmentation, |lps| {
                argmax(lps) as TokenId
            })?;
            Ok(vec![s])
        }
        TokenDecode::Beam { width } => {
            let mut v = top_sentences(
                backend,
                item,
                prefix,
                width.max(m),
                remaining,
                cfg.segmentation,
            )?;
            v.truncate(m);
            Ok(v)
        }
        TokenDecode::Sample {
            top_p,
            temperature,
            seed,
        } => {
            let sc = SamplingConfig {
                top_p,
                temperature,
                max_tokens: remaining,
                segmentation: cfg.segmentation,
            };
            let ctx = item.context(true, prefix);
            let mut out: Vec<SampledSentence> = Vec::with_capacity(m);
            for j in 0..m {
                let s = sample_sentence(
                    backend,
                    &ctx,
                    &sc,
                    derive_seed(seed, &[call_seed, j as u64]),
                )?;
                if !out.iter().any(|o| o.sentence == s.sentence) {
                    out.push(s);
                }
            }
            Ok(out)
        }
    }
}

/// One step of the sentence-level search: every unfinished beam proposes
/// candidates; candidates and finished beams compete for `num_beams` slots.
pub fn hierarchical_step<B: LmBackend>(
    backend: &B,
    item: &ItemContext,
    beams: &[Beam],
    cfg: &InferenceConfig,
    step: usize,
) -> Result<Vec<Beam>> {
    let mut pool: Vec<Beam> = Vec::new();
    for (bi, beam) in beams.iter().enumerate() {
        if beam.finished {
            pool.push(beam.clone());
            continue;
        }
        let call_seed = derive_seed(step as u64, &[bi as u64]);
        for cand in expand_beam(backend, item, beam, cfg.beam_width, cfg, call_seed)? {
            let score = FaithfulnessScore::from_token_logprobs(&cand.logprobs)?;
            let mut next = beam.clone();
            next.scores = Some(match &beam.scores {
                Some(p) => p.extended(score),
                None => path_score(&[score])?,
            });
            next.tokens_used += cand.sentence.len();
            next.finished = cand.terminal || cand.truncated || next.tokens_used >= cfg.token_cap();
            next.truncated =
                cand.truncated || (!cand.terminal && next.tokens_used >= cfg.token_cap());
            next.sentences.push(cand.sentence)?;
            pool.push(next);
        }
    }
    // stable: ties keep generation order
    pool.sort_by(|a, b| b.normalized().total_cmp(&a.normalized()));
    pool.truncate(cfg.num_beams);
    Ok(pool)
}

pub fn hierarchical_generate<B: LmBackend>(
    backend: &B,
    item: &ItemContext,
    cfg: &InferenceConfig,
) -> Result<Generation> {
    cfg.validate()?;
    let mut beams = vec![Beam::empty()];
    for step in 0..cfg.max_steps {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let next = hierarchical_step(backend, item, &beams, cfg, step)?;
        if next.is_empty() {
            if step == 0 {
                return Err(Error::NoViableContinuation);
            }
            break;
        }
        beams = next;
    }
    let best = beams
        .iter()
        .filter(|b| b.scores.is_some())
        .fold(None::<&Beam>, |acc, b| match acc {
            Some(a) if a.normalized() >= b.normalized() => Some(a),
            _ => Some(b),
        })
        .ok_or(Error::NoViableContinuation)?;
    Ok(Generation::from_beam(backend, best))
}

/// Answer-level decoding strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    /// Token-level beam search over the whole answer, `num_beams` wide.
    Beam,
    Hierarchical,
}

impl DecodeMode {
    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Beam => "beam",
            DecodeMode::Hierarchical => "hierarchical",
        }
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "beam" => Ok(DecodeMode::Beam),
            "hierarchical" => Ok(DecodeMode::Hierarchical),
            other => Err(Error::Config(format!("unknown decode mode {other:?}"))),
        }
    }
}

pub fn generate_answer<B: LmBackend>(
    backend: &B,
    item: &ItemContext,
    mode: DecodeMode,
    cfg: &InferenceConfig,
) -> Result<Generation> {
    match mode {
        DecodeMode::Greedy => generate_greedy(
            backend,
            item,
            cfg.max_steps,
            cfg.max_tokens,
            cfg.segmentation,
        ),
        DecodeMode::Hierarchical => hierarchical_generate(backend, item, cfg),
        DecodeMode::Beam => {
            cfg.validate()?;
            let best = top_sentences(
                backend,
                item,
                &[],
                cfg.num_beams,
                cfg.token_cap(),
                Segmentation::Answer,
            )?
            .into_iter()
            .next()
            .ok_or(Error::NoViableContinuation)?;
            let mut beam = Beam::empty();
            beam.scores = Some(path_score(&[FaithfulnessScore::from_token_logprobs(
                &best.logprobs,
            )?])?);
            beam.finished = best.terminal;
            beam.truncated = best.truncated;
            beam.tokens_used = best.sentence.len();
            beam.sentences.push(best.sentence)?;
            Ok(Generation::from_beam(backend, &beam))
        }
    }
}
