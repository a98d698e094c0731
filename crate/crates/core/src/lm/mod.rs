//! Language-model contract shared by every stage: next-token distributions
//! under a question/passage/prefix context, sentence sampling, and the two
//! concrete backends (a lookup table for tests and a trainable toy model).

mod table;
mod toy;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{QaItem, Segmentation};
use crate::error::{Error, Result};
use crate::vocab::{Sentence, TokenId, Vocab, ANSWER, EOS, PASSAGE, QUESTION};

pub use table::{Dist, TableLm};
pub use toy::{AdamConfig, Checkpoint, Params, ToyConfig, ToyLm, ToyState};

/// Conditioning for one generation or scoring call.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LmContext {
    pub question: Vec<TokenId>,
    /// `None` is closed-book conditioning.
    pub passages: Option<Vec<Vec<TokenId>>>,
    pub prefix: Vec<Sentence>,
}

impl LmContext {
    pub fn has_passages(&self) -> bool {
        self.passages.is_some()
    }

    /// `<q> question (<p> passage)* <a> prefix...`
    pub fn layout(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(64);
        out.push(QUESTION);
        out.extend_from_slice(&self.question);
        if let Some(ps) = &self.passages {
            for p in ps {
                out.push(PASSAGE);
                out.extend_from_slice(p);
            }
        }
        out.push(ANSWER);
        for s in &self.prefix {
            out.extend_from_slice(s.tokens());
        }
        out
    }

    /// The answer-side tokens already fixed by the prefix.
    pub fn answer_history(&self) -> Vec<TokenId> {
        self.prefix
            .iter()
            .flat_map(|s| s.tokens().iter().copied())
            .collect()
    }

    pub fn closed_book(&self) -> LmContext {
        LmContext {
            passages: None,
            ..self.clone()
        }
    }

    pub fn with_prefix(&self, prefix: Vec<Sentence>) -> LmContext {
        LmContext {
            prefix,
            ..self.clone()
        }
    }

    pub fn with_empty_prefix(&self) -> LmContext {
        self.with_prefix(Vec::new())
    }
}

/// Tokenized question and passages of one item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemContext {
    pub question: Vec<TokenId>,
    pub passages: Vec<Vec<TokenId>>,
}

impl ItemContext {
    pub fn from_item(item: &QaItem, vocab: &Vocab) -> Self {
        ItemContext {
            question: vocab.tokenize(&item.question),
            passages: item.passages.iter().map(|p| vocab.tokenize(p)).collect(),
        }
    }

    pub fn context(&self, with_passages: bool, prefix: &[Sentence]) -> LmContext {
        LmContext {
            question: self.question.clone(),
            passages: with_passages.then(|| self.passages.clone()),
            prefix: prefix.to_vec(),
        }
    }
}

/// Tokenized contexts keyed by item id.
pub type ContextIndex = HashMap<String, ItemContext>;

pub fn context_index(items: &[QaItem], vocab: &Vocab) -> ContextIndex {
    items
        .iter()
        .map(|it| (it.id.clone(), ItemContext::from_item(it, vocab)))
        .collect()
}

/// Incremental decoding state positioned after some token sequence.
pub trait DecodeState: Clone {
    /// Log-probabilities of the next token over the full vocabulary.
    fn next_logprobs(&self) -> &[f64];
    fn push(&mut self, token: TokenId) -> Result<()>;
    /// Tokens consumed so far, context included.
    fn position(&self) -> usize;
}

pub trait LmBackend: Sync {
    type State<'a>: DecodeState + Send
    where
        Self: 'a;

    fn vocab(&self) -> &Vocab;

    /// Maximum number of tokens the backend can condition on.
    fn window(&self) -> usize {
        usize::MAX
    }

    fn start<'a>(&'a self, ctx: &LmContext) -> Result<Self::State<'a>>;

    fn vocab_size(&self) -> usize {
        self.vocab().len()
    }

    fn eos_id(&self) -> TokenId {
        EOS
    }

    fn is_sentence_end(&self, token: TokenId) -> bool {
        self.vocab().is_sentence_end(token)
    }

    /// Per-token log-probabilities of `seq` continuing `ctx`.
    fn token_logprobs(&self, ctx: &LmContext, seq: &[TokenId]) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(Error::Empty("scored sequence"));
        }
        self.vocab().check(seq)?;
        let mut state = self.start(ctx)?;
        let mut out = Vec::with_capacity(seq.len());
        for (i, &tok) in seq.iter().enumerate() {
            out.push(state.next_logprobs()[tok as usize]);
            if i + 1 < seq.len() {
                state.push(tok)?;
            }
        }
        Ok(out)
    }
}

pub fn token_logprobs<B: LmBackend>(
    backend: &B,
    ctx: &LmContext,
    seq: &[TokenId],
) -> Result<Vec<f64>> {
    backend.token_logprobs(ctx, seq)
}

/// Sentence sampling settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: usize,
    #[serde(default)]
    pub segmentation: Segmentation,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            top_p: 0.9,
            temperature: 1.0,
            max_tokens: 64,
            segmentation: Segmentation::Sentence,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} not in (0, 1]", self.top_p)));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// A generated sentence. `sentence` includes its stop token, so a terminal
/// result ends with the end-of-sequence id.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSentence {
    pub sentence: Sentence,
    pub terminal: bool,
    pub truncated: bool,
    /// Unmodified model log-probabilities of each emitted token.
    pub logprobs: Vec<f64>,
}

impl SampledSentence {
    pub fn body(&self) -> &[TokenId] {
        self.sentence.body()
    }
}

/// Outcome of appending one token to a sentence under construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Continue,
    SentenceEnd,
    Eos,
}

pub fn boundary<B: LmBackend>(backend: &B, seg: Segmentation, token: TokenId) -> Boundary {
    if token == backend.eos_id() {
        Boundary::Eos
    } else if seg == Segmentation::Sentence && backend.is_sentence_end(token) {
        Boundary::SentenceEnd
    } else {
        Boundary::Continue
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws one token from temperature-scaled, nucleus-truncated log-probabilities.
pub fn sample_token<R: Rng>(
    logprobs: &[f64],
    top_p: f64,
    temperature: f64,
    rng: &mut R,
) -> TokenId {
    let max = logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logprobs
        .iter()
        .map(|&lp| ((lp - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += weights[i] / total;
        if mass >= top_p {
            break;
        }
    }
    let kept_total: f64 = kept.iter().map(|&i| weights[i]).sum();
    let mut u = rng.gen::<f64>() * kept_total;
    for &i in &kept {
        u -= weights[i];
        if u < 0.0 {
            return i as TokenId;
        }
    }
    *kept.last().expect("at least one token has positive weight") as TokenId
}

/// Continues from `state` until a sentence boundary, end of sequence, or the
/// token limit. `pick` chooses each token from the next-token distribution.
pub fn decode_sentence<B, F>(
    backend: &B,
    state: &mut B::State<'_>,
    max_tokens: usize,
    seg: Segmentation,
    mut pick: F,
) -> Result<SampledSentence>
where
    B: LmBackend,
    F: FnMut(&[f64]) -> TokenId,
{
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    loop {
        let lps = state.next_logprobs();
        let tok = pick(lps);
        tokens.push(tok);
        logprobs.push(lps[tok as usize]);
        match boundary(backend, seg, tok) {
            Boundary::Eos => {
                return Ok(SampledSentence {
                    sentence: Sentence(tokens),
                    terminal: true,
                    truncated: false,
                    logprobs,
                })
            }
            Boundary::SentenceEnd => {
                if state.position() < backend.window() {
                    state.push(tok)?;
                }
                return Ok(SampledSentence {
                    sentence: Sentence(tokens),
                    terminal: false,
                    truncated: false,
                    logprobs,
                });
            }
            Boundary::Continue => {}
        }
        if state.position() >= backend.window() {
            log::debug!("context window exhausted mid-sentence");
            return Ok(SampledSentence {
                sentence: Sentence(tokens),
                terminal: false,
                truncated: true,
                logprobs,
            });
        }
        if tokens.len() >= max_tokens {
            log::debug!("sentence truncated after {} tokens", tokens.len());
            state.push(tok)?;
            return Ok(SampledSentence {
                sentence: Sentence(tokens),
                terminal: false,
                truncated: true,
                logprobs,
            });
        }
        state.push(tok)?;
    }
}

/// Samples one sentence; identical seed and inputs give identical output.
pub fn sample_sentence<B: LmBackend>(
    backend: &B,
    ctx: &LmContext,
    cfg: &SamplingConfig,
    rng_seed: u64,
) -> Result<SampledSentence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut state = backend.start(ctx)?;
    decode_sentence(
        backend,
        &mut state,
        cfg.max_tokens,
        cfg.segmentation,
        |lps| sample_token(lps, cfg.top_p, cfg.temperature, &mut rng),
    )
}

/// Greedy sentence continuation from a context.
pub fn greedy_sentence<B: LmBackend>(
    backend: &B,
    ctx: &LmContext,
    max_tokens: usize,
    seg: Segmentation,
) -> Result<SampledSentence> {
    let mut state = backend.start(ctx)?;
    decode_sentence(backend, &mut state, max_tokens, seg, |lps| {
        argmax(lps) as TokenId
    })
}

/// Deterministic seed derivation: mixes a parent seed with a path of indices.
pub fn derive_seed(parent: u64, parts: &[u64]) -> u64 {
    let mut z = parent;
    for &p in parts {
        z = splitmix(z ^ splitmix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a string key such as an item id.
pub fn seed_for_key(parent: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    derive_seed(parent, &[h])
}

/// One optimizer step on the batch-mean loss. Returns the loss measured
/// before the update.
pub fn train_step<O: crate::objective::PairObjective>(
    model: &mut ToyLm,
    batch: &[crate::corpus::ContrastiveInstance],
    contexts: &ContextIndex,
    objective: &O,
    learning_rate: f64,
) -> Result<crate::objective::LossBreakdown> {
    let (loss, grads) = model.batch_gradient(batch, contexts, objective)?;
    model.apply_gradient(&grads, learning_rate)?;
    Ok(loss)
}

#[cfg(test)]
mod tests;
