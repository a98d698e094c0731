//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use faithgen_core::inference::{expand_beam, Beam, InferenceConfig};
use faithgen_core::lm::{Dist, ItemContext, LmBackend, TableLm};
use faithgen_core::scoring::{path_score, FaithfulnessScore};
use faithgen_core::vocab::{Sentence, TokenId, Vocab, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn open_item() -> ItemContext {
    ItemContext {
        question: vec![],
        passages: vec![vec![]],
    }
}

/// Random table over five words plus "." "!" and end-of-sequence (eight
/// emittable tokens). Every reachable history has a listed distribution with
/// `support` tokens; sentences end by their fourth token and answers by their
/// third sentence.
pub fn random_table(seed: u64, support: usize) -> TableLm {
    let vocab = Vocab::build(["a b c d e . !"]);
    let words: Vec<TokenId> = ["a", "b", "c", "d", "e"]
        .iter()
        .map(|w| vocab.id(w).unwrap())
        .collect();
    let ends: Vec<TokenId> = [".", "!"].iter().map(|w| vocab.id(w).unwrap()).collect();
    let n = vocab.len();
    let mut lm = TableLm::new(vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stack: Vec<(Vec<TokenId>, usize, usize)> = vec![(vec![], 0, 0)];
    while let Some((hist, sent, pos)) = stack.pop() {
        let last_sentence = sent == 2;
        let mut allowed: Vec<TokenId> = if last_sentence {
            vec![EOS]
        } else {
            ends.iter().copied().chain([EOS]).collect()
        };
        let enders = allowed.clone();
        if pos < 3 {
            allowed.extend(&words);
        }
        let mut chosen = Vec::new();
        while chosen.len() < support.min(allowed.len()) {
            let t = allowed[rng.gen_range(0..allowed.len())];
            if !chosen.contains(&t) {
                chosen.push(t);
            }
        }
        let raw: Vec<f64> = chosen.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut probs = vec![0.0; n];
        for (t, r) in chosen.iter().zip(&raw) {
            probs[*t as usize] = r / total;
        }
        let listed: Vec<(TokenId, f64)> = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (i as TokenId, p))
            .collect();
        lm.set(&hist, Dist::sparse(n, &listed).unwrap());
        for &t in &chosen {
            if t == EOS {
                continue;
            }
            let mut h = hist.clone();
            h.push(t);
            if enders.contains(&t) {
                stack.push((h, sent + 1, 0));
            } else {
                stack.push((h, sent, pos + 1));
            }
        }
    }
    lm
}

/// Best normalized path score over every chain reachable by repeatedly
/// expanding with the decoder's own candidate generator, plus one chain
/// attaining it (first in expansion order).
pub fn exhaustive_best<B: LmBackend>(
    lm: &B,
    item: &ItemContext,
    cfg: &InferenceConfig,
) -> (Vec<Sentence>, f64) {
    fn walk<B: LmBackend>(
        lm: &B,
        item: &ItemContext,
        cfg: &InferenceConfig,
        beam: &Beam,
        scores: &[FaithfulnessScore],
        depth: usize,
        best: &mut Option<(Vec<Sentence>, f64)>,
    ) {
        if !scores.is_empty() && (beam.finished || depth == cfg.max_steps) {
            let v = path_score(scores).unwrap().normalized;
            if best.as_ref().is_none_or(|(_, b)| v > *b) {
                *best = Some((beam.sentences.sentences().to_vec(), v));
            }
            return;
        }
        for cand in expand_beam(lm, item, beam, cfg.beam_width, cfg, 0).unwrap() {
            let mut next = beam.clone();
            next.finished = cand.terminal || cand.truncated;
            next.tokens_used += cand.sentence.len();
            next.sentences.push(cand.sentence.clone()).unwrap();
            let mut s = scores.to_vec();
            s.push(FaithfulnessScore::from_token_logprobs(&cand.logprobs).unwrap());
            walk(lm, item, cfg, &next, &s, depth + 1, best);
        }
    }
    let mut best = None;
    walk(lm, item, cfg, &Beam::empty(), &[], 0, &mut best);
    best.expect("at least one chain")
}

/// Straightforward re-implementation of the sentence-level beam search:
/// every unfinished beam proposes its candidates, finished beams carry over,
/// the pool is stably sorted by normalized path score and cut to `num_beams`.
pub fn reference_beam_search<B: LmBackend>(
    lm: &B,
    item: &ItemContext,
    cfg: &InferenceConfig,
) -> (Vec<Sentence>, f64) {
    struct Hyp {
        beam: Beam,
        scores: Vec<FaithfulnessScore>,
    }
    let mean = |s: &[FaithfulnessScore]| s.iter().map(|x| x.value).sum::<f64>() / s.len() as f64;
    let mut hyps = vec![Hyp {
        beam: Beam::empty(),
        scores: vec![],
    }];
    for _ in 0..cfg.max_steps {
        if hyps.iter().all(|h| h.beam.finished) {
            break;
        }
        let mut pool = Vec::new();
        for h in hyps {
            if h.beam.finished {
                pool.push(h);
                continue;
            }
            for cand in expand_beam(lm, item, &h.beam, cfg.beam_width, cfg, 0).unwrap() {
                let mut beam = h.beam.clone();
                beam.finished = cand.terminal || cand.truncated;
                beam.tokens_used += cand.sentence.len();
                beam.sentences.push(cand.sentence.clone()).unwrap();
                let mut scores = h.scores.clone();
                scores.push(FaithfulnessScore::from_token_logprobs(&cand.logprobs).unwrap());
                pool.push(Hyp { beam, scores });
            }
        }
        pool.sort_by(|a, b| mean(&b.scores).total_cmp(&mean(&a.scores)));
        pool.truncate(cfg.num_beams);
        hyps = pool;
    }
    let mut best: Option<&Hyp> = None;
    for h in &hyps {
        if best.is_none_or(|b| mean(&h.scores) > mean(&b.scores)) {
            best = Some(h);
        }
    }
    let b = best.expect("non-empty beam set");
    (b.beam.sentences.sentences().to_vec(), mean(&b.scores))
}
