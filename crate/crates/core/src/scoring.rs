//! Sentence faithfulness scores and length-normalized path scores.
//!
//! A sentence's score is the mean of its token log-probabilities under the
//! question, passages and answer prefix, i.e. the log of the geometric-mean
//! token probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LmBackend, LmContext};
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessScore {
    pub value: f64,
    pub token_count: usize,
}

impl FaithfulnessScore {
    /// The one place token log-probabilities become a sentence score. Both
    /// pair selection and the training objective go through here.
    pub fn from_token_logprobs(logprobs: &[f64]) -> Result<Self> {
        if logprobs.is_empty() {
            return Err(Error::Empty("sentence to score"));
        }
        let value = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
        Ok(FaithfulnessScore {
            value,
            token_count: logprobs.len(),
        })
    }
}

pub fn faithfulness_score<B: LmBackend>(
    backend: &B,
    ctx: &LmContext,
    sentence: &[TokenId],
) -> Result<FaithfulnessScore> {
    if !ctx.has_passages() {
        return Err(Error::MissingPassages);
    }
    if sentence.is_empty() {
        return Err(Error::Empty("sentence to score"));
    }
    FaithfulnessScore::from_token_logprobs(&backend.token_logprobs(ctx, sentence)?)
}

/// Running mean of sentence scores along a partial answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathScore {
    pub sentence_scores: Vec<FaithfulnessScore>,
    pub normalized: f64,
}

impl PathScore {
    pub fn extended(&self, next: FaithfulnessScore) -> PathScore {
        let mut scores = self.sentence_scores.clone();
        scores.push(next);
        path_score(&scores).expect("non-empty")
    }

    pub fn len(&self) -> usize {
        self.sentence_scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence_scores.is_empty()
    }
}

pub fn path_score(scores: &[FaithfulnessScore]) -> Result<PathScore> {
    if scores.is_empty() {
        return Err(Error::Empty("path"));
    }
    let normalized = scores.iter().map(|s| s.value).sum::<f64>() / scores.len() as f64;
    Ok(PathScore {
        sentence_scores: scores.to_vec(),
        normalized,
    })
}

/// Strict preference: ties are not preferred.
pub fn prefers(a: &FaithfulnessScore, b: &FaithfulnessScore) -> bool {
    a.value > b.value
}

pub fn score_prefers<B: LmBackend>(
    backend: &B,
    ctx: &LmContext,
    a: &[TokenId],
    a_prime: &[TokenId],
) -> Result<bool> {
    let sa = faithfulness_score(backend, ctx, a)?;
    let sb = faithfulness_score(backend, ctx, a_prime)?;
    Ok(prefers(&sa, &sb))
}
