//! Combined training objective: a language-modeling term on the target
//! sentence plus a λ-weighted odds-ratio discrimination term between target
//! and negative. Both terms use the length-normalized sentence log-probability
//! from [`FaithfulnessScore`].

use serde::{Deserialize, Serialize};

use crate::corpus::ContrastiveInstance;
use crate::error::{Error, Result};
use crate::lm::{ContextIndex, LmBackend};
use crate::scoring::FaithfulnessScore;

pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Probabilities entering the odds ratio are clamped to `[CLAMP, 1 - CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm_term: f64,
    pub disc_term: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn zero(lambda: f64) -> Self {
        LossBreakdown {
            lm_term: 0.0,
            disc_term: 0.0,
            total: 0.0,
            lambda,
        }
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.lm_term += weight * other.lm_term;
        self.disc_term += weight * other.disc_term;
        self.total += weight * other.total;
    }
}

/// Log odds ratio `log[p_a (1 - p_b)] - log[p_b (1 - p_a)]` from log-probabilities.
pub fn odds_ratio_logit(logp_a: f64, logp_aprime: f64) -> Result<f64> {
    for v in [logp_a, logp_aprime] {
        if v.is_nan() || v >= 0.0 {
            return Err(Error::InvalidLogProb {
                value: v,
                reason: "log-probability must be negative",
            });
        }
    }
    Ok(log_odds(logp_a) - log_odds(logp_aprime))
}

/// `log p - log(1 - p)` for `p = exp(x)`, `x < 0`.
fn log_odds(x: f64) -> f64 {
    x - (-x.exp_m1()).ln()
}

/// `log sigmoid(z)` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

fn sigmoid(z: f64) -> f64 {
    log_sigmoid(z).exp()
}

/// Clamps a length-normalized log-probability into the open unit interval.
/// Returns the clamped value and whether clamping happened.
pub fn clamp_logprob(x: f64) -> (f64, bool) {
    let lo = PROB_CLAMP.ln();
    let hi = (-PROB_CLAMP).ln_1p();
    if x > hi {
        (hi, true)
    } else if x < lo {
        (lo, true)
    } else {
        (x, false)
    }
}

/// Loss of one pair plus its derivative with respect to every token
/// log-probability of target and negative.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGradient {
    pub breakdown: LossBreakdown,
    pub d_target: Vec<f64>,
    pub d_negative: Vec<f64>,
}

/// A per-pair training loss over token log-probabilities.
pub trait PairObjective {
    fn lambda(&self) -> f64;
    fn pair_loss(&self, target_logprobs: &[f64], negative_logprobs: &[f64])
        -> Result<PairGradient>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedObjective {
    pub lambda: f64,
    /// Weight of the language-modeling term; 1 in normal training.
    #[serde(default = "one")]
    pub lm_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for CombinedObjective {
    fn default() -> Self {
        CombinedObjective::new(DEFAULT_LAMBDA)
    }
}

impl CombinedObjective {
    pub fn new(lambda: f64) -> Self {
        CombinedObjective {
            lambda,
            lm_weight: 1.0,
        }
    }

    /// Loss from the two length-normalized log-probabilities, with partial
    /// derivatives with respect to each.
    pub fn from_scores(&self, s_target: f64, s_negative: f64) -> Result<(LossBreakdown, f64, f64)> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda {} must be non-negative",
                self.lambda
            )));
        }
        if !s_target.is_finite() || !s_negative.is_finite() {
            return Err(Error::InvalidLogProb {
                value: if s_target.is_finite() {
                    s_negative
                } else {
                    s_target
                },
                reason: "non-finite sentence log-probability",
            });
        }
        let (xa, ca) = clamp_logprob(s_target);
        let (xn, cn) = clamp_logprob(s_negative);
        if ca || cn {
            log::warn!(
                "clamped degenerate sentence probability (target {s_target}, negative {s_negative})"
            );
        }
        let z = odds_ratio_logit(xa, xn)?;
        let disc = -log_sigmoid(z);
        let lm = -s_target;
        let total = self.lm_weight * lm + self.lambda * disc;
        // d(-log sigmoid z)/dz = -sigmoid(-z); dz/dxa = 1/(1-p_a); dz/dxn = -1/(1-p_n)
        let ddisc_dz = -sigmoid(-z);
        let dz_da = if ca { 0.0 } else { -1.0 / xa.exp_m1() };
        let dz_dn = if cn { 0.0 } else { 1.0 / xn.exp_m1() };
        let d_a = -self.lm_weight + self.lambda * ddisc_dz * dz_da;
        let d_n = self.lambda * ddisc_dz * dz_dn;
        Ok((
            LossBreakdown {
                lm_term: lm,
                disc_term: disc,
                total,
                lambda: self.lambda,
            },
            d_a,
            d_n,
        ))
    }
}

impl PairObjective for CombinedObjective {
    fn lambda(&self) -> f64 {
        self.lambda
    }

    fn pair_loss(
        &self,
        target_logprobs: &[f64],
        negative_logprobs: &[f64],
    ) -> Result<PairGradient> {
        let sa = FaithfulnessScore::from_token_logprobs(target_logprobs)?;
        let sn = FaithfulnessScore::from_token_logprobs(negative_logprobs)?;
        let (breakdown, d_a, d_n) = self.from_scores(sa.value, sn.value)?;
        Ok(PairGradient {
            breakdown,
            d_target: vec![d_a / sa.token_count as f64; sa.token_count],
            d_negative: vec![d_n / sn.token_count as f64; sn.token_count],
        })
    }
}

/// Loss of one instance under any backend, conditioned on the instance's
/// question, optional passages and prefix.
pub fn instance_loss<B: LmBackend>(
    backend: &B,
    contexts: &ContextIndex,
    instance: &ContrastiveInstance,
    lambda: f64,
) -> Result<LossBreakdown> {
    instance.validate()?;
    let item = contexts
        .get(&instance.item_id)
        .ok_or_else(|| Error::UnknownItem(instance.item_id.clone()))?;
    let ctx = item.context(instance.with_passages, &instance.prefix);
    let lt = backend.token_logprobs(&ctx, instance.target.tokens())?;
    let ln = backend.token_logprobs(&ctx, instance.negative.tokens())?;
    Ok(CombinedObjective::new(lambda)
        .pair_loss(&lt, &ln)?
        .breakdown)
}

/// Mean of instance totals.
pub fn batch_loss<B: LmBackend>(
    backend: &B,
    contexts: &ContextIndex,
    batch: &[ContrastiveInstance],
    lambda: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut sum = 0.0;
    for (index, inst) in batch.iter().enumerate() {
        let loss =
            instance_loss(backend, contexts, inst, lambda).map_err(|e| Error::NonFiniteLoss {
                index,
                item_id: inst.item_id.clone(),
                detail: e.to_string(),
            })?;
        sum += loss.total;
    }
    Ok(sum / batch.len() as f64)
}
