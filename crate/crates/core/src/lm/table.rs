//! Lookup-table backend. Distributions are keyed by the answer-side token
//! history and, optionally, by whether passages are present; question tokens
//! are ignored. Contexts without an entry fall back to a default distribution.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

use super::{DecodeState, LmBackend, LmContext};

const NORM_TOL: f64 = 1e-9;

/// A normalized next-token distribution, stored as dense log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Dist {
    logprobs: Vec<f64>,
}

impl Dist {
    pub fn uniform(vocab_size: usize) -> Self {
        Dist {
            logprobs: vec![-(vocab_size as f64).ln(); vocab_size],
        }
    }

    /// Explicit probabilities for some tokens; whatever mass remains is spread
    /// evenly over the unlisted tokens.
    pub fn sparse(vocab_size: usize, probs: &[(TokenId, f64)]) -> Result<Self> {
        let mut p = vec![f64::NAN; vocab_size];
        let mut listed = 0.0;
        for &(tok, pr) in probs {
            let slot = p.get_mut(tok as usize).ok_or(Error::OutOfVocab {
                id: tok,
                vocab_size,
            })?;
            if !(0.0..=1.0).contains(&pr) || !slot.is_nan() {
                return Err(Error::Table(format!(
                    "bad or repeated probability for token {tok}"
                )));
            }
            *slot = pr;
            listed += pr;
        }
        let unlisted = p.iter().filter(|x| x.is_nan()).count();
        let rest = 1.0 - listed;
        if rest < -NORM_TOL || (unlisted == 0 && rest.abs() > NORM_TOL) {
            return Err(Error::Table(format!("probabilities sum to {listed}")));
        }
        let fill = if unlisted > 0 {
            rest.max(0.0) / unlisted as f64
        } else {
            0.0
        };
        Ok(Dist {
            logprobs: p
                .into_iter()
                .map(|x| if x.is_nan() { fill } else { x })
                .map(f64::ln)
                .collect(),
        })
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn total_mass(&self) -> f64 {
        self.logprobs.iter().map(|lp| lp.exp()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Key {
    passages: Option<bool>,
    history: Vec<TokenId>,
}

#[derive(Clone, Debug)]
pub struct TableLm {
    vocab: Vocab,
    entries: HashMap<Key, Dist>,
    default: Dist,
}

impl TableLm {
    pub fn new(vocab: Vocab) -> Self {
        let default = Dist::uniform(vocab.len());
        TableLm {
            vocab,
            entries: HashMap::new(),
            default,
        }
    }

    pub fn with_default(mut self, dist: Dist) -> Self {
        self.default = dist;
        self
    }

    /// Sets the distribution after `history` for any passage conditioning.
    pub fn set(&mut self, history: &[TokenId], dist: Dist) {
        self.insert(None, history, dist);
    }

    /// Sets the distribution after `history` for one passage conditioning;
    /// this takes precedence over an entry set with [`TableLm::set`].
    pub fn set_conditioned(&mut self, with_passages: bool, history: &[TokenId], dist: Dist) {
        self.insert(Some(with_passages), history, dist);
    }

    fn insert(&mut self, passages: Option<bool>, history: &[TokenId], dist: Dist) {
        assert_eq!(dist.logprobs.len(), self.vocab.len(), "distribution size");
        self.entries.insert(
            Key {
                passages,
                history: history.to_vec(),
            },
            dist,
        );
    }

    pub fn lookup(&self, with_passages: bool, history: &[TokenId]) -> &Dist {
        let mut key = Key {
            passages: Some(with_passages),
            history: history.to_vec(),
        };
        if let Some(d) = self.entries.get(&key) {
            return d;
        }
        key.passages = None;
        self.entries.get(&key).unwrap_or(&self.default)
    }

    pub fn from_spec(spec: &TableSpec) -> Result<Self> {
        let vocab = Vocab::from_tokens(spec.tokens.iter().cloned());
        let to_ids = |surfaces: &[String]| -> Result<Vec<TokenId>> {
            surfaces
                .iter()
                .map(|s| {
                    vocab
                        .id(s)
                        .ok_or_else(|| Error::Table(format!("unknown token {s:?}")))
                })
                .collect()
        };
        let to_dist = |probs: &BTreeMap<String, f64>| -> Result<Dist> {
            let pairs = probs
                .iter()
                .map(|(k, &p)| {
                    vocab
                        .id(k)
                        .map(|id| (id, p))
                        .ok_or_else(|| Error::Table(format!("unknown token {k:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Dist::sparse(vocab.len(), &pairs)
        };
        let mut lm = TableLm::new(vocab.clone());
        if let Some(d) = &spec.default {
            lm.default = to_dist(d)?;
        }
        for e in &spec.entries {
            let history = to_ids(&e.history)?;
            let dist = to_dist(&e.probs)?;
            lm.insert(e.passages, &history, dist);
        }
        Ok(lm)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: TableSpec = serde_json::from_str(&text)?;
        Self::from_spec(&spec)
    }
}

/// JSON form of a table backend.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableSpec {
    /// Non-special vocabulary entries; the special tokens are implicit.
    pub tokens: Vec<String>,
    #[serde(default)]
    pub default: Option<BTreeMap<String, f64>>,
    pub entries: Vec<TableEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableEntry {
    pub history: Vec<String>,
    #[serde(default)]
    pub passages: Option<bool>,
    pub probs: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct TableState<'a> {
    lm: &'a TableLm,
    with_passages: bool,
    history: Vec<TokenId>,
    position: usize,
    current: &'a [f64],
}

impl DecodeState for TableState<'_> {
    fn next_logprobs(&self) -> &[f64] {
        self.current
    }

    fn push(&mut self, token: TokenId) -> Result<()> {
        self.lm.vocab.check(&[token])?;
        self.history.push(token);
        self.position += 1;
        self.current = self.lm.lookup(self.with_passages, &self.history).logprobs();
        Ok(())
    }

    fn position(&self) -> usize {
        self.position
    }
}

impl LmBackend for TableLm {
    type State<'a> = TableState<'a>;

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn start<'a>(&'a self, ctx: &LmContext) -> Result<TableState<'a>> {
        let history = ctx.answer_history();
        self.vocab.check(&history)?;
        let with_passages = ctx.has_passages();
        let current = self.lookup(with_passages, &history).logprobs();
        Ok(TableState {
            lm: self,
            with_passages,
            position: ctx.layout().len(),
            history,
            current,
        })
    }
}
