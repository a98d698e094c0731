//! Word-level vocabulary and tokenizer.
//!
//! Text is split into word runs and single punctuation characters. Special
//! tokens are written as `<name>` and survive a text round trip, which is how
//! end-of-sequence markers appear in instance files.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const EOS: TokenId = 1;
pub const QUESTION: TokenId = 2;
pub const PASSAGE: TokenId = 3;
pub const ANSWER: TokenId = 4;

const SPECIALS: [&str; 5] = ["<unk>", "<eos>", "<q>", "<p>", "<a>"];

fn token_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"<[a-z]+>|[\w']+|[^\w\s]").expect("static regex"))
}

/// Splits text into surface tokens without consulting a vocabulary.
pub fn surface_tokens(text: &str) -> Vec<&str> {
    token_pattern()
        .find_iter(text)
        .map(|m| m.as_str())
        .collect()
}

/// True for surface forms that close a sentence.
pub fn is_sentence_end_surface(surface: &str) -> bool {
    !surface.starts_with('<') && surface.ends_with(['.', '!', '?'])
}

fn is_attached_punct(surface: &str) -> bool {
    surface.len() == 1
        && surface
            .chars()
            .all(|c| matches!(c, '.' | ',' | '!' | '?' | ';' | ':'))
}

/// One sentence as token ids. A terminal sentence carries the end-of-sequence
/// token as its last element.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sentence(pub Vec<TokenId>);

impl Sentence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Sentence(tokens)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_terminal(&self) -> bool {
        self.0.last() == Some(&EOS)
    }

    /// Tokens without the trailing end-of-sequence marker.
    pub fn body(&self) -> &[TokenId] {
        if self.is_terminal() {
            &self.0[..self.0.len() - 1]
        } else {
            &self.0
        }
    }
}

impl From<Vec<TokenId>> for Sentence {
    fn from(v: Vec<TokenId>) -> Self {
        Sentence(v)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    sentence_end: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        Vocab::from_tokens(f.tokens)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocab {
    /// Builds a vocabulary from an explicit token list. The first five
    /// entries are forced to be the special tokens.
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for w in words {
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len() as TokenId);
                tokens.push(w);
            }
        }
        let sentence_end = tokens.iter().map(|t| is_sentence_end_surface(t)).collect();
        Vocab {
            tokens,
            index,
            sentence_end,
        }
    }

    /// Collects every surface token of `texts` into a sorted vocabulary.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for tok in surface_tokens(text) {
                if !SPECIALS.contains(&tok) {
                    words.insert(tok.to_string());
                }
            }
        }
        Self::from_tokens(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos_id(&self) -> TokenId {
        EOS
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_sentence_end(&self, id: TokenId) -> bool {
        self.sentence_end.get(id as usize).copied().unwrap_or(false)
    }

    pub fn sentence_end_ids(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId)
            .filter(|&i| self.is_sentence_end(i))
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        surface_tokens(text)
            .into_iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Tokenizes and fails on any out-of-vocabulary surface form.
    pub fn tokenize_strict(&self, text: &str) -> Result<Vec<TokenId>> {
        surface_tokens(text)
            .into_iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::Config(format!("token {t:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let s = self.surface(id).unwrap_or("<unk>");
            if !out.is_empty() && !is_attached_punct(s) {
                out.push(' ');
            }
            out.push_str(s);
        }
        out
    }

    /// Renders answer sentences as text, dropping end-of-sequence markers.
    pub fn render_answer(&self, sentences: &[Sentence]) -> String {
        let flat: Vec<TokenId> = sentences
            .iter()
            .flat_map(|s| s.body().iter().copied())
            .collect();
        self.detokenize(&flat)
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.len()) {
            Some(&id) => Err(Error::OutOfVocab {
                id,
                vocab_size: self.len(),
            }),
            None => Ok(()),
        }
    }
}

impl fmt::Display for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vocab({} tokens)", self.len())
    }
}
