//! Question/passage/answer records, sentence segmentation, and JSONL
//! persistence for corpora and contrastive training instances.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Sentence, TokenId, Vocab};

/// One question with its evidence passages and reference answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: String,
    pub question: String,
    pub passages: Vec<String>,
    #[serde(default)]
    pub gold_answer: Option<String>,
    /// One alias set per answer aspect.
    #[serde(rename = "short_answers", default)]
    pub short_answer_sets: Vec<Vec<String>>,
}

impl QaItem {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.short_answer_sets.iter().any(|set| set.is_empty()) {
            return Err("short answer set without aliases".into());
        }
        Ok(())
    }

    /// Gold answer split into sentences, tokenized.
    pub fn gold_sentences(&self, vocab: &Vocab, seg: Segmentation) -> Option<Vec<Sentence>> {
        let gold = self.gold_answer.as_deref()?;
        Some(
            seg.split(gold)
                .iter()
                .map(|s| Sentence(vocab.tokenize(s)))
                .filter(|s| !s.is_empty())
                .collect(),
        )
    }
}

/// Splits after every '.', '!' or '?'. Abbreviations and ellipses are not
/// special-cased.
pub fn split_sentences(answer: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in answer.char_indices() {
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            let piece = answer[start..end].trim();
            if !piece.is_empty() {
                out.push(piece.to_string());
            }
            start = end;
        }
    }
    let tail = answer[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

/// Unit of optimisation: single sentences, or the whole answer at once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segmentation {
    #[default]
    Sentence,
    Answer,
}

impl Segmentation {
    pub fn split(self, text: &str) -> Vec<String> {
        match self {
            Segmentation::Sentence => split_sentences(text),
            Segmentation::Answer => {
                let t = text.trim();
                if t.is_empty() {
                    vec![]
                } else {
                    vec![t.to_string()]
                }
            }
        }
    }
}

/// An answer as a list of tokenized sentences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SentenceSequence {
    sentences: Vec<Sentence>,
}

impl SentenceSequence {
    pub fn new(sentences: Vec<Sentence>) -> Result<Self> {
        if sentences.iter().any(Sentence::is_empty) {
            return Err(Error::Empty("sentence in sequence"));
        }
        Ok(SentenceSequence { sentences })
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// The first `i` sentences.
    pub fn prefix(&self, i: usize) -> &[Sentence] {
        &self.sentences[..i.min(self.sentences.len())]
    }

    pub fn terminal(&self) -> bool {
        self.sentences.last().is_some_and(Sentence::is_terminal)
    }

    pub fn push(&mut self, s: Sentence) -> Result<()> {
        if s.is_empty() {
            return Err(Error::Empty("sentence in sequence"));
        }
        self.sentences.push(s);
        Ok(())
    }

    pub fn flat_tokens(&self) -> Vec<TokenId> {
        self.sentences
            .iter()
            .flat_map(|s| s.tokens().iter().copied())
            .collect()
    }
}

/// A training unit: target and negative sentence sharing one prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveInstance {
    pub item_id: String,
    pub prefix: Vec<Sentence>,
    pub target: Sentence,
    pub negative: Sentence,
    pub with_passages: bool,
}

impl ContrastiveInstance {
    pub fn validate(&self) -> Result<()> {
        if self.target.is_empty() || self.negative.is_empty() {
            return Err(Error::Empty("instance sentence"));
        }
        if self.target == self.negative {
            return Err(Error::Config(format!(
                "instance for {} has identical target and negative",
                self.item_id
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    item_id: String,
    prefix: Vec<String>,
    target: String,
    negative: String,
    with_passages: bool,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses items from JSON lines, checking ids are unique.
pub fn parse_corpus<'a>(lines: impl IntoIterator<Item = (usize, &'a str)>) -> Result<Vec<QaItem>> {
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    for (line, text) in lines {
        let item: QaItem = serde_json::from_str(text).map_err(|e| Error::Schema {
            line,
            message: e.to_string(),
        })?;
        item.validate()
            .map_err(|message| Error::Schema { line, message })?;
        if !seen.insert(item.id.clone()) {
            return Err(Error::DuplicateId(item.id));
        }
        items.push(item);
    }
    Ok(items)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<QaItem>> {
    let lines = read_lines(path.as_ref())?;
    parse_corpus(lines.iter().map(|(n, l)| (*n, l.as_str())))
}

pub fn save_corpus(items: &[QaItem], path: impl AsRef<Path>) -> Result<()> {
    let lines = items
        .iter()
        .map(serde_json::to_string)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    write_lines(path.as_ref(), lines)
}

pub fn instance_to_json(inst: &ContrastiveInstance, vocab: &Vocab) -> Result<String> {
    let rec = InstanceRecord {
        item_id: inst.item_id.clone(),
        prefix: inst
            .prefix
            .iter()
            .map(|s| vocab.detokenize(s.tokens()))
            .collect(),
        target: vocab.detokenize(inst.target.tokens()),
        negative: vocab.detokenize(inst.negative.tokens()),
        with_passages: inst.with_passages,
    };
    Ok(serde_json::to_string(&rec)?)
}

pub fn save_instances(
    instances: &[ContrastiveInstance],
    vocab: &Vocab,
    path: impl AsRef<Path>,
) -> Result<()> {
    let lines = instances
        .iter()
        .map(|i| instance_to_json(i, vocab))
        .collect::<Result<Vec<_>>>()?;
    write_lines(path.as_ref(), lines)
}

pub fn load_instances(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<ContrastiveInstance>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        let rec: InstanceRecord = serde_json::from_str(&text).map_err(|e| Error::Schema {
            line,
            message: e.to_string(),
        })?;
        let tok = |s: &str| {
            vocab
                .tokenize_strict(s)
                .map(Sentence)
                .map_err(|e| Error::Schema {
                    line,
                    message: e.to_string(),
                })
        };
        let inst = ContrastiveInstance {
            item_id: rec.item_id,
            prefix: rec.prefix.iter().map(|s| tok(s)).collect::<Result<_>>()?,
            target: tok(&rec.target)?,
            negative: tok(&rec.negative)?,
            with_passages: rec.with_passages,
        };
        inst.validate().map_err(|e| Error::Schema {
            line,
            message: e.to_string(),
        })?;
        out.push(inst);
    }
    Ok(out)
}
