//! Evaluation: exact-match recall and hit rate against short-answer aliases,
//! and per-sentence faithfulness through a pluggable judge. The built-in
//! judge scores lexical support: the best token-overlap F1 between an answer
//! sentence and any passage sentence.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::corpus::{split_sentences, QaItem};
use crate::error::{Error, Result};
use crate::treesample::{em_recall, normalize_answer};

/// All aspects covered.
pub fn hit(answer: &str, short_answer_sets: &[Vec<String>]) -> bool {
    !short_answer_sets.is_empty() && em_recall(answer, short_answer_sets) == 1.0
}

fn content_tokens(text: &str) -> Vec<String> {
    normalize_answer(text)
        .split(' ')
        .filter(|t| !t.is_empty() && !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Token-overlap F1 between two token bags.
pub fn token_f1(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in b {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in a {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / a.len() as f64;
    let r = common as f64 / b.len() as f64;
    2.0 * p * r / (p + r)
}

/// Best overlap F1 against any passage sentence; 0 for an empty sentence.
pub fn lexical_support(sentence: &str, passages: &[String]) -> f64 {
    let toks = content_tokens(sentence);
    if toks.is_empty() {
        return 0.0;
    }
    passages
        .iter()
        .flat_map(|p| split_sentences(p))
        .map(|ps| token_f1(&toks, &content_tokens(&ps)))
        .fold(0.0, f64::max)
}

/// Scores how well passages support one answer sentence, in `[0, 1]`.
pub trait FaithfulnessJudge {
    fn judge(&mut self, sentence: &str, passages: &[String]) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ProxyJudge;

impl FaithfulnessJudge for ProxyJudge {
    fn judge(&mut self, sentence: &str, passages: &[String]) -> Result<f64> {
        Ok(lexical_support(sentence, passages))
    }
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    sentence: &'a str,
    passages: &'a [String],
}

#[derive(Deserialize)]
struct JudgeResponse {
    score: f64,
}

/// A long-running external process answering one JSON request line
/// `{"sentence", "passages"}` with one response line `{"score"}`.
pub struct CommandJudge {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl CommandJudge {
    /// Runs `command` through the shell.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Judge(format!("cannot start {command:?}: {e}")))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(CommandJudge {
            child,
            stdin,
            stdout,
        })
    }
}

impl FaithfulnessJudge for CommandJudge {
    fn judge(&mut self, sentence: &str, passages: &[String]) -> Result<f64> {
        let req = serde_json::to_string(&JudgeRequest { sentence, passages })?;
        let io = |e: std::io::Error| Error::Judge(e.to_string());
        writeln!(self.stdin, "{req}").map_err(io)?;
        self.stdin.flush().map_err(io)?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line).map_err(io)? == 0 {
            return Err(Error::Judge("judge closed its output".into()));
        }
        let resp: JudgeResponse = serde_json::from_str(line.trim())
            .map_err(|e| Error::Judge(format!("bad response {line:?}: {e}")))?;
        if !(0.0..=1.0).contains(&resp.score) {
            return Err(Error::Judge(format!("score {} outside [0, 1]", resp.score)));
        }
        Ok(resp.score)
    }
}

impl Drop for CommandJudge {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// One generated answer, as written by the `generate` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub id: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

pub fn load_answers(path: impl AsRef<Path>) -> Result<Vec<AnswerRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Schema {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_answers(answers: &[AnswerRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for a in answers {
        text.push_str(&serde_json::to_string(a)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub id: String,
    pub em_recall: f64,
    pub hit: f64,
    pub faithfulness: f64,
    pub sentences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub em_recall: f64,
    pub hit: f64,
    pub faithfulness_proxy: f64,
    pub per_item: Vec<ItemRow>,
}

impl EvalReport {
    /// Aggregates as plain means of the rows (zero when there are none).
    pub fn from_rows(per_item: Vec<ItemRow>) -> Self {
        let n = per_item.len().max(1) as f64;
        let mean = |f: fn(&ItemRow) -> f64| per_item.iter().map(f).sum::<f64>() / n;
        EvalReport {
            em_recall: mean(|r| r.em_recall),
            hit: mean(|r| r.hit),
            faithfulness_proxy: mean(|r| r.faithfulness),
            per_item,
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::io(path, e))
    }

    /// One row per item, for plotting.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::Config(format!("writing {}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for row in &self.per_item {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Scores every answer. Faithfulness is averaged over an answer's sentences,
/// then over items; an answer without sentences scores 0.
pub fn evaluate<J: FaithfulnessJudge + ?Sized>(
    answers: &[AnswerRecord],
    corpus: &[QaItem],
    judge: &mut J,
    allow_empty: bool,
) -> Result<EvalReport> {
    if answers.is_empty() && !allow_empty {
        return Err(Error::Empty("answer set"));
    }
    let by_id: HashMap<&str, &QaItem> = corpus.iter().map(|it| (it.id.as_str(), it)).collect();
    let mut unknown: Vec<String> = answers
        .iter()
        .filter(|a| !by_id.contains_key(a.id.as_str()))
        .map(|a| a.id.clone())
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::UnknownIds(unknown));
    }
    let mut seen = HashSet::new();
    let mut rows = Vec::with_capacity(answers.len());
    for a in answers {
        if !seen.insert(a.id.as_str()) {
            return Err(Error::DuplicateId(a.id.clone()));
        }
        let item = by_id[a.id.as_str()];
        let sentences = split_sentences(&a.answer);
        let mut sum = 0.0;
        for s in &sentences {
            sum += judge.judge(s, &item.passages)?;
        }
        rows.push(ItemRow {
            id: a.id.clone(),
            em_recall: em_recall(&a.answer, &item.short_answer_sets),
            hit: if hit(&a.answer, &item.short_answer_sets) {
                1.0
            } else {
                0.0
            },
            faithfulness: if sentences.is_empty() {
                0.0
            } else {
                sum / sentences.len() as f64
            },
            sentences: sentences.len(),
        });
    }
    Ok(EvalReport::from_rows(rows))
}
