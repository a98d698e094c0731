//! Self-evolving-stage data: grow an n-ary tree of sampled answer sentences
//! from the empty root, pick the root-to-leaf path with the best exact-match
//! recall, and pair each on-path sentence with its lower-scoring siblings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ContrastiveInstance;
use crate::error::{Error, Result};
use crate::lm::{derive_seed, sample_sentence, ItemContext, LmBackend, SamplingConfig};
use crate::scoring::{faithfulness_score, path_score, prefers, FaithfulnessScore};
use crate::vocab::{Sentence, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub branching: usize,
    pub max_depth: usize,
    pub node_budget: usize,
    /// Extra draws allowed per child slot when a sample repeats a sibling.
    pub max_resamples: usize,
    pub sampling: SamplingConfig,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            branching: 3,
            max_depth: 6,
            node_budget: 120,
            max_resamples: 3,
            sampling: SamplingConfig::default(),
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branching < 2 {
            return Err(Error::Config("tree branching must be at least 2".into()));
        }
        if self.max_depth == 0 || self.node_budget < 2 {
            return Err(Error::Config(
                "tree caps must allow at least one child".into(),
            ));
        }
        self.sampling.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub sentence: Sentence,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub depth: usize,
    /// `None` only for the root.
    pub score: Option<FaithfulnessScore>,
    /// Ended with end-of-sequence.
    pub terminated: bool,
    /// Hit a token or window limit mid-sentence.
    pub truncated: bool,
    pub seed: u64,
}

impl TreeNode {
    fn expandable(&self, max_depth: usize) -> bool {
        !self.terminated && !self.truncated && self.depth < max_depth
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTree {
    pub nodes: Vec<TreeNode>,
    pub branching: usize,
    pub max_depth: usize,
    pub node_budget: usize,
    /// Set when the backend failed mid-growth; the tree is partial.
    pub error: Option<String>,
}

impl SampleTree {
    pub const ROOT: usize = 0;

    /// Sentences from the root's first child down to `node`.
    pub fn path_sentences(&self, node: usize) -> Vec<Sentence> {
        self.path_nodes(node)
            .into_iter()
            .map(|i| self.nodes[i].sentence.clone())
            .collect()
    }

    /// Node indices from the root's child down to `node` (root excluded).
    pub fn path_nodes(&self, node: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            path.push(cur);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn siblings(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let parent = self.nodes[node].parent;
        parent
            .into_iter()
            .flat_map(move |p| self.nodes[p].children.iter().copied())
            .filter(move |&c| c != node)
    }
}

/// Layer-by-layer expansion. Each expandable node receives up to `branching`
/// distinct children; growth stops at the node budget, the depth cap, or when
/// nothing is left to expand.
pub fn grow_tree<B: LmBackend>(
    backend: &B,
    item: &ItemContext,
    cfg: &TreeConfig,
    seed: u64,
) -> Result<SampleTree> {
    cfg.validate()?;
    if item.passages.is_empty() {
        return Err(Error::MissingPassages);
    }
    let mut tree = SampleTree {
        nodes: vec![TreeNode {
            sentence: Sentence::default(),
            parent: None,
            children: Vec::new(),
            depth: 0,
            score: None,
            terminated: false,
            truncated: false,
            seed,
        }],
        branching: cfg.branching,
        max_depth: cfg.max_depth,
        node_budget: cfg.node_budget,
        error: None,
    };
    let mut frontier = vec![SampleTree::ROOT];
    'layers: while !frontier.is_empty() {
        let mut next = Vec::new();
        for &parent in &frontier {
            if tree.nodes.len() >= cfg.node_budget {
                break 'layers;
            }
            if let Err(e) = expand_node(backend, item, cfg, &mut tree, parent) {
                log::warn!("tree growth stopped: {e}");
                tree.error = Some(e.to_string());
                break 'layers;
            }
            next.extend(
                tree.nodes[parent]
                    .children
                    .iter()
                    .copied()
                    .filter(|&c| tree.nodes[c].expandable(cfg.max_depth)),
            );
        }
        frontier = next;
    }
    Ok(tree)
}

fn expand_node<B: LmBackend>(
    backend: &B,
    item: &ItemContext,
    cfg: &TreeConfig,
    tree: &mut SampleTree,
    parent: usize,
) -> Result<()> {
    let prefix = tree.path_sentences(parent);
    let ctx = item.context(true, &prefix);
    let parent_seed = tree.nodes[parent].seed;
    let depth = tree.nodes[parent].depth + 1;
    let mut children: Vec<TreeNode> = Vec::new();
    // the last expansion may only fill what is left of the budget
    let slots = cfg
        .branching
        .min(cfg.node_budget.saturating_sub(tree.nodes.len()));
    for slot in 0..slots {
        for retry in 0..=cfg.max_resamples {
            let s = derive_seed(parent_seed, &[slot as u64, retry as u64]);
            let sampled = sample_sentence(backend, &ctx, &cfg.sampling, s)?;
            if children.iter().any(|c| c.sentence == sampled.sentence) {
                continue;
            }
            let score = faithfulness_score(backend, &ctx, sampled.sentence.tokens())?;
            children.push(TreeNode {
                sentence: sampled.sentence,
                parent: Some(parent),
                children: Vec::new(),
                depth,
                score: Some(score),
                terminated: sampled.terminal,
                truncated: sampled.truncated,
                seed: s,
            });
            break;
        }
    }
    for child in children {
        let idx = tree.nodes.len();
        tree.nodes.push(child);
        tree.nodes[parent].children.push(idx);
    }
    Ok(())
}

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fraction of aspect sets with at least one alias contained in the answer
/// after normalization. Zero for an empty list of sets.
pub fn em_recall(answer: &str, short_answer_sets: &[Vec<String>]) -> f64 {
    if short_answer_sets.is_empty() {
        return 0.0;
    }
    let norm = normalize_answer(answer);
    let covered = short_answer_sets
        .iter()
        .filter(|set| {
            set.iter().any(|alias| {
                let a = normalize_answer(alias);
                !a.is_empty() && norm.contains(&a)
            })
        })
        .count();
    covered as f64 / short_answer_sets.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathCandidate {
    pub leaf: usize,
    pub sentences: Vec<Sentence>,
    pub em_score: f64,
    pub path_score: f64,
    pub terminated: bool,
    /// Selected by the no-terminated-path fallback.
    pub truncated: bool,
}

fn candidate(
    tree: &SampleTree,
    leaf: usize,
    vocab: &Vocab,
    sets: &[Vec<String>],
) -> Result<PathCandidate> {
    let nodes = tree.path_nodes(leaf);
    let scores: Vec<FaithfulnessScore> = nodes
        .iter()
        .map(|&i| tree.nodes[i].score.expect("non-root node has a score"))
        .collect();
    let sentences = tree.path_sentences(leaf);
    let text = vocab.render_answer(&sentences);
    Ok(PathCandidate {
        leaf,
        em_score: em_recall(&text, sets),
        path_score: path_score(&scores)?.normalized,
        terminated: tree.nodes[leaf].terminated,
        truncated: !tree.nodes[leaf].terminated,
        sentences,
    })
}

/// `a` ranks before `b`: higher recall, then higher path score, then shorter
/// path, then earlier node.
pub fn ranks_before(a: &PathCandidate, b: &PathCandidate) -> bool {
    a.em_score
        .total_cmp(&b.em_score)
        .then(a.path_score.total_cmp(&b.path_score))
        .then(b.sentences.len().cmp(&a.sentences.len()))
        .then(b.leaf.cmp(&a.leaf))
        .is_gt()
}

/// Best terminated path; when none terminated, the best among the deepest
/// paths, flagged as truncated.
pub fn select_best_path(
    tree: &SampleTree,
    vocab: &Vocab,
    short_answer_sets: &[Vec<String>],
) -> Result<PathCandidate> {
    let mut leaves: Vec<usize> = (1..tree.nodes.len())
        .filter(|&i| tree.nodes[i].terminated)
        .collect();
    if leaves.is_empty() {
        let deepest = tree
            .nodes
            .iter()
            .skip(1)
            .map(|n| n.depth)
            .max()
            .ok_or(Error::EmptyTree)?;
        leaves = (1..tree.nodes.len())
            .filter(|&i| tree.nodes[i].depth == deepest)
            .collect();
        log::debug!("no terminated path; falling back to depth {deepest}");
    }
    let mut best: Option<PathCandidate> = None;
    for leaf in leaves {
        let c = candidate(tree, leaf, vocab, short_answer_sets)?;
        if best.as_ref().is_none_or(|b| ranks_before(&c, b)) {
            best = Some(c);
        }
    }
    best.ok_or(Error::EmptyTree)
}

/// One instance per on-path node and strictly lower-scoring sibling. The
/// prefix is the shared path above them.
pub fn extract_pairs(
    tree: &SampleTree,
    best: &PathCandidate,
    item_id: &str,
) -> Result<Vec<ContrastiveInstance>> {
    let mut out = Vec::new();
    for node in tree.path_nodes(best.leaf) {
        let a = &tree.nodes[node];
        if a.truncated {
            continue;
        }
        let sa = a.score.ok_or(Error::EmptyTree)?;
        let prefix = tree.path_sentences(a.parent.expect("non-root"));
        for sib in tree.siblings(node) {
            let b = &tree.nodes[sib];
            if b.truncated {
                continue;
            }
            if prefers(&sa, &b.score.ok_or(Error::EmptyTree)?) {
                out.push(ContrastiveInstance {
                    item_id: item_id.to_string(),
                    prefix: prefix.clone(),
                    target: a.sentence.clone(),
                    negative: b.sentence.clone(),
                    with_passages: true,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct DumpNode<'a> {
    index: usize,
    parent: Option<usize>,
    depth: usize,
    text: String,
    score: Option<f64>,
    terminated: bool,
    truncated: bool,
    children: &'a [usize],
}

#[derive(Serialize)]
struct TreeDump<'a> {
    item_id: &'a str,
    error: Option<&'a str>,
    nodes: Vec<DumpNode<'a>>,
    selected_path: Vec<usize>,
    selected_em: Option<f64>,
    selected_truncated: Option<bool>,
}

/// Human-readable JSON dump of the node arena and the selected path.
pub fn tree_to_json(
    tree: &SampleTree,
    best: Option<&PathCandidate>,
    vocab: &Vocab,
    item_id: &str,
) -> Result<String> {
    let dump = TreeDump {
        item_id,
        error: tree.error.as_deref(),
        nodes: tree
            .nodes
            .iter()
            .enumerate()
            .map(|(index, n)| DumpNode {
                index,
                parent: n.parent,
                depth: n.depth,
                text: vocab.detokenize(n.sentence.tokens()),
                score: n.score.map(|s| s.value),
                terminated: n.terminated,
                truncated: n.truncated,
                children: &n.children,
            })
            .collect(),
        selected_path: best.map(|b| tree.path_nodes(b.leaf)).unwrap_or_default(),
        selected_em: best.map(|b| b.em_score),
        selected_truncated: best.map(|b| b.truncated),
    };
    Ok(serde_json::to_string_pretty(&dump)?)
}

pub fn save_tree(
    tree: &SampleTree,
    best: Option<&PathCandidate>,
    vocab: &Vocab,
    item_id: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let text = tree_to_json(tree, best, vocab, item_id)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
