//! Trie-constrained beam search and ranking metrics.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterStack;
use crate::error::{Error, Result};
use crate::model::{CodeBook, Effective, ItemCode, Pair, ToyRecModel};
use crate::proximal::log_softmax;

pub const DEFAULT_BEAM_WIDTH: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrieNode {
    /// `(token, child)` sorted by token.
    children: Vec<(usize, usize)>,
    /// Smallest item id below this node.
    min_item: usize,
    item: Option<usize>,
}

/// Prefix tree over the valid item codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeTrie {
    nodes: Vec<TrieNode>,
    depth: usize,
    n_items: usize,
}

impl CodeTrie {
    pub fn from_codebook(book: &CodeBook) -> Result<Self> {
        let depth = book.codebook_sizes.len();
        let mut nodes = vec![TrieNode {
            children: Vec::new(),
            min_item: usize::MAX,
            item: None,
        }];
        for (item, code) in book.codes.iter().enumerate() {
            if code.len() != depth {
                return Err(Error::pre(format!("item {item} has a code of the wrong length")));
            }
            let mut at = 0;
            nodes[0].min_item = nodes[0].min_item.min(item);
            for &tok in &code.tokens {
                let next = match nodes[at].children.binary_search_by_key(&tok, |c| c.0) {
                    Ok(i) => nodes[at].children[i].1,
                    Err(i) => {
                        let id = nodes.len();
                        nodes.push(TrieNode {
                            children: Vec::new(),
                            min_item: item,
                            item: None,
                        });
                        nodes[at].children.insert(i, (tok, id));
                        id
                    }
                };
                at = next;
                nodes[at].min_item = nodes[at].min_item.min(item);
            }
            if nodes[at].item.replace(item).is_some() {
                return Err(Error::pre(format!("item {item} duplicates a leaf")));
            }
        }
        Ok(CodeTrie {
            nodes,
            depth,
            n_items: book.num_items(),
        })
    }

    pub fn num_items(&self) -> usize {
        self.n_items
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.n_items == 0
    }

    /// Leaf item for a full code, if valid.
    pub fn lookup(&self, code: &ItemCode) -> Option<usize> {
        let mut at = 0;
        for &tok in &code.tokens {
            let c = &self.nodes[at].children;
            at = c[c.binary_search_by_key(&tok, |x| x.0).ok()?].1;
        }
        self.nodes[at].item
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    /// `(item_id, log_score)`, best first.
    pub entries: Vec<(usize, f64)>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 1-based position of `item`, if present.
    pub fn rank_of(&self, item: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.0 == item).map(|p| p + 1)
    }
}

/// Higher score first, then smaller tie key.
fn by_score_then_key(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

struct Beam {
    node: usize,
    score: f64,
    state: Vec<f64>,
}

/// Beam search over the trie from a prepared model.
///
/// Beams expand only along trie edges and are scored by the cumulative
/// log-softmax of the chosen tokens. Partial beams are ranked by score, ties by
/// the smallest item id they can still reach; completed items by score, ties
/// by ascending item id.
pub fn constrained_beam_with(
    eff: &Effective<'_>,
    history: &[&ItemCode],
    trie: &CodeTrie,
    beam_width: usize,
    k: usize,
) -> Result<RankedList> {
    if trie.is_empty() {
        return Err(Error::pre("cannot decode over an empty trie"));
    }
    if beam_width < k || k == 0 {
        return Err(Error::pre(format!("need 1 ≤ k ≤ beam_width, got k = {k}, width {beam_width}")));
    }
    if trie.depth() != eff.model.code_len() {
        return Err(Error::pre("trie depth does not match the model's code length"));
    }
    let h = eff.encode(history)?;
    let mut beams = vec![Beam {
        node: 0,
        score: 0.0,
        state: eff.initial_state(&h),
    }];
    let depth = trie.depth();
    for pos in 0..depth {
        let mut cand: Vec<(f64, usize, usize, usize)> = Vec::new(); // score, node, parent, token
        for (bi, b) in beams.iter().enumerate() {
            let lp = log_softmax(&eff.logits(pos, &b.state));
            for &(tok, child) in &trie.nodes[b.node].children {
                cand.push((b.score + lp[tok], child, bi, tok));
            }
        }
        cand.sort_by(|a, b| by_score_then_key((a.0, trie.nodes[a.1].min_item), (b.0, trie.nodes[b.1].min_item)));
        cand.truncate(beam_width);
        let last = pos + 1 == depth;
        beams = cand
            .into_iter()
            .map(|(score, node, parent, tok)| Beam {
                node,
                score,
                state: if last {
                    Vec::new()
                } else {
                    eff.advance(pos, tok, &beams[parent].state)
                },
            })
            .collect();
    }
    let mut done: Vec<(usize, f64)> = beams
        .iter()
        .map(|b| (trie.nodes[b.node].item.expect("leaf at full depth"), b.score))
        .collect();
    done.sort_by(|a, b| by_score_then_key((a.1, a.0), (b.1, b.0)));
    done.truncate(k);
    Ok(RankedList { entries: done })
}

pub fn constrained_beam(
    model: &ToyRecModel,
    stacks: &[AdapterStack],
    history: &[ItemCode],
    trie: &CodeTrie,
    beam_width: usize,
    k: usize,
) -> Result<RankedList> {
    let eff = model.effective(stacks)?;
    let hist: Vec<&ItemCode> = history.iter().collect();
    constrained_beam_with(&eff, &hist, trie, beam_width, k)
}

/// Scores every item of `book` by teacher forcing and sorts them (the beam oracle).
pub fn exhaustive_scores(eff: &Effective<'_>, history: &[&ItemCode], book: &CodeBook) -> Result<RankedList> {
    let mut all = Vec::with_capacity(book.num_items());
    for (item, code) in book.codes.iter().enumerate() {
        let logits = eff.forward(history, code)?;
        let mut score = 0.0;
        for (z, &t) in logits.iter().zip(&code.tokens) {
            score += log_softmax(z)[t];
        }
        all.push((item, score));
    }
    all.sort_by(|a, b| by_score_then_key((a.1, a.0), (b.1, b.0)));
    Ok(RankedList { entries: all })
}

/// 1 if `truth` is among the first `k` entries.
pub fn hit_at_k(ranked: &RankedList, truth: usize, k: usize) -> f64 {
    match ranked.rank_of(truth) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// `1 / log2(rank + 1)` if `truth` is among the first `k` entries, else 0.
pub fn ndcg_at_k(ranked: &RankedList, truth: usize, k: usize) -> f64 {
    match ranked.rank_of(truth) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Hit,
    Ndcg,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Hit => "hit",
            Metric::Ndcg => "ndcg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: Metric,
    pub k: usize,
    pub value: f64,
}

/// Mean metric values over the evaluated users of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMetrics {
    pub n_users: usize,
    /// Sorted by `(metric, k)`.
    pub values: Vec<MetricValue>,
}

impl BlockMetrics {
    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        self.values.iter().find(|v| v.metric == metric && v.k == k).map(|v| v.value)
    }
}

/// Decodes every pair and averages Hit@k and NDCG@k.
///
/// Pairs are decoded in parallel; sums are reduced in pair order.
pub fn evaluate_pairs(
    model: &ToyRecModel,
    stacks: &[AdapterStack],
    book: &CodeBook,
    trie: &CodeTrie,
    pairs: &[Pair],
    ks: &[usize],
    beam_width: usize,
) -> Result<BlockMetrics> {
    if pairs.is_empty() {
        return Err(Error::pre("no pairs to evaluate"));
    }
    let kmax = ks.iter().copied().max().ok_or_else(|| Error::pre("no cutoffs given"))?;
    let eff = model.effective(stacks)?;
    let lists: Vec<Result<RankedList>> = pairs
        .par_iter()
        .map(|p| {
            let hist: Vec<&ItemCode> = p.history.iter().map(|&i| book.code(i)).collect();
            constrained_beam_with(&eff, &hist, trie, beam_width.max(kmax), kmax)
        })
        .collect();
    let mut values = BTreeMap::new();
    for &k in ks {
        values.insert((Metric::Hit, k), 0.0);
        values.insert((Metric::Ndcg, k), 0.0);
    }
    for (p, list) in pairs.iter().zip(lists) {
        let list = list?;
        for &k in ks {
            *values.get_mut(&(Metric::Hit, k)).expect("present") += hit_at_k(&list, p.target, k);
            *values.get_mut(&(Metric::Ndcg, k)).expect("present") += ndcg_at_k(&list, p.target, k);
        }
    }
    let n = pairs.len() as f64;
    Ok(BlockMetrics {
        n_users: pairs.len(),
        values: values
            .into_iter()
            .map(|((metric, k), sum)| MetricValue { metric, k, value: sum / n })
            .collect(),
    })
}

/// Test-set metrics of a stage block.
pub fn evaluate_block(
    model: &ToyRecModel,
    stacks: &[AdapterStack],
    book: &CodeBook,
    trie: &CodeTrie,
    block: &crate::data::StageBlock,
    ks: &[usize],
    beam_width: usize,
) -> Result<BlockMetrics> {
    if block.test_pairs.is_empty() {
        return Err(Error::pre(format!("stage {} has no test pairs", block.stage_index)));
    }
    evaluate_pairs(model, stacks, book, trie, &block.test_pairs, ks, beam_width)
}

/// One line of the metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: usize,
    pub method: String,
    pub metric: Metric,
    pub k: usize,
    pub value: f64,
}

pub fn metric_rows(stage: usize, method: &str, m: &BlockMetrics) -> Vec<MetricRow> {
    m.values
        .iter()
        .map(|v| MetricRow {
            stage,
            method: method.to_string(),
            metric: v.metric,
            k: v.k,
            value: v.value,
        })
        .collect()
}

pub fn write_metric_csv<W: std::io::Write>(rows: &[MetricRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Numeric(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<metric csv>", e))
}

pub fn write_metric_csv_file(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metric_csv(rows, f)
}

pub fn read_metric_csv<R: std::io::Read>(reader: R) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}
