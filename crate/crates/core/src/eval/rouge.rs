//! ROUGE F-scores over lowercase alphanumeric tokens, without stemming.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub rlsum: f64,
    /// Both texts had no tokens; all scores are defined as 1.
    pub both_empty: bool,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Sentences end at a newline or after `.`, `!` or `?`; sentences without
/// tokens are dropped.
pub fn split_sentences(text: &str) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '\n' | '.' | '!' | '?') {
            out.push(&text[start..i + c.len_utf8()]);
            start = i + c.len_utf8();
        }
    }
    out.push(&text[start..]);
    out.into_iter()
        .map(tokenize)
        .filter(|t| !t.is_empty())
        .collect()
}

fn f1(hits: usize, n_pred: usize, n_ref: usize) -> f64 {
    if hits == 0 || n_pred == 0 || n_ref == 0 {
        return 0.0;
    }
    let p = hits as f64 / n_pred as f64;
    let r = hits as f64 / n_ref as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn rouge_n(pred: &[String], reference: &[String], n: usize) -> f64 {
    let p = ngram_counts(pred, n);
    let r = ngram_counts(reference, n);
    let hits: usize = r
        .iter()
        .map(|(g, &c)| c.min(p.get(g).copied().unwrap_or(0)))
        .sum();
    f1(
        hits,
        pred.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

/// DP table `t[i][j]` = LCS length of `a[..i]` and `b[..j]`, flattened.
fn lcs_table(a: &[String], b: &[String]) -> Vec<usize> {
    let w = b.len() + 1;
    let mut t = vec![0usize; (a.len() + 1) * w];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i * w + j] = if a[i - 1] == b[j - 1] {
                t[(i - 1) * w + j - 1] + 1
            } else {
                t[(i - 1) * w + j].max(t[i * w + j - 1])
            };
        }
    }
    t
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    lcs_table(a, b)[(a.len() + 1) * (b.len() + 1) - 1]
}

/// Indices into `r` of one LCS of `r` and `c`. On equal subproblems the
/// backtrack moves along `r` first.
fn lcs_indices(r: &[String], c: &[String]) -> Vec<usize> {
    let t = lcs_table(r, c);
    let w = c.len() + 1;
    let (mut i, mut j) = (r.len(), c.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if r[i - 1] == c[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i * w + j - 1] > t[(i - 1) * w + j] {
            j -= 1;
        } else {
            i -= 1;
        }
    }
    out.reverse();
    out
}

fn token_counts(s: &[Vec<String>]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for t in s.iter().flatten() {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Summary-level LCS: for each reference sentence, the union of its LCS
/// positions against every predicted sentence; hits are clipped by the
/// token counts of both texts.
fn rouge_lsum(pred: &[Vec<String>], reference: &[Vec<String>]) -> f64 {
    let mut ref_left = token_counts(reference);
    let mut pred_left = token_counts(pred);
    let n_ref: usize = reference.iter().map(Vec::len).sum();
    let n_pred: usize = pred.iter().map(Vec::len).sum();
    let mut hits = 0;
    for r in reference {
        let mut union: Vec<usize> = pred.iter().flat_map(|c| lcs_indices(r, c)).collect();
        union.sort_unstable();
        union.dedup();
        for i in union {
            let tok = r[i].as_str();
            let (a, b) = (ref_left.get_mut(tok), pred_left.get_mut(tok));
            if let (Some(a), Some(b)) = (a, b) {
                if *a > 0 && *b > 0 {
                    *a -= 1;
                    *b -= 1;
                    hits += 1;
                }
            }
        }
    }
    f1(hits, n_pred, n_ref)
}

pub fn rouge_scores(prediction: &str, reference: &str) -> RougeScores {
    let p = tokenize(prediction);
    let r = tokenize(reference);
    if p.is_empty() || r.is_empty() {
        let both = p.is_empty() && r.is_empty();
        let v = if both { 1.0 } else { 0.0 };
        return RougeScores {
            r1: v,
            r2: v,
            rl: v,
            rlsum: v,
            both_empty: both,
        };
    }
    let r1 = rouge_n(&p, &r, 1);
    // Two single-token texts have no bigrams at all; fall back to the unigram
    // score so that identical texts still score 1 and disjoint ones 0.
    let r2 = if p.len() < 2 && r.len() < 2 {
        r1
    } else {
        rouge_n(&p, &r, 2)
    };
    RougeScores {
        r1,
        r2,
        rl: f1(lcs_len(&p, &r), p.len(), r.len()),
        rlsum: rouge_lsum(&split_sentences(prediction), &split_sentences(reference)),
        both_empty: false,
    }
}
