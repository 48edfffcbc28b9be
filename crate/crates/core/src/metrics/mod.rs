//! Captioning metrics: corpus BLEU-1..4, ROUGE-L and CIDEr-D.
//!
//! All scorers take pre-tokenized captions; [`evaluate_corpus`] tokenizes raw
//! text with [`tokenize`] first.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Identifier recorded in reports for the tokenization rule below.
pub const TOKENIZER_VERSION: &str = "v1";
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;

/// Lowercase, drop ASCII punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(ToString::to_string).collect()
}

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Ngram<'_>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus<T>(candidates: &[Vec<String>], references: &[Vec<T>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::InvalidInput(format!("sample {i} has no references")));
    }
    Ok(())
}

/// Corpus-level clipped n-gram statistics: `(matches, totals)` per order 1..=4,
/// plus the candidate length and the closest-reference length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    /// Modified precision of order `n`, or 0 when there are no `n`-grams.
    pub fn precision(&self, n: usize) -> f64 {
        if self.totals[n - 1] == 0 {
            0.0
        } else {
            self.matches[n - 1] as f64 / self.totals[n - 1] as f64
        }
    }
}

pub fn bleu_stats(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<BleuStats> {
    check_corpus(candidates, references)?;
    let mut s = BleuStats {
        matches: [0; 4],
        totals: [0; 4],
        cand_len: 0,
        ref_len: 0,
    };
    for (cand, refs) in candidates.iter().zip(references) {
        s.cand_len += cand.len();
        // closest reference length, ties to the shorter one
        s.ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for k in 1..=4 {
            let mut max_ref: BTreeMap<Ngram<'_>, usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngram_counts(cand, k) {
                s.matches[k - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                s.totals[k - 1] += c;
            }
        }
    }
    Ok(s)
}

/// Corpus BLEU with uniform weights over orders `1..=n`, clipped counts,
/// closest-reference brevity penalty and no smoothing.
pub fn bleu_n(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidInput(format!("BLEU order must be in 1..=4, got {n}")));
    }
    Ok(bleu_from_stats(&bleu_stats(candidates, references)?, n))
}

pub fn bleu_from_stats(s: &BleuStats, n: usize) -> f64 {
    if s.cand_len == 0 || (0..n).any(|k| s.matches[k] == 0) {
        return 0.0;
    }
    let log_p: f64 = (1..=n).map(|k| libm::log(s.precision(k))).sum::<f64>() / n as f64;
    let bp = if s.cand_len >= s.ref_len {
        1.0
    } else {
        libm::exp(1.0 - s.ref_len as f64 / s.cand_len as f64)
    };
    bp * libm::exp(log_p)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure of one candidate against one reference.
pub fn rouge_l_pair(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over samples of the best reference F-measure.
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], beta: f64) -> Result<f64> {
    check_corpus(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| refs.iter().map(|r| rouge_l_pair(c, r, beta)).fold(0.0, f64::max))
        .sum();
    Ok(total / candidates.len() as f64)
}

/// TF-IDF n-gram vectors for one caption, orders 1..=4.
struct CiderVec<'a> {
    weights: [BTreeMap<Ngram<'a>, f64>; 4],
    norms: [f64; 4],
    len: usize,
}

fn cider_vec<'a>(tokens: &'a [String], df: &BTreeMap<Ngram<'_>, usize>, log_n: f64) -> CiderVec<'a> {
    let mut weights: [BTreeMap<Ngram<'a>, f64>; 4] = Default::default();
    let mut norms = [0.0; 4];
    for n in 1..=4 {
        for (g, tf) in ngram_counts(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_n - libm::log(d));
            norms[n - 1] += w * w;
            weights[n - 1].insert(g, w);
        }
        norms[n - 1] = libm::sqrt(norms[n - 1]);
    }
    CiderVec {
        weights,
        norms,
        len: tokens.len(),
    }
}

fn cider_sim(cand: &CiderVec<'_>, reference: &CiderVec<'_>, sigma: f64) -> f64 {
    let delta = cand.len as f64 - reference.len as f64;
    let penalty = libm::exp(-(delta * delta) / (2.0 * sigma * sigma));
    let mut total = 0.0;
    for n in 0..4 {
        let mut dot = 0.0;
        for (g, &w) in &cand.weights[n] {
            if let Some(&rw) = reference.weights[n].get(g) {
                dot += w.min(rw) * rw;
            }
        }
        if cand.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            total += dot / (cand.norms[n] * reference.norms[n]) * penalty;
        }
    }
    total / 4.0
}

/// Per-sample CIDEr-D scores. Document frequencies come from the references
/// of this corpus, so a single-sample corpus scores 0.
pub fn cider_per_sample(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<Vec<f64>> {
    check_corpus(candidates, references)?;
    let mut df: BTreeMap<Ngram<'_>, usize> = BTreeMap::new();
    for refs in references {
        let mut seen: BTreeSet<Ngram<'_>> = BTreeSet::new();
        for r in refs {
            for n in 1..=4 {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = libm::log(candidates.len() as f64);
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| {
            let cv = cider_vec(c, &df, log_n);
            let sum: f64 = refs.iter().map(|r| cider_sim(&cv, &cider_vec(r, &df, log_n), CIDER_SIGMA)).sum();
            10.0 * sum / refs.len() as f64
        })
        .collect())
}

pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    let per = cider_per_sample(candidates, references)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusEval {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
}

/// Tokenize and score a corpus of raw caption strings.
pub fn evaluate_corpus(candidates: &[String], references: &[Vec<String>]) -> Result<CorpusEval> {
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let refs: Vec<Vec<Vec<String>>> = references.iter().map(|rs| rs.iter().map(|r| tokenize(r)).collect()).collect();
    evaluate_tokenized(&cands, &refs)
}

pub fn evaluate_tokenized(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<CorpusEval> {
    let stats = bleu_stats(candidates, references)?;
    let bleu = [1, 2, 3, 4].map(|n| bleu_from_stats(&stats, n));
    Ok(CorpusEval {
        bleu,
        rouge_l: rouge_l(candidates, references, ROUGE_BETA)?,
        cider: cider(candidates, references)?,
    })
}

/// Column headers of a results table; the embedding-based columns are
/// always rendered as `--`.
pub const TABLE_COLUMNS: [&str; 8] = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr", "CLIP-S", "RefCLIP-S"];

/// Pipe-delimited results table with one row per `(label, eval)`.
pub fn format_table(first_column: &str, rows: &[(String, CorpusEval)]) -> String {
    format_metric_table(first_column, rows, true)
}

/// As [`format_table`], optionally without the embedding-based columns.
pub fn format_metric_table(first_column: &str, rows: &[(String, CorpusEval)], embedding_columns: bool) -> String {
    let columns = if embedding_columns { &TABLE_COLUMNS[..] } else { &TABLE_COLUMNS[..6] };
    let mut out = String::new();
    let _ = write!(out, "| {first_column} |");
    for c in columns {
        let _ = write!(out, " {c} |");
    }
    out.push('\n');
    out.push_str(&"|---".repeat(columns.len() + 1));
    out.push_str("|\n");
    for (label, e) in rows {
        let _ = write!(out, "| {label} |");
        for v in e.bleu.iter().chain([&e.rouge_l, &e.cider]) {
            let _ = write!(out, " {v:.4} |");
        }
        out.push_str(if embedding_columns { " -- | -- |\n" } else { "\n" });
    }
    out
}

/// Embedding-based caption similarity in the CLIP-S family.
pub trait EmbeddingSimilarity {
    fn score(&self, candidate: &str, image_embedding: &[f64], reference_embeddings: &[Vec<f64>]) -> Result<f64>;
}

/// Placeholder scorer; embedding metrics need a pretrained encoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnavailableEmbeddingScorer;

impl EmbeddingSimilarity for UnavailableEmbeddingScorer {
    fn score(&self, _: &str, _: &[f64], _: &[Vec<f64>]) -> Result<f64> {
        Err(Error::NotImplemented("requires pretrained encoder"))
    }
}
