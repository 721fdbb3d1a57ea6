//! Evaluation metrics: bidirectional retrieval accuracy and recall@k, MAE,
//! smoothed sentence BLEU, ROUGE-n and ROUGE-L.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;

use crate::encoders::vocab::RESERVED;
use crate::encoders::words;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Direction {
    #[serde(rename = "molecule->text")]
    MoleculeToText,
    #[serde(rename = "text->molecule")]
    TextToMolecule,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::MoleculeToText => "molecule->text",
            Direction::TextToMolecule => "text->molecule",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// Fraction of queries whose counterpart ranks first.
    pub accuracy: f64,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub num_queries: usize,
}

fn unit_rows(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(r.iter().map(|v| v / n).collect())
            } else {
                Err(Error::DegenerateEmbedding { row: i })
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 1-based rank of candidate `i` for every query `i`, by cosine similarity
/// descending with ties going to the lower candidate index.
pub fn true_ranks(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Result<Vec<usize>> {
    if queries.len() != candidates.len() || queries.is_empty() {
        return Err(Error::contract(format!(
            "retrieval needs equal non-zero counts, got {} queries and {} candidates",
            queries.len(),
            candidates.len()
        )));
    }
    let dim = queries[0].len();
    if queries.iter().chain(candidates).any(|r| r.len() != dim) {
        return Err(Error::shape("retrieval", "embeddings differ in dimension"));
    }
    let q = unit_rows(queries)?;
    let c = unit_rows(candidates)?;
    Ok(q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let own = dot(qi, &c[i]);
            1 + c
                .iter()
                .enumerate()
                .filter(|&(j, cj)| {
                    let s = dot(qi, cj);
                    s > own || (s == own && j < i)
                })
                .count()
        })
        .collect())
}

fn report(direction: Direction, ranks: &[usize], ks: &[usize]) -> RetrievalReport {
    let n = ranks.len() as f64;
    let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    RetrievalReport {
        direction,
        accuracy: frac(1),
        recall_at_k: ks.iter().map(|&k| (k, frac(k))).collect(),
        num_queries: ranks.len(),
    }
}

/// Zero-shot retrieval with index-aligned pairs `g[i] ↔ t[i]`, in both
/// directions.
pub fn retrieval_eval(
    g: &[Vec<f64>],
    t: &[Vec<f64>],
    ks: &[usize],
) -> Result<[RetrievalReport; 2]> {
    if ks.contains(&0) {
        return Err(Error::contract("recall@k needs k ≥ 1"));
    }
    Ok([
        report(Direction::MoleculeToText, &true_ranks(g, t)?, ks),
        report(Direction::TextToMolecule, &true_ranks(t, g)?, ks),
    ])
}

/// Tab-separated table, one row per report.
pub fn retrieval_tsv(reports: &[RetrievalReport]) -> String {
    let ks: Vec<usize> = reports
        .first()
        .map(|r| r.recall_at_k.keys().copied().collect())
        .unwrap_or_default();
    let mut s = String::from("direction\tnum_queries\taccuracy");
    for k in &ks {
        s.push_str(&format!("\trecall@{k}"));
    }
    s.push('\n');
    for r in reports {
        s.push_str(&format!(
            "{}\t{}\t{}",
            r.direction, r.num_queries, r.accuracy
        ));
        for k in &ks {
            s.push_str(&format!(
                "\t{}",
                r.recall_at_k.get(k).copied().unwrap_or(f64::NAN)
            ));
        }
        s.push('\n');
    }
    s
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::contract(format!(
            "MAE needs equal non-zero lengths, got {} predictions and {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Surface tokens of a caption: the encoder word split without special
/// tokens.
pub fn metric_tokens(text: &str) -> Vec<String> {
    words(text)
        .into_iter()
        .filter(|w| !RESERVED.iter().any(|r| r.eq_ignore_ascii_case(w)))
        .collect()
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_overlap<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> usize {
    let r = ngram_counts(reference, n);
    ngram_counts(cand, n)
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

pub const BLEU_SMOOTHING: f64 = 1e-9;

/// Sentence BLEU-n against a single reference.
///
/// A zero precision is replaced by `BLEU_SMOOTHING` (over one, when the
/// candidate has no n-grams of that order). An empty candidate scores 0.
pub fn bleu_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    let c = candidate.len();
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for i in 1..=n {
        let total = (c + 1).saturating_sub(i);
        let hits = clipped_overlap(candidate, reference, i);
        let p = if hits == 0 {
            BLEU_SMOOTHING / total.max(1) as f64
        } else {
            hits as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let r = reference.len() as f64;
    let bp = (1.0 - r / c as f64).exp().min(1.0);
    bp * (log_sum / n as f64).exp()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-n F1. When neither side has an n-gram the score is 1 for equal
/// sequences and 0 otherwise.
pub fn rouge_n<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> f64 {
    let cn = (candidate.len() + 1).saturating_sub(n);
    let rn = (reference.len() + 1).saturating_sub(n);
    if cn == 0 || rn == 0 {
        let equal = candidate.len() == reference.len()
            && candidate
                .iter()
                .zip(reference)
                .all(|(a, b)| a.as_ref() == b.as_ref());
        return if cn == 0 && rn == 0 && equal {
            1.0
        } else {
            0.0
        };
    }
    let hits = clipped_overlap(candidate, reference, n) as f64;
    f1(hits / cn as f64, hits / rn as f64)
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return if candidate.is_empty() && reference.is_empty() {
            1.0
        } else {
            0.0
        };
    }
    let l = lcs_len(candidate, reference) as f64;
    f1(l / candidate.len() as f64, l / reference.len() as f64)
}

/// (ROUGE-1, ROUGE-2, ROUGE-L) F1 scores.
pub fn rouge<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> (f64, f64, f64) {
    (
        rouge_n(candidate, reference, 1),
        rouge_n(candidate, reference, 2),
        rouge_l(candidate, reference),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CaptionScores {
    pub bleu2: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

impl CaptionScores {
    pub fn to_tsv(&self) -> String {
        format!(
            "bleu2\tbleu4\trouge1\trouge2\trougeL\n{}\t{}\t{}\t{}\t{}\n",
            self.bleu2, self.bleu4, self.rouge1, self.rouge2, self.rouge_l
        )
    }
}

/// Corpus scores as the mean of sentence scores over caption texts.
pub fn caption_scores<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<CaptionScores> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::contract(format!(
            "caption scoring needs equal non-zero counts, got {} candidates and {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut s = [0.0; 5];
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (metric_tokens(c.as_ref()), metric_tokens(r.as_ref()));
        let (r1, r2, rl) = rouge(&c, &r);
        for (acc, v) in s
            .iter_mut()
            .zip([bleu_n(&c, &r, 2), bleu_n(&c, &r, 4), r1, r2, rl])
        {
            *acc += v;
        }
    }
    let n = candidates.len() as f64;
    Ok(CaptionScores {
        bleu2: s[0] / n,
        bleu4: s[1] / n,
        rouge1: s[2] / n,
        rouge2: s[3] / n,
        rouge_l: s[4] / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn worked_examples() {
        assert_eq!(bleu_n(&toks("the the the the"), &toks("the cat"), 1), 0.25);
        let rl = rouge_l(&toks("the cat sat"), &toks("the cat sat on the mat"));
        assert!((rl - 2.0 / 3.0).abs() < 1e-15);
        let same = toks("a small ring with a methyl group");
        assert_eq!(bleu_n(&same, &same, 4), 1.0);
        assert_eq!(rouge(&same, &same), (1.0, 1.0, 1.0));
        assert_eq!(bleu_n::<&str>(&[], &same, 2), 0.0);
        assert_eq!(rouge(&[], &same), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[0.0, 4.0]).unwrap(), 1.5);
        assert_eq!(mae(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn special_tokens_are_stripped() {
        assert_eq!(
            metric_tokens("[BOS] the Cat. [EOS]"),
            vec!["the", "cat", "."]
        );
    }

    #[test]
    fn degenerate_embedding_is_reported() {
        let g = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let err = retrieval_eval(&g, &g, &[1]).unwrap_err();
        assert!(matches!(err, Error::DegenerateEmbedding { row: 1 }));
    }

    #[test]
    fn tsv_layout() {
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let reps = retrieval_eval(&g, &g, &[1, 20]).unwrap();
        let tsv = retrieval_tsv(&reps);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(
            lines[0],
            "direction\tnum_queries\taccuracy\trecall@1\trecall@20"
        );
        assert_eq!(lines[1], "molecule->text\t2\t1\t1\t1");
    }
}
