//! BLEU and ROUGE-L over whitespace tokens, and corpus-level triplet
//! evaluation reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg_schema::{kg_diff, to_metric_string, DiffReport, KnowledgeGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("invalid metric input: {0}")]
    Input(String),
    #[error("prediction {index} has id {pred:?} but gold has {gold:?}")]
    Alignment { index: usize, pred: String, gold: String },
}

type Result<T, E = MetricError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuMode {
    /// Clipped counts and lengths summed over all pairs before the formula.
    #[default]
    Corpus,
    /// Mean of per-pair scores.
    Sentence,
    /// Per-pair scores with every precision floored at 1e-9.
    SentenceSmoothed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuResult {
    pub bleu: f64,
    /// `p_1 .. p_N`; the mean over pairs in the sentence modes.
    pub precisions: Vec<f64>,
    /// The mean over pairs in the sentence modes.
    pub brevity_penalty: f64,
    pub max_n: usize,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// `(clipped matches, candidate n-grams)` for one order.
fn clipped<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matched = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// `exp(1 − r/c)` when `c < r`, 1 otherwise, and 0 for an empty candidate.
pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len >= reference_len {
        1.0
    } else if candidate_len == 0 {
        0.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

fn combine(precisions: &[f64], bp: f64) -> f64 {
    if precisions.iter().any(|&p| p <= 0.0) {
        return 0.0;
    }
    let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
    bp * mean_log.exp()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize, mode: BleuMode) -> Result<BleuResult> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(MetricError::Input(format!(
            "need equal non-empty lists, got {} candidates and {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(MetricError::Input("max n-gram order must be at least 1".into()));
    }
    let candidate_len = candidates.iter().map(Vec::len).sum();
    let reference_len = references.iter().map(Vec::len).sum();
    match mode {
        BleuMode::Corpus => {
            let precisions: Vec<f64> = (1..=max_n)
                .map(|n| {
                    let (m, t) = candidates
                        .iter()
                        .zip(references)
                        .map(|(c, r)| clipped(c, r, n))
                        .fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
                    ratio(m, t)
                })
                .collect();
            let bp = brevity_penalty(candidate_len, reference_len);
            Ok(BleuResult {
                bleu: combine(&precisions, bp),
                precisions,
                brevity_penalty: bp,
                max_n,
                candidate_len,
                reference_len,
            })
        }
        BleuMode::Sentence | BleuMode::SentenceSmoothed => {
            let pairs = candidates.len() as f64;
            let mut score = 0.0;
            let mut bp_sum = 0.0;
            let mut p_sum = vec![0.0; max_n];
            for (c, r) in candidates.iter().zip(references) {
                let mut ps: Vec<f64> = (1..=max_n)
                    .map(|n| {
                        let (m, t) = clipped(c, r, n);
                        ratio(m, t)
                    })
                    .collect();
                p_sum.iter_mut().zip(&ps).for_each(|(a, b)| *a += b);
                let bp = brevity_penalty(c.len(), r.len());
                bp_sum += bp;
                if mode == BleuMode::SentenceSmoothed && !c.is_empty() {
                    ps.iter_mut().for_each(|p| *p = p.max(1e-9));
                }
                score += combine(&ps, bp);
            }
            Ok(BleuResult {
                bleu: score / pairs,
                precisions: p_sum.into_iter().map(|p| p / pairs).collect(),
                brevity_penalty: bp_sum / pairs,
                max_n,
                candidate_len,
                reference_len,
            })
        }
    }
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RougeResult {
    pub rouge_l: f64,
    pub lcs: usize,
    pub recall: f64,
    pub precision: f64,
    pub beta: f64,
}

/// `(1 + β²)·R·P / (R + β²·P)` with `R = LCS/|reference|`, `P = LCS/|candidate|`.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T], beta: f64) -> Result<RougeResult> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(MetricError::Input(format!("beta must be positive, got {beta}")));
    }
    let lcs = lcs_len(candidate, reference);
    let recall = ratio(lcs, reference.len());
    let precision = ratio(lcs, candidate.len());
    let b2 = beta * beta;
    let rouge_l = if lcs == 0 {
        0.0
    } else {
        (1.0 + b2) * recall * precision / (recall + b2 * precision)
    };
    Ok(RougeResult {
        rouge_l,
        lcs,
        recall,
        precision,
        beta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub beta: f64,
    pub lowercase: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beta: 1.2,
            lowercase: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRow {
    pub id: String,
    /// Sentence-level BLEU-1..4 as percentages.
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub correct: usize,
    pub hallucinated: usize,
    pub missed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Corpus BLEU-1..4 as percentages.
    pub bleu: [f64; 4],
    /// Mean sentence ROUGE-L as a percentage.
    pub rouge_l: f64,
    pub correct: usize,
    pub hallucinated: usize,
    pub missed: usize,
    /// Share of samples whose deduplicated prediction equals the gold set.
    pub exact_match: f64,
    pub rows: Vec<SampleRow>,
}

pub const REPORT_COLUMNS: [&str; 5] = ["B1", "B2", "B3", "B4", "RL"];

fn metric_tokens(kg: &KnowledgeGraph, lowercase: bool) -> Vec<String> {
    let s = to_metric_string(kg);
    let s = if lowercase { s.to_lowercase() } else { s };
    s.split_whitespace().map(str::to_string).collect()
}

fn pct(x: f64) -> f64 {
    (x * 100.0 * 100.0).round() / 100.0
}

pub fn evaluate_corpus(preds: &[KnowledgeGraph], golds: &[KnowledgeGraph], cfg: &EvalConfig) -> Result<EvalReport> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(MetricError::Input(format!(
            "need equal non-empty lists, got {} predictions and {} gold graphs",
            preds.len(),
            golds.len()
        )));
    }
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.source_id != g.source_id {
            return Err(MetricError::Alignment {
                index: i,
                pred: p.source_id.clone(),
                gold: g.source_id.clone(),
            });
        }
    }
    let cands: Vec<Vec<String>> = preds.iter().map(|k| metric_tokens(k, cfg.lowercase)).collect();
    let refs: Vec<Vec<String>> = golds.iter().map(|k| metric_tokens(k, cfg.lowercase)).collect();
    let mut bleu_scores = [0.0; 4];
    for (n, slot) in bleu_scores.iter_mut().enumerate() {
        *slot = pct(bleu(&cands, &refs, n + 1, BleuMode::Corpus)?.bleu);
    }
    let mut rows = Vec::with_capacity(preds.len());
    let (mut rl_sum, mut exact) = (0.0, 0usize);
    let (mut correct, mut hallucinated, mut missed) = (0, 0, 0);
    for ((p, g), (c, r)) in preds.iter().zip(golds).zip(cands.iter().zip(&refs)) {
        let rl = rouge_l(c, r, cfg.beta)?.rouge_l;
        rl_sum += rl;
        let DiffReport {
            correct: ok,
            hallucinated: bad,
            missed: miss,
        } = kg_diff(p, g);
        if bad.is_empty() && miss.is_empty() {
            exact += 1;
        }
        correct += ok.len();
        hallucinated += bad.len();
        missed += miss.len();
        let pair_c = std::slice::from_ref(c);
        let pair_r = std::slice::from_ref(r);
        let mut b = [0.0; 4];
        for (n, slot) in b.iter_mut().enumerate() {
            *slot = pct(bleu(pair_c, pair_r, n + 1, BleuMode::Sentence)?.bleu);
        }
        rows.push(SampleRow {
            id: p.source_id.clone(),
            bleu: b,
            rouge_l: pct(rl),
            correct: ok.len(),
            hallucinated: bad.len(),
            missed: miss.len(),
        });
    }
    let n = preds.len() as f64;
    Ok(EvalReport {
        bleu: bleu_scores,
        rouge_l: pct(rl_sum / n),
        correct,
        hallucinated,
        missed,
        exact_match: pct(exact as f64 / n),
        rows,
    })
}

impl EvalReport {
    /// Header plus one summary line.
    pub fn to_csv(&self) -> String {
        format!(
            "B1,B2,B3,B4,RL,correct,hallucinated,missed,exact_match\n{:.2},{:.2},{:.2},{:.2},{:.2},{},{},{},{:.2}\n",
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.rouge_l,
            self.correct,
            self.hallucinated,
            self.missed,
            self.exact_match
        )
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("id,B1,B2,B3,B4,RL,correct,hallucinated,missed\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.2},{:.2},{:.2},{:.2},{:.2},{},{},{}",
                r.id, r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.rouge_l, r.correct, r.hallucinated, r.missed
            );
        }
        s
    }

    /// Aligned table with an optional leading model column.
    pub fn to_table(&self, model: &str) -> String {
        format_table(&[(model.to_string(), self)])
    }
}

/// Aligned plain-text table with one row per labelled report.
pub fn format_table(rows: &[(String, &EvalReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<name_w$}", "Model");
    for c in REPORT_COLUMNS {
        let _ = write!(s, " {c:>7}");
    }
    s.push_str("  correct  halluc.   missed    exact\n");
    for (name, r) in rows {
        let _ = write!(s, "{name:<name_w$}");
        for v in r.bleu.iter().chain([&r.rouge_l]) {
            let _ = write!(s, " {v:>7.2}");
        }
        let _ = writeln!(
            s,
            "  {:>7}  {:>7}  {:>7}  {:>7.2}",
            r.correct, r.hallucinated, r.missed, r.exact_match
        );
    }
    s
}

/// One line per triplet: `+` correct, `!` hallucinated, `-` missed.
pub fn render_diff(diff: &DiffReport) -> String {
    let mut s = String::new();
    for (mark, list) in [("+", &diff.correct), ("!", &diff.hallucinated), ("-", &diff.missed)] {
        for t in list {
            let _ = writeln!(s, "{mark} {t}");
        }
    }
    s
}
