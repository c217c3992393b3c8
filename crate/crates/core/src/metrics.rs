//! Text-generation metrics: unigram F1, BLEU-1..4 with composite, ROUGE-1/2/L,
//! corpus-level distinct n-grams, and persona-overlap reporting.
//!
//! Everything operates on lowercased whitespace/punctuation tokens, matching
//! the tokenizer, so metric tokenization and model tokenization agree.
//! BLEU doubles as the textual-similarity gate for the contrastive loss:
//! [`context_similarity`] is the symmetric sentence-level form on a 0-100
//! scale.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SptError};
use crate::text::tokenize;

const BLEU_MAX_N: usize = 4;
const BLEU_EPS: f64 = 1e-9;

/// Sentence- vs corpus-level BLEU aggregation. Sentence-level mean is the
/// default; the choice is recorded in every [`MetricReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BleuMode {
    #[default]
    Sentence,
    Corpus,
}

/// Harmonic mean of token-level multiset precision and recall, in [0, 1].
pub fn unigram_f1(pred: &[String], reference: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(SptError::Contract(
            "unigram_f1: reference must be non-empty".into(),
        ));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *ref_counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = ref_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return Ok(0.0);
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map = HashMap::new();
    if n == 0 || tokens.len() < n {
        return map;
    }
    for i in 0..=tokens.len() - n {
        *map.entry(&tokens[i..i + n]).or_insert(0) += 1;
    }
    map
}

/// Clipped modified n-gram precision: (matched, total) candidate n-grams.
fn clipped_counts(pred: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let pred_ngrams = ngram_counts(pred, n);
    let ref_ngrams = ngram_counts(reference, n);
    let mut matched = 0;
    let mut total = 0;
    for (ng, &count) in &pred_ngrams {
        total += count;
        matched += count.min(ref_ngrams.get(ng).copied().unwrap_or(0));
    }
    (matched, total)
}

/// BLEU with per-n components, all on the 0-100 scale.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct BleuScore {
    pub bleu: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
}

/// Sentence-level BLEU: clipped n-gram precision for n <= 4, epsilon
/// smoothing for zero counts, geometric mean, and brevity penalty
/// `exp(1 - |ref|/|pred|)` when the prediction is shorter than the
/// reference. An empty prediction scores 0 rather than erroring.
pub fn bleu(pred: &[String], reference: &[String]) -> Result<BleuScore> {
    if reference.is_empty() {
        return Err(SptError::Contract(
            "bleu: reference must be non-empty".into(),
        ));
    }
    if pred.is_empty() {
        return Ok(BleuScore::default());
    }
    let mut precisions = [0.0f64; BLEU_MAX_N];
    for (i, p) in precisions.iter_mut().enumerate() {
        let (matched, total) = clipped_counts(pred, reference, i + 1);
        *p = if total == 0 {
            BLEU_EPS
        } else {
            (matched as f64 + BLEU_EPS) / (total as f64 + BLEU_EPS)
        };
    }
    let bp = brevity_penalty(pred.len(), reference.len());
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_MAX_N as f64;
    Ok(BleuScore {
        bleu: 100.0 * bp * log_mean.exp(),
        bleu_1: 100.0 * precisions[0],
        bleu_2: 100.0 * precisions[1],
        bleu_3: 100.0 * precisions[2],
        bleu_4: 100.0 * precisions[3],
    })
}

fn brevity_penalty(pred_len: usize, ref_len: usize) -> f64 {
    if pred_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / pred_len as f64).exp()
    }
}

/// Corpus-level BLEU: n-gram counts pooled over all pairs before combining.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<String>)]) -> Result<BleuScore> {
    if pairs.is_empty() {
        return Err(SptError::Contract("corpus_bleu: no pairs".into()));
    }
    let mut matched = [0usize; BLEU_MAX_N];
    let mut total = [0usize; BLEU_MAX_N];
    let mut pred_len = 0usize;
    let mut ref_len = 0usize;
    for (pred, reference) in pairs {
        if reference.is_empty() {
            return Err(SptError::Contract(
                "corpus_bleu: reference must be non-empty".into(),
            ));
        }
        pred_len += pred.len();
        ref_len += reference.len();
        for n in 0..BLEU_MAX_N {
            let (m, t) = clipped_counts(pred, reference, n + 1);
            matched[n] += m;
            total[n] += t;
        }
    }
    if pred_len == 0 {
        return Ok(BleuScore::default());
    }
    let mut precisions = [0.0f64; BLEU_MAX_N];
    for n in 0..BLEU_MAX_N {
        precisions[n] = if total[n] == 0 {
            BLEU_EPS
        } else {
            (matched[n] as f64 + BLEU_EPS) / (total[n] as f64 + BLEU_EPS)
        };
    }
    let bp = brevity_penalty(pred_len, ref_len);
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_MAX_N as f64;
    Ok(BleuScore {
        bleu: 100.0 * bp * log_mean.exp(),
        bleu_1: 100.0 * precisions[0],
        bleu_2: 100.0 * precisions[1],
        bleu_3: 100.0 * precisions[2],
        bleu_4: 100.0 * precisions[3],
    })
}

/// The textual-similarity gate for the contrastive loss: symmetric
/// sentence-level BLEU of the two raw context texts, 0-100.
pub fn context_similarity(a: &str, b: &str) -> f64 {
    let ta = tokenize(a);
    let tb = tokenize(b);
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let ab = bleu(&ta, &tb).map(|s| s.bleu).unwrap_or(0.0);
    let ba = bleu(&tb, &ta).map(|s| s.bleu).unwrap_or(0.0);
    ab.max(ba)
}

/// ROUGE F-measures in [0, 1].
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

pub fn rouge(pred: &[String], reference: &[String]) -> Result<RougeScores> {
    if reference.is_empty() {
        return Err(SptError::Contract(
            "rouge: reference must be non-empty".into(),
        ));
    }
    Ok(RougeScores {
        rouge1: rouge_n(pred, reference, 1),
        rouge2: rouge_n(pred, reference, 2),
        rouge_l: rouge_lcs(pred, reference),
    })
}

fn rouge_n(pred: &[String], reference: &[String], n: usize) -> f64 {
    let (matched, pred_total) = clipped_counts(pred, reference, n);
    let ref_total = reference.len().saturating_sub(n - 1);
    f_measure(matched as f64, pred_total as f64, ref_total as f64)
}

fn rouge_lcs(pred: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_length(pred, reference);
    f_measure(lcs as f64, pred.len() as f64, reference.len() as f64)
}

fn f_measure(matched: f64, pred_total: f64, ref_total: f64) -> f64 {
    if matched == 0.0 || pred_total == 0.0 || ref_total == 0.0 {
        return 0.0;
    }
    let p = matched / pred_total;
    let r = matched / ref_total;
    2.0 * p * r / (p + r)
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            curr[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Corpus-level distinct-n: unique n-grams over total n-grams across all
/// predictions, in (0, 1]. Errors when no prediction yields an n-gram.
pub fn distinct_n(predictions: &[Vec<String>], n: usize) -> Result<f64> {
    let mut seen: HashMap<&[String], ()> = HashMap::new();
    let mut total = 0usize;
    for pred in predictions {
        if pred.len() < n {
            continue;
        }
        for i in 0..=pred.len() - n {
            seen.entry(&pred[i..i + n]).or_insert(());
            total += 1;
        }
    }
    if total == 0 {
        return Err(SptError::Contract(format!(
            "distinct_n: no {}-grams in any prediction",
            n
        )));
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Aggregate report over a prediction/reference corpus. BLEU, ROUGE and
/// DIST values are on the 0-100 scale; `f1` is on 0-1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1: f64,
    pub bleu: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub dist_avg: f64,
    pub bleu_mode: BleuMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu_to_persona: Option<BleuScore>,
    pub examples: usize,
}

impl MetricReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let mut row = |name: &str, value: f64| {
            out.push_str(&format!("  {:<16} {:>8.4}\n", name, value));
        };
        row("F1", self.f1);
        row("BLEU", self.bleu);
        row("BLEU-1", self.bleu_1);
        row("BLEU-2", self.bleu_2);
        row("BLEU-3", self.bleu_3);
        row("BLEU-4", self.bleu_4);
        row("ROUGE-1", self.rouge1);
        row("ROUGE-2", self.rouge2);
        row("ROUGE-L", self.rouge_l);
        row("DIST-1", self.dist1);
        row("DIST-2", self.dist2);
        row("DIST-AVG", self.dist_avg);
        if let Some(p) = &self.bleu_to_persona {
            row("BLEU->persona", p.bleu);
        }
        out.push_str(&format!(
            "  {:<16} {:>8}\n  {:<16} {} examples\n",
            "BLEU mode",
            match self.bleu_mode {
                BleuMode::Sentence => "sentence",
                BleuMode::Corpus => "corpus",
            },
            "evaluated on",
            self.examples
        ));
        out
    }
}

/// Evaluates decoded predictions against references, with optional persona
/// texts for overlap reporting. All inputs are raw strings; tokenization
/// happens here.
pub fn evaluate_corpus(
    predictions: &[String],
    references: &[String],
    personas: Option<&[String]>,
    bleu_mode: BleuMode,
) -> Result<MetricReport> {
    if predictions.len() != references.len() {
        return Err(SptError::Contract(format!(
            "evaluate_corpus: {} predictions vs {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(SptError::Contract("evaluate_corpus: empty corpus".into()));
    }
    let pred_tokens: Vec<Vec<String>> = predictions.iter().map(|s| tokenize(s)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|s| tokenize(s)).collect();

    let n = predictions.len() as f64;
    let mut f1 = 0.0;
    let mut rouge_sum = RougeScores::default();
    for (p, r) in pred_tokens.iter().zip(&ref_tokens) {
        f1 += unigram_f1(p, r)?;
        let rs = rouge(p, r)?;
        rouge_sum.rouge1 += rs.rouge1;
        rouge_sum.rouge2 += rs.rouge2;
        rouge_sum.rouge_l += rs.rouge_l;
    }

    let bleu_score = match bleu_mode {
        BleuMode::Sentence => {
            let mut acc = BleuScore::default();
            for (p, r) in pred_tokens.iter().zip(&ref_tokens) {
                let s = bleu(p, r)?;
                acc.bleu += s.bleu;
                acc.bleu_1 += s.bleu_1;
                acc.bleu_2 += s.bleu_2;
                acc.bleu_3 += s.bleu_3;
                acc.bleu_4 += s.bleu_4;
            }
            BleuScore {
                bleu: acc.bleu / n,
                bleu_1: acc.bleu_1 / n,
                bleu_2: acc.bleu_2 / n,
                bleu_3: acc.bleu_3 / n,
                bleu_4: acc.bleu_4 / n,
            }
        }
        BleuMode::Corpus => {
            let pairs: Vec<(Vec<String>, Vec<String>)> = pred_tokens
                .iter()
                .cloned()
                .zip(ref_tokens.iter().cloned())
                .collect();
            corpus_bleu(&pairs)?
        }
    };

    let dist1 = distinct_n(&pred_tokens, 1).unwrap_or(0.0) * 100.0;
    let dist2 = distinct_n(&pred_tokens, 2).unwrap_or(0.0) * 100.0;

    let bleu_to_persona = match personas {
        Some(personas) => Some(persona_overlap(predictions, personas)?),
        None => None,
    };

    Ok(MetricReport {
        f1: f1 / n,
        bleu: bleu_score.bleu,
        bleu_1: bleu_score.bleu_1,
        bleu_2: bleu_score.bleu_2,
        bleu_3: bleu_score.bleu_3,
        bleu_4: bleu_score.bleu_4,
        rouge1: 100.0 * rouge_sum.rouge1 / n,
        rouge2: 100.0 * rouge_sum.rouge2 / n,
        rouge_l: 100.0 * rouge_sum.rouge_l / n,
        dist1,
        dist2,
        dist_avg: (dist1 + dist2) / 2.0,
        bleu_mode,
        bleu_to_persona,
        examples: predictions.len(),
    })
}

/// Mean sentence-level BLEU of each prediction against its own persona
/// text; high values flag persona parroting.
pub fn persona_overlap(predictions: &[String], personas: &[String]) -> Result<BleuScore> {
    if predictions.len() != personas.len() {
        return Err(SptError::Contract(format!(
            "persona_overlap: {} predictions vs {} personas",
            predictions.len(),
            personas.len()
        )));
    }
    let mut acc = BleuScore::default();
    for (pred, persona) in predictions.iter().zip(personas) {
        let s = bleu(&tokenize(pred), &tokenize(persona))?;
        acc.bleu += s.bleu;
        acc.bleu_1 += s.bleu_1;
        acc.bleu_2 += s.bleu_2;
        acc.bleu_3 += s.bleu_3;
        acc.bleu_4 += s.bleu_4;
    }
    let n = predictions.len() as f64;
    Ok(BleuScore {
        bleu: acc.bleu / n,
        bleu_1: acc.bleu_1 / n,
        bleu_2: acc.bleu_2 / n,
        bleu_3: acc.bleu_3 / n,
        bleu_4: acc.bleu_4 / n,
    })
}
