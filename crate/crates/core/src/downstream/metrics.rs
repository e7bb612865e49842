use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::encoders::split_words;
use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counted as one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Validation("auroc needs one label per score".into()));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("auroc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextMetrics {
    pub bleu4: f64,
    pub rouge_l: f64,
}

const ROUGE_BETA2: f64 = 1.2;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 with uniform weights and brevity penalty, unsmoothed.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<String>]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=4 {
            let refs = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(cand, n) {
                matches[n - 1] += count.min(refs.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if matches.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|i| (matches[i] as f64 / totals[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    bp * log_p.exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
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

/// Sentence-level ROUGE-L F-measure.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    (1.0 + ROUGE_BETA2) * p * r / (r + ROUGE_BETA2 * p)
}

/// Corpus BLEU-4 and mean ROUGE-L over tokenized strings.
pub fn text_metrics<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<TextMetrics> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::Validation(format!(
            "text metrics need equal nonempty lists, got {} and {}",
            candidates.len(),
            references.len()
        )));
    }
    let cands: Vec<Vec<String>> = candidates.iter().map(|s| split_words(s.as_ref())).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|s| split_words(s.as_ref())).collect();
    let rouge = cands.iter().zip(&refs).map(|(c, r)| rouge_l(c, r)).sum::<f64>() / cands.len() as f64;
    Ok(TextMetrics {
        bleu4: bleu4(&cands, &refs),
        rouge_l: rouge,
    })
}

/// All-point interpolated average precision of `(confidence, is_true_positive)`
/// detections against `num_ground_truth` objects.
pub fn average_precision(detections: &[(f64, bool)], num_ground_truth: usize) -> f64 {
    if num_ground_truth == 0 {
        return 0.0;
    }
    let mut dets = detections.to_vec();
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(dets.len());
    for (i, &(_, hit)) in dets.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / num_ground_truth as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (recall, _) = points[i];
        if recall > prev_recall {
            let best = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (recall - prev_recall) * best;
            prev_recall = recall;
        }
    }
    ap
}
