//! Classification scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Auc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Auc => "auc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "auc" => Ok(Metric::Auc),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

fn argmax(row: &[f64]) -> usize {
    // first maximum wins
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn accuracy(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::Scoring(format!("{} predictions for {} labels", probabilities.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Scoring("nothing to score".into()));
    }
    let correct = probabilities.iter().zip(labels).filter(|(p, &l)| argmax(p) == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Computed from midranks in `O(n log n)`.
pub fn auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::Scoring(format!("{} scores for {} labels", scores.len(), positives.len())));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Scoring("AUC needs both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| positives[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Score class-probability rows against labels. AUC uses the probability of
/// class 1 and treats label 1 as positive.
pub fn score(probabilities: &[Vec<f64>], labels: &[usize], metric: Metric) -> Result<f64> {
    match metric {
        Metric::Accuracy => accuracy(probabilities, labels),
        Metric::Auc => {
            if probabilities.len() != labels.len() {
                return Err(Error::Scoring(format!(
                    "{} predictions for {} labels",
                    probabilities.len(),
                    labels.len()
                )));
            }
            let scores: Vec<f64> = probabilities.iter().map(|p| p.get(1).copied().unwrap_or(0.0)).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            auc(&scores, &pos)
        }
    }
}
