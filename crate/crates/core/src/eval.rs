//! Ranking metrics per impression and their macro average.

use std::cmp::Ordering;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{build_batch, BatchMode, EncodedCorpus, Impression};
use crate::error::{Error, Result};
use crate::model::{encode_corpus_vectors, score_row, ModelParams};

/// Scores and click labels of one impression, in candidate order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub impression_id: String,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl RankingResult {
    pub fn new(impression_id: impl Into<String>, scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim("ranking result", &[scores.len()], &[labels.len()]));
        }
        Ok(Self {
            impression_id: impression_id.into(),
            scores,
            labels,
        })
    }

    fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Candidate indices by descending score, ties by original index.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx
    }
}

/// Mann–Whitney AUC with tied scores counted as one half.
pub fn auc(r: &RankingResult) -> Result<f64> {
    let p = r.positives();
    let n = r.labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::MetricUndefined(format!(
            "impression {} needs both clicked and non-clicked candidates for AUC",
            r.impression_id
        )));
    }
    let mut idx: Vec<usize> = (0..r.scores.len()).collect();
    idx.sort_by(|&a, &b| r.scores[a].partial_cmp(&r.scores[b]).unwrap_or(Ordering::Equal));
    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && r.scores[idx[j + 1]] == r.scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&c| r.labels[c]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn require_positive(r: &RankingResult) -> Result<()> {
    if r.positives() == 0 {
        return Err(Error::MetricUndefined(format!("impression {} has no clicked candidate", r.impression_id)));
    }
    Ok(())
}

/// Mean reciprocal rank of the clicked candidates.
pub fn mrr(r: &RankingResult) -> Result<f64> {
    require_positive(r)?;
    let order = r.order();
    let total: f64 = order
        .iter()
        .enumerate()
        .filter(|(_, &c)| r.labels[c])
        .map(|(rank, _)| 1.0 / (rank + 1) as f64)
        .sum();
    Ok(total / r.positives() as f64)
}

/// `DCG@k / IDCG@k` with binary gains and `1 / log₂(rank + 1)` discounts.
pub fn ndcg_at_k(r: &RankingResult, k: usize) -> Result<f64> {
    require_positive(r)?;
    let discount = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = r
        .order()
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &c)| r.labels[c])
        .map(|(rank, _)| discount(rank))
        .sum();
    let ideal: f64 = (0..r.positives().min(k)).map(discount).sum();
    Ok(dcg / ideal)
}

/// Macro-averaged metrics with counts of impressions left out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub impressions: usize,
    pub skipped_no_positive: usize,
    pub skipped_no_negative: usize,
}

impl MetricsReport {
    /// Single-line JSON record.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report fields serialize")
    }

    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let rows = [
            ("AUC", format!("{:.4}", self.auc)),
            ("MRR", format!("{:.4}", self.mrr)),
            ("nDCG@5", format!("{:.4}", self.ndcg5)),
            ("nDCG@10", format!("{:.4}", self.ndcg10)),
            ("impressions", self.impressions.to_string()),
            ("skipped (no click)", self.skipped_no_positive.to_string()),
            ("skipped (no non-click)", self.skipped_no_negative.to_string()),
        ];
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<width$}  {v:>8}\n")).collect()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Averages every metric over impressions with at least one clicked and
/// one non-clicked candidate.
pub fn aggregate(results: &[RankingResult]) -> Result<MetricsReport> {
    let mut sums = [0.0; 4];
    let mut report = MetricsReport {
        auc: 0.0,
        mrr: 0.0,
        ndcg5: 0.0,
        ndcg10: 0.0,
        impressions: 0,
        skipped_no_positive: 0,
        skipped_no_negative: 0,
    };
    for r in results {
        let p = r.positives();
        if p == 0 {
            report.skipped_no_positive += 1;
            continue;
        }
        if p == r.labels.len() {
            report.skipped_no_negative += 1;
            continue;
        }
        sums[0] += auc(r)?;
        sums[1] += mrr(r)?;
        sums[2] += ndcg_at_k(r, 5)?;
        sums[3] += ndcg_at_k(r, 10)?;
        report.impressions += 1;
    }
    if report.impressions == 0 {
        return Err(Error::MetricUndefined("no impression has both clicked and non-clicked candidates".into()));
    }
    let n = report.impressions as f64;
    report.auc = sums[0] / n;
    report.mrr = sums[1] / n;
    report.ndcg5 = sums[2] / n;
    report.ndcg10 = sums[3] / n;
    Ok(report)
}

/// Scores every candidate of every impression. Impressions with an empty
/// history are scored against the zero session vector.
pub fn rank_impressions(params: &ModelParams, impressions: &[Impression], corpus: &EncodedCorpus, history_len: usize) -> Result<Vec<RankingResult>> {
    let batch = build_batch(impressions, corpus, history_len, BatchMode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
    let vectors = encode_corpus_vectors(params, corpus)?;
    batch
        .rows
        .iter()
        .map(|row| {
            let scores = score_row(params, &vectors, row)?;
            RankingResult::new(row.impression_id.clone(), scores, row.labels.clone())
        })
        .collect()
}

pub fn evaluate(params: &ModelParams, impressions: &[Impression], corpus: &EncodedCorpus, history_len: usize) -> Result<MetricsReport> {
    aggregate(&rank_impressions(params, impressions, corpus, history_len)?)
}
