//! Ranking and rating metrics over the server item table, and the metrics log.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeedbackKind, InteractionDataset, Split};
use crate::error::{FairError, Result};
use crate::model::dot;

/// NDCG@k over all items outside `train_positives`, with binary gain for
/// `test_positives`. Ties in score rank the lower item id first.
pub fn ndcg_at_k(
    scores: &[f64],
    train_positives: &[usize],
    test_positives: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(FairError::invalid("k must be >= 1"));
    }
    if test_positives.is_empty() {
        return Err(FairError::invalid("ndcg needs at least one test positive"));
    }
    let n = scores.len();
    let mut excluded = vec![false; n];
    for &i in train_positives {
        if i >= n {
            return Err(FairError::OutOfRange { index: i, limit: n });
        }
        excluded[i] = true;
    }
    if excluded.iter().all(|&e| e) {
        return Err(FairError::invalid("no candidate items left to rank"));
    }
    let mut relevant: Vec<usize> = Vec::with_capacity(test_positives.len());
    for &i in test_positives {
        if i >= n {
            return Err(FairError::OutOfRange { index: i, limit: n });
        }
        if !excluded[i] && !relevant.contains(&i) {
            relevant.push(i);
        }
    }

    let beats = |c: usize, t: usize| match scores[c].total_cmp(&scores[t]) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => c < t,
        std::cmp::Ordering::Less => false,
    };
    let mut dcg = 0.0;
    for &t in &relevant {
        // 1-based rank among candidates.
        let rank = 1
            + (0..n)
                .filter(|&c| !excluded[c] && c != t && beats(c, t))
                .count();
        if rank <= k {
            dcg += 1.0 / ((rank + 1) as f64).log2();
        }
    }
    let ideal: f64 = (1..=k.min(test_positives.len()))
        .map(|r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(dcg / ideal)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub metric: Metric,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Ndcg(usize),
    Mse,
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Metric::Ndcg(k) => format!("ndcg@{k}"),
            Metric::Mse => "mse".to_string(),
        }
    }
}

/// Scores the server item table (`theta`, row-major `num_items x dim`)
/// against each user's own user vector. Implicit data: mean NDCG@k over users
/// with test items. Explicit data: MSE over all test records.
pub fn evaluate_server(
    theta: &[f64],
    dim: usize,
    user_vecs: &[Vec<f64>],
    ds: &InteractionDataset,
    k: usize,
) -> Result<Evaluation> {
    if theta.len() != ds.num_items * dim {
        return Err(FairError::DimensionMismatch {
            expected: ds.num_items * dim,
            actual: theta.len(),
        });
    }
    if user_vecs.len() != ds.num_users {
        return Err(FairError::DimensionMismatch {
            expected: ds.num_users,
            actual: user_vecs.len(),
        });
    }
    let row = |i: usize| &theta[i * dim..(i + 1) * dim];
    match ds.kind {
        FeedbackKind::Implicit => {
            let train = ds.items_by_user(Split::Train);
            let test = ds.items_by_user(Split::Test);
            let per_user: Vec<Result<Option<f64>>> = (0..ds.num_users)
                .into_par_iter()
                .map(|u| {
                    if test[u].is_empty() {
                        return Ok(None);
                    }
                    let scores: Vec<f64> = (0..ds.num_items)
                        .map(|i| dot(&user_vecs[u], row(i)))
                        .collect();
                    ndcg_at_k(&scores, &train[u], &test[u], k).map(Some)
                })
                .collect();
            let mut total = 0.0;
            let mut count = 0usize;
            for v in per_user {
                if let Some(x) = v? {
                    total += x;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(FairError::NoEvaluableUsers);
            }
            Ok(Evaluation {
                metric: Metric::Ndcg(k),
                value: total / count as f64,
            })
        }
        FeedbackKind::Explicit => {
            let mut total = 0.0;
            let mut count = 0usize;
            for r in ds.test() {
                let err = dot(&user_vecs[r.user], row(r.item)) - r.rating;
                total += err * err;
                count += 1;
            }
            if count == 0 {
                return Err(FairError::NoEvaluableUsers);
            }
            Ok(Evaluation {
                metric: Metric::Mse,
                value: total / count as f64,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub round: usize,
    pub mode: String,
    pub scheme: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Ordered per-round metrics with run provenance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, record: MetricRecord) {
        debug_assert!(record.value.is_finite(), "non-finite metric {record:?}");
        debug_assert!(
            self.records
                .last()
                .is_none_or(|last| last.round <= record.round),
            "rounds must be non-decreasing"
        );
        self.records.push(record);
    }

    pub fn extend(&mut self, other: MetricsLog) {
        for r in other.records {
            self.push(r);
        }
    }

    pub fn values(&self, metric: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| (r.round, r.value))
            .collect()
    }

    pub fn last_value(&self, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.metric == metric)
            .map(|r| r.value)
    }

    /// `round,mode,scheme,seed,metric,value`, LF line endings.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "round,mode,scheme,seed,metric,value")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.round, r.mode, r.scheme, r.seed, r.metric, r.value
            )?;
        }
        out.flush()
    }
}
