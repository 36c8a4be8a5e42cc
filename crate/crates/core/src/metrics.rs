//! Cut-off metrics (precision, recall, F1, signed DCG), per-position reward
//! vectors and the non-neural truncation baselines.

use crate::data::{Dataset, Metric, RankedList, TruncationDecision};
use crate::error::{Error, Result};

fn check_k(list: &RankedList, k: usize) -> Result<()> {
    if k == 0 || k > list.len() {
        return Err(Error::CutOutOfRange { k, n: list.len() });
    }
    Ok(())
}

fn relevant_in_top(list: &RankedList, k: usize) -> usize {
    list.labels().take(k).filter(|r| r.is_relevant()).count()
}

// Shared by the prefix-sum path and the per-k path so both produce the
// same bits.
fn f1_from_counts(hits: usize, k: usize, n_relevant: usize) -> f64 {
    let p = hits as f64 / k as f64;
    let r = if n_relevant == 0 {
        0.0
    } else {
        hits as f64 / n_relevant as f64
    };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn discount(position: usize) -> f64 {
    ((position + 1) as f64).log2()
}

pub fn precision_at(list: &RankedList, k: usize) -> Result<f64> {
    check_k(list, k)?;
    Ok(relevant_in_top(list, k) as f64 / k as f64)
}

/// Zero when the list has no relevant documents.
pub fn recall_at(list: &RankedList, k: usize) -> Result<f64> {
    check_k(list, k)?;
    if list.n_relevant() == 0 {
        return Ok(0.0);
    }
    Ok(relevant_in_top(list, k) as f64 / list.n_relevant() as f64)
}

/// Zero when precision and recall are both zero.
pub fn f1_at(list: &RankedList, k: usize) -> Result<f64> {
    check_k(list, k)?;
    Ok(f1_from_counts(relevant_in_top(list, k), k, list.n_relevant()))
}

/// Signed-gain DCG: relevant documents add `1/log2(n+1)`, non-relevant
/// ones subtract it.
pub fn dcg_at(list: &RankedList, k: usize) -> Result<f64> {
    check_k(list, k)?;
    let mut acc = 0.0;
    for (i, r) in list.labels().take(k).enumerate() {
        acc += r.sign() / discount(i + 1);
    }
    Ok(acc)
}

pub fn metric_at(list: &RankedList, k: usize, metric: Metric) -> Result<f64> {
    match metric {
        Metric::F1 => f1_at(list, k),
        Metric::Dcg => dcg_at(list, k),
    }
}

/// `values[k-1]` is the metric of cutting after position `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardVector {
    pub metric: Metric,
    pub values: Vec<f64>,
}

impl RewardVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// 1-based position of the largest value; ties go to the smallest `k`.
    pub fn argmax(&self) -> usize {
        argmax_first(&self.values) + 1
    }
}

/// Index of the first maximum.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Metric at every cut position, in one pass over running sums.
pub fn reward_vector(list: &RankedList, metric: Metric) -> RewardVector {
    let mut values = Vec::with_capacity(list.len());
    match metric {
        Metric::F1 => {
            let mut hits = 0;
            for (i, r) in list.labels().enumerate() {
                hits += usize::from(r.is_relevant());
                values.push(f1_from_counts(hits, i + 1, list.n_relevant()));
            }
        }
        Metric::Dcg => {
            let mut acc = 0.0;
            for (i, r) in list.labels().enumerate() {
                acc += r.sign() / discount(i + 1);
                values.push(acc);
            }
        }
    }
    RewardVector { metric, values }
}

fn decision(list: &RankedList, k: usize, metric: Metric) -> TruncationDecision {
    let mut d = TruncationDecision::new(list.query_id(), k, metric);
    d.achieved_metric = metric_at(list, k, metric).ok();
    d.achieved_recall = recall_at(list, k).ok();
    d
}

/// Best cut in hindsight, from the ground-truth labels.
pub fn oracle_cut(list: &RankedList, metric: Metric) -> TruncationDecision {
    let k = reward_vector(list, metric).argmax();
    decision(list, k, metric)
}

/// Cut after `k` documents, or at the end of shorter lists.
pub fn fixed_k_cut(list: &RankedList, k: usize, metric: Metric) -> TruncationDecision {
    decision(list, k.max(1).min(list.len()), metric)
}

/// The single `k` that maximizes the mean metric over the training lists.
pub fn greedy_k_fit(train: &Dataset, metric: Metric) -> Result<usize> {
    if train.lists.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let max_n = train.max_list_len();
    let rewards: Vec<RewardVector> = train.lists.iter().map(|l| reward_vector(l, metric)).collect();
    let means: Vec<f64> = (1..=max_n)
        .map(|k| {
            rewards
                .iter()
                .map(|r| r.values[k.min(r.len()) - 1])
                .sum::<f64>()
                / rewards.len() as f64
        })
        .collect();
    Ok(argmax_first(&means) + 1)
}
