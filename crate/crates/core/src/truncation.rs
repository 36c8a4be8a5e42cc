//! Inference-time cut decisions (plain argmax and the recall-constrained
//! two-model procedure), evaluation against labels, and a paired
//! Wilcoxon signed-rank test.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::Tensor;
use crate::data::{Dataset, Metric, RankedList, TruncationDecision};
use crate::error::{Error, Result};
use crate::metrics::{argmax_first, metric_at, recall_at};
use crate::model::{AttnCutModel, RecallConstraintModel};

/// 1-based argmax, ties to the smallest position.
pub fn argmax_cut(p: &[f64]) -> Result<usize> {
    if p.is_empty() {
        return Err(Error::EmptyList);
    }
    Ok(argmax_first(p) + 1)
}

/// Plain truncation: cut at the most likely position.
pub fn truncate(model: &AttnCutModel, list: &RankedList) -> Result<TruncationDecision> {
    let p = model.predict(list)?;
    let mut d = TruncationDecision::new(list.query_id(), argmax_cut(&p)?, model.metric);
    d.predicted_distribution = Some(p);
    Ok(d)
}

/// What to do when no position reaches the required recall bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Keep every document.
    #[default]
    FullList,
    /// Ignore the constraint.
    UnconstrainedArgmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintConfig {
    /// Minimal recall in `[0, 1]`.
    pub sigma: f64,
    pub fallback: Fallback,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            sigma: 0.0,
            fallback: Fallback::FullList,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.sigma) {
            Ok(())
        } else {
            Err(Error::Config(format!("sigma must lie in [0, 1], got {}", self.sigma)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstrainedCut {
    pub cut: usize,
    /// First position whose predicted bin reaches sigma, if any.
    pub threshold: Option<usize>,
    pub fallback_used: bool,
}

/// The decision rule on raw model outputs.
///
/// `j` is the first position whose most likely bin has a lower edge of at
/// least `sigma`. The cut is the most likely position at or after `j`:
/// the argmax if it qualifies, otherwise the next candidates in
/// decreasing probability. Both comparisons use `>=`.
pub fn constrained_cut(p: &[f64], bin_probs: &Tensor, edges: &[f64], cfg: &ConstraintConfig) -> Result<ConstrainedCut> {
    cfg.validate()?;
    let n = p.len();
    if n == 0 {
        return Err(Error::EmptyList);
    }
    if bin_probs.rows() != n || bin_probs.cols() + 1 != edges.len() {
        return Err(Error::Shape {
            op: "constrained_cut",
            left: vec![n, edges.len() - 1],
            right: bin_probs.shape().to_vec(),
        });
    }
    let threshold = (0..n)
        .find(|&k| edges[argmax_first(bin_probs.row_slice(k))] >= cfg.sigma)
        .map(|k| k + 1);
    let m = argmax_first(p) + 1;
    let Some(j) = threshold else {
        let cut = match cfg.fallback {
            Fallback::FullList => n,
            Fallback::UnconstrainedArgmax => m,
        };
        return Ok(ConstrainedCut {
            cut,
            threshold,
            fallback_used: true,
        });
    };
    if m >= j {
        return Ok(ConstrainedCut {
            cut: m,
            threshold,
            fallback_used: false,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable, so equal probabilities keep the smaller position first.
    order.sort_by(|a, b| p[*b].total_cmp(&p[*a]));
    let cut = order
        .into_iter()
        .map(|i| i + 1)
        .find(|&k| k >= j)
        .expect("position j itself satisfies k >= j");
    Ok(ConstrainedCut {
        cut,
        threshold,
        fallback_used: false,
    })
}

/// Two-model truncation under a minimal recall requirement.
pub fn constrained_truncate(
    metric_model: &AttnCutModel,
    recall_model: &RecallConstraintModel,
    list: &RankedList,
    cfg: &ConstraintConfig,
) -> Result<TruncationDecision> {
    let p = metric_model.predict(list)?;
    let bins = recall_model.predict(list)?;
    let c = constrained_cut(&p, &bins, &recall_model.bin_edges, cfg)?;
    let mut d = TruncationDecision::new(list.query_id(), c.cut, metric_model.metric);
    d.constrained = true;
    d.fallback_used = c.fallback_used;
    d.predicted_distribution = Some(p);
    Ok(d)
}

/// Fills the achieved metric and recall from the list's labels.
pub fn attach_evidence(decision: &mut TruncationDecision, list: &RankedList) -> Result<()> {
    decision.achieved_metric = Some(metric_at(list, decision.cut_position, decision.metric_name)?);
    decision.achieved_recall = Some(recall_at(list, decision.cut_position)?);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub cut_position: usize,
    pub metric: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metric_name: Metric,
    /// In dataset order, for paired tests.
    pub per_query: Vec<QueryOutcome>,
    pub mean_metric: f64,
    pub mean_recall: f64,
    /// Queries whose achieved recall is at least sigma, when one was given.
    pub meeting_sigma: Option<usize>,
}

impl EvalSummary {
    pub fn metric_values(&self) -> Vec<f64> {
        self.per_query.iter().map(|q| q.metric).collect()
    }

    pub fn cuts(&self) -> Vec<usize> {
        self.per_query.iter().map(|q| q.cut_position).collect()
    }
}

/// Scores one decision per test list, matched by query id.
pub fn evaluate(
    decisions: &[TruncationDecision],
    test: &Dataset,
    metric: Metric,
    sigma: Option<f64>,
) -> Result<EvalSummary> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut by_query: HashMap<&str, &TruncationDecision> = HashMap::new();
    for d in decisions {
        if by_query.insert(d.query_id.as_str(), d).is_some() {
            return Err(Error::DecisionMismatch(format!("duplicate decision for query {}", d.query_id)));
        }
    }
    if decisions.len() != test.len() {
        return Err(Error::DecisionMismatch(format!(
            "{} decisions for {} lists",
            decisions.len(),
            test.len()
        )));
    }
    let mut per_query = Vec::with_capacity(test.len());
    for list in &test.lists {
        let d = by_query
            .get(list.query_id())
            .ok_or_else(|| Error::DecisionMismatch(format!("no decision for query {}", list.query_id())))?;
        if d.cut_position == 0 || d.cut_position > list.len() {
            return Err(Error::DecisionMismatch(format!(
                "cut {} outside list of length {} for query {}",
                d.cut_position,
                list.len(),
                list.query_id()
            )));
        }
        per_query.push(QueryOutcome {
            query_id: list.query_id().to_string(),
            cut_position: d.cut_position,
            metric: metric_at(list, d.cut_position, metric)?,
            recall: recall_at(list, d.cut_position)?,
        });
    }
    let n = per_query.len() as f64;
    let mean_metric = per_query.iter().map(|q| q.metric).sum::<f64>() / n;
    let mean_recall = per_query.iter().map(|q| q.recall).sum::<f64>() / n;
    let meeting_sigma = sigma.map(|s| per_query.iter().filter(|q| q.recall >= s).count());
    Ok(EvalSummary {
        metric_name: metric,
        per_query,
        mean_metric,
        mean_recall,
        meeting_sigma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Pairs with a nonzero difference.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub exact: bool,
}

/// Largest sample handled by the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 50;

/// Two-sided signed-rank test on paired samples.
///
/// Zero differences are dropped. Without ties and with at most
/// [`WILCOXON_EXACT_MAX`] pairs the p-value is exact; otherwise it uses the
/// normal approximation with tie and continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::InvalidData(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired differences".into()));
    }
    let n = d.len();
    if n == 0 {
        return Ok(Wilcoxon {
            n: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            exact: true,
        });
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));

    // Average ranks over runs of equal magnitude.
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        ranks[i..=j].fill(avg);
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let t = w_plus.min(w_minus);

    let exact = tie_term == 0.0 && n <= WILCOXON_EXACT_MAX;
    let p_value = if exact {
        // counts[s] = number of sign assignments whose positive ranks sum to s.
        let max = n * (n + 1) / 2;
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for r in 1..=n {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let below: f64 = counts[..=t as usize].iter().sum();
        (2.0 * below / 2f64.powi(n as i32)).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let mut diff = t - mean;
        if diff != 0.0 {
            diff -= 0.5 * diff.signum();
        }
        let z = diff / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * normal.cdf(-z.abs())).min(1.0)
    };
    Ok(Wilcoxon {
        n,
        w_plus,
        w_minus,
        p_value,
        exact,
    })
}

/// A decision tagged with the method that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDecision {
    pub method: String,
    #[serde(flatten)]
    pub decision: TruncationDecision,
}

pub fn write_decisions<W: Write>(decisions: &[MethodDecision], mut w: W) -> Result<()> {
    for d in decisions {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_decisions<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<MethodDecision>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::parse(source_name, i + 1, e.to_string()))?,
        );
    }
    Ok(out)
}
