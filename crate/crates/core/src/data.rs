//! Shared domain types: ranked lists, feature vectors, datasets and
//! truncation decisions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Slot names of a [`FeatureVector`], in order.
pub const FEATURE_LAYOUT: [&str; 5] = [
    "retrieval_score",
    "doc_length",
    "unique_tokens",
    "sim_prev",
    "sim_next",
];

pub const FEATURE_DIM: usize = FEATURE_LAYOUT.len();

/// Binary relevance label, serialized as `1` / `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Relevance {
    Relevant,
    NonRelevant,
}

impl Relevance {
    /// Graded judgments are binarized: any positive grade is relevant.
    pub fn from_grade(grade: i64) -> Self {
        if grade > 0 {
            Relevance::Relevant
        } else {
            Relevance::NonRelevant
        }
    }

    pub fn is_relevant(self) -> bool {
        self == Relevance::Relevant
    }

    /// Signed gain used by DCG.
    pub fn sign(self) -> f64 {
        match self {
            Relevance::Relevant => 1.0,
            Relevance::NonRelevant => -1.0,
        }
    }
}

impl TryFrom<i8> for Relevance {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Relevance::Relevant),
            -1 => Ok(Relevance::NonRelevant),
            other => Err(format!("relevance must be 1 or -1, got {other}")),
        }
    }
}

impl From<Relevance> for i8 {
    fn from(r: Relevance) -> i8 {
        match r {
            Relevance::Relevant => 1,
            Relevance::NonRelevant => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    /// 1-based position in the list.
    pub rank: usize,
    pub retrieval_score: f64,
    pub doc_length: u64,
    pub unique_tokens: u64,
    /// Cosine similarity to the preceding document; 0 for the first.
    pub sim_prev: f64,
    /// Cosine similarity to the following document; 0 for the last.
    pub sim_next: f64,
    pub relevance: Relevance,
}

/// One query's ordered candidate documents.
///
/// Construction checks that ranks are exactly `1..=N` in order and that
/// `n_relevant` matches the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRankedList")]
pub struct RankedList {
    query_id: String,
    docs: Vec<RankedDoc>,
    n_relevant: usize,
}

#[derive(Deserialize)]
struct RawRankedList {
    query_id: String,
    docs: Vec<RankedDoc>,
    n_relevant: usize,
}

impl TryFrom<RawRankedList> for RankedList {
    type Error = Error;

    fn try_from(raw: RawRankedList) -> Result<Self> {
        let list = RankedList::new(raw.query_id, raw.docs)?;
        if list.n_relevant != raw.n_relevant {
            return Err(Error::InvalidData(format!(
                "query {}: n_relevant {} does not match {} relevant labels",
                list.query_id, raw.n_relevant, list.n_relevant
            )));
        }
        Ok(list)
    }
}

impl RankedList {
    pub fn new(query_id: impl Into<String>, docs: Vec<RankedDoc>) -> Result<Self> {
        let query_id = query_id.into();
        if docs.is_empty() {
            return Err(Error::EmptyList);
        }
        for (i, d) in docs.iter().enumerate() {
            if d.rank != i + 1 {
                return Err(Error::InvalidData(format!(
                    "query {query_id}: document {} has rank {} at position {}",
                    d.doc_id,
                    d.rank,
                    i + 1
                )));
            }
            if !d.retrieval_score.is_finite() {
                return Err(Error::InvalidData(format!(
                    "query {query_id}: document {} has non-finite score",
                    d.doc_id
                )));
            }
            for (name, s) in [("sim_prev", d.sim_prev), ("sim_next", d.sim_next)] {
                if !(-1.0..=1.0).contains(&s) {
                    return Err(Error::InvalidData(format!(
                        "query {query_id}: document {} has {name} {s} outside [-1, 1]",
                        d.doc_id
                    )));
                }
            }
        }
        let n_relevant = docs.iter().filter(|d| d.relevance.is_relevant()).count();
        Ok(RankedList {
            query_id,
            docs,
            n_relevant,
        })
    }

    /// Builds a list from labels alone, with placeholder document fields.
    /// Handy wherever only the relevance pattern matters.
    pub fn from_labels(query_id: impl Into<String>, labels: &[Relevance]) -> Result<Self> {
        let docs = labels
            .iter()
            .enumerate()
            .map(|(i, &relevance)| RankedDoc {
                doc_id: format!("d{}", i + 1),
                rank: i + 1,
                retrieval_score: (labels.len() - i) as f64,
                doc_length: 0,
                unique_tokens: 0,
                sim_prev: 0.0,
                sim_next: 0.0,
                relevance,
            })
            .collect();
        RankedList::new(query_id, docs)
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn docs(&self) -> &[RankedDoc] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn n_relevant(&self) -> usize {
        self.n_relevant
    }

    pub fn labels(&self) -> impl Iterator<Item = Relevance> + '_ {
        self.docs.iter().map(|d| d.relevance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: &'static [&'static str],
}

/// Raw (pre-normalization) features of one document, in [`FEATURE_LAYOUT`] order.
pub fn build_feature_vector(doc: &RankedDoc) -> FeatureVector {
    FeatureVector {
        values: vec![
            doc.retrieval_score,
            doc.doc_length as f64,
            doc.unique_tokens as f64,
            doc.sim_prev,
            doc.sim_next,
        ],
        layout: &FEATURE_LAYOUT,
    }
}

/// Per-slot z-score statistics, fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Population mean and standard deviation of every slot over all
    /// documents of all lists.
    pub fn fit(lists: &[RankedList]) -> Result<Self> {
        if lists.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut sum = vec![0.0; FEATURE_DIM];
        let mut count = 0usize;
        for doc in lists.iter().flat_map(|l| l.docs()) {
            for (s, v) in sum.iter_mut().zip(build_feature_vector(doc).values) {
                *s += v;
            }
            count += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; FEATURE_DIM];
        for doc in lists.iter().flat_map(|l| l.docs()) {
            for ((s, v), m) in sq.iter_mut().zip(build_feature_vector(doc).values).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        Ok(FeatureStats { mean, std })
    }

    /// Zero-variance slots map to 0.
    pub fn apply(&self, fv: &FeatureVector) -> Vec<f64> {
        fv.values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { 0.0 })
            .collect()
    }

    /// Normalized `N x FEATURE_DIM` feature matrix of one list.
    pub fn feature_matrix(&self, list: &RankedList) -> Tensor {
        let data = list
            .docs()
            .iter()
            .flat_map(|d| self.apply(&build_feature_vector(d)))
            .collect();
        Tensor::from_vec(vec![list.len(), FEATURE_DIM], data)
            .expect("feature matrix shape is consistent by construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Where the lists came from (`synthetic` or `trec`).
    pub source: String,
    /// Vector space that produced the neighbor similarities.
    pub similarity_source: String,
    /// False when relevance labels are placeholders.
    pub labeled: bool,
    pub train_fraction: Option<f64>,
    pub seed: Option<u64>,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        DatasetMeta {
            source: "unknown".to_string(),
            similarity_source: "none".to_string(),
            labeled: true,
            train_fraction: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub lists: Vec<RankedList>,
    pub split: Split,
    pub feature_stats: Option<FeatureStats>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(lists: Vec<RankedList>, split: Split, meta: DatasetMeta) -> Self {
        Dataset {
            lists,
            split,
            feature_stats: None,
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn max_list_len(&self) -> usize {
        self.lists.iter().map(RankedList::len).max().unwrap_or(0)
    }

    /// Fraction of relevant documents over every list.
    pub fn relevant_fraction(&self) -> f64 {
        let docs: usize = self.lists.iter().map(RankedList::len).sum();
        let rel: usize = self.lists.iter().map(RankedList::n_relevant).sum();
        if docs == 0 {
            0.0
        } else {
            rel as f64 / docs as f64
        }
    }
}

/// Attach z-score statistics to a dataset.
///
/// A train split fits its own statistics (any supplied ones are ignored);
/// a test split must be given the train statistics.
pub fn normalize_features(mut ds: Dataset, train_stats: Option<&FeatureStats>) -> Result<Dataset> {
    if ds.lists.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stats = match ds.split {
        Split::Train => FeatureStats::fit(&ds.lists)?,
        Split::Test => train_stats.cloned().ok_or_else(|| {
            Error::Config("test split needs statistics fitted on the train split".into())
        })?,
    };
    ds.feature_stats = Some(stats);
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    F1,
    Dcg,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::F1 => "f1",
            Metric::Dcg => "dcg",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f1" => Ok(Metric::F1),
            "dcg" => Ok(Metric::Dcg),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationDecision {
    pub query_id: String,
    /// 1-based; the list is cut after this position.
    pub cut_position: usize,
    pub metric_name: Metric,
    #[serde(skip)]
    pub predicted_distribution: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub achieved_metric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub achieved_recall: Option<f64>,
    #[serde(default)]
    pub constrained: bool,
    #[serde(default)]
    pub fallback_used: bool,
}

impl TruncationDecision {
    pub fn new(query_id: impl Into<String>, cut_position: usize, metric_name: Metric) -> Self {
        TruncationDecision {
            query_id: query_id.into(),
            cut_position,
            metric_name,
            predicted_distribution: None,
            achieved_metric: None,
            achieved_recall: None,
            constrained: false,
            fallback_used: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(rank: usize, score: f64, len: u64, uniq: u64, sp: f64, sn: f64) -> RankedDoc {
        RankedDoc {
            doc_id: format!("d{rank}"),
            rank,
            retrieval_score: score,
            doc_length: len,
            unique_tokens: uniq,
            sim_prev: sp,
            sim_next: sn,
            relevance: Relevance::NonRelevant,
        }
    }

    #[test]
    fn feature_vector_maps_fields_in_order() {
        let fv = build_feature_vector(&doc(1, 12.3, 100, 60, 0.0, 0.5));
        assert_eq!(fv.values, vec![12.3, 100.0, 60.0, 0.0, 0.5]);
        assert_eq!(fv.layout.len(), fv.values.len());
        assert_eq!(fv.values[3], 0.0);
    }

    #[test]
    fn empty_document_is_accepted() {
        let fv = build_feature_vector(&doc(2, 1.5, 0, 0, 0.2, -0.1));
        assert_eq!(fv.values, vec![1.5, 0.0, 0.0, 0.2, -0.1]);
    }

    #[test]
    fn list_counts_relevant_and_checks_ranks() {
        use Relevance::*;
        let l = RankedList::from_labels("q", &[Relevant, NonRelevant, Relevant]).unwrap();
        assert_eq!(l.n_relevant(), 2);
        assert_eq!(l.len(), 3);

        let bad = vec![doc(1, 1.0, 1, 1, 0.0, 0.0), doc(3, 1.0, 1, 1, 0.0, 0.0)];
        assert!(matches!(RankedList::new("q", bad), Err(Error::InvalidData(_))));
        assert!(matches!(RankedList::new("q", vec![]), Err(Error::EmptyList)));
    }

    #[test]
    fn deserialization_rejects_wrong_relevant_count() {
        let l = RankedList::from_labels("q", &[Relevance::Relevant]).unwrap();
        let mut v = serde_json::to_value(&l).unwrap();
        v["n_relevant"] = serde_json::json!(0);
        assert!(serde_json::from_value::<RankedList>(v).is_err());
    }

    fn ds_from_scores(scores: &[f64], split: Split) -> Dataset {
        let docs = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| doc(i + 1, s, 5, 5, 0.0, 0.0))
            .collect();
        Dataset::new(
            vec![RankedList::new("q", docs).unwrap()],
            split,
            DatasetMeta::default(),
        )
    }

    #[test]
    fn z_score_of_two_values() {
        let ds = normalize_features(ds_from_scores(&[1.0, 3.0], Split::Train), None).unwrap();
        let stats = ds.feature_stats.as_ref().unwrap();
        assert_eq!(stats.mean[0], 2.0);
        assert_eq!(stats.std[0], 1.0);
        let m = stats.feature_matrix(&ds.lists[0]);
        assert_eq!(m.get(0, 0), -1.0);
        assert_eq!(m.get(1, 0), 1.0);
        // doc_length is constant 5 -> zero variance -> 0
        assert_eq!(m.get(0, 1), 0.0);
    }

    #[test]
    fn constant_slot_maps_to_zero() {
        let ds = normalize_features(ds_from_scores(&[5.0, 5.0, 5.0], Split::Train), None).unwrap();
        let m = ds.feature_stats.as_ref().unwrap().feature_matrix(&ds.lists[0]);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_errors() {
        let empty = Dataset::new(vec![], Split::Train, DatasetMeta::default());
        let err = normalize_features(empty, None).unwrap_err();
        assert_eq!(err.to_string(), "no lists");

        let test = ds_from_scores(&[1.0], Split::Test);
        assert!(matches!(normalize_features(test, None), Err(Error::Config(_))));
    }

    #[test]
    fn test_split_reuses_train_stats_verbatim() {
        let train = normalize_features(ds_from_scores(&[1.0, 3.0], Split::Train), None).unwrap();
        let stats = train.feature_stats.clone().unwrap();
        let test = normalize_features(ds_from_scores(&[10.0, 20.0, 30.0], Split::Test), Some(&stats))
            .unwrap();
        assert_eq!(test.feature_stats.as_ref(), Some(&stats));
    }

    #[test]
    fn metric_parses() {
        assert_eq!("F1".parse::<Metric>().unwrap(), Metric::F1);
        assert_eq!("dcg".parse::<Metric>().unwrap(), Metric::Dcg);
        assert!("map".parse::<Metric>().is_err());
    }
}
