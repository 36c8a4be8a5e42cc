//! Getting ranked lists into a [`Dataset`]: TREC run and qrels parsing,
//! per-document statistics, synthetic generation, query-level splitting and
//! the JSONL dataset format.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    Dataset, DatasetMeta, FeatureStats, RankedDoc, RankedList, Relevance, Split, FEATURE_LAYOUT,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub query_id: String,
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QrelRecord {
    pub query_id: String,
    pub doc_id: String,
    pub grade: u32,
}

fn lines_of<R: BufRead>(reader: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    reader.lines().enumerate().map(|(i, l)| (i + 1, l))
}

/// Parses a six-column TREC run: `qid Q0 docid rank score tag`.
pub fn parse_run_file<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in lines_of(reader) {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |m: String| Error::parse(source_name, lineno, m);
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        if fields[1] != "Q0" {
            return Err(err(format!("second field must be Q0, found {:?}", fields[1])));
        }
        let rank: usize = fields[3]
            .parse()
            .map_err(|_| err(format!("rank {:?} is not a non-negative integer", fields[3])))?;
        if rank == 0 {
            return Err(err("rank must be at least 1".into()));
        }
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| err(format!("score {:?} is not a number", fields[4])))?;
        if !score.is_finite() {
            return Err(err(format!("score {score} is not finite")));
        }
        out.push(RunRecord {
            query_id: fields[0].to_string(),
            doc_id: fields[2].to_string(),
            rank,
            score,
            tag: fields[5].to_string(),
        });
    }
    Ok(out)
}

/// Parses four-column qrels: `qid iteration docid grade`.
///
/// A repeated `(qid, docid)` pair keeps the last grade. Negative grades are
/// rejected unless `clamp_negative` maps them to 0.
pub fn parse_qrels<R: BufRead>(
    reader: R,
    source_name: &str,
    clamp_negative: bool,
) -> Result<Vec<QrelRecord>> {
    let mut out: Vec<QrelRecord> = Vec::new();
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    for (lineno, line) in lines_of(reader) {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |m: String| Error::parse(source_name, lineno, m);
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let grade: i64 = fields[3]
            .parse()
            .map_err(|_| err(format!("grade {:?} is not an integer", fields[3])))?;
        let grade = if grade < 0 {
            if !clamp_negative {
                return Err(err(format!("negative grade {grade}")));
            }
            0
        } else {
            u32::try_from(grade).map_err(|_| err(format!("grade {grade} is too large")))?
        };
        let rec = QrelRecord {
            query_id: fields[0].to_string(),
            doc_id: fields[2].to_string(),
            grade,
        };
        let key = (rec.query_id.clone(), rec.doc_id.clone());
        match seen.get(&key) {
            Some(&i) => {
                warn!(
                    "{source_name}:{lineno}: duplicate judgment for query {} doc {}, keeping the later one",
                    rec.query_id, rec.doc_id
                );
                out[i] = rec;
            }
            None => {
                seen.insert(key, out.len());
                out.push(rec);
            }
        }
    }
    Ok(out)
}

/// Per-document statistics supplied alongside a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocStats {
    pub doc_id: String,
    pub length: u64,
    pub unique_tokens: u64,
    /// Dense representation used for neighbor similarity (a doc2vec
    /// embedding or a tf-idf vector).
    pub vector: Vec<f64>,
}

/// Lookup of [`DocStats`] by document id.
pub trait DocStatsSource {
    fn get(&self, doc_id: &str) -> Option<&DocStats>;

    /// Name of the vector space, recorded in dataset metadata.
    fn similarity_source(&self) -> &str;
}

/// In-memory [`DocStatsSource`], usually read from a JSONL file.
#[derive(Debug, Clone, Default)]
pub struct DocStatsTable {
    pub similarity_source: String,
    docs: HashMap<String, DocStats>,
}

impl DocStatsTable {
    pub fn new(similarity_source: impl Into<String>, docs: impl IntoIterator<Item = DocStats>) -> Self {
        DocStatsTable {
            similarity_source: similarity_source.into(),
            docs: docs.into_iter().map(|d| (d.doc_id.clone(), d)).collect(),
        }
    }

    /// One JSON object per line: `{doc_id, length, unique_tokens, vector}`.
    pub fn read_jsonl<R: BufRead>(
        reader: R,
        source_name: &str,
        similarity_source: impl Into<String>,
    ) -> Result<Self> {
        let mut docs = Vec::new();
        for (lineno, line) in lines_of(reader) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let d: DocStats = serde_json::from_str(&line)
                .map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
            if d.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(source_name, lineno, "vector has non-finite entries"));
            }
            docs.push(d);
        }
        Ok(DocStatsTable::new(similarity_source, docs))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

impl DocStatsSource for DocStatsTable {
    fn get(&self, doc_id: &str) -> Option<&DocStats> {
        self.docs.get(doc_id)
    }

    fn similarity_source(&self) -> &str {
        &self.similarity_source
    }
}

/// Cosine similarity; 0 if either vector is zero. Mismatched lengths
/// compare over the shared prefix.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembleOptions {
    pub truncate_to: usize,
    /// Drop queries that have no judgments instead of labelling every
    /// document non-relevant.
    pub drop_unjudged_queries: bool,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        AssembleOptions {
            truncate_to: 300,
            drop_unjudged_queries: false,
        }
    }
}

/// Groups run records into ranked lists, one per query, ordered by query id.
///
/// Documents keep their run-file rank order and are renumbered `1..=N`
/// after truncation. Unjudged documents are non-relevant.
pub fn assemble_dataset(
    runs: &[RunRecord],
    qrels: &[QrelRecord],
    doc_stats: &dyn DocStatsSource,
    opts: &AssembleOptions,
) -> Result<Dataset> {
    if opts.truncate_to == 0 {
        return Err(Error::Config("truncate_to must be positive".into()));
    }
    let mut by_query: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        by_query.entry(&r.query_id).or_default().push(r);
    }
    let mut judgments: HashMap<&str, HashMap<&str, u32>> = HashMap::new();
    for q in qrels {
        judgments
            .entry(&q.query_id)
            .or_default()
            .insert(&q.doc_id, q.grade);
    }

    let mut lists = Vec::with_capacity(by_query.len());
    for (qid, mut recs) in by_query {
        let judged = judgments.get(qid);
        if judged.is_none() {
            if opts.drop_unjudged_queries {
                warn!("query {qid} has no judgments, dropping it");
                continue;
            }
            warn!("query {qid} has no judgments, every document is labelled non-relevant");
        }
        recs.sort_by_key(|r| r.rank);
        recs.truncate(opts.truncate_to);

        let stats: Vec<&DocStats> = recs
            .iter()
            .map(|r| {
                doc_stats
                    .get(&r.doc_id)
                    .ok_or_else(|| Error::MissingDocStats(r.doc_id.clone()))
            })
            .collect::<Result<_>>()?;
        let sims: Vec<f64> = stats
            .windows(2)
            .map(|w| cosine(&w[0].vector, &w[1].vector))
            .collect();

        let docs = recs
            .iter()
            .zip(&stats)
            .enumerate()
            .map(|(i, (r, s))| {
                let grade = judged.and_then(|j| j.get(r.doc_id.as_str())).copied().unwrap_or(0);
                RankedDoc {
                    doc_id: r.doc_id.clone(),
                    rank: i + 1,
                    retrieval_score: r.score,
                    doc_length: s.length,
                    unique_tokens: s.unique_tokens,
                    sim_prev: if i == 0 { 0.0 } else { sims[i - 1] },
                    sim_next: sims.get(i).copied().unwrap_or(0.0),
                    relevance: Relevance::from_grade(i64::from(grade)),
                }
            })
            .collect();
        lists.push(RankedList::new(qid, docs)?);
    }
    if lists.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let meta = DatasetMeta {
        source: "trec".into(),
        similarity_source: doc_stats.similarity_source().to_string(),
        labeled: !qrels.is_empty(),
        train_fraction: None,
        seed: None,
    };
    Ok(Dataset::new(lists, Split::Train, meta))
}

/// Generator settings for synthetic score-distribution lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_queries: usize,
    pub list_length: usize,
    pub relevant_fraction: f64,
    pub relevant_score_mean: f64,
    pub relevant_score_std: f64,
    /// Per-query offset of the relevant mean, uniform in `[-spread, spread]`.
    /// Zero gives every query the same score distribution.
    pub relevant_mean_spread: f64,
    pub nonrelevant_rate: f64,
    /// Score gap at which the neighbor similarity drops to `2/e - 1`.
    pub similarity_scale: f64,
    pub doc_length_range: (u64, u64),
    pub unique_tokens_range: (u64, u64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_queries: 250,
            list_length: 100,
            relevant_fraction: 0.2,
            relevant_score_mean: 4.0,
            relevant_score_std: 1.0,
            relevant_mean_spread: 0.0,
            nonrelevant_rate: 1.0,
            similarity_scale: 1.0,
            doc_length_range: (50, 2000),
            unique_tokens_range: (30, 800),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.n_queries == 0 {
            p.push("n_queries must be at least 1".to_string());
        }
        if self.list_length < 2 {
            p.push("list_length must be at least 2".to_string());
        }
        if !(self.relevant_fraction > 0.0 && self.relevant_fraction < 1.0) {
            p.push("relevant_fraction must lie in (0, 1)".to_string());
        }
        if !self.relevant_score_mean.is_finite() {
            p.push("relevant_score_mean must be finite".to_string());
        }
        for (name, v) in [
            ("relevant_score_std", self.relevant_score_std),
            ("nonrelevant_rate", self.nonrelevant_rate),
            ("similarity_scale", self.similarity_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                p.push(format!("{name} must be positive"));
            }
        }
        if !(self.relevant_mean_spread.is_finite() && self.relevant_mean_spread >= 0.0) {
            p.push("relevant_mean_spread must be non-negative".to_string());
        }
        for (name, (lo, hi)) in [
            ("doc_length_range", self.doc_length_range),
            ("unique_tokens_range", self.unique_tokens_range),
        ] {
            if lo == 0 || lo > hi {
                p.push(format!("{name} must satisfy 1 <= low <= high"));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn n_relevant(&self) -> usize {
        (self.relevant_fraction * self.list_length as f64).ceil() as usize
    }
}

/// Maps a score gap to a similarity in `(-1, 1]`; equal scores give 1.
pub fn gap_similarity(a: f64, b: f64, scale: f64) -> f64 {
    2.0 * (-(a - b).abs() / scale).exp() - 1.0
}

/// Draws a labelled dataset: relevant scores from a normal, the rest from
/// an exponential, sorted by score.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let exp = Exp::new(cfg.nonrelevant_rate).map_err(|e| Error::Config(e.to_string()))?;
    let n = cfg.list_length;
    let n_rel = cfg.n_relevant().min(n);
    let qwidth = cfg.n_queries.to_string().len().max(4);
    let dwidth = n.to_string().len();

    let mut lists = Vec::with_capacity(cfg.n_queries);
    for q in 0..cfg.n_queries {
        let offset = if cfg.relevant_mean_spread > 0.0 {
            rng.random_range(-cfg.relevant_mean_spread..=cfg.relevant_mean_spread)
        } else {
            0.0
        };
        let normal = Normal::new(cfg.relevant_score_mean + offset, cfg.relevant_score_std)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut scored: Vec<(f64, Relevance)> = (0..n)
            .map(|i| {
                if i < n_rel {
                    (normal.sample(&mut rng), Relevance::Relevant)
                } else {
                    (exp.sample(&mut rng), Relevance::NonRelevant)
                }
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));

        let qid = format!("q{q:0qwidth$}");
        let docs = scored
            .iter()
            .enumerate()
            .map(|(i, (score, rel))| {
                let length = rng.random_range(cfg.doc_length_range.0..=cfg.doc_length_range.1);
                let unique = rng
                    .random_range(cfg.unique_tokens_range.0..=cfg.unique_tokens_range.1)
                    .min(length);
                let sim = |j: usize| gap_similarity(*score, scored[j].0, cfg.similarity_scale);
                RankedDoc {
                    doc_id: format!("{qid}-d{i:0dwidth$}"),
                    rank: i + 1,
                    retrieval_score: *score,
                    doc_length: length,
                    unique_tokens: unique,
                    sim_prev: if i == 0 { 0.0 } else { sim(i - 1) },
                    sim_next: if i + 1 == n { 0.0 } else { sim(i + 1) },
                    relevance: *rel,
                }
            })
            .collect();
        lists.push(RankedList::new(qid, docs)?);
    }

    let meta = DatasetMeta {
        source: "synthetic".into(),
        similarity_source: "score-gap".into(),
        labeled: true,
        train_fraction: None,
        seed: Some(cfg.seed),
    };
    Ok(Dataset::new(lists, Split::Train, meta))
}

/// Random query-level split. The train side gets `round(f * n)` queries,
/// kept within `[1, n-1]`; both sides keep the input order.
pub fn split_dataset(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::InvalidData(format!(
            "cannot split {n} queries into two non-empty parts"
        )));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let meta = DatasetMeta {
        train_fraction: Some(train_fraction),
        seed: Some(seed),
        ..ds.meta.clone()
    };
    let pick = |want: bool, split: Split| {
        let lists = ds
            .lists
            .iter()
            .zip(&in_train)
            .filter(|(_, t)| **t == want)
            .map(|(l, _)| l.clone())
            .collect();
        Dataset::new(lists, split, meta.clone())
    };
    Ok((pick(true, Split::Train), pick(false, Split::Test)))
}

pub const DATASET_FORMAT: &str = "attncut-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    feature_layout: Vec<String>,
    split: Split,
    n_lists: usize,
    feature_stats: Option<FeatureStats>,
    meta: DatasetMeta,
}

/// A header line followed by one ranked list per line.
pub fn write_dataset<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        feature_layout: FEATURE_LAYOUT.iter().map(|s| s.to_string()).collect(),
        split: ds.split,
        n_lists: ds.len(),
        feature_stats: ds.feature_stats.clone(),
        meta: ds.meta.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for list in &ds.lists {
        serde_json::to_writer(&mut w, list)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(reader: R, source_name: &str) -> Result<Dataset> {
    let mut lines = lines_of(reader).filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
    let (lineno, first) = lines
        .next()
        .ok_or_else(|| Error::parse(source_name, 1, "missing header line"))?;
    let header: DatasetHeader = serde_json::from_str(&first?)
        .map_err(|e| Error::parse(source_name, lineno, format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::parse(
            source_name,
            lineno,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    if header.feature_layout != FEATURE_LAYOUT {
        return Err(Error::parse(
            source_name,
            lineno,
            format!("feature layout {:?} differs from {:?}", header.feature_layout, FEATURE_LAYOUT),
        ));
    }
    let mut lists = Vec::with_capacity(header.n_lists);
    for (lineno, line) in lines {
        let list: RankedList = serde_json::from_str(&line?)
            .map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
        lists.push(list);
    }
    if lists.len() != header.n_lists {
        return Err(Error::parse(
            source_name,
            lineno,
            format!("header announces {} lists, found {}", header.n_lists, lists.len()),
        ));
    }
    Ok(Dataset {
        lists,
        split: header.split,
        feature_stats: header.feature_stats,
        meta: header.meta,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_dataset(ds, File::create(path)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{f1_at, oracle_cut};
    use crate::data::Metric;
    use proptest::prelude::*;

    #[test]
    fn run_line_maps_fields() {
        let recs = parse_run_file("301 Q0 FBIS3-10082 1 12.34 bm25\n\n".as_bytes(), "run").unwrap();
        assert_eq!(
            recs,
            vec![RunRecord {
                query_id: "301".into(),
                doc_id: "FBIS3-10082".into(),
                rank: 1,
                score: 12.34,
                tag: "bm25".into(),
            }]
        );
    }

    #[test]
    fn run_errors_carry_line_numbers() {
        let e = parse_run_file("301 Q0 a 1 1.0 t\n301 Q0 d1 x 1.0 t\n".as_bytes(), "run").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_run_file("301 Q0 a 1 1.0\n".as_bytes(), "run").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_run_file("\n301 Q0 a 1 nan t\n".as_bytes(), "run").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_run_file("301 Q0 a 0 1.0 t\n".as_bytes(), "run").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn qrels_parsing() {
        let q = parse_qrels("301 0 FBIS3-10082 1\n301 0 d2 2\n".as_bytes(), "qrels", false).unwrap();
        assert_eq!(q[0], QrelRecord { query_id: "301".into(), doc_id: "FBIS3-10082".into(), grade: 1 });
        assert_eq!(q[1].grade, 2);

        assert!(parse_qrels("301 0 d1 -1\n".as_bytes(), "qrels", false).is_err());
        let q = parse_qrels("301 0 d1 -1\n".as_bytes(), "qrels", true).unwrap();
        assert_eq!(q[0].grade, 0);
        assert!(matches!(
            parse_qrels("301 0 d1 1.5\n".as_bytes(), "qrels", false),
            Err(Error::Parse { line: 1, .. })
        ));

        let q = parse_qrels("1 0 a 1\n1 0 b 0\n1 0 a 0\n".as_bytes(), "qrels", false).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q[0].grade, 0);
    }

    fn stats_for(ids: &[&str]) -> DocStatsTable {
        DocStatsTable::new(
            "doc2vec",
            ids.iter().enumerate().map(|(i, id)| DocStats {
                doc_id: id.to_string(),
                length: 100 + i as u64,
                unique_tokens: 50,
                vector: vec![1.0, i as f64],
            }),
        )
    }

    fn runs(qid: &str, ids: &[&str]) -> Vec<RunRecord> {
        ids.iter()
            .enumerate()
            .map(|(i, d)| RunRecord {
                query_id: qid.into(),
                doc_id: d.to_string(),
                rank: i + 1,
                score: 10.0 - i as f64,
                tag: "t".into(),
            })
            .collect()
    }

    #[test]
    fn assemble_counts_and_truncates() {
        let r = runs("q1", &["doc1", "doc2", "doc3"]);
        let q = vec![QrelRecord { query_id: "q1".into(), doc_id: "doc2".into(), grade: 1 }];
        let stats = stats_for(&["doc1", "doc2", "doc3"]);
        let ds = assemble_dataset(&r, &q, &stats, &AssembleOptions::default()).unwrap();
        assert_eq!(ds.lists[0].len(), 3);
        assert_eq!(ds.lists[0].n_relevant(), 1);
        assert_eq!(ds.meta.similarity_source, "doc2vec");

        let opts = AssembleOptions { truncate_to: 2, ..Default::default() };
        let ds = assemble_dataset(&r, &q, &stats, &opts).unwrap();
        assert_eq!(ds.lists[0].len(), 2);
    }

    #[test]
    fn assemble_similarities_are_neighbor_cosines() {
        let r = runs("q1", &["a", "b", "c"]);
        let stats = stats_for(&["a", "b", "c"]);
        let ds = assemble_dataset(&r, &[], &stats, &AssembleOptions::default()).unwrap();
        let d = ds.lists[0].docs();
        // vectors (1,0), (1,1), (1,2)
        let ab = 1.0 / 2f64.sqrt();
        let bc = 3.0 / (2f64.sqrt() * 5f64.sqrt());
        assert_eq!(d[0].sim_prev, 0.0);
        assert!((d[0].sim_next - ab).abs() < 1e-12);
        assert!((d[1].sim_prev - ab).abs() < 1e-12);
        assert!((d[1].sim_next - bc).abs() < 1e-12);
        assert_eq!(d[2].sim_next, 0.0);
    }

    #[test]
    fn assemble_keeps_rank_order_and_renumbers() {
        let mut r = runs("q1", &["a", "b", "c"]);
        r[0].rank = 7;
        r[1].rank = 3;
        r[2].rank = 5;
        let stats = stats_for(&["a", "b", "c"]);
        let ds = assemble_dataset(&r, &[], &stats, &AssembleOptions::default()).unwrap();
        let ids: Vec<_> = ds.lists[0].docs().iter().map(|d| (d.doc_id.as_str(), d.rank)).collect();
        assert_eq!(ids, vec![("b", 1), ("c", 2), ("a", 3)]);
    }

    #[test]
    fn assemble_missing_doc_and_unjudged_queries() {
        let r = runs("q1", &["a", "ghost"]);
        let e = assemble_dataset(&r, &[], &stats_for(&["a"]), &AssembleOptions::default()).unwrap_err();
        assert!(matches!(e, Error::MissingDocStats(ref id) if id == "ghost"));

        let mut r = runs("q1", &["a"]);
        r.extend(runs("q2", &["b"]));
        let q = vec![QrelRecord { query_id: "q1".into(), doc_id: "a".into(), grade: 1 }];
        let stats = stats_for(&["a", "b"]);
        let ds = assemble_dataset(&r, &q, &stats, &AssembleOptions::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.lists[1].n_relevant(), 0);
        let opts = AssembleOptions { drop_unjudged_queries: true, ..Default::default() };
        let ds = assemble_dataset(&r, &q, &stats, &opts).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.lists[0].query_id(), "q1");
    }

    #[test]
    fn doc_stats_jsonl() {
        let text = r#"{"doc_id":"a","length":10,"unique_tokens":5,"vector":[0.5,1]}

{"doc_id":"b","length":3,"unique_tokens":2,"vector":[]}
"#;
        let t = DocStatsTable::read_jsonl(text.as_bytes(), "stats", "tfidf").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("a").unwrap().vector, vec![0.5, 1.0]);
        assert_eq!(t.similarity_source(), "tfidf");
        let e = DocStatsTable::read_jsonl("{\"doc_id\":1}\n".as_bytes(), "stats", "x").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig { n_queries: 20, seed: 7, ..Default::default() }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_dataset(&a, &mut ba).unwrap();
        write_dataset(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        let c = generate_synthetic(&SyntheticConfig { seed: 8, ..small_cfg() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_has_exact_relevant_count_and_is_sorted() {
        let ds = generate_synthetic(&SyntheticConfig { relevant_mean_spread: 2.0, ..small_cfg() }).unwrap();
        for l in &ds.lists {
            assert_eq!(l.len(), 100);
            assert_eq!(l.n_relevant(), 20);
            let s: Vec<f64> = l.docs().iter().map(|d| d.retrieval_score).collect();
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
            for d in l.docs() {
                assert!((50..=2000).contains(&d.doc_length));
                assert!(d.unique_tokens <= d.doc_length);
                assert!((-1.0..=1.0).contains(&d.sim_prev));
            }
            assert_eq!(l.docs()[0].sim_prev, 0.0);
            assert_eq!(l.docs()[99].sim_next, 0.0);
            let d = l.docs();
            assert_eq!(d[3].sim_next, d[4].sim_prev);
        }
        assert_eq!(ds.lists[3].query_id(), "q0003");
    }

    #[test]
    fn synthetic_separable_regime_gives_near_perfect_oracle() {
        let cfg = SyntheticConfig {
            relevant_score_mean: 30.0,
            relevant_score_std: 1.0,
            nonrelevant_rate: 1.0,
            ..small_cfg()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for l in &ds.lists {
            assert_eq!(f1_at(l, 20).unwrap(), 1.0);
            assert_eq!(oracle_cut(l, Metric::F1).cut_position, 20);
        }
    }

    #[test]
    fn synthetic_relevant_mean_within_three_standard_errors() {
        let cfg = SyntheticConfig { n_queries: 600, ..small_cfg() };
        let ds = generate_synthetic(&cfg).unwrap();
        let scores: Vec<f64> = ds
            .lists
            .iter()
            .flat_map(|l| l.docs())
            .filter(|d| d.relevance.is_relevant())
            .map(|d| d.retrieval_score)
            .collect();
        assert!(scores.len() >= 10_000);
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let se = cfg.relevant_score_std / (scores.len() as f64).sqrt();
        assert!((mean - cfg.relevant_score_mean).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn synthetic_config_problems_are_all_reported() {
        let cfg = SyntheticConfig {
            list_length: 1,
            relevant_fraction: 1.5,
            nonrelevant_rate: 0.0,
            ..Default::default()
        };
        assert_eq!(cfg.problems().len(), 3);
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = generate_synthetic(&SyntheticConfig { n_queries: 10, ..small_cfg() }).unwrap();
        let (tr, te) = split_dataset(&ds, 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(tr.split, Split::Train);
        assert_eq!(te.split, Split::Test);
        let (tr2, te2) = split_dataset(&ds, 0.8, 3).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        for l in &te.lists {
            assert!(tr.lists.iter().all(|t| t.query_id() != l.query_id()));
        }

        let one = Dataset::new(ds.lists[..1].to_vec(), Split::Train, DatasetMeta::default());
        assert!(split_dataset(&one, 0.8, 0).is_err());
        assert!(split_dataset(&ds, 1.0, 0).is_err());
        let (tr, te) = split_dataset(&ds, 0.01, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 9));
    }

    #[test]
    fn dataset_header_is_checked() {
        let ds = generate_synthetic(&SyntheticConfig { n_queries: 2, ..small_cfg() }).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let bad = text.replacen("sim_next", "sim_after", 1);
        assert!(matches!(read_dataset(bad.as_bytes(), "d"), Err(Error::Parse { line: 1, .. })));
        let short: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(read_dataset(short.as_bytes(), "d").is_err());
        assert!(read_dataset("".as_bytes(), "d").is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let ds = generate_synthetic(&SyntheticConfig { n_queries: 3, ..small_cfg() }).unwrap();
        let ds = crate::data::normalize_features(ds, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    fn arb_list() -> impl Strategy<Value = RankedList> {
        let doc = (
            -1e6f64..1e6,
            0u64..100_000,
            0u64..100_000,
            -1.0f64..=1.0,
            -1.0f64..=1.0,
            any::<bool>(),
            "[a-zA-Z0-9_-]{1,12}",
        );
        ("[a-z0-9]{1,6}", prop::collection::vec(doc, 1..12)).prop_map(|(qid, docs)| {
            let docs = docs
                .into_iter()
                .enumerate()
                .map(|(i, (s, len, uniq, sp, sn, rel, id))| RankedDoc {
                    doc_id: id,
                    rank: i + 1,
                    retrieval_score: s,
                    doc_length: len,
                    unique_tokens: uniq,
                    sim_prev: sp,
                    sim_next: sn,
                    relevance: if rel { Relevance::Relevant } else { Relevance::NonRelevant },
                })
                .collect();
            RankedList::new(qid, docs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(lists in prop::collection::vec(arb_list(), 1..6), test_split in any::<bool>()) {
            let split = if test_split { Split::Test } else { Split::Train };
            let ds = Dataset::new(lists, split, DatasetMeta::default());
            let ds = if test_split {
                let stats = FeatureStats::fit(&ds.lists).unwrap();
                crate::data::normalize_features(ds, Some(&stats)).unwrap()
            } else {
                ds
            };
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf).unwrap();
            prop_assert_eq!(read_dataset(buf.as_slice(), "mem").unwrap(), ds);
        }
    }
}
