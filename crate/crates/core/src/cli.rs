//! The `attncut` command line: `prepare`, `train`, `evaluate` and
//! `truncate`, driven by a TOML experiment file that flags override.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_features, Dataset, Metric, Split, TruncationDecision};
use crate::error::Error;
use crate::ingest::{
    assemble_dataset, generate_synthetic, load_dataset, parse_qrels, parse_run_file, save_dataset, split_dataset,
    AssembleOptions, DocStatsTable, SyntheticConfig,
};
use crate::metrics::{fixed_k_cut, greedy_k_fit, oracle_cut};
use crate::model::{read_model_meta, AttnCutModel, ModelConfig, ModelKind, RecallConstraintModel};
use crate::objectives::{train, train_recall, Objective, TrainConfig, TrainLog};
use crate::truncation::{
    attach_evidence, constrained_truncate, evaluate, truncate, wilcoxon_signed_rank, ConstraintConfig, EvalSummary,
    Fallback, MethodDecision,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable naming the default experiment file.
pub const CONFIG_ENV: &str = "ATTNCUT_CONFIG";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub run_file: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub doc_stats: Option<PathBuf>,
    /// Directory holding `train.jsonl` and `test.jsonl`.
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub recall_checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Trec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub source: DataSource,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub truncate_to: usize,
    pub drop_unjudged_queries: bool,
    pub clamp_negative_grades: bool,
    /// Name of the vector space behind the doc-stats vectors.
    pub similarity_source: String,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            source: DataSource::Synthetic,
            train_fraction: 0.8,
            split_seed: 0,
            truncate_to: 300,
            drop_unjudged_queries: false,
            clamp_negative_grades: true,
            similarity_source: "tf-idf".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Share of the train file held out for early stopping; 0 disables.
    pub validation_fraction: f64,
    pub recall_bins: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            validation_fraction: 0.1,
            recall_bins: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub fixed_k: Vec<usize>,
    /// Metrics to report; empty means the training metric.
    pub metrics: Vec<Metric>,
    pub sigmas: Vec<f64>,
    pub histogram_bin_width: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            fixed_k: vec![5, 10, 50],
            metrics: Vec::new(),
            sigmas: Vec::new(),
            histogram_bin_width: 10,
        }
    }
}

/// Everything one experiment needs, as read from the TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When set, seeds generation, splitting, initialization and training.
    pub seed: Option<u64>,
    pub objective: Option<Objective>,
    pub metric: Option<Metric>,
    pub paths: PathsConfig,
    pub prepare: PrepareConfig,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub training: TrainingConfig,
    pub constraint: ConstraintConfig,
    pub evaluate: EvaluateConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Pushes the top-level seed, objective and metric into the module configs.
    fn resolve(&mut self) {
        if let Some(s) = self.seed {
            self.synthetic.seed = s;
            self.prepare.split_seed = s;
            self.model.init_seed = s;
            self.train.seed = s;
        }
        if let Some(o) = self.objective {
            self.train.objective = o;
        }
        if let Some(m) = self.metric {
            self.train.metric = m;
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        p.extend(self.synthetic.problems().into_iter().map(|s| format!("synthetic: {s}")));
        p.extend(self.model.problems().into_iter().map(|s| format!("model: {s}")));
        p.extend(self.train.problems().into_iter().map(|s| format!("train: {s}")));
        if !(self.prepare.train_fraction > 0.0 && self.prepare.train_fraction < 1.0) {
            p.push("prepare: train_fraction must lie in (0, 1)".into());
        }
        if self.prepare.truncate_to == 0 {
            p.push("prepare: truncate_to must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.training.validation_fraction) {
            p.push("training: validation_fraction must lie in [0, 1)".into());
        }
        if self.training.recall_bins < 2 {
            p.push("training: recall_bins must be at least 2".into());
        }
        if let Err(e) = self.constraint.validate() {
            p.push(format!("constraint: {e}"));
        }
        if self.evaluate.fixed_k.contains(&0) {
            p.push("evaluate: fixed_k values must be at least 1".into());
        }
        if self.evaluate.sigmas.iter().any(|s| !(0.0..=1.0).contains(s)) {
            p.push("evaluate: sigmas must lie in [0, 1]".into());
        }
        if self.evaluate.histogram_bin_width == 0 {
            p.push("evaluate: histogram_bin_width must be at least 1".into());
        }
        p
    }
}

#[derive(Debug, Parser)]
#[command(name = "attncut", version, about = "Ranked list truncation with attention models")]
pub struct Cli {
    /// TOML experiment file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the experiment.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build train/test dataset files from TREC inputs or the synthetic generator.
    Prepare(PrepareArgs),
    /// Train a cut model or a recall-bin model.
    Train(TrainArgs),
    /// Score models and baselines on the test split and write reports.
    Evaluate(EvaluateArgs),
    /// Write cut decisions for a dataset.
    Truncate(TruncateArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long, value_enum)]
    pub source: Option<DataSource>,
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    #[arg(long)]
    pub doc_stats: Option<PathBuf>,
    #[arg(long)]
    pub similarity_source: Option<String>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub n_queries: Option<usize>,
    #[arg(long)]
    pub list_length: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Cut,
    Recall,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with `train.jsonl`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Explicit train file; wins over `--data`.
    #[arg(long)]
    pub train_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cut")]
    pub model: ModelChoice,
    #[arg(long)]
    pub objective: Option<Objective>,
    #[arg(long)]
    pub metric: Option<Metric>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Per-direction LSTM width; attention and MLP widths follow.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log path; defaults next to the checkpoint.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory with `test.jsonl` (and `train.jsonl` for greedy-k).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub test_file: Option<PathBuf>,
    #[arg(long)]
    pub train_file: Option<PathBuf>,
    /// Cut-model checkpoint; repeatable.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Directory scanned for `*.ckpt` files.
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    #[arg(long)]
    pub recall_model: Option<PathBuf>,
    #[arg(long = "sigma")]
    pub sigmas: Vec<f64>,
    #[arg(long = "metric")]
    pub metrics: Vec<Metric>,
    #[arg(long = "fixed-k")]
    pub fixed_k: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TruncateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset file to cut.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub recall_model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub fallback: Option<FallbackArg>,
    /// Decisions file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FallbackArg {
    FullList,
    UnconstrainedArgmax,
}

impl From<FallbackArg> for Fallback {
    fn from(f: FallbackArg) -> Self {
        match f {
            FallbackArg::FullList => Fallback::FullList,
            FallbackArg::UnconstrainedArgmax => Fallback::UnconstrainedArgmax,
        }
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("attncut: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    match cli.command {
        Command::Prepare(a) => cmd_prepare(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Evaluate(a) => cmd_evaluate(cfg, a),
        Command::Truncate(a) => cmd_truncate(cfg, a),
    }
}

fn check(cfg: &ExperimentConfig, mut extra: Vec<String>) -> CliResult<()> {
    let mut all = cfg.problems();
    all.append(&mut extra);
    if all.is_empty() {
        Ok(())
    } else {
        Err(CliError::Usage(all.join("\n  ")))
    }
}

fn require_file(label: &str, path: &Option<PathBuf>, problems: &mut Vec<String>) {
    match path {
        None => problems.push(format!("{label} path is required")),
        Some(p) if !p.is_file() => problems.push(format!("{label} {} does not exist", p.display())),
        Some(_) => {}
    }
}

fn output_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.paths.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn open_buffered(path: &Path) -> CliResult<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn cmd_prepare(mut cfg: ExperimentConfig, a: PrepareArgs) -> CliResult<()> {
    if let Some(s) = a.source {
        cfg.prepare.source = s;
    }
    if let Some(f) = a.train_fraction {
        cfg.prepare.train_fraction = f;
    }
    if let Some(s) = a.similarity_source {
        cfg.prepare.similarity_source = s;
    }
    if let Some(n) = a.n_queries {
        cfg.synthetic.n_queries = n;
    }
    if let Some(n) = a.list_length {
        cfg.synthetic.list_length = n;
    }
    for (flag, slot) in [
        (a.run, &mut cfg.paths.run_file),
        (a.qrels, &mut cfg.paths.qrels),
        (a.doc_stats, &mut cfg.paths.doc_stats),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    cfg.resolve();
    let mut extra = Vec::new();
    if cfg.prepare.source == DataSource::Trec {
        require_file("run file", &cfg.paths.run_file, &mut extra);
        require_file("doc-stats", &cfg.paths.doc_stats, &mut extra);
        if let Some(q) = &cfg.paths.qrels {
            if !q.is_file() {
                extra.push(format!("qrels {} does not exist", q.display()));
            }
        }
    }
    check(&cfg, extra)?;
    let out = a.out.or_else(|| cfg.paths.data_dir.clone()).unwrap_or_else(|| output_dir(&cfg, None));
    create_dir(&out)?;

    let full = match cfg.prepare.source {
        DataSource::Synthetic => generate_synthetic(&cfg.synthetic)?,
        DataSource::Trec => {
            let run_path = cfg.paths.run_file.as_ref().expect("checked");
            let runs = parse_run_file(open_buffered(run_path)?, &run_path.display().to_string())?;
            let qrels = match &cfg.paths.qrels {
                Some(p) => parse_qrels(open_buffered(p)?, &p.display().to_string(), cfg.prepare.clamp_negative_grades)?,
                None => Vec::new(),
            };
            let ds_path = cfg.paths.doc_stats.as_ref().expect("checked");
            let table = DocStatsTable::read_jsonl(
                open_buffered(ds_path)?,
                &ds_path.display().to_string(),
                &cfg.prepare.similarity_source,
            )?;
            let opts = AssembleOptions {
                truncate_to: cfg.prepare.truncate_to,
                drop_unjudged_queries: cfg.prepare.drop_unjudged_queries,
            };
            assemble_dataset(&runs, &qrels, &table, &opts)?
        }
    };

    if !full.meta.labeled {
        // Nothing to learn from; keep every list for `truncate`.
        let path = out.join("unlabeled.jsonl");
        save_dataset(&full, &path)?;
        info!("wrote {} unlabeled lists to {}", full.len(), path.display());
        return Ok(());
    }
    let (train_ds, test_ds) = split_dataset(&full, cfg.prepare.train_fraction, cfg.prepare.split_seed)?;
    let train_ds = normalize_features(train_ds, None)?;
    let stats = train_ds.feature_stats.clone().expect("fitted on train");
    let test_ds = normalize_features(test_ds, Some(&stats))?;
    save_dataset(&train_ds, &out.join("train.jsonl"))?;
    save_dataset(&test_ds, &out.join("test.jsonl"))?;
    write_json(&stats, &out.join("feature_stats.json"))?;
    info!(
        "wrote {} train and {} test lists to {}",
        train_ds.len(),
        test_ds.len(),
        out.display()
    );
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn data_file(explicit: Option<PathBuf>, dir: Option<&PathBuf>, name: &str) -> Option<PathBuf> {
    explicit.or_else(|| dir.map(|d| d.join(name)))
}

fn load_labeled(path: &Path) -> CliResult<Dataset> {
    let ds = load_dataset(path)?;
    if !ds.meta.labeled {
        return Err(CliError::Usage(format!("{} has no relevance labels", path.display())));
    }
    if ds.feature_stats.is_none() {
        return Err(CliError::Usage(format!("{} has no feature statistics", path.display())));
    }
    Ok(ds)
}

/// Method name under which a cut model is reported.
pub fn method_name(objective: &str) -> String {
    match objective {
        "raml" => "attncut".to_string(),
        "bicut" => "attncut-bi".to_string(),
        other => format!("attncut-{other}"),
    }
}

fn method_rank(objective: &str) -> usize {
    ["raml", "mle", "bicut", "rl"].iter().position(|o| *o == objective).unwrap_or(4)
}

pub fn cmd_train(mut cfg: ExperimentConfig, a: TrainArgs) -> CliResult<()> {
    if a.objective.is_some() {
        cfg.objective = a.objective;
    }
    if a.metric.is_some() {
        cfg.metric = a.metric;
    }
    cfg.resolve();
    let t = &mut cfg.train;
    if let Some(v) = a.tau {
        t.tau = v;
    }
    if let Some(v) = a.gamma {
        t.rl.gamma = v;
    }
    if let Some(v) = a.alpha {
        t.bicut.alpha = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.patience {
        t.early_stop_patience = v;
    }
    if let Some(v) = a.validation_fraction {
        cfg.training.validation_fraction = v;
    }
    if let Some(v) = a.bins {
        cfg.training.recall_bins = v;
    }
    if let Some(h) = a.hidden {
        cfg.model.hidden_size = h;
        cfg.model.model_dim = 2 * h;
        cfg.model.mlp_hidden = 2 * h;
    }
    let train_path = data_file(a.train_file, a.data.as_ref().or(cfg.paths.data_dir.as_ref()), "train.jsonl");
    let mut extra = Vec::new();
    require_file("train dataset", &train_path, &mut extra);
    check(&cfg, extra)?;
    let train_path = train_path.expect("checked");

    let full = load_labeled(&train_path)?;
    let (train_ds, val_ds) = if cfg.training.validation_fraction > 0.0 && full.len() >= 2 {
        let (mut fit_part, mut val) =
            split_dataset(&full, 1.0 - cfg.training.validation_fraction, cfg.train.seed)?;
        fit_part.feature_stats = full.feature_stats.clone();
        val.feature_stats = full.feature_stats.clone();
        (fit_part, Some(val))
    } else {
        (full, None)
    };

    let default_dir = output_dir(&cfg, None);
    let (ckpt_path, log) = match a.model {
        ModelChoice::Cut => {
            let objective = cfg.train.objective.name();
            let path = a
                .out
                .or_else(|| cfg.paths.checkpoint.clone())
                .unwrap_or_else(|| default_dir.join(format!("{}.ckpt", method_name(objective))));
            let mut model = AttnCutModel::new(&cfg.model, cfg.train.metric, objective)?;
            let log = train(&mut model, &train_ds, val_ds.as_ref(), &cfg.train)?;
            ensure_parent(&path)?;
            model.save(&path)?;
            (path, log)
        }
        ModelChoice::Recall => {
            let path = a
                .out
                .or_else(|| cfg.paths.recall_checkpoint.clone())
                .unwrap_or_else(|| default_dir.join("recall.ckpt"));
            let mut model = RecallConstraintModel::new(&cfg.model, cfg.training.recall_bins)?;
            let log = train_recall(&mut model, &train_ds, val_ds.as_ref(), &cfg.train)?;
            ensure_parent(&path)?;
            model.save(&path)?;
            (path, log)
        }
    };
    let log_path = a.log.unwrap_or_else(|| ckpt_path.with_extension("log.jsonl"));
    write_log(&log, &log_path)?;
    info!("saved {} (best epoch {})", ckpt_path.display(), log.best_epoch);
    Ok(())
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_log(log: &TrainLog, path: &Path) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    log.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

struct Row {
    method: String,
    summary: EvalSummary,
}

fn decisions_for<F>(test: &Dataset, f: F) -> CliResult<Vec<TruncationDecision>>
where
    F: Fn(&crate::data::RankedList) -> crate::Result<TruncationDecision>,
{
    Ok(test.lists.iter().map(f).collect::<crate::Result<Vec<_>>>()?)
}

fn collect_checkpoints(a: &EvaluateArgs, cfg: &ExperimentConfig) -> CliResult<Vec<PathBuf>> {
    let mut paths = a.checkpoints.clone();
    if paths.is_empty() {
        if let Some(p) = &cfg.paths.checkpoint {
            paths.push(p.clone());
        }
    }
    if let Some(dir) = &a.model_dir {
        let mut found: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        found.sort();
        paths.extend(found);
    }
    Ok(paths)
}

pub fn cmd_evaluate(mut cfg: ExperimentConfig, a: EvaluateArgs) -> CliResult<()> {
    cfg.resolve();
    if !a.fixed_k.is_empty() {
        cfg.evaluate.fixed_k = a.fixed_k.clone();
    }
    if !a.metrics.is_empty() {
        cfg.evaluate.metrics = a.metrics.clone();
    }
    if !a.sigmas.is_empty() {
        cfg.evaluate.sigmas = a.sigmas.clone();
    }
    if a.recall_model.is_some() {
        cfg.paths.recall_checkpoint = a.recall_model.clone();
    }
    let dir = a.data.as_ref().or(cfg.paths.data_dir.as_ref());
    let test_path = data_file(a.test_file.clone(), dir, "test.jsonl");
    let train_path = data_file(a.train_file.clone(), dir, "train.jsonl");
    let mut extra = Vec::new();
    require_file("test dataset", &test_path, &mut extra);
    if !cfg.evaluate.sigmas.is_empty() {
        require_file("recall model", &cfg.paths.recall_checkpoint, &mut extra);
    }
    let checkpoints = collect_checkpoints(&a, &cfg)?;
    for c in &checkpoints {
        if !c.is_file() {
            extra.push(format!("checkpoint {} does not exist", c.display()));
        }
    }
    check(&cfg, extra)?;
    let test = load_labeled(test_path.as_ref().expect("checked"))?;
    let train_ds = match train_path.filter(|p| p.is_file()) {
        Some(p) => Some(load_labeled(&p)?),
        None => {
            warn!("no train dataset; skipping greedy-k");
            None
        }
    };

    let mut models = Vec::new();
    for path in &checkpoints {
        let (meta, _) = read_model_meta(path)?;
        if meta.kind != ModelKind::Cut {
            warn!("{} is not a cut model; skipped", path.display());
            continue;
        }
        models.push(AttnCutModel::load(path)?);
    }
    models.sort_by_key(|m| method_rank(&m.objective));
    let recall = match &cfg.paths.recall_checkpoint {
        Some(p) if !cfg.evaluate.sigmas.is_empty() => Some(RecallConstraintModel::load(p)?),
        _ => None,
    };

    let metrics = if cfg.evaluate.metrics.is_empty() {
        vec![cfg.train.metric]
    } else {
        cfg.evaluate.metrics.clone()
    };
    let mut rows: Vec<(Metric, Vec<Row>)> = Vec::new();
    let mut all_decisions = Vec::new();
    for &metric in &metrics {
        let mut methods: Vec<(String, Vec<TruncationDecision>)> = Vec::new();
        let mut seen = BTreeMap::new();
        for model in models.iter().filter(|m| m.metric == metric) {
            let name = method_name(&model.objective);
            if seen.insert(name.clone(), ()).is_some() {
                warn!("more than one {name} model for {metric}; keeping the first");
                continue;
            }
            methods.push((name, decisions_for(&test, |l| truncate(model, l))?));
        }
        if let Some(rm) = &recall {
            match models.iter().find(|m| m.metric == metric && m.objective == "raml") {
                Some(model) => {
                    for &sigma in &cfg.evaluate.sigmas {
                        let cc = ConstraintConfig { sigma, ..cfg.constraint.clone() };
                        let d = decisions_for(&test, |l| constrained_truncate(model, rm, l, &cc))?;
                        methods.push((format!("attncut@sigma={sigma}"), d));
                    }
                }
                None => warn!("constrained rows need a raml model trained for {metric}"),
            }
        }
        methods.push(("oracle".into(), decisions_for(&test, |l| Ok(oracle_cut(l, metric)))?));
        for &k in &cfg.evaluate.fixed_k {
            methods.push((format!("fixed-{k}"), decisions_for(&test, |l| Ok(fixed_k_cut(l, k, metric)))?));
        }
        if let Some(tr) = &train_ds {
            let k = greedy_k_fit(tr, metric)?;
            info!("greedy-k for {metric}: k = {k}");
            methods.push(("greedy-k".into(), decisions_for(&test, |l| Ok(fixed_k_cut(l, k, metric)))?));
        }

        let mut metric_rows = Vec::new();
        for (method, mut decisions) in methods {
            let sigma = method.strip_prefix("attncut@sigma=").and_then(|s| s.parse().ok());
            let summary = evaluate(&decisions, &test, metric, sigma)?;
            for (d, l) in decisions.iter_mut().zip(&test.lists) {
                attach_evidence(d, l)?;
            }
            all_decisions.extend(decisions.into_iter().map(|decision| MethodDecision {
                method: method.clone(),
                decision,
            }));
            metric_rows.push(Row { method, summary });
        }
        rows.push((metric, metric_rows));
    }

    let out = output_dir(&cfg, a.out);
    create_dir(&out)?;
    write_report(&rows, &out.join("report.csv"))?;
    write_histogram(&rows, test.max_list_len(), cfg.evaluate.histogram_bin_width, &out.join("cutoff_histogram.csv"))?;
    let mut w = BufWriter::new(File::create(out.join("decisions.jsonl"))?);
    crate::truncation::write_decisions(&all_decisions, &mut w)?;
    for (metric, metric_rows) in &rows {
        for r in metric_rows {
            info!("{metric} {:<22} {:.4}", r.method, r.summary.mean_metric);
        }
    }
    Ok(())
}

fn write_report(rows: &[(Metric, Vec<Row>)], path: &Path) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "method,metric,mean,mean_recall,n_queries,meeting_sigma,p_vs_attncut")?;
    for (metric, metric_rows) in rows {
        let reference = metric_rows.iter().find(|r| r.method == "attncut").map(|r| r.summary.metric_values());
        for r in metric_rows {
            let p = match &reference {
                Some(base) if r.method != "attncut" => {
                    format!("{:.6}", wilcoxon_signed_rank(&r.summary.metric_values(), base)?.p_value)
                }
                _ => String::new(),
            };
            let meeting = r.summary.meeting_sigma.map(|m| m.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{:.6},{:.6},{},{},{}",
                r.method,
                metric,
                r.summary.mean_metric,
                r.summary.mean_recall,
                r.summary.per_query.len(),
                meeting,
                p
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Cut-off positions per method, in fixed-width position bins. Every bin
/// is listed, so counts per method sum to the number of queries.
fn write_histogram(rows: &[(Metric, Vec<Row>)], max_len: usize, width: usize, path: &Path) -> CliResult<()> {
    let n_bins = max_len.div_ceil(width).max(1);
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "method,metric,position_bin,count")?;
    for (metric, metric_rows) in rows {
        for r in metric_rows {
            let mut counts = vec![0usize; n_bins];
            for c in r.summary.cuts() {
                counts[((c - 1) / width).min(n_bins - 1)] += 1;
            }
            for (b, count) in counts.iter().enumerate() {
                let lo = b * width + 1;
                let hi = ((b + 1) * width).min(max_len.max(1));
                writeln!(w, "{},{},{}-{},{}", r.method, metric, lo, hi, count)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_truncate(mut cfg: ExperimentConfig, a: TruncateArgs) -> CliResult<()> {
    cfg.resolve();
    if let Some(s) = a.sigma {
        cfg.constraint.sigma = s;
    }
    if let Some(f) = a.fallback {
        cfg.constraint.fallback = f.into();
    }
    let checkpoint = a.checkpoint.or_else(|| cfg.paths.checkpoint.clone());
    let recall_path = a.recall_model.or_else(|| cfg.paths.recall_checkpoint.clone());
    let mut extra = Vec::new();
    require_file("checkpoint", &checkpoint, &mut extra);
    if !a.data.is_file() {
        extra.push(format!("dataset {} does not exist", a.data.display()));
    }
    if a.sigma.is_some() {
        require_file("recall model (needed by --sigma)", &recall_path, &mut extra);
    }
    check(&cfg, extra)?;

    let ds = load_dataset(&a.data)?;
    let model = AttnCutModel::load(checkpoint.as_ref().expect("checked"))?;
    let recall = match a.sigma {
        Some(_) => Some(RecallConstraintModel::load(recall_path.as_ref().expect("checked"))?),
        None => None,
    };
    let mut decisions = Vec::with_capacity(ds.len());
    for list in &ds.lists {
        let mut d = match &recall {
            Some(rm) => constrained_truncate(&model, rm, list, &cfg.constraint)?,
            None => truncate(&model, list)?,
        };
        if ds.meta.labeled {
            attach_evidence(&mut d, list)?;
        }
        decisions.push(MethodDecision {
            method: method_name(&model.objective),
            decision: d,
        });
    }
    match &a.out {
        Some(p) => {
            ensure_parent(p)?;
            crate::truncation::write_decisions(&decisions, BufWriter::new(File::create(p)?))?;
        }
        None => crate::truncation::write_decisions(&decisions, std::io::stdout().lock())?,
    }
    if ds.split == Split::Train {
        warn!("{} is a train split", a.data.display());
    }
    Ok(())
}
