//! Training objectives over the model's cut distribution (MLE, RAML,
//! BiCut-style, policy gradient) and the recall-bin MLE, plus the
//! mini-batch training loop.

use std::io::Write;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Gradients, Tape, Tensor, Var};
use crate::data::{Dataset, Metric, RankedList};
use crate::error::{Error, Result};
use crate::metrics::{argmax_first, metric_at, reward_vector, RewardVector};
use crate::model::{bin_of, AttnCutModel, Network, RecallConstraintModel};

/// Probabilities below this are raised to it before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// `q_k = exp(r_k/τ) / Σ exp(r_n/τ)`, with the maximum subtracted first.
pub fn payoff_distribution(rewards: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    if rewards.is_empty() {
        return Err(Error::EmptyList);
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward vector".into()));
    }
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = rewards.iter().map(|r| ((r - max) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

fn check_len(tape: &Tape<'_>, p: Var, n: usize, what: &'static str) -> Result<()> {
    if tape.value(p).numel() != n {
        return Err(Error::Shape {
            op: what,
            left: tape.shape(p).to_vec(),
            right: vec![n, 1],
        });
    }
    Ok(())
}

fn safe_log(tape: &mut Tape<'_>, p: Var) -> Var {
    if tape.value(p).data().iter().any(|v| *v < LOG_FLOOR) {
        warn!("probability below {LOG_FLOOR:e} clamped before log");
    }
    let c = tape.clamp_min(p, LOG_FLOOR);
    tape.log(c)
}

/// `-Σ w_k ln p_k` for a fixed weight vector shaped like `p`.
fn weighted_nll(tape: &mut Tape<'_>, p: Var, weights: Vec<f64>) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    let w = tape.constant(Tensor::from_vec(shape, weights)?);
    let lp = safe_log(tape, p);
    let prod = tape.mul(lp, w)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}

/// `-ln p_{k*}`, with `k_star` 1-based.
pub fn mle_loss(tape: &mut Tape<'_>, p: Var, k_star: usize) -> Result<Var> {
    let n = tape.value(p).numel();
    if k_star == 0 || k_star > n {
        return Err(Error::CutOutOfRange { k: k_star, n });
    }
    let mut w = vec![0.0; n];
    w[k_star - 1] = 1.0;
    weighted_nll(tape, p, w)
}

/// Cross-entropy `-Σ q_k ln p_k` against a fixed target distribution.
pub fn raml_loss(tape: &mut Tape<'_>, p: Var, q: &[f64]) -> Result<Var> {
    check_len(tape, p, q.len(), "raml_loss")?;
    weighted_nll(tape, p, q.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiCutLossConfig {
    /// Weight of the non-relevant term; `1 - alpha` weighs the relevant term.
    pub alpha: f64,
    /// Normalization factor `r`; `None` uses the relevant fraction of the
    /// training set.
    pub r_norm: Option<f64>,
    /// Sum over the first `cut_k` positions; `None` means the whole list.
    pub cut_k: Option<usize>,
}

impl Default for BiCutLossConfig {
    fn default() -> Self {
        BiCutLossConfig {
            alpha: 0.5,
            r_norm: None,
            cut_k: None,
        }
    }
}

/// `Σ_{n≤cut_k} α·[y_n=-1]·p_n/(1-r) + (1-α)·[y_n=1]·(1-p_n)/r`.
pub fn bicut_loss(
    tape: &mut Tape<'_>,
    p: Var,
    list: &RankedList,
    cut_k: usize,
    alpha: f64,
    r_norm: f64,
) -> Result<Var> {
    check_len(tape, p, list.len(), "bicut_loss")?;
    if cut_k == 0 || cut_k > list.len() {
        return Err(Error::CutOutOfRange { k: cut_k, n: list.len() });
    }
    if !(r_norm > 0.0 && r_norm < 1.0) {
        return Err(Error::Config(format!(
            "normalization factor r must lie in (0, 1), got {r_norm}"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let neg = alpha / (1.0 - r_norm);
    let pos = (1.0 - alpha) / r_norm;
    // Linear in p: Σ (a_n - b_n) p_n + Σ b_n.
    let mut slope = vec![0.0; list.len()];
    let mut offset = 0.0;
    for (n, rel) in list.labels().take(cut_k).enumerate() {
        if rel.is_relevant() {
            slope[n] = -pos;
            offset += pos;
        } else {
            slope[n] = neg;
        }
    }
    let shape = tape.shape(p).to_vec();
    let w = tape.constant(Tensor::from_vec(shape, slope)?);
    let prod = tape.mul(p, w)?;
    let s = tape.sum(prod);
    Ok(tape.add_scalar(s, offset))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    /// Decay rate in `(0, 1]`.
    pub gamma: f64,
    /// Trace index `l`; the discount is `gamma^(l-1)`.
    pub traces: u32,
    /// Sample one cut per list (REINFORCE) instead of the exact expectation.
    pub sampled: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            gamma: 1.0,
            traces: 1,
            sampled: false,
        }
    }
}

impl RlConfig {
    pub fn discount(&self) -> f64 {
        self.gamma.powi(self.traces.saturating_sub(1) as i32)
    }
}

/// Expected discounted reward, negated: `-Σ_k p_k γ^(l-1) r_k`.
pub fn rl_loss(tape: &mut Tape<'_>, p: Var, rewards: &[f64], cfg: &RlConfig) -> Result<Var> {
    check_len(tape, p, rewards.len(), "rl_loss")?;
    let d = cfg.discount();
    let shape = tape.shape(p).to_vec();
    let w = tape.constant(Tensor::from_vec(shape, rewards.iter().map(|r| -d * r).collect())?);
    let prod = tape.mul(p, w)?;
    Ok(tape.sum(prod))
}

/// Score-function estimate: draw `k ~ p`, loss `-γ^(l-1) r_k ln p_k`.
pub fn rl_sampled_loss<R: Rng>(
    tape: &mut Tape<'_>,
    p: Var,
    rewards: &[f64],
    cfg: &RlConfig,
    rng: &mut R,
) -> Result<Var> {
    check_len(tape, p, rewards.len(), "rl_sampled_loss")?;
    let probs = tape.value(p).data();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k = probs.len() - 1;
    for (i, v) in probs.iter().enumerate() {
        acc += v;
        if u < acc {
            k = i;
            break;
        }
    }
    let mut w = vec![0.0; probs.len()];
    w[k] = cfg.discount() * rewards[k];
    weighted_nll(tape, p, w)
}

/// Mean over positions of `-ln p'[n, label_n]` for an `N x B` matrix.
pub fn recall_mle_loss(tape: &mut Tape<'_>, p: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    let (n, b) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Shape {
            op: "recall_mle_loss",
            left: shape,
            right: vec![labels.len(), b],
        });
    }
    let mut w = vec![0.0; n * b];
    for (row, &label) in labels.iter().enumerate() {
        if label >= b {
            return Err(Error::InvalidData(format!("bin label {label} out of range for {b} bins")));
        }
        w[row * b + label] = 1.0 / n as f64;
    }
    weighted_nll(tape, p, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mle,
    Raml,
    Bicut,
    Rl,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Mle => "mle",
            Objective::Raml => "raml",
            Objective::Bicut => "bicut",
            Objective::Rl => "rl",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mle" => Ok(Objective::Mle),
            "raml" => Ok(Objective::Raml),
            "bicut" | "bi" => Ok(Objective::Bicut),
            "rl" => Ok(Objective::Rl),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub objective: Objective,
    pub metric: Metric,
    /// Softmax temperature of the RAML pay-off distribution.
    pub tau: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub bicut: BiCutLossConfig,
    pub rl: RlConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 20,
            epochs: 30,
            learning_rate: 3e-5,
            seed: 0,
            objective: Objective::Raml,
            metric: Metric::F1,
            tau: 0.95,
            early_stop_patience: 5,
            bicut: BiCutLossConfig::default(),
            rl: RlConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".to_string());
        }
        if self.epochs == 0 {
            p.push("epochs must be at least 1".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            p.push("learning_rate must be positive".to_string());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            p.push("tau must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.bicut.alpha) {
            p.push("bicut.alpha must lie in [0, 1]".to_string());
        }
        if let Some(r) = self.bicut.r_norm {
            if !(r > 0.0 && r < 1.0) {
                p.push("bicut.r_norm must lie in (0, 1)".to_string());
            }
        }
        if self.bicut.cut_k == Some(0) {
            p.push("bicut.cut_k must be at least 1".to_string());
        }
        if !(self.rl.gamma > 0.0 && self.rl.gamma <= 1.0) {
            p.push("rl.gamma must lie in (0, 1]".to_string());
        }
        if self.rl.traces == 0 {
            p.push("rl.traces must be at least 1".to_string());
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
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (the best validation epoch, or the
    /// last one without validation data).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Per-list supervision, computed once before training.
enum Target {
    Mle(usize),
    Raml(Vec<f64>),
    Bicut { list: RankedList, cut_k: usize, r_norm: f64 },
    Rl(Vec<f64>),
    Bins(Vec<usize>),
}

struct Example {
    features: Tensor,
    target: Target,
}

fn example_loss<'a, R: Rng>(
    net: &'a Network,
    tape: &mut Tape<'a>,
    ex: &Example,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Var> {
    let x = tape.constant(ex.features.clone());
    let logits = net.logits(tape, x)?;
    match &ex.target {
        Target::Bins(labels) => {
            let p = tape.softmax(logits, 1)?;
            recall_mle_loss(tape, p, labels)
        }
        target => {
            let p = tape.softmax(logits, 0)?;
            match target {
                Target::Mle(k) => mle_loss(tape, p, *k),
                Target::Raml(q) => raml_loss(tape, p, q),
                Target::Bicut { list, cut_k, r_norm } => {
                    bicut_loss(tape, p, list, *cut_k, cfg.bicut.alpha, *r_norm)
                }
                Target::Rl(r) if cfg.rl.sampled => rl_sampled_loss(tape, p, r, &cfg.rl, rng),
                Target::Rl(r) => rl_loss(tape, p, r, &cfg.rl),
                Target::Bins(_) => unreachable!(),
            }
        }
    }
}

fn require_stats(ds: &Dataset) -> Result<&crate::data::FeatureStats> {
    ds.feature_stats
        .as_ref()
        .ok_or_else(|| Error::Config("dataset features are not normalized".into()))
}

/// Mean metric of cutting each list at the argmax of the model.
pub fn mean_metric_at_argmax(model: &AttnCutModel, ds: &Dataset, metric: Metric) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for list in &ds.lists {
        let p = model.predict(list)?;
        total += metric_at(list, argmax_first(&p) + 1, metric)?;
    }
    Ok(total / ds.len() as f64)
}

/// Fraction of positions whose most likely bin is the true one.
pub fn bin_accuracy(model: &RecallConstraintModel, ds: &Dataset) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for list in &ds.lists {
        let p = model.predict(list)?;
        for k in 1..=list.len() {
            let truth = bin_of(crate::metrics::recall_at(list, k)?, &model.bin_edges);
            hit += usize::from(argmax_first(p.row_slice(k - 1)) == truth);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

fn fit<V>(net: &mut Network, examples: &[Example], cfg: &TrainConfig, mut validate: Option<V>) -> Result<TrainLog>
where
    V: FnMut(&Network) -> Result<f64>,
{
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    }, &net.store)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Option<Gradients> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut tape = Tape::new();
                let loss = example_loss(net, &mut tape, &examples[i], cfg, &mut sample_rng)?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NanLoss { epoch, batch: b + 1 });
                }
                batch_loss += value;
                tape.backward(loss)?;
                let g = tape.param_grads();
                match &mut grads {
                    Some(acc) => acc.add_assign(&g),
                    None => grads = Some(g),
                }
            }
            let mut grads = grads.expect("batches are non-empty");
            grads.scale(1.0 / batch.len() as f64);
            net.store.accumulate(&grads);
            adam.step(&mut net.store)?;
            epoch_loss += batch_loss;
        }
        let train_loss = epoch_loss / examples.len() as f64;
        let val_metric = match validate.as_mut() {
            Some(v) => Some(v(net)?),
            None => None,
        };
        let wall_ms = start.elapsed().as_millis() as u64;
        info!("epoch {epoch}: loss {train_loss:.6} val {val_metric:?} ({wall_ms} ms)");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_metric,
            wall_ms,
        });

        match val_metric {
            Some(m) => {
                if best.as_ref().is_none_or(|(b, _)| m > *b) {
                    best = Some((m, net.store.values()));
                    log.best_epoch = epoch;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                        log.stopped_early = true;
                        break;
                    }
                }
            }
            None => log.best_epoch = epoch,
        }
    }
    if let Some((_, values)) = best {
        net.store.set_values(values);
    }
    Ok(log)
}

/// Trains a cut model with `cfg.objective`. When `val` is given, the
/// parameters of the best validation epoch are kept.
pub fn train(model: &mut AttnCutModel, train_ds: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stats = require_stats(train_ds)?.clone();
    let r_norm = match cfg.bicut.r_norm {
        Some(r) => r,
        None => train_ds.relevant_fraction(),
    };
    let mut examples = Vec::with_capacity(train_ds.len());
    for list in &train_ds.lists {
        let rewards: RewardVector = reward_vector(list, cfg.metric);
        let target = match cfg.objective {
            Objective::Mle => Target::Mle(rewards.argmax()),
            Objective::Raml => Target::Raml(payoff_distribution(&rewards.values, cfg.tau)?),
            Objective::Bicut => Target::Bicut {
                list: list.clone(),
                cut_k: cfg.bicut.cut_k.unwrap_or(list.len()).min(list.len()),
                r_norm,
            },
            Objective::Rl => Target::Rl(rewards.values),
        };
        examples.push(Example {
            features: stats.feature_matrix(list),
            target,
        });
    }
    model.metric = cfg.metric;
    model.objective = cfg.objective.name().to_string();
    model.feature_stats = Some(stats.clone());
    model.similarity_source = train_ds.meta.similarity_source.clone();

    let metric = cfg.metric;
    let template = model.clone();
    let validate = val.map(|v| {
        move |net: &Network| {
            let probe = AttnCutModel {
                net: net.clone(),
                ..template.clone()
            };
            mean_metric_at_argmax(&probe, v, metric)
        }
    });
    fit(&mut model.net, &examples, cfg, validate)
}

/// Trains the recall-bin classifier with the per-position MLE loss.
pub fn train_recall(
    model: &mut RecallConstraintModel,
    train_ds: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stats = require_stats(train_ds)?.clone();
    let mut examples = Vec::with_capacity(train_ds.len());
    for list in &train_ds.lists {
        let labels = (1..=list.len())
            .map(|k| crate::model::recall_bin_label(list, k, &model.bin_edges))
            .collect::<Result<Vec<_>>>()?;
        examples.push(Example {
            features: stats.feature_matrix(list),
            target: Target::Bins(labels),
        });
    }
    model.feature_stats = Some(stats);
    model.similarity_source = train_ds.meta.similarity_source.clone();
    let template = model.clone();
    let validate = val.map(|v| {
        move |net: &Network| {
            let probe = RecallConstraintModel {
                net: net.clone(),
                ..template.clone()
            };
            bin_accuracy(&probe, v)
        }
    });
    fit(&mut model.net, &examples, cfg, validate)
}
