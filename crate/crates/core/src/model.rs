//! The truncation network (Bi-LSTM encoder, self-attention, residual layer
//! norm, MLP head) and its two uses: a distribution over cut positions and
//! a per-position recall-bin classifier.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::data::{FeatureStats, Metric, RankedList, FEATURE_DIM, FEATURE_LAYOUT};
use crate::error::{Error, Result};
use crate::layers::{AttentionScale, BiLstm, Mlp, MultiHeadAttention, ResidualLayerNorm};
use crate::metrics::recall_at;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Per-direction LSTM width.
    pub hidden_size: usize,
    pub lstm_layers: usize,
    /// Attention width `t`; must equal `2 * hidden_size`.
    pub model_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub attention_scale: AttentionScale,
    /// Seeds parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: FEATURE_DIM,
            hidden_size: 128,
            lstm_layers: 2,
            model_dim: 256,
            heads: 4,
            mlp_hidden: 256,
            attention_scale: AttentionScale::ModelDim,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Same layout with a different per-direction width; `model_dim` and
    /// `mlp_hidden` follow.
    pub fn with_hidden(hidden_size: usize) -> Self {
        ModelConfig {
            hidden_size,
            model_dim: 2 * hidden_size,
            mlp_hidden: 2 * hidden_size,
            ..Default::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.feature_dim != FEATURE_DIM {
            p.push(format!("feature_dim must be {FEATURE_DIM}, got {}", self.feature_dim));
        }
        for (name, v) in [
            ("hidden_size", self.hidden_size),
            ("lstm_layers", self.lstm_layers),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        if self.model_dim != 2 * self.hidden_size {
            p.push(format!(
                "model_dim {} must equal twice hidden_size {}",
                self.model_dim, self.hidden_size
            ));
        }
        if self.heads > 0 && self.model_dim % self.heads != 0 {
            p.push(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            ));
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

/// Parameters and structure shared by both model kinds.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub out_dim: usize,
    pub store: ParamStore,
    encoder: BiLstm,
    attention: MultiHeadAttention,
    norm: ResidualLayerNorm,
    head: Mlp,
}

impl Network {
    pub fn new(config: &ModelConfig, out_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let encoder = BiLstm::new(
            &mut store,
            "encoder",
            config.feature_dim,
            config.hidden_size,
            config.lstm_layers,
            &mut rng,
        )?;
        let attention = MultiHeadAttention::new(
            &mut store,
            "attention",
            config.model_dim,
            config.heads,
            config.attention_scale,
            &mut rng,
        )?;
        let norm = ResidualLayerNorm::new(&mut store, "norm", config.model_dim)?;
        let head = Mlp::new(&mut store, "head", config.model_dim, config.mlp_hidden, out_dim, &mut rng)?;
        Ok(Network {
            config: config.clone(),
            out_dim,
            store,
            encoder,
            attention,
            norm,
            head,
        })
    }

    /// `N x feature_dim` features to `N x out_dim` unnormalized scores.
    pub fn logits<'a>(&'a self, tape: &mut Tape<'a>, features: Var) -> Result<Var> {
        self.logits_with(tape, &self.store, features)
    }

    /// [`Self::logits`] against another store with the same layout.
    pub fn logits_with<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, features: Var) -> Result<Var> {
        let shape = tape.shape(features);
        if shape[0] == 0 {
            return Err(Error::EmptyList);
        }
        if shape[1] != self.config.feature_dim {
            return Err(Error::Shape {
                op: "network input",
                left: shape.to_vec(),
                right: vec![shape[0], self.config.feature_dim],
            });
        }
        let h = self.encoder.forward(tape, store, features)?;
        let m = self.attention.forward(tape, store, h)?;
        let m = self.norm.forward(tape, store, m, h)?;
        self.head.forward(tape, store, m)
    }

    /// Sets the output layer to zero, so every logit is zero.
    pub fn zero_output_layer(&mut self) {
        for id in [self.head.out.weight, self.head.out.bias] {
            self.store.get_mut(id).value.data_mut().fill(0.0);
        }
    }
}

fn features_of(stats: Option<&FeatureStats>, list: &RankedList) -> Result<Tensor> {
    let stats = stats.ok_or_else(|| Error::Config("model carries no feature statistics".into()))?;
    Ok(stats.feature_matrix(list))
}

/// Distribution over cut positions.
#[derive(Debug, Clone)]
pub struct AttnCutModel {
    pub net: Network,
    pub metric: Metric,
    /// Training objective tag, kept for reports.
    pub objective: String,
    pub feature_stats: Option<FeatureStats>,
    pub similarity_source: String,
}

impl AttnCutModel {
    pub fn new(config: &ModelConfig, metric: Metric, objective: impl Into<String>) -> Result<Self> {
        Ok(AttnCutModel {
            net: Network::new(config, 1)?,
            metric,
            objective: objective.into(),
            feature_stats: None,
            similarity_source: "none".into(),
        })
    }

    /// `N x 1` column of cut probabilities; softmax runs down the positions.
    pub fn distribution<'a>(&'a self, tape: &mut Tape<'a>, features: Var) -> Result<Var> {
        let logits = self.net.logits(tape, features)?;
        tape.softmax(logits, 0)
    }

    pub fn forward(&self, features: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let p = self.distribution(&mut tape, x)?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Normalizes with the stored statistics, then runs [`Self::forward`].
    pub fn predict(&self, list: &RankedList) -> Result<Vec<f64>> {
        self.forward(&features_of(self.feature_stats.as_ref(), list)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ModelMeta {
            kind: ModelKind::Cut,
            config: self.net.config.clone(),
            feature_layout: layout(),
            feature_stats: self.feature_stats.clone(),
            metric: Some(self.metric),
            objective: self.objective.clone(),
            bin_edges: None,
            similarity_source: self.similarity_source.clone(),
        };
        write_checkpoint(&self.net.store, &meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, ckpt) = read_checkpoint(path, ModelKind::Cut)?;
        let mut net = Network::new(&meta.config, 1)?;
        net.store.load_named(&ckpt.params)?;
        Ok(AttnCutModel {
            net,
            metric: meta
                .metric
                .ok_or_else(|| Error::CheckpointFormat("metric missing from metadata".into()))?,
            objective: meta.objective,
            feature_stats: meta.feature_stats,
            similarity_source: meta.similarity_source,
        })
    }
}

/// `B + 1` edges splitting `[0, 1]` into equal bins.
pub fn equal_width_edges(bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| i as f64 / bins as f64).collect()
}

fn check_edges(edges: &[f64]) -> Result<()> {
    let ok = edges.len() >= 2
        && edges[0] == 0.0
        && edges[edges.len() - 1] == 1.0
        && edges.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "bin edges must rise strictly from 0 to 1, got {edges:?}"
        )))
    }
}

/// Index `i` with `edges[i] <= recall < edges[i+1]`; the top edge belongs
/// to the last bin.
pub fn bin_of(recall: f64, edges: &[f64]) -> usize {
    let last = edges.len() - 2;
    (0..=last).find(|&i| recall < edges[i + 1]).unwrap_or(last)
}

/// Recall bin of cutting `list` after position `k`.
pub fn recall_bin_label(list: &RankedList, k: usize, edges: &[f64]) -> Result<usize> {
    check_edges(edges)?;
    Ok(bin_of(recall_at(list, k)?, edges))
}

/// Per-position classifier over recall bins.
#[derive(Debug, Clone)]
pub struct RecallConstraintModel {
    pub net: Network,
    pub bin_edges: Vec<f64>,
    pub feature_stats: Option<FeatureStats>,
    pub similarity_source: String,
}

impl RecallConstraintModel {
    pub fn new(config: &ModelConfig, bins: usize) -> Result<Self> {
        Self::with_edges(config, equal_width_edges(bins))
    }

    pub fn with_edges(config: &ModelConfig, bin_edges: Vec<f64>) -> Result<Self> {
        check_edges(&bin_edges)?;
        Ok(RecallConstraintModel {
            net: Network::new(config, bin_edges.len() - 1)?,
            bin_edges,
            feature_stats: None,
            similarity_source: "none".into(),
        })
    }

    pub fn bins(&self) -> usize {
        self.bin_edges.len() - 1
    }

    /// `N x B`, each row a distribution over bins.
    pub fn distribution<'a>(&'a self, tape: &mut Tape<'a>, features: Var) -> Result<Var> {
        let logits = self.net.logits(tape, features)?;
        tape.softmax(logits, 1)
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let p = self.distribution(&mut tape, x)?;
        Ok(tape.value(p).clone())
    }

    pub fn predict(&self, list: &RankedList) -> Result<Tensor> {
        self.forward(&features_of(self.feature_stats.as_ref(), list)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ModelMeta {
            kind: ModelKind::Recall,
            config: self.net.config.clone(),
            feature_layout: layout(),
            feature_stats: self.feature_stats.clone(),
            metric: None,
            objective: "recall-mle".into(),
            bin_edges: Some(self.bin_edges.clone()),
            similarity_source: self.similarity_source.clone(),
        };
        write_checkpoint(&self.net.store, &meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, ckpt) = read_checkpoint(path, ModelKind::Recall)?;
        let edges = meta
            .bin_edges
            .ok_or_else(|| Error::CheckpointFormat("bin edges missing from metadata".into()))?;
        let mut model = Self::with_edges(&meta.config, edges)?;
        model.net.store.load_named(&ckpt.params)?;
        model.feature_stats = meta.feature_stats;
        model.similarity_source = meta.similarity_source;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cut,
    Recall,
}

/// JSON record stored inside the checkpoint container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub feature_layout: Vec<String>,
    pub feature_stats: Option<FeatureStats>,
    pub metric: Option<Metric>,
    pub objective: String,
    pub bin_edges: Option<Vec<f64>>,
    pub similarity_source: String,
}

fn layout() -> Vec<String> {
    FEATURE_LAYOUT.iter().map(|s| s.to_string()).collect()
}

fn write_checkpoint(store: &ParamStore, meta: &ModelMeta, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::from_store(store, serde_json::to_string(meta)?);
    ckpt.write_to(BufWriter::new(File::create(path)?))
}

/// Reads the container and its metadata without building a model.
pub fn read_model_meta(path: &Path) -> Result<(ModelMeta, Checkpoint)> {
    let ckpt = Checkpoint::read_from(BufReader::new(File::open(path)?))?;
    let meta: ModelMeta = serde_json::from_str(&ckpt.metadata)
        .map_err(|e| Error::CheckpointFormat(format!("bad metadata: {e}")))?;
    if meta.feature_layout != FEATURE_LAYOUT {
        return Err(Error::CheckpointFormat(format!(
            "feature layout {:?} differs from {:?}",
            meta.feature_layout, FEATURE_LAYOUT
        )));
    }
    Ok((meta, ckpt))
}

fn read_checkpoint(path: &Path, want: ModelKind) -> Result<(ModelMeta, Checkpoint)> {
    let (meta, ckpt) = read_model_meta(path)?;
    if meta.kind != want {
        return Err(Error::CheckpointFormat(format!(
            "expected a {want:?} model, found {:?}",
            meta.kind
        )));
    }
    Ok((meta, ckpt))
}
