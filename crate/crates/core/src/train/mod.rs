//! Optimisation loop, learning-rate schedule and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_manifest, save_checkpoint,
    Checkpoint, CheckpointError, EntryKind, Manifest, ManifestEntry, RngState, FORMAT_VERSION,
};
pub use optim::{adamw_step, clip_global_norm, global_norm, lr_at, AdamWSettings, Moments};

use std::io::Write;
use std::path::PathBuf;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    encode_graph, epoch_order, DataError, EncodedTriplet, KnowledgeGraph, TextVocabulary,
    TokenBatch, Vocabulary,
};
use crate::masking::{apply_masking, apply_masking_with, CorruptionScheme, MaskedBatch};
use crate::model::{self, init_parameters, ModelConfig, Parameters};
use crate::seed::{derive_indexed, derive_seed};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error("contract violated: {0}")]
    Contract(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Save every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Minimum word count for the knowledge vocabulary.
    pub min_word_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            peak_lr: 1e-4,
            warmup_ratio: 0.08,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 42,
            checkpoint_interval: 0,
            min_word_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(TrainError::Contract(format!(
                "warmup ratio {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Contract("clip norm must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Contract("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWSettings {
        AdamWSettings {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    /// Number of completed updates.
    pub step: u64,
    pub params: Parameters<f32>,
    /// One entry per learnable tensor.
    pub moments: IndexMap<String, Moments>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: Parameters<f32>, rng: ChaCha8Rng) -> Self {
        let moments = params
            .iter()
            .filter(|(_, e)| e.group.learnable())
            .map(|(n, e)| (n.to_string(), Moments::zeros(e.tensor.numel())))
            .collect();
        Self {
            step: 0,
            params,
            moments,
            rng,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub mlm_loss: f64,
    pub match_loss: Option<f64>,
    pub grad_norm: f64,
}

/// `step,lr,loss[,match_loss]` with shortest round-trip float formatting.
pub fn write_trace_csv(rows: &[TraceRow], mut out: impl Write) -> std::io::Result<()> {
    let with_match = rows.iter().any(|r| r.match_loss.is_some());
    if with_match {
        writeln!(out, "step,lr,loss,match_loss")?;
    } else {
        writeln!(out, "step,lr,loss")?;
    }
    for r in rows {
        write!(out, "{},{},{}", r.step, r.lr, r.loss)?;
        if with_match {
            write!(out, ",{}", r.match_loss.unwrap_or(f64::NAN))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Tokenised training corpus shared by training and evaluation.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub text_vocab: TextVocabulary,
    pub data: Vec<EncodedTriplet>,
}

impl Corpus {
    pub fn build(kg: &KnowledgeGraph, cfg: &ModelConfig, min_word_count: usize) -> Result<Self, TrainError> {
        let text_vocab = TextVocabulary::build(
            kg.triplets()
                .iter()
                .flat_map(|t| [t.relation.as_str(), t.attribute.as_str()]),
            min_word_count,
        );
        Self::with_vocab(kg, cfg, text_vocab)
    }

    pub fn with_vocab(kg: &KnowledgeGraph, cfg: &ModelConfig, text_vocab: TextVocabulary) -> Result<Self, TrainError> {
        let data = encode_graph(kg, &Vocabulary::new(), &text_vocab, cfg.limits)?;
        Ok(Self { text_vocab, data })
    }
}

/// Optional sink for periodic checkpoints.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub interval: u64,
}

/// Drives training one update at a time; every random choice flows from the
/// configured seed and the state RNG, so runs resume bit-exactly.
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub corpus: Corpus,
    pub state: TrainState,
    pub trace: Vec<TraceRow>,
    sink: Option<CheckpointSink>,
    epoch_cache: Option<(u64, Vec<Vec<usize>>)>,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig, corpus: Corpus) -> Result<Self, TrainError> {
        let params = init_parameters(&model, derive_seed(config.seed, "init"))?;
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train-rng"));
        Self::from_state(model, config, corpus, TrainState::new(params, rng))
    }

    pub fn from_state(
        model: ModelConfig,
        config: TrainConfig,
        corpus: Corpus,
        state: TrainState,
    ) -> Result<Self, TrainError> {
        model.validate()?;
        config.validate()?;
        if corpus.data.is_empty() {
            return Err(TrainError::Contract("training graph is empty".into()));
        }
        if model.text_vocab < corpus.text_vocab.size() {
            return Err(TrainError::Contract(format!(
                "model text vocabulary {} smaller than corpus vocabulary {}",
                model.text_vocab,
                corpus.text_vocab.size()
            )));
        }
        if model.triplet_match {
            let first = &corpus.data[0].attribute;
            if corpus.data.iter().all(|t| &t.attribute == first) {
                return Err(TrainError::Contract(
                    "triplet matching needs at least two distinct attributes".into(),
                ));
            }
        }
        Ok(Self {
            model,
            config,
            corpus,
            state,
            trace: Vec::new(),
            sink: None,
            epoch_cache: None,
        })
    }

    pub fn resume(checkpoint: Checkpoint, config: TrainConfig, corpus: Corpus) -> Result<Self, TrainError> {
        if checkpoint.text_vocab != corpus.text_vocab.words() {
            return Err(CheckpointError::Mismatch("knowledge vocabulary differs".into()).into());
        }
        Self::from_state(checkpoint.model_config, config, corpus, checkpoint.state)
    }

    pub fn with_checkpoints(mut self, sink: CheckpointSink) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.clone(),
            train_config: Some(self.config.clone()),
            text_vocab: self.corpus.text_vocab.words().to_vec(),
            state: self.state.clone(),
        }
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.corpus.data.len();
        let per_epoch = n.div_ceil(self.config.batch_size) as u64;
        let epoch = step / per_epoch;
        if self.epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            let order = epoch_order(
                n,
                self.config.batch_size,
                Some(derive_indexed(self.config.seed, "shuffle", epoch)),
            );
            self.epoch_cache = Some((epoch, order));
        }
        self.epoch_cache.as_ref().unwrap().1[(step % per_epoch) as usize].clone()
    }

    /// Builds the masked batch for the next update, consuming state RNG.
    pub fn next_batch(&mut self) -> Result<MaskedBatch, TrainError> {
        let idx = self.batch_indices(self.state.step);
        let data = &self.corpus.data;
        let mut swapped: Vec<EncodedTriplet> = idx.iter().map(|&i| data[i].clone()).collect();
        let mut match_labels = None;
        if self.model.triplet_match {
            let rng = &mut self.state.rng;
            let k = ((self.model.match_fraction * idx.len() as f64) + 0.5).floor() as usize;
            let k = k.min(idx.len());
            let chosen = rand::seq::index::sample(rng, idx.len(), k);
            let mut labels = vec![true; idx.len()];
            for pos in chosen.iter() {
                let own = &data[idx[pos]].attribute;
                let replacement = loop {
                    let j = rng.gen_range(0..data.len());
                    if &data[j].attribute != own {
                        break data[j].attribute.clone();
                    }
                };
                swapped[pos].attribute = replacement;
                labels[pos] = false;
            }
            match_labels = Some(labels);
        }
        let refs: Vec<&EncodedTriplet> = swapped.iter().collect();
        let tokens = TokenBatch::from_triplets(&refs);
        let mask_seed = self.state.rng.gen::<u64>();
        let mut batch = apply_masking(&tokens, self.model.mask_ratio, mask_seed)?;
        batch.match_labels = match_labels;
        Ok(batch)
    }

    /// Runs one update and returns its trace row.
    pub fn step(&mut self) -> Result<TraceRow, TrainError> {
        let step = self.state.step;
        let batch = self.next_batch()?;
        let mut g = Graph::<f32>::new();
        let bound = self.state.params.bind(&mut g);
        let out = model::forward(&mut g, &bound, &self.model, &batch).map_err(|e| match e {
            TensorError::DegenerateRow { .. } => TrainError::NonFinite { step, loss: f64::NAN },
            other => other.into(),
        })?;
        let loss = g.value(out.loss).item() as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, loss });
        }
        g.backward(out.loss)?;
        let mut grads: IndexMap<String, Tensor<f32>> = bound
            .iter()
            .filter(|(_, v)| g.requires_grad(*v))
            .map(|(name, v)| (name.to_string(), g.grad(v)))
            .collect();
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        let lr = lr_at(step, self.config.steps, self.config.warmup_ratio, self.config.peak_lr);
        adamw_step(
            &mut self.state.params,
            &mut self.state.moments,
            &grads,
            step + 1,
            lr,
            self.config.adamw(),
        )?;
        self.state.step += 1;
        let row = TraceRow {
            step,
            lr,
            loss,
            mlm_loss: g.value(out.mlm).item() as f64,
            match_loss: out.matching.map(|m| g.value(m).item() as f64),
            grad_norm,
        };
        self.trace.push(row.clone());
        if let Some(sink) = &self.sink {
            if sink.interval > 0 && self.state.step % sink.interval == 0 {
                let path = sink.dir.join(format!("checkpoint-{:06}.ckpt", self.state.step));
                save_checkpoint(&self.checkpoint(), &path)?;
            }
        }
        Ok(row)
    }

    /// Steps until `target` updates have completed.
    pub fn run_until(&mut self, target: u64) -> Result<(), TrainError> {
        while self.state.step < target {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), TrainError> {
        self.run_until(self.config.steps)
    }
}

/// Trains from scratch for `train_cfg.steps` updates.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    kg: &KnowledgeGraph,
) -> Result<(TrainState, Vec<TraceRow>), TrainError> {
    if kg.is_empty() {
        return Err(TrainError::Contract("training graph is empty".into()));
    }
    let corpus = Corpus::build(kg, model_cfg, train_cfg.min_word_count)?;
    let mut trainer = Trainer::new(model_cfg.clone(), train_cfg.clone(), corpus)?;
    trainer.run()?;
    Ok((trainer.state, trainer.trace))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionReport {
    pub loss: f64,
    pub accuracy: f64,
    pub masked_tokens: usize,
    pub match_accuracy: Option<f64>,
}

/// Reconstruction quality with every selected residue replaced by
/// `[MASK]`, so a model without access to knowledge sits at chance.
/// Matching accuracy is measured on batches where every second attribute is
/// swapped for a different one.
pub fn evaluate_reconstruction(
    cfg: &ModelConfig,
    params: &Parameters<f32>,
    data: &[EncodedTriplet],
    batch_size: usize,
    seed: u64,
) -> Result<ReconstructionReport, TrainError> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut match_hits = 0usize;
    let mut match_total = 0usize;
    let order = epoch_order(data.len(), batch_size, None);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "eval"));
    for (bi, idx) in order.iter().enumerate() {
        let mut items: Vec<EncodedTriplet> = idx.iter().map(|&i| data[i].clone()).collect();
        let mut labels = None;
        if cfg.triplet_match {
            let mut l = vec![true; items.len()];
            for (pos, item) in items.iter_mut().enumerate().filter(|(p, _)| p % 2 == 1) {
                let candidates: Vec<usize> = (0..data.len())
                    .filter(|&j| data[j].attribute != item.attribute)
                    .collect();
                if let Some(&j) = candidates.get(rng.gen_range(0..candidates.len().max(1))) {
                    item.attribute = data[j].attribute.clone();
                    l[pos] = false;
                }
            }
            labels = Some(l);
        }
        let refs: Vec<&EncodedTriplet> = items.iter().collect();
        let tokens = TokenBatch::from_triplets(&refs);
        let mut batch = apply_masking_with(
            &tokens,
            cfg.mask_ratio,
            derive_indexed(seed, "eval-mask", bi as u64),
            CorruptionScheme::MASK_ONLY,
        )?;
        batch.match_labels = labels;
        let mut g = Graph::<f32>::new();
        let bound = params.bind(&mut g);
        let out = model::forward(&mut g, &bound, cfg, &batch)?;
        let (c, t) = model::masked_accuracy_counts(g.value(out.logits), &batch);
        loss_sum += g.value(out.mlm).item() as f64 * t as f64;
        correct += c;
        total += t;
        if let (Some(ml), Some(labels)) = (out.match_logits, &batch.match_labels) {
            for (z, &y) in g.value(ml).data().iter().zip(labels) {
                match_total += 1;
                if (*z > 0.0) == y {
                    match_hits += 1;
                }
            }
        }
    }
    Ok(ReconstructionReport {
        loss: loss_sum / total.max(1) as f64,
        accuracy: correct as f64 / total.max(1) as f64,
        masked_tokens: total,
        match_accuracy: (match_total > 0).then(|| match_hits as f64 / match_total as f64),
    })
}
