//! Finite-difference verification of the full model gradient.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{generate_synthetic_kg, SynthMode, TokenBatch};
use crate::masking::{apply_masking, MaskedBatch};
use crate::model::{self, init_parameters, ModelConfig, Parameters};
use crate::seed::derive_seed;
use crate::tensor::{Graph, Result, TensorError};
use crate::train::{Corpus, TrainError};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSettings {
    /// Minimum number of sampled scalar parameters.
    pub samples: usize,
    /// Central-difference step.
    pub step: f64,
    /// Largest allowed relative error.
    pub tolerance: f64,
    /// Refuse models larger than this many scalars.
    pub max_params: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Test hook: perturbs the analytic gradient of this tensor.
    pub corrupt: Option<String>,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            samples: 128,
            step: 1e-5,
            tolerance: 1e-3,
            max_params: 50_000,
            batch_size: 2,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub samples: Vec<GradSample>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    /// Tensors with at least one sample over tolerance, in first-seen order.
    pub fn failing_tensors(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in self.samples.iter().filter(|s| !(s.rel_error < self.tolerance)) {
            if !out.contains(&s.tensor.as_str()) {
                out.push(&s.tensor);
            }
        }
        out
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// A masked batch from the knowledge-dependent synthetic graph sized to the
/// configured lengths. With matching enabled every second item carries the
/// next item's attribute. Also returns the knowledge vocabulary size.
pub fn probe_batch(
    cfg: &ModelConfig,
    batch_size: usize,
    seed: u64,
) -> std::result::Result<(MaskedBatch, usize), TrainError> {
    let seq_len = cfg.limits.protein.saturating_sub(2).max(1);
    let kg = generate_synthetic_kg(batch_size.max(2), seq_len, SynthMode::KnowledgeDependent, derive_seed(seed, "gradcheck-kg"))?;
    let corpus = Corpus::build(&kg, cfg, 1)?;
    let mut items = corpus.data[..batch_size].to_vec();
    if cfg.triplet_match {
        for i in (1..items.len()).step_by(2) {
            items[i].attribute = corpus.data[(i + 1) % corpus.data.len()].attribute.clone();
        }
    }
    let refs: Vec<_> = items.iter().collect();
    let mut batch = apply_masking(&TokenBatch::from_triplets(&refs), cfg.mask_ratio, derive_seed(seed, "gradcheck-mask"))?;
    if cfg.triplet_match {
        batch.match_labels = Some((0..items.len()).map(|i| i % 2 == 0).collect());
    }
    Ok((batch, corpus.text_vocab.size()))
}

fn loss_at(cfg: &ModelConfig, params: &Parameters<f64>, batch: &MaskedBatch) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let bound = params.bind(&mut g);
    let out = model::forward(&mut g, &bound, cfg, batch)?;
    Ok(g.value(out.loss).item())
}

/// Compares backpropagated gradients against central differences on a
/// stratified sample of learnable scalars: every learnable tensor gets
/// `ceil(samples / tensors)` draws.
pub fn gradcheck(
    cfg: &ModelConfig,
    params: &Parameters<f32>,
    batch: &MaskedBatch,
    settings: &GradcheckSettings,
) -> Result<GradcheckReport> {
    let total = params.numel();
    if total > settings.max_params {
        return Err(TensorError::Config(format!(
            "model has {total} parameters, above the gradient-check cap of {}",
            settings.max_params
        )));
    }
    let params = params.cast::<f64>();
    let mut g = Graph::<f64>::new();
    let bound = params.bind(&mut g);
    let out = model::forward(&mut g, &bound, cfg, batch)?;
    g.backward(out.loss)?;

    let learnable: Vec<&str> = params
        .iter()
        .filter(|(_, e)| e.group.learnable())
        .map(|(n, _)| n)
        .collect();
    if let Some(c) = &settings.corrupt {
        if !learnable.contains(&c.as_str()) {
            return Err(TensorError::Config(format!("cannot corrupt unknown tensor `{c}`")));
        }
    }
    let per_tensor = settings.samples.div_ceil(learnable.len().max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(settings.seed, "gradcheck-sample"));
    let mut samples = Vec::new();
    for name in learnable {
        let grad = g.grad(bound.var(name)?);
        let n = grad.numel();
        let picks = index::sample(&mut rng, n, per_tensor.min(n)).into_vec();
        for idx in picks {
            let mut analytic = grad.data()[idx];
            if settings.corrupt.as_deref() == Some(name) {
                analytic += 1.0 + analytic.abs();
            }
            let mut plus = params.clone();
            plus.get_mut(name).expect("sampled name exists").tensor.data_mut()[idx] += settings.step;
            let mut minus = params.clone();
            minus.get_mut(name).expect("sampled name exists").tensor.data_mut()[idx] -= settings.step;
            let numeric = (loss_at(cfg, &plus, batch)? - loss_at(cfg, &minus, batch)?) / (2.0 * settings.step);
            samples.push(GradSample {
                tensor: name.to_string(),
                index: idx,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        samples,
        max_rel_error,
        tolerance: settings.tolerance,
    })
}

/// Gradient check on freshly initialised parameters.
pub fn gradcheck_fresh(
    cfg: &ModelConfig,
    settings: &GradcheckSettings,
) -> std::result::Result<GradcheckReport, TrainError> {
    let (batch, vocab) = probe_batch(cfg, settings.batch_size, settings.seed)?;
    let mut cfg = cfg.clone();
    cfg.text_vocab = cfg.text_vocab.max(vocab);
    let params = init_parameters(&cfg, derive_seed(settings.seed, "init"))?;
    Ok(gradcheck(&cfg, &params, &batch, settings)?)
}
