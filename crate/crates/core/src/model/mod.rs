//! Protein encoder, frozen knowledge encoder, PiK decoder and heads.
//!
//! Every forward function records onto a caller-owned [`Graph`] and is
//! generic over the element type, so training runs in `f32` while gradient
//! checks replay the identical computation in `f64`.

mod config;
mod params;

pub use config::{ModelConfig, Variant};
pub use params::{init_parameters, Bound, ParamEntry, ParamGroup, Parameters};

use crate::data::{PaddedIds, Vocabulary};
use crate::masking::{MaskedBatch, IGNORE_LABEL};
use crate::tensor::{Graph, Real, Result, TensorError, Var};

/// Pad masks of the three streams, `true` at padding.
#[derive(Clone, Copy, Debug)]
pub struct StreamMasks<'a> {
    pub protein: &'a [bool],
    pub relation: &'a [bool],
    pub attribute: &'a [bool],
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

fn norm<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.g"))?;
    let beta = p.var(&format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta, eps)
}

fn mlp<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(
        g,
        x,
        p.var(&format!("{prefix}.w1"))?,
        Some(p.var(&format!("{prefix}.b1"))?),
    )?;
    let h = g.gelu(h);
    linear(
        g,
        h,
        p.var(&format!("{prefix}.w2"))?,
        Some(p.var(&format!("{prefix}.b2"))?),
    )
}

/// Attention stage `prefix` with queries from `query_in` and keys/values from
/// `kv_in` (both already normalised).
fn cross_stage<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    query_in: Var,
    kv_in: Var,
    key_pad: &[bool],
    heads: usize,
) -> Result<Var> {
    let q = g.matmul(query_in, p.var(&format!("{prefix}.wq"))?)?;
    let k = g.matmul(kv_in, p.var(&format!("{prefix}.wk"))?)?;
    let v = g.matmul(kv_in, p.var(&format!("{prefix}.wv"))?)?;
    let wo = p.var(&format!("{prefix}.wo"))?;
    g.multi_head_attention(q, k, v, Some(key_pad), heads, wo)
}

/// Pre-norm transformer layer: `x + SA(LN(x))` then `x + MLP(LN(x))`.
fn self_attention_layer<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    pad: &[bool],
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let h = norm(g, p, &format!("{prefix}.ln1"), x, eps)?;
    let a = cross_stage(g, p, &format!("{prefix}.attn"), h, h, pad, heads)?;
    let x = g.add(x, a)?;
    let h = norm(g, p, &format!("{prefix}.ln2"), x, eps)?;
    let m = mlp(g, p, &format!("{prefix}.mlp"), h)?;
    g.add(x, m)
}

fn embed<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    ids: &PaddedIds,
    max_len: usize,
) -> Result<Var> {
    if ids.len > max_len {
        return Err(TensorError::Config(format!(
            "{prefix}: sequence length {} exceeds maximum {max_len}",
            ids.len
        )));
    }
    let tok_ids: Vec<usize> = ids.ids.iter().map(|&i| i as usize).collect();
    let tok = g.embedding(p.var(&format!("{prefix}.tok_emb"))?, &tok_ids, &[ids.rows, ids.len])?;
    let positions: Vec<usize> = (0..ids.len).collect();
    let pos = g.embedding(p.var(&format!("{prefix}.pos_emb"))?, &positions, &[ids.len])?;
    g.add(tok, pos)
}

/// Protein representation `[B, Lp, D]` from (possibly corrupted) residue ids.
pub fn encode_protein<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    ids: &PaddedIds,
) -> Result<Var> {
    let mut x = embed(g, p, "enc", ids, cfg.limits.protein)?;
    for l in 0..cfg.encoder_layers {
        x = self_attention_layer(g, p, &format!("enc.layer{l}"), x, &ids.pad, cfg.heads, cfg.ln_eps)?;
    }
    Ok(x)
}

/// Word representations from the frozen language encoder. Its tensors are
/// bound as constants, so nothing downstream can push a gradient into them.
pub fn encode_knowledge<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    ids: &PaddedIds,
) -> Result<Var> {
    let max = cfg.limits.relation.max(cfg.limits.attribute);
    let mut x = embed(g, p, "kn", ids, max)?;
    for l in 0..cfg.knowledge_layers {
        x = self_attention_layer(g, p, &format!("kn.layer{l}"), x, &ids.pad, cfg.heads, cfg.ln_eps)?;
    }
    Ok(x)
}

/// One cascaded protein-knowledge block:
///
/// ```text
/// f̂ = Norm(f_p) + Attn(Norm(f_p)W_Q, Norm(f_r)W_K, Norm(f_r)W_V)
/// f̄ = Norm(f̂) + Attn(Norm(f̂)Ŵ_Q, Norm(f_a)Ŵ_K, Norm(f_a)Ŵ_V)
/// out = f̄ + MLP(Norm(f̄))
/// ```
#[allow(clippy::too_many_arguments)]
pub fn pik_block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    f_p: Var,
    f_r: Var,
    f_a: Var,
    masks: StreamMasks<'_>,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let n_p = norm(g, p, &format!("{prefix}.ln_p"), f_p, eps)?;
    let n_r = norm(g, p, &format!("{prefix}.ln_r"), f_r, eps)?;
    let s = cross_stage(g, p, &format!("{prefix}.rel"), n_p, n_r, masks.relation, heads)?;
    let f_hat = g.add(n_p, s)?;

    let n_hat = norm(g, p, &format!("{prefix}.ln_hat"), f_hat, eps)?;
    let n_a = norm(g, p, &format!("{prefix}.ln_a"), f_a, eps)?;
    let s_hat = cross_stage(g, p, &format!("{prefix}.att"), n_hat, n_a, masks.attribute, heads)?;
    let f_bar = g.add(n_hat, s_hat)?;

    let h = norm(g, p, &format!("{prefix}.ln_mlp"), f_bar, eps)?;
    let m = mlp(g, p, &format!("{prefix}.mlp"), h)?;
    g.add(f_bar, m)
}

/// Non-cascaded block: relation and attribute attention both read
/// `Norm(f_p)` and are summed into `f̄`.
#[allow(clippy::too_many_arguments)]
pub fn parallel_block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    f_p: Var,
    f_r: Var,
    f_a: Var,
    masks: StreamMasks<'_>,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let n_p = norm(g, p, &format!("{prefix}.ln_p"), f_p, eps)?;
    let n_r = norm(g, p, &format!("{prefix}.ln_r"), f_r, eps)?;
    let s_r = cross_stage(g, p, &format!("{prefix}.rel"), n_p, n_r, masks.relation, heads)?;
    let n_a = norm(g, p, &format!("{prefix}.ln_a"), f_a, eps)?;
    let s_a = cross_stage(g, p, &format!("{prefix}.att"), n_p, n_a, masks.attribute, heads)?;
    let f_bar = g.add(n_p, s_r)?;
    let f_bar = g.add(f_bar, s_a)?;
    let h = norm(g, p, &format!("{prefix}.ln_mlp"), f_bar, eps)?;
    let m = mlp(g, p, &format!("{prefix}.mlp"), h)?;
    g.add(f_bar, m)
}

/// Runs the decoder stack. `f_r`/`f_a` are ignored by [`Variant::NoPik`].
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    f_p0: Var,
    knowledge: Option<(Var, Var)>,
    masks: StreamMasks<'_>,
) -> Result<Var> {
    let mut x = f_p0;
    for i in 0..cfg.decoder_blocks {
        let prefix = format!("dec.block{i}");
        x = match cfg.variant {
            Variant::NoPik => {
                self_attention_layer(g, p, &prefix, x, masks.protein, cfg.heads, cfg.ln_eps)?
            }
            Variant::Cascaded | Variant::Parallel => {
                let (f_r, f_a) = knowledge.ok_or_else(|| {
                    TensorError::Config(format!("{} decoder needs knowledge inputs", cfg.variant))
                })?;
                let block = if cfg.variant == Variant::Cascaded {
                    pik_block
                } else {
                    parallel_block
                };
                block(g, p, &prefix, x, f_r, f_a, masks, cfg.heads, cfg.ln_eps)?
            }
        };
    }
    Ok(x)
}

/// Residue logits `[B*Lp, 25]` from the final decoder states.
pub fn mlm_logits<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, f: Var) -> Result<Var> {
    let h = norm(g, p, "head.ln", f, cfg.ln_eps)?;
    let logits = linear(g, h, p.var("head.w")?, Some(p.var("head.b")?))?;
    let classes = g.value(logits).last_dim();
    let rows = g.value(logits).numel() / classes;
    g.reshape(logits, &[rows, classes])
}

/// Converts vocabulary labels into head classes, keeping ignores as `None`.
pub fn label_classes(labels: &[i64]) -> Result<Vec<Option<usize>>> {
    labels
        .iter()
        .map(|&l| {
            if l == IGNORE_LABEL {
                Ok(None)
            } else {
                u32::try_from(l)
                    .ok()
                    .and_then(Vocabulary::residue_class)
                    .map(Some)
                    .ok_or_else(|| TensorError::Contract(format!("label {l} is not a residue id")))
            }
        })
        .collect()
}

/// Mean negative log-likelihood over labelled positions; returns
/// `(loss, logits)`.
pub fn mlm_loss<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    f: Var,
    labels: &[i64],
) -> Result<(Var, Var)> {
    let logits = mlm_logits(g, p, cfg, f)?;
    let targets = label_classes(labels)?;
    let loss = g.cross_entropy(logits, &targets)?;
    Ok((loss, logits))
}

/// Binary matching loss on the mean-pooled protein states; returns
/// `(loss, logits[B, 1])`.
pub fn triplet_match_loss<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    f: Var,
    protein_pad: &[bool],
    match_labels: &[bool],
) -> Result<(Var, Var)> {
    let valid: Vec<bool> = protein_pad.iter().map(|&x| !x).collect();
    let pooled = g.mean_valid(f, &valid)?;
    let logits = linear(g, pooled, p.var("match.w")?, Some(p.var("match.b")?))?;
    let targets: Vec<f64> = match_labels.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let loss = g.bce_with_logits(logits, &targets, None)?;
    Ok((loss, logits))
}

pub struct ForwardOutput {
    pub loss: Var,
    pub mlm: Var,
    pub matching: Option<Var>,
    pub logits: Var,
    pub match_logits: Option<Var>,
    pub decoded: Var,
}

/// Full objective for one masked batch.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &MaskedBatch,
) -> Result<ForwardOutput> {
    let t = &batch.tokens;
    let masks = StreamMasks {
        protein: &t.protein.pad,
        relation: &t.relation.pad,
        attribute: &t.attribute.pad,
    };
    let f_p0 = encode_protein(g, p, cfg, &t.protein)?;
    let knowledge = if cfg.variant == Variant::NoPik {
        None
    } else {
        Some((
            encode_knowledge(g, p, cfg, &t.relation)?,
            encode_knowledge(g, p, cfg, &t.attribute)?,
        ))
    };
    let decoded = decode(g, p, cfg, f_p0, knowledge, masks)?;
    let (mlm, logits) = mlm_loss(g, p, cfg, decoded, &batch.labels)?;
    let (loss, matching, match_logits) = match (&batch.match_labels, cfg.triplet_match) {
        (Some(labels), true) => {
            let (m, ml) = triplet_match_loss(g, p, decoded, &t.protein.pad, labels)?;
            let weighted = g.scale(m, cfg.match_weight);
            (g.add(mlm, weighted)?, Some(m), Some(ml))
        }
        (None, true) => {
            return Err(TensorError::Contract(
                "triplet matching enabled but batch carries no match labels".into(),
            ))
        }
        _ => (mlm, None, None),
    };
    Ok(ForwardOutput {
        loss,
        mlm,
        matching,
        logits,
        match_logits,
        decoded,
    })
}

/// (correct, counted) argmax predictions at positions whose input is
/// `[MASK]` and carries a label.
pub fn masked_accuracy_counts<T: Real>(
    logits: &crate::tensor::Tensor<T>,
    batch: &MaskedBatch,
) -> (usize, usize) {
    let classes = logits.last_dim();
    let mut correct = 0;
    let mut total = 0;
    for (i, &label) in batch.labels.iter().enumerate() {
        if label == IGNORE_LABEL || batch.tokens.protein.ids[i] != crate::data::MASK {
            continue;
        }
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let mut best = 0;
        for c in 1..classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        total += 1;
        if Some(best) == Vocabulary::residue_class(label as u32) {
            correct += 1;
        }
    }
    (correct, total)
}

/// Per-residue protein-encoder states `[n, D]` for one sequence, without
/// the `[CLS]`/`[SEP]` framing. Sequences longer than the configured limit
/// are truncated.
pub fn embed_residues(
    cfg: &ModelConfig,
    params: &Parameters<f32>,
    sequence: &str,
) -> Result<crate::tensor::Tensor<f32>> {
    let ids = Vocabulary::new()
        .tokenize(sequence, cfg.limits.protein)
        .map_err(|e| TensorError::Config(e.to_string()))?;
    let padded = PaddedIds::from_rows(&[ids.as_slice()]);
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g);
    let x = encode_protein(&mut g, &bound, cfg, &padded)?;
    let d = cfg.hidden;
    let n = padded.len - 2;
    let states = g.value(x).data();
    crate::tensor::Tensor::new(&[n, d], states[d..(n + 1) * d].to_vec())
}
