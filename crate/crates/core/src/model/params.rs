use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Variant};
use crate::data::NUM_RESIDUES;
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

/// Which part of the model a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    /// Frozen language encoder; never updated.
    Knowledge,
}

impl ParamGroup {
    pub fn learnable(self) -> bool {
        self != ParamGroup::Knowledge
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

impl<T: Real> ParamEntry<T> {
    /// Matrices get weight decay; vectors (biases, norms) do not.
    pub fn decays(&self) -> bool {
        self.tensor.shape().len() == 2
    }
}

/// Named model tensors in a fixed insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Real> Default for Parameters<T> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Real> Parameters<T> {
    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, ParamEntry { group, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| TensorError::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            group: e.group,
                            tensor: e.tensor.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Registers every tensor in `g`; learnable groups become gradient
    /// leaves, the knowledge encoder becomes constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, e)| {
                let v = if e.group.learnable() {
                    g.param(e.tensor.clone())
                } else {
                    g.constant(e.tensor.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter names resolved to graph handles.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Config(format!("missing parameter `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

struct Init<'a> {
    params: Parameters<f32>,
    rng: &'a mut ChaCha8Rng,
    normal: Normal<f64>,
    std: f64,
}

impl Init<'_> {
    /// Truncated at two standard deviations.
    fn normal(&mut self, name: String, group: ParamGroup, shape: &[usize]) -> Result<()> {
        let n: usize = shape.iter().product();
        let limit = 2.0 * self.std;
        let data = (0..n)
            .map(|_| loop {
                let v = self.normal.sample(self.rng);
                if v.abs() <= limit {
                    break v as f32;
                }
            })
            .collect();
        self.params.insert(name, group, Tensor::new(shape, data)?)
    }

    fn zeros(&mut self, name: String, group: ParamGroup, shape: &[usize]) -> Result<()> {
        self.params.insert(name, group, Tensor::zeros(shape))
    }

    fn layer_norm(&mut self, prefix: &str, group: ParamGroup, dim: usize) -> Result<()> {
        self.params
            .insert(format!("{prefix}.g"), group, Tensor::full(&[dim], 1.0))?;
        self.zeros(format!("{prefix}.b"), group, &[dim])
    }

    fn attention(&mut self, prefix: &str, group: ParamGroup, dim: usize) -> Result<()> {
        for w in ["wq", "wk", "wv", "wo"] {
            self.normal(format!("{prefix}.{w}"), group, &[dim, dim])?;
        }
        Ok(())
    }

    fn mlp(&mut self, prefix: &str, group: ParamGroup, dim: usize, ffn: usize) -> Result<()> {
        self.normal(format!("{prefix}.w1"), group, &[dim, ffn])?;
        self.zeros(format!("{prefix}.b1"), group, &[ffn])?;
        self.normal(format!("{prefix}.w2"), group, &[ffn, dim])?;
        self.zeros(format!("{prefix}.b2"), group, &[dim])
    }

    fn self_attention_layer(&mut self, prefix: &str, group: ParamGroup, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.hidden;
        self.layer_norm(&format!("{prefix}.ln1"), group, d)?;
        self.attention(&format!("{prefix}.attn"), group, d)?;
        self.layer_norm(&format!("{prefix}.ln2"), group, d)?;
        self.mlp(&format!("{prefix}.mlp"), group, d, cfg.ffn)
    }
}

/// Fresh parameters for `cfg`, drawn deterministically from `seed`.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<Parameters<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Independent stream for the frozen encoder so changing the trainable
    // architecture never perturbs it.
    let mut kn_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| TensorError::Config(e.to_string()))?;
    let d = cfg.hidden;
    let (enc, dec, kn) = (ParamGroup::Encoder, ParamGroup::Decoder, ParamGroup::Knowledge);

    let mut kinit = Init {
        params: Parameters::default(),
        rng: &mut kn_rng,
        normal,
        std: cfg.init_std,
    };
    let kn_len = cfg.limits.relation.max(cfg.limits.attribute);
    kinit.normal("kn.tok_emb".into(), kn, &[cfg.text_vocab, d])?;
    kinit.normal("kn.pos_emb".into(), kn, &[kn_len, d])?;
    for l in 0..cfg.knowledge_layers {
        kinit.self_attention_layer(&format!("kn.layer{l}"), kn, cfg)?;
    }
    let kn_params = kinit.params;

    let mut init = Init {
        params: Parameters::default(),
        rng: &mut rng,
        normal,
        std: cfg.init_std,
    };
    init.normal("enc.tok_emb".into(), enc, &[cfg.residue_vocab, d])?;
    init.normal("enc.pos_emb".into(), enc, &[cfg.limits.protein, d])?;
    for l in 0..cfg.encoder_layers {
        init.self_attention_layer(&format!("enc.layer{l}"), enc, cfg)?;
    }
    for i in 0..cfg.decoder_blocks {
        let p = format!("dec.block{i}");
        match cfg.variant {
            Variant::Cascaded | Variant::Parallel => {
                init.layer_norm(&format!("{p}.ln_p"), dec, d)?;
                init.layer_norm(&format!("{p}.ln_r"), dec, d)?;
                init.attention(&format!("{p}.rel"), dec, d)?;
                if cfg.variant == Variant::Cascaded {
                    init.layer_norm(&format!("{p}.ln_hat"), dec, d)?;
                }
                init.layer_norm(&format!("{p}.ln_a"), dec, d)?;
                init.attention(&format!("{p}.att"), dec, d)?;
                init.layer_norm(&format!("{p}.ln_mlp"), dec, d)?;
                init.mlp(&format!("{p}.mlp"), dec, d, cfg.ffn)?;
            }
            Variant::NoPik => init.self_attention_layer(&p, dec, cfg)?,
        }
    }
    init.layer_norm("head.ln", dec, d)?;
    init.normal("head.w".into(), dec, &[d, NUM_RESIDUES])?;
    init.zeros("head.b".into(), dec, &[NUM_RESIDUES])?;
    if cfg.triplet_match {
        init.normal("match.w".into(), dec, &[d, 1])?;
        init.zeros("match.b".into(), dec, &[1])?;
    }
    let mut params = init.params;
    for (name, e) in kn_params.entries {
        params.insert(name, e.group, e.tensor)?;
    }
    Ok(params)
}
