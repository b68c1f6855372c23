use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::CliError;
use crate::data::LengthLimits;
use crate::model::{ModelConfig, Variant};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Gradcheck,
    Ablate,
    Eval,
    FilterKg,
    GenSynth,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Gradcheck => "gradcheck",
            Command::Ablate => "ablate",
            Command::Eval => "eval",
            Command::FilterKg => "filter-kg",
            Command::GenSynth => "gen-synth",
        }
    }
}

pub const MODEL_KEYS: [&str; 16] = [
    "hidden",
    "encoder_layers",
    "decoder_blocks",
    "heads",
    "ffn",
    "knowledge_layers",
    "variant",
    "triplet_match",
    "match_weight",
    "match_fraction",
    "mask_ratio",
    "max_protein_len",
    "max_relation_len",
    "max_attribute_len",
    "ln_eps",
    "init_std",
];

pub const TRAIN_KEYS: [&str; 12] = [
    "steps",
    "batch_size",
    "lr",
    "warmup_ratio",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "clip_norm",
    "seed",
    "checkpoint_interval",
    "min_word_count",
];

/// Configuration used by `ablate` when nothing else is given: the small
/// cascaded model on the knowledge-dependent synthetic task.
pub fn synthetic_model() -> ModelConfig {
    ModelConfig {
        hidden: 32,
        encoder_layers: 1,
        decoder_blocks: 2,
        heads: 2,
        ffn: 64,
        knowledge_layers: 2,
        limits: LengthLimits {
            protein: 34,
            relation: 8,
            attribute: 34,
        },
        ..ModelConfig::default()
    }
}

pub fn synthetic_train() -> TrainConfig {
    TrainConfig {
        steps: 1000,
        batch_size: 16,
        peak_lr: 3e-3,
        warmup_ratio: 0.05,
        seed: 1,
        ..TrainConfig::default()
    }
}

fn model_values(m: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("hidden", m.hidden.to_string()),
        ("encoder_layers", m.encoder_layers.to_string()),
        ("decoder_blocks", m.decoder_blocks.to_string()),
        ("heads", m.heads.to_string()),
        ("ffn", m.ffn.to_string()),
        ("knowledge_layers", m.knowledge_layers.to_string()),
        ("variant", m.variant.to_string()),
        ("triplet_match", m.triplet_match.to_string()),
        ("match_weight", m.match_weight.to_string()),
        ("match_fraction", m.match_fraction.to_string()),
        ("mask_ratio", m.mask_ratio.to_string()),
        ("max_protein_len", m.limits.protein.to_string()),
        ("max_relation_len", m.limits.relation.to_string()),
        ("max_attribute_len", m.limits.attribute.to_string()),
        ("ln_eps", m.ln_eps.to_string()),
        ("init_std", m.init_std.to_string()),
    ]
}

fn train_values(t: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("steps", t.steps.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("lr", t.peak_lr.to_string()),
        ("warmup_ratio", t.warmup_ratio.to_string()),
        ("weight_decay", t.weight_decay.to_string()),
        ("beta1", t.beta1.to_string()),
        ("beta2", t.beta2.to_string()),
        ("eps", t.eps.to_string()),
        ("clip_norm", t.clip_norm.to_string()),
        ("seed", t.seed.to_string()),
        ("checkpoint_interval", t.checkpoint_interval.to_string()),
        ("min_word_count", t.min_word_count.to_string()),
    ]
}

/// Every key a command accepts, with its default. An empty default means
/// "unset".
pub fn defaults(cmd: Command) -> BTreeMap<String, String> {
    let mut d: Vec<(&str, String)> = Vec::new();
    let s = |v: &str| v.to_string();
    match cmd {
        Command::Pretrain => {
            d.extend(model_values(&ModelConfig::default()));
            d.extend(train_values(&TrainConfig::default()));
            d.extend([
                ("triplets", s("")),
                ("holdout", s("")),
                ("residue_policy", s("reject")),
                ("run_root", s("")),
                ("name", s("pretrain")),
            ]);
        }
        Command::Gradcheck => {
            d.extend(model_values(&ModelConfig::tiny()));
            d.extend([
                ("seed", s("0")),
                ("batch_size", s("2")),
                ("samples", s("128")),
                ("max_params", s("50000")),
                ("fd_step", s("1e-5")),
                ("tolerance", s("1e-3")),
                ("corrupt_grad", s("")),
            ]);
        }
        Command::Ablate => {
            d.extend(model_values(&synthetic_model()));
            d.extend(train_values(&synthetic_train()));
            d.extend([
                ("triplets", s("")),
                ("residue_policy", s("reject")),
                ("synth_n", s("2000")),
                ("synth_len", s("32")),
                ("synth_mode", s("knowledge_dependent")),
                ("variants", s("cascaded,parallel,no_pik,cascaded+match")),
                ("ratios", s("0.15,0.2,0.25")),
                ("eval_size", s("256")),
                ("out", s("")),
            ]);
        }
        Command::Eval => {
            d.extend(MODEL_KEYS.iter().map(|k| (*k, s(""))));
            d.extend([
                ("checkpoint", s("")),
                ("task", s("")),
                ("data", s("")),
                ("out", s("")),
                ("seed", s("0")),
                ("folds", s("10")),
                ("f1_average", s("micro")),
                ("probe_epochs", s("30")),
                ("probe_lr", s("0.05")),
            ]);
        }
        Command::FilterKg => d.extend([
            ("input", s("")),
            ("holdout", s("")),
            ("out", s("")),
            ("residue_policy", s("reject")),
        ]),
        Command::GenSynth => d.extend([
            ("mode", s("knowledge_dependent")),
            ("n", s("2000")),
            ("len", s("32")),
            ("seed", s("0")),
            ("out", s("")),
        ]),
    }
    d.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected `key = value`", i + 1)))?;
        out.push((normalize_key(k), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits `--key value` / `--key=value` arguments; `--config` entries are
/// returned separately in order.
pub fn parse_flags(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut configs = Vec::new();
    let mut flags = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let body = a
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("unexpected argument `{a}`; options take the form --key value")))?;
        let (k, v) = match body.split_once('=') {
            Some((k, v)) => (normalize_key(k), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("option --{body} needs a value")))?;
                (normalize_key(body), v.clone())
            }
        };
        if k == "config" {
            configs.push(v);
        } else {
            flags.push((k, v));
        }
    }
    Ok((configs, flags))
}

/// Fully resolved options of one command invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    values: BTreeMap<String, String>,
    explicit: BTreeSet<String>,
}

impl RunConfig {
    /// Defaults, then config files in order, then flags; the last
    /// assignment of a key wins.
    pub fn resolve(command: Command, args: &[String]) -> Result<Self, CliError> {
        let (configs, flags) = parse_flags(args)?;
        let mut values = defaults(command);
        let mut explicit = BTreeSet::new();
        let mut layers = Vec::new();
        for path in &configs {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("config file {path}: {e}")))?;
            layers.extend(parse_config_text(&text, path)?);
        }
        layers.extend(flags);
        for (k, v) in layers {
            match values.get_mut(&k) {
                Some(slot) => *slot = v,
                None => {
                    return Err(CliError::Usage(format!(
                        "unknown option `{k}` for {}",
                        command.name()
                    )))
                }
            }
            explicit.insert(k);
        }
        Ok(Self {
            command,
            values,
            explicit,
        })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse::<T>()
            .map_err(|e| CliError::Usage(format!("option {key} = `{raw}`: {e}")))
    }

    pub fn opt_str(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.opt_str(key)
            .ok_or_else(|| CliError::Usage(format!("{} needs --{key}", self.command.name())))
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    /// Applies the model keys on top of `base`; empty values keep `base`.
    pub fn model_config_over(&self, base: &ModelConfig) -> Result<ModelConfig, CliError> {
        let mut m = base.clone();
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if self.opt_str($key).is_some() {
                    $field = self.get($key)?;
                }
            };
        }
        take!("hidden", m.hidden);
        take!("encoder_layers", m.encoder_layers);
        take!("decoder_blocks", m.decoder_blocks);
        take!("heads", m.heads);
        take!("ffn", m.ffn);
        take!("knowledge_layers", m.knowledge_layers);
        if self.opt_str("variant").is_some() {
            m.variant = self.get::<Variant>("variant")?;
        }
        take!("triplet_match", m.triplet_match);
        take!("match_weight", m.match_weight);
        take!("match_fraction", m.match_fraction);
        take!("mask_ratio", m.mask_ratio);
        take!("max_protein_len", m.limits.protein);
        take!("max_relation_len", m.limits.relation);
        take!("max_attribute_len", m.limits.attribute);
        take!("ln_eps", m.ln_eps);
        take!("init_std", m.init_std);
        m.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(m)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        self.model_config_over(&ModelConfig::default())
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = TrainConfig {
            steps: self.get("steps")?,
            batch_size: self.get("batch_size")?,
            peak_lr: self.get("lr")?,
            warmup_ratio: self.get("warmup_ratio")?,
            weight_decay: self.get("weight_decay")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            eps: self.get("eps")?,
            clip_norm: self.get("clip_norm")?,
            seed: self.get("seed")?,
            checkpoint_interval: self.get("checkpoint_interval")?,
            min_word_count: self.get("min_word_count")?,
        };
        t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(t)
    }

    /// The resolved configuration in the same `key = value` format it is
    /// read from.
    pub fn to_config_text(&self) -> String {
        let mut out = format!("# keap {}\n", self.command.name());
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_config_text())
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}
