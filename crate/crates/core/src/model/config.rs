use serde::{Deserialize, Serialize};

use crate::data::LengthLimits;
use crate::tensor::TensorError;

/// How the decoder uses the knowledge streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Relation attention feeds the attribute attention.
    Cascaded,
    /// Both attentions read the same normalised protein stream and are summed.
    Parallel,
    /// Plain self-attention decoder that never sees knowledge.
    NoPik,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cascaded, Variant::Parallel, Variant::NoPik];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cascaded => "cascaded",
            Variant::Parallel => "parallel",
            Variant::NoPik => "no_pik",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cascaded" => Ok(Variant::Cascaded),
            "parallel" => Ok(Variant::Parallel),
            "no_pik" => Ok(Variant::NoPik),
            other => Err(TensorError::Config(format!("unknown decoder variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub ffn: usize,
    pub knowledge_layers: usize,
    pub residue_vocab: usize,
    pub text_vocab: usize,
    pub limits: LengthLimits,
    pub variant: Variant,
    pub triplet_match: bool,
    /// Weight of the matching loss in the total objective.
    pub match_weight: f64,
    /// Fraction of each batch whose attribute is swapped for matching.
    pub match_fraction: f64,
    pub mask_ratio: f64,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            encoder_layers: 2,
            decoder_blocks: 2,
            heads: 4,
            ffn: 128,
            knowledge_layers: 2,
            residue_vocab: 30,
            text_vocab: 64,
            limits: LengthLimits::default(),
            variant: Variant::Cascaded,
            triplet_match: false,
            match_weight: 1.0,
            match_fraction: 0.5,
            mask_ratio: 0.20,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            hidden: 16,
            encoder_layers: 1,
            decoder_blocks: 2,
            heads: 2,
            ffn: 32,
            knowledge_layers: 1,
            text_vocab: 24,
            limits: LengthLimits {
                protein: 8,
                relation: 4,
                attribute: 8,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: String| Err(TensorError::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.decoder_blocks == 0 && self.variant != Variant::NoPik {
            return bad("decoder needs at least one PiK block".into());
        }
        if self.ffn == 0 {
            return bad("feed-forward width must be positive".into());
        }
        if self.limits.protein < 3 || self.limits.relation < 2 || self.limits.attribute < 2 {
            return bad(format!("length limits too small: {:?}", self.limits));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.triplet_match && !(self.match_fraction > 0.0 && self.match_fraction < 1.0) {
            return bad(format!("match fraction {} outside (0, 1)", self.match_fraction));
        }
        Ok(())
    }
}
