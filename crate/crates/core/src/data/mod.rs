//! Tokenisation, triplet files, leakage filtering and batching.

mod batch;
mod triplets;
mod vocab;

pub use batch::{
    encode_graph, epoch_order, make_batches, BatchStream, EncodedTriplet, LengthLimits, PaddedIds,
    TokenBatch,
};
pub use triplets::{
    filter_leakage, generate_synthetic_kg, load_holdout, load_triplets, normalize_sequence,
    parse_triplets, random_sequence, spell_sequence, KnowledgeGraph, LoadReport, RemovalReport,
    ResiduePolicy, SynthMode, Triplet, SYNTH_RELATION,
};
pub use vocab::{
    split_words, TextVocabulary, Token, Vocabulary, CANONICAL_RESIDUES, CLS, MASK, NUM_RESIDUES,
    NUM_SPECIAL, PAD, RESIDUES, SEP, UNK,
};

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error("{0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
