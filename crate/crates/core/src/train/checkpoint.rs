//! Checkpoint files: one line of compact JSON manifest, a newline, then a
//! single little-endian `f32` blob. Manifest offsets and lengths are byte
//! positions into the blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::Moments;
use super::{TrainConfig, TrainState};
use crate::model::{ModelConfig, ParamGroup, Parameters};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint does not match configuration: {0}")]
    Mismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: EntryKind,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex_encode(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, CheckpointError> {
        use rand::SeedableRng;
        let bytes = hex_decode(&self.seed)
            .filter(|b| b.len() == 32)
            .ok_or_else(|| CheckpointError::Corrupt("bad rng seed".into()))?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| CheckpointError::Corrupt("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    pub text_vocab: Vec<String>,
    pub step: u64,
    pub rng: RngState,
    pub blob_length: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Entries must tile `[0, blob_length)` in order without gaps or
    /// overlaps, each holding exactly `4 * numel` bytes.
    pub fn validate_layout(&self) -> Result<(), CheckpointError> {
        let mut cursor = 0usize;
        for e in &self.entries {
            if e.offset != cursor {
                return Err(CheckpointError::Corrupt(format!(
                    "entry `{}` starts at {} but previous entry ends at {cursor}",
                    e.name, e.offset
                )));
            }
            let numel: usize = e.shape.iter().product();
            if e.length != numel * 4 {
                return Err(CheckpointError::Corrupt(format!(
                    "entry `{}` has {} bytes for shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
            cursor += e.length;
        }
        if cursor != self.blob_length {
            return Err(CheckpointError::Corrupt(format!(
                "entries cover {cursor} bytes but blob length is {}",
                self.blob_length
            )));
        }
        Ok(())
    }
}

/// Everything a checkpoint restores.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub text_vocab: Vec<String>,
    pub state: TrainState,
}

fn push_entry(
    entries: &mut Vec<ManifestEntry>,
    blob: &mut Vec<u8>,
    name: &str,
    kind: EntryKind,
    group: ParamGroup,
    shape: &[usize],
    data: &[f32],
) {
    let offset = blob.len();
    for v in data {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    entries.push(ManifestEntry {
        name: name.to_string(),
        kind,
        group,
        shape: shape.to_vec(),
        offset,
        length: blob.len() - offset,
    });
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let state = &ckpt.state;
    for (name, e) in state.params.iter() {
        push_entry(&mut entries, &mut blob, name, EntryKind::Param, e.group, e.tensor.shape(), e.tensor.data());
    }
    for (name, e) in state.params.iter() {
        if let Some(m) = state.moments.get(name) {
            let shape = e.tensor.shape();
            push_entry(&mut entries, &mut blob, name, EntryKind::AdamM, e.group, shape, &m.m);
            push_entry(&mut entries, &mut blob, name, EntryKind::AdamV, e.group, shape, &m.v);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        text_vocab: ckpt.text_vocab.clone(),
        step: state.step,
        rng: RngState::capture(&state.rng),
        blob_length: blob.len(),
        entries,
    };
    let mut out = serde_json::to_vec(&manifest).expect("manifest serialises");
    out.push(b'\n');
    out.extend_from_slice(&blob);
    out
}

/// Splits a checkpoint into its manifest and blob without interpreting
/// the entries.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8]), CheckpointError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Corrupt("missing manifest terminator".into()))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Corrupt("manifest lacks format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(CheckpointError::Version {
            found: version as u32,
        });
    }
    let manifest: Manifest = serde_json::from_value(value)
        .map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
    let blob = &bytes[nl + 1..];
    if blob.len() != manifest.blob_length {
        return Err(CheckpointError::Corrupt(format!(
            "blob has {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_length
        )));
    }
    manifest.validate_layout()?;
    Ok((manifest, blob))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let (manifest, blob) = read_manifest(bytes)?;
    let mut params = Parameters::default();
    let mut moments: IndexMap<String, Moments> = IndexMap::new();
    for e in &manifest.entries {
        let data: Vec<f32> = blob[e.offset..e.offset + e.length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        match e.kind {
            EntryKind::Param => {
                let t = Tensor::new(&e.shape, data)
                    .map_err(|err| CheckpointError::Corrupt(err.to_string()))?;
                params
                    .insert(e.name.clone(), e.group, t)
                    .map_err(|err| CheckpointError::Corrupt(err.to_string()))?;
            }
            EntryKind::AdamM => {
                moments.entry(e.name.clone()).or_insert_with(|| Moments::zeros(0)).m = data;
            }
            EntryKind::AdamV => {
                moments.entry(e.name.clone()).or_insert_with(|| Moments::zeros(0)).v = data;
            }
        }
    }
    for (name, m) in &moments {
        let p = params
            .get(name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("moments for unknown tensor `{name}`")))?;
        if m.m.len() != p.tensor.numel() || m.v.len() != p.tensor.numel() {
            return Err(CheckpointError::Corrupt(format!("incomplete moments for `{name}`")));
        }
    }
    Ok(Checkpoint {
        model_config: manifest.model_config,
        train_config: manifest.train_config,
        text_vocab: manifest.text_vocab,
        state: TrainState {
            step: manifest.step,
            params,
            moments,
            rng: manifest.rng.restore()?,
        },
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode_checkpoint(ckpt)).map_err(io)?;
    f.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
