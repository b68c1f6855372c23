use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::triplets::KnowledgeGraph;
use super::vocab::{TextVocabulary, Vocabulary, PAD};
use super::DataError;

/// Maximum token counts per stream, including `[CLS]` and `[SEP]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthLimits {
    pub protein: usize,
    pub relation: usize,
    pub attribute: usize,
}

impl Default for LengthLimits {
    fn default() -> Self {
        Self {
            protein: 128,
            relation: 16,
            attribute: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EncodedTriplet {
    pub protein: Vec<u32>,
    pub relation: Vec<u32>,
    pub attribute: Vec<u32>,
}

pub fn encode_graph(
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    text: &TextVocabulary,
    limits: LengthLimits,
) -> Result<Vec<EncodedTriplet>, DataError> {
    kg.triplets()
        .iter()
        .map(|t| {
            Ok(EncodedTriplet {
                protein: vocab.tokenize(&t.protein, limits.protein)?,
                relation: text.tokenize(&t.relation, limits.relation)?,
                attribute: text.tokenize(&t.attribute, limits.attribute)?,
            })
        })
        .collect()
}

/// One padded stream of a batch, `[rows, len]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedIds {
    pub ids: Vec<u32>,
    pub pad: Vec<bool>,
    pub rows: usize,
    pub len: usize,
}

impl PaddedIds {
    pub fn from_rows(rows: &[&[u32]]) -> Self {
        let len = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat(PAD).take(len - r.len()));
        }
        let pad = ids.iter().map(|&i| i == PAD).collect();
        Self {
            ids,
            pad,
            rows: rows.len(),
            len,
        }
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.len..(r + 1) * self.len]
    }

    /// The row without trailing padding.
    pub fn unpadded_row(&self, r: usize) -> &[u32] {
        let row = self.row(r);
        let end = row.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1);
        &row[..end]
    }

    pub fn valid(&self) -> Vec<bool> {
        self.pad.iter().map(|&p| !p).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub protein: PaddedIds,
    pub relation: PaddedIds,
    pub attribute: PaddedIds,
}

impl TokenBatch {
    pub fn from_triplets(items: &[&EncodedTriplet]) -> Self {
        let p: Vec<&[u32]> = items.iter().map(|t| t.protein.as_slice()).collect();
        let r: Vec<&[u32]> = items.iter().map(|t| t.relation.as_slice()).collect();
        let a: Vec<&[u32]> = items.iter().map(|t| t.attribute.as_slice()).collect();
        Self {
            protein: PaddedIds::from_rows(&p),
            relation: PaddedIds::from_rows(&r),
            attribute: PaddedIds::from_rows(&a),
        }
    }

    pub fn size(&self) -> usize {
        self.protein.rows
    }
}

/// Batch index lists for one epoch: shuffled by `shuffle_seed` when given,
/// the final batch possibly partial.
pub fn epoch_order(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Deterministic stream of padded batches over an encoded graph.
pub struct BatchStream<'a> {
    data: &'a [EncodedTriplet],
    order: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchStream<'_> {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        let idx = self.order.next()?;
        let items: Vec<&EncodedTriplet> = idx.iter().map(|&i| &self.data[i]).collect();
        Some(TokenBatch::from_triplets(&items))
    }
}

pub fn make_batches(
    data: &[EncodedTriplet],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchStream<'_>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Config("batch size must be at least 1".into()));
    }
    Ok(BatchStream {
        data,
        order: epoch_order(data.len(), batch_size, shuffle_seed).into_iter(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::triplets::{generate_synthetic_kg, SynthMode};
    use super::super::vocab::{CLS, SEP};
    use super::*;

    fn encoded(n: usize) -> Vec<EncodedTriplet> {
        let kg = generate_synthetic_kg(n, 6, SynthMode::KnowledgeDependent, 3).unwrap();
        let text = TextVocabulary::build(
            kg.triplets().iter().flat_map(|t| [t.relation.as_str(), t.attribute.as_str()]),
            1,
        );
        encode_graph(&kg, &Vocabulary::new(), &text, LengthLimits::default()).unwrap()
    }

    #[test]
    fn batch_sizes_include_partial_tail() {
        let data = encoded(10);
        let sizes: Vec<usize> = make_batches(&data, 4, Some(1)).unwrap().map(|b| b.size()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_same_stream() {
        let data = encoded(17);
        let a: Vec<TokenBatch> = make_batches(&data, 5, Some(9)).unwrap().collect();
        let b: Vec<TokenBatch> = make_batches(&data, 5, Some(9)).unwrap().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn padding_and_framing() {
        let rows: [&[u32]; 2] = [&[CLS, 5, 6, SEP], &[CLS, 7, SEP]];
        let p = PaddedIds::from_rows(&rows);
        assert_eq!(p.len, 4);
        assert_eq!(p.row(1), &[CLS, 7, SEP, PAD]);
        assert_eq!(p.pad, vec![false, false, false, false, false, false, false, true]);
        assert_eq!(p.unpadded_row(1), &[CLS, 7, SEP]);
    }

    #[test]
    fn zero_batch_size_is_rejected() {
        let data = encoded(3);
        assert!(make_batches(&data, 0, None).is_err());
    }
}
