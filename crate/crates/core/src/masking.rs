//! Masked-residue corruption of protein token batches.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DataError, TokenBatch, Vocabulary, MASK, NUM_RESIDUES, NUM_SPECIAL};

pub const IGNORE_LABEL: i64 = -1;

/// Preset ratios for the mask-ratio sweep.
pub const MASK_RATIO_PRESETS: [f64; 3] = [0.15, 0.20, 0.25];
pub const DEFAULT_MASK_RATIO: f64 = 0.20;

/// How a selected position is corrupted. The remainder after `mask` and
/// `random` keeps the original residue.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionScheme {
    pub mask: f64,
    pub random: f64,
}

impl CorruptionScheme {
    pub const STANDARD: Self = Self {
        mask: 0.8,
        random: 0.1,
    };
    /// Every selected position becomes `[MASK]`; used for evaluation.
    pub const MASK_ONLY: Self = Self {
        mask: 1.0,
        random: 0.0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Unselected,
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    /// Knowledge streams untouched; protein ids corrupted.
    pub tokens: TokenBatch,
    /// Original id at selected positions, [`IGNORE_LABEL`] elsewhere.
    pub labels: Vec<i64>,
    pub selected: Vec<bool>,
    pub corruption: Vec<Corruption>,
    /// Triplet-match targets when attributes were swapped.
    pub match_labels: Option<Vec<bool>>,
}

impl MaskedBatch {
    pub fn num_selected(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// Number of positions to select from `eligible` residues:
/// round-half-up of `ratio * eligible`, at least one when any is eligible.
pub fn selection_count(ratio: f64, eligible: usize) -> usize {
    if eligible == 0 {
        return 0;
    }
    let m = (ratio * eligible as f64 + 0.5).floor() as usize;
    m.clamp(1, eligible)
}

pub fn apply_masking(
    batch: &TokenBatch,
    mask_ratio: f64,
    seed: u64,
) -> Result<MaskedBatch, DataError> {
    apply_masking_with(batch, mask_ratio, seed, CorruptionScheme::STANDARD)
}

pub fn apply_masking_with(
    batch: &TokenBatch,
    mask_ratio: f64,
    seed: u64,
    scheme: CorruptionScheme,
) -> Result<MaskedBatch, DataError> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(DataError::Config(format!(
            "mask ratio must lie in (0, 1), got {mask_ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &batch.protein;
    let n = p.ids.len();
    let mut ids = p.ids.clone();
    let mut labels = vec![IGNORE_LABEL; n];
    let mut selected = vec![false; n];
    let mut corruption = vec![Corruption::Unselected; n];
    for r in 0..p.rows {
        let base = r * p.len;
        let eligible: Vec<usize> = (0..p.len)
            .filter(|&j| Vocabulary::is_residue_id(p.ids[base + j]))
            .collect();
        let m = selection_count(mask_ratio, eligible.len());
        let mut picks: Vec<usize> = index::sample(&mut rng, eligible.len(), m)
            .into_iter()
            .map(|e| base + eligible[e])
            .collect();
        picks.sort_unstable();
        for pos in picks {
            selected[pos] = true;
            labels[pos] = p.ids[pos] as i64;
            let u: f64 = rng.gen();
            corruption[pos] = if u < scheme.mask {
                ids[pos] = MASK;
                Corruption::Mask
            } else if u < scheme.mask + scheme.random {
                ids[pos] = NUM_SPECIAL + rng.gen_range(0..NUM_RESIDUES as u32);
                Corruption::Random
            } else {
                Corruption::Keep
            };
        }
    }
    let mut tokens = batch.clone();
    tokens.protein.ids = ids;
    Ok(MaskedBatch {
        tokens,
        labels,
        selected,
        corruption,
        match_labels: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PaddedIds, CLS, PAD, SEP};

    fn batch_of(rows: &[Vec<u32>]) -> TokenBatch {
        let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
        let p = PaddedIds::from_rows(&refs);
        let knowledge: &[u32] = &[CLS, 5, SEP];
        let k = PaddedIds::from_rows(&vec![knowledge; rows.len()]);
        TokenBatch {
            protein: p,
            relation: k.clone(),
            attribute: k,
        }
    }

    fn residues(len: usize, offset: u32) -> Vec<u32> {
        let mut v = vec![CLS];
        v.extend((0..len as u32).map(|i| 5 + (i + offset) % 20));
        v.push(SEP);
        v
    }

    #[test]
    fn twenty_percent_of_hundred_is_twenty() {
        let b = batch_of(&[residues(100, 0)]);
        let m = apply_masking(&b, 0.2, 11).unwrap();
        assert_eq!(m.num_selected(), 20);
    }

    #[test]
    fn single_eligible_residue_is_always_selected() {
        let b = batch_of(&[residues(1, 0)]);
        for seed in 0..20 {
            assert_eq!(apply_masking(&b, 0.15, seed).unwrap().num_selected(), 1);
        }
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(selection_count(0.25, 10), 3);
        assert_eq!(selection_count(0.15, 10), 2);
        assert_eq!(selection_count(0.2, 12), 2);
        assert_eq!(selection_count(0.2, 0), 0);
        assert_eq!(selection_count(0.01, 3), 1);
    }

    #[test]
    fn specials_are_never_selected() {
        let b = batch_of(&[residues(30, 0), residues(5, 3), vec![CLS, SEP]]);
        let m = apply_masking(&b, 0.5, 5).unwrap();
        for (i, &id) in b.protein.ids.iter().enumerate() {
            if matches!(id, CLS | SEP | PAD) {
                assert!(!m.selected[i]);
                assert_eq!(m.labels[i], IGNORE_LABEL);
            }
        }
        // row with no residues contributes nothing
        let row = 2 * b.protein.len;
        assert!(!m.selected[row..].iter().any(|&s| s));
    }

    #[test]
    fn bad_ratio_is_rejected() {
        let b = batch_of(&[residues(4, 0)]);
        assert!(apply_masking(&b, 0.0, 1).is_err());
        assert!(apply_masking(&b, 1.0, 1).is_err());
    }
}
