use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID};
use super::DemClass;
use crate::error::{Error, Result};

/// How selected positions are corrupted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingScheme {
    /// Every selected token becomes `[MASK]`.
    #[default]
    ReplaceAll,
    /// 80% `[MASK]`, 10% random word, 10% unchanged.
    Bert,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub token_ids: Array2<u32>,
    pub mask_positions: Array2<bool>,
    pub original_ids: Array2<u32>,
    pub sequence_labels: Vec<Option<DemClass>>,
}

impl MaskedBatch {
    /// A batch with nothing masked, used for evaluation-mode encoding.
    pub fn unmasked(token_ids: Array2<u32>) -> Self {
        let rows = token_ids.nrows();
        Self {
            mask_positions: Array2::from_elem(token_ids.dim(), false),
            original_ids: token_ids.clone(),
            token_ids,
            sequence_labels: vec![None; rows],
        }
    }

    pub fn with_labels(mut self, labels: Vec<Option<DemClass>>) -> Self {
        assert_eq!(labels.len(), self.token_ids.nrows(), "one label per row");
        self.sequence_labels = labels;
        self
    }

    pub fn batch_size(&self) -> usize {
        self.token_ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.ncols()
    }

    pub fn masked_count(&self) -> usize {
        self.mask_positions.iter().filter(|&&m| m).count()
    }

    /// Row-major `(row, position)` pairs of masked tokens.
    pub fn masked_indices(&self) -> Vec<(usize, usize)> {
        self.mask_positions
            .indexed_iter()
            .filter(|(_, &m)| m)
            .map(|(ix, _)| ix)
            .collect()
    }

    /// Number of non-padding positions per row (padding is trailing).
    pub fn lengths(&self) -> Vec<usize> {
        self.original_ids
            .rows()
            .into_iter()
            .map(|row| row.iter().take_while(|&&id| id != PAD_ID).count())
            .collect()
    }
}

fn eligible(id: u32) -> bool {
    id != PAD_ID && id != CLS_ID && id != MASK_ID
}

/// Selects each eligible (non-padding, non-special) position independently
/// with probability `rate` and replaces it with `[MASK]`.
pub fn mask_tokens(token_ids: &Array2<u32>, rate: f64, rng_seed: u64) -> Result<MaskedBatch> {
    mask_tokens_with(token_ids, rate, rng_seed, MaskingScheme::ReplaceAll, 0)
}

/// `vocab_size` is only consulted by [`MaskingScheme::Bert`] to draw random
/// replacement words.
pub fn mask_tokens_with(
    token_ids: &Array2<u32>,
    rate: f64,
    rng_seed: u64,
    scheme: MaskingScheme,
    vocab_size: usize,
) -> Result<MaskedBatch> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("mask rate {rate} outside [0, 1]")));
    }
    if scheme == MaskingScheme::Bert && vocab_size <= NUM_SPECIAL as usize {
        return Err(Error::InvalidArgument("random replacement needs a non-empty vocabulary".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut masked = token_ids.clone();
    let mut positions = Array2::from_elem(token_ids.dim(), false);
    for ((ix, &id), out) in token_ids.indexed_iter().zip(masked.iter_mut()) {
        if !eligible(id) || !rng.gen_bool(rate) {
            continue;
        }
        positions[ix] = true;
        *out = match scheme {
            MaskingScheme::ReplaceAll => MASK_ID,
            MaskingScheme::Bert => {
                let u: f64 = rng.gen();
                if u < 0.8 {
                    MASK_ID
                } else if u < 0.9 {
                    rng.gen_range(NUM_SPECIAL..vocab_size as u32)
                } else {
                    id
                }
            }
        };
    }
    Ok(MaskedBatch {
        token_ids: masked,
        mask_positions: positions,
        original_ids: token_ids.clone(),
        sequence_labels: vec![None; token_ids.nrows()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(rows: usize, cols: usize) -> Array2<u32> {
        Array2::from_shape_fn((rows, cols), |(r, c)| if c == 0 { CLS_ID } else { 10 + (r * cols + c) as u32 })
    }

    #[test]
    fn fifteen_percent_rate_lands_in_two_sigma_band() {
        // 100 rows x (1 CLS + 100 words) -> 10,000 eligible positions.
        let ids = grid(100, 101);
        let batch = mask_tokens(&ids, 0.15, 7).unwrap();
        let n = batch.masked_count();
        assert!((1350..=1650).contains(&n), "masked {n}");
    }

    #[test]
    fn zero_rate_masks_nothing() {
        let batch = mask_tokens(&grid(4, 20), 0.0, 1).unwrap();
        assert_eq!(batch.masked_count(), 0);
    }

    #[test]
    fn same_seed_same_mask() {
        let ids = grid(8, 30);
        let a = mask_tokens(&ids, 0.3, 99).unwrap();
        let b = mask_tokens(&ids, 0.3, 99).unwrap();
        assert_eq!(a.mask_positions, b.mask_positions);
        let c = mask_tokens(&ids, 0.3, 100).unwrap();
        assert_ne!(a.mask_positions, c.mask_positions);
    }

    #[test]
    fn rate_outside_unit_interval_is_rejected() {
        assert!(mask_tokens(&grid(1, 3), 1.5, 0).is_err());
        assert!(mask_tokens(&grid(1, 3), -0.1, 0).is_err());
    }

    #[test]
    fn specials_and_padding_never_masked() {
        let mut ids = grid(3, 10);
        ids[[1, 8]] = PAD_ID;
        ids[[1, 9]] = PAD_ID;
        let batch = mask_tokens(&ids, 1.0, 3).unwrap();
        assert!(!batch.mask_positions[[0, 0]]);
        assert!(!batch.mask_positions[[1, 9]]);
        assert_eq!(batch.masked_count(), 3 * 9 - 2);
        assert_eq!(batch.lengths(), vec![10, 8, 10]);
    }

    #[test]
    fn dynamic_masking_coverage_matches_geometric_law() {
        // Fraction of positions ever masked over E epochs -> 1 - (1 - r)^E.
        let ids = grid(50, 41); // 2000 eligible positions
        let (rate, epochs, trials) = (0.15, 4, 40);
        let n_pos = 50 * 40;
        let mut fractions = Vec::new();
        for t in 0..trials {
            let mut ever = Array2::from_elem(ids.dim(), false);
            for e in 0..epochs {
                let b = mask_tokens(&ids, rate, 1000 * t + e).unwrap();
                ever.zip_mut_with(&b.mask_positions, |x, &m| *x |= m);
            }
            fractions.push(ever.iter().filter(|&&m| m).count() as f64 / n_pos as f64);
        }
        let expected = 1.0 - (1.0f64 - rate).powi(epochs as i32);
        let mean = fractions.iter().sum::<f64>() / trials as f64;
        let sigma = (expected * (1.0 - expected) / (n_pos * trials as usize) as f64).sqrt();
        assert!((mean - expected).abs() <= 3.0 * sigma, "mean {mean} vs {expected}");
    }

    #[test]
    fn bert_scheme_keeps_some_originals() {
        let ids = grid(40, 51);
        let b = mask_tokens_with(&ids, 1.0, 5, MaskingScheme::Bert, 5000).unwrap();
        let total = b.masked_count() as f64;
        let as_mask = b.token_ids.iter().filter(|&&t| t == MASK_ID).count() as f64;
        assert!((as_mask / total - 0.8).abs() < 0.03);
    }

    proptest! {
        #[test]
        fn unmasked_positions_keep_original_ids(rate in 0.0f64..=1.0, seed in any::<u64>(), pad in 0usize..5) {
            let mut ids = grid(6, 12);
            for c in 12 - pad..12 {
                ids[[2, c]] = PAD_ID;
            }
            let b = mask_tokens_with(&ids, rate, seed, MaskingScheme::Bert, 300).unwrap();
            for ((ix, &m), &orig) in b.mask_positions.indexed_iter().zip(b.original_ids.iter()) {
                if !m {
                    prop_assert_eq!(b.token_ids[ix], orig);
                } else {
                    prop_assert!(eligible(orig));
                }
            }
        }
    }
}
