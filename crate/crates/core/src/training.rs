//! Pieces shared by the specialization and fine-tuning loops.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Tokenizer, PAD_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Goal {
    Minimize,
    Maximize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Stop,
}

/// Patience-based early stopping on a monitored value. Only strict
/// improvements reset the counter.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    goal: Goal,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, goal: Goal) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        Self { patience, goal, best: None, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Verdict {
        let better = match (self.best, self.goal) {
            (None, _) => value.is_finite(),
            (Some(b), Goal::Minimize) => value < b,
            (Some(b), Goal::Maximize) => value > b,
        };
        if better {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::NoImprovement
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Deterministic 64-bit seed for a labelled sub-stream of `base`.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Index batches over `n` items in a seeded random order.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn encode_all<'a>(tokenizer: &Tokenizer, texts: impl IntoIterator<Item = &'a str>, max_len: usize) -> Vec<Vec<u32>> {
    texts.into_iter().map(|t| tokenizer.encode(t, max_len)).collect()
}

/// Right-padded id matrix for the selected sequences.
pub fn pad_rows(seqs: &[Vec<u32>], rows: &[usize]) -> Array2<u32> {
    let width = rows.iter().map(|&r| seqs[r].len()).max().unwrap_or(0);
    let mut out = Array2::from_elem((rows.len(), width), PAD_ID);
    for (i, &r) in rows.iter().enumerate() {
        for (j, &id) in seqs[r].iter().enumerate() {
            out[[i, j]] = id;
        }
    }
    out
}

/// Splits `n` items into (train, dev) index sets with `ceil(fraction * n)`
/// (at least one) dev items chosen by seed.
pub fn holdout(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((fraction * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut dev = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    dev.sort_unstable();
    train.sort_unstable();
    (train, dev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_three_stops_after_fifth_epoch() {
        let mut es = EarlyStopping::new(3, Goal::Minimize);
        let seq = [1.0, 0.9, 0.91, 0.92, 0.93, 0.5];
        let mut stopped = None;
        for (i, &v) in seq.iter().enumerate() {
            if es.observe(i + 1, v) == Verdict::Stop {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(5));
        assert_eq!(es.best_epoch(), 2);
        assert_eq!(es.best(), Some(0.9));
    }

    #[test]
    fn maximize_tracks_highest() {
        let mut es = EarlyStopping::new(1, Goal::Maximize);
        assert_eq!(es.observe(1, 0.5), Verdict::Improved);
        assert_eq!(es.observe(2, 0.6), Verdict::Improved);
        assert_eq!(es.observe(3, 0.6), Verdict::Stop);
    }

    #[test]
    fn holdout_is_disjoint_and_nonempty() {
        let (train, dev) = holdout(100, 0.05, 1);
        assert_eq!(dev.len(), 5);
        assert_eq!(train.len(), 95);
        assert!(dev.iter().all(|d| !train.contains(d)));
        let (train, dev) = holdout(3, 0.05, 1);
        assert_eq!((train.len(), dev.len()), (2, 1));
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut all: Vec<usize> = shuffled_batches(10, 3, 4).into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
