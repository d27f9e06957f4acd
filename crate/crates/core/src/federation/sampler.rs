use rand::seq::SliceRandom;

use crate::seed;

/// Cyclic mini-batch sampler. Each epoch is a fresh seeded permutation; a
/// final partial batch is dropped so that every batch holds distinct samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSampler {
    len: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl BatchSampler {
    /// `batch` is clamped to `len`.
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        assert!(
            len > 0 && batch > 0,
            "sampler needs data and a positive batch"
        );
        Self {
            len,
            batch: batch.min(len),
            seed,
            epoch: 0,
            pos: len,
            order: Vec::new(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch
    }

    /// Completed epochs so far.
    pub fn epoch(&self) -> u64 {
        self.epoch.saturating_sub(1)
    }

    /// Epoch counter and position within the current permutation.
    pub fn position(&self) -> (u64, usize) {
        (self.epoch, self.pos)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.len {
            self.order = (0..self.len).collect();
            self.order.shuffle(&mut seed::rng(self.seed, self.epoch));
            self.epoch += 1;
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}
