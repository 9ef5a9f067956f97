use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DmtError, Result};

/// Labeled and pseudo-labeled slots per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchComposition {
    pub labeled: usize,
    pub unlabeled: usize,
}

impl BatchComposition {
    pub fn new(labeled: usize, unlabeled: usize) -> Result<Self> {
        if labeled + unlabeled == 0 {
            return Err(DmtError::config(
                "batch composition needs at least one slot",
            ));
        }
        Ok(BatchComposition { labeled, unlabeled })
    }

    /// Splits `batch_size` by an `unlabeled:labeled` ratio. A non-zero
    /// labeled part always gets at least one slot.
    pub fn from_ratio(
        batch_size: usize,
        unlabeled_parts: usize,
        labeled_parts: usize,
    ) -> Result<Self> {
        let parts = unlabeled_parts + labeled_parts;
        if parts == 0 || batch_size == 0 {
            return Err(DmtError::config("empty batch ratio or batch size"));
        }
        let mut labeled = (batch_size * labeled_parts + parts / 2) / parts;
        if labeled_parts > 0 {
            labeled = labeled.max(1);
        }
        if unlabeled_parts > 0 && labeled == batch_size && batch_size > 1 {
            labeled -= 1;
        }
        Self::new(labeled, batch_size - labeled)
    }

    pub fn total(&self) -> usize {
        self.labeled + self.unlabeled
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Labeled,
    Pseudo,
}

/// One batch element: which pool it comes from and its position there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSlot {
    pub source: Source,
    pub position: usize,
}

#[derive(Debug, Clone)]
struct Cycler {
    order: Vec<usize>,
    cursor: usize,
}

impl Cycler {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Cycler { order, cursor: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Draws mixed batches: each pool is visited without replacement and
/// reshuffled when exhausted, so the smaller pool cycles.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    composition: BatchComposition,
    labeled: Cycler,
    pseudo: Cycler,
    steps_per_epoch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(
        composition: BatchComposition,
        labeled_len: usize,
        pseudo_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if composition.labeled > 0 && labeled_len == 0 {
            return Err(DmtError::config(
                "labeled pool is empty but has batch slots",
            ));
        }
        if composition.unlabeled > 0 && pseudo_len == 0 {
            return Err(DmtError::config(
                "pseudo-labeled pool is empty but has batch slots",
            ));
        }
        let per_pool = |len: usize, quota: usize| if quota == 0 { 0 } else { len.div_ceil(quota) };
        let steps_per_epoch = per_pool(labeled_len, composition.labeled)
            .max(per_pool(pseudo_len, composition.unlabeled))
            .max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labeled = Cycler::new(labeled_len, &mut rng);
        let pseudo = Cycler::new(pseudo_len, &mut rng);
        Ok(BatchSampler {
            composition,
            labeled,
            pseudo,
            steps_per_epoch,
            rng,
        })
    }

    pub fn composition(&self) -> BatchComposition {
        self.composition
    }

    /// Batches needed for one pass over the larger pool.
    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    /// The next batch: labeled slots first, then pseudo-labeled slots.
    pub fn compose_batch(&mut self) -> Vec<BatchSlot> {
        let mut out = Vec::with_capacity(self.composition.total());
        for _ in 0..self.composition.labeled {
            out.push(BatchSlot {
                source: Source::Labeled,
                position: self.labeled.next(&mut self.rng),
            });
        }
        for _ in 0..self.composition.unlabeled {
            out.push(BatchSlot {
                source: Source::Pseudo,
                position: self.pseudo.next(&mut self.rng),
            });
        }
        out
    }
}
