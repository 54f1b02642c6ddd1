use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng::{self, Stream};

use super::{Result, TrainError};

/// Low-resource training-set sizes.
pub const SUBSAMPLE_SIZES: [usize; 5] = [100, 500, 1000, 2000, 4000];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Label is the count of odd tokens mod 2.
    Parity,
    /// Label is the first token mod `classes`.
    CopyClass,
    /// Label is the most frequent token, ties to the smaller id.
    Majority,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [Self::Parity, Self::CopyClass, Self::Majority];

    pub fn name(self) -> &'static str {
        match self {
            Self::Parity => "parity",
            Self::CopyClass => "copy-class",
            Self::Majority => "majority",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Tokens are drawn from `0..symbols`.
    pub symbols: usize,
    pub seq_len: usize,
    pub classes: usize,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TrainError::Task(msg));
        if self.seq_len == 0 || self.symbols == 0 {
            return fail("seq_len and symbols must be positive".into());
        }
        match self.kind {
            TaskKind::Parity if self.classes != 2 => fail(format!("parity has 2 classes, got {}", self.classes)),
            TaskKind::Majority if self.symbols != self.classes => fail(format!(
                "majority needs symbols == classes, got {} and {}",
                self.symbols, self.classes
            )),
            TaskKind::CopyClass if self.symbols < self.classes => fail(format!(
                "copy-class needs symbols >= classes, got {} and {}",
                self.symbols, self.classes
            )),
            _ => Ok(()),
        }
    }

    pub fn label(&self, tokens: &[usize]) -> usize {
        match self.kind {
            TaskKind::Parity => tokens.iter().filter(|&&t| t % 2 == 1).count() % 2,
            TaskKind::CopyClass => tokens[0] % self.classes,
            TaskKind::Majority => {
                let mut counts = vec![0usize; self.symbols];
                for &t in tokens {
                    counts[t] += 1;
                }
                // first maximum wins ties
                let mut best = 0;
                for (i, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = i;
                    }
                }
                best
            }
        }
    }

    pub fn generate(&self, count: usize, rng: &mut impl Rng) -> Dataset {
        let examples = (0..count)
            .map(|_| {
                let tokens: Vec<usize> = (0..self.seq_len).map(|_| rng.gen_range(0..self.symbols)).collect();
                let label = self.label(&tokens);
                Example { tokens, label }
            })
            .collect();
        Dataset { examples }
    }

    /// Train, validation and test sets drawn from independent sub-streams.
    pub fn splits(&self, sizes: [usize; 3], seed: u64) -> Splits {
        let mut sets = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| self.generate(n, &mut rng::substream(seed, Stream::Data, i as u64)));
        Splits {
            train: sets.next().unwrap(),
            validation: sets.next().unwrap(),
            test: sets.next().unwrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for e in &self.examples {
            c[e.label] += 1;
        }
        c
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Label-stratified sample of `size` indices without replacement, returned
/// in ascending order. Per-class quotas follow the largest-remainder rule,
/// so every class count is within one of its proportional share.
pub fn subsample_indices(data: &Dataset, size: usize, seed: u64) -> Result<Vec<usize>> {
    let total = data.len();
    if size > total {
        return Err(TrainError::SubsampleTooLarge { size, available: total });
    }
    let classes = data.examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, e) in data.examples.iter().enumerate() {
        by_class[e.label].push(i);
    }

    let mut quota: Vec<usize> = by_class.iter().map(|ix| ix.len() * size / total.max(1)).collect();
    let assigned: usize = quota.iter().sum();
    let mut order: Vec<usize> = (0..classes).collect();
    // largest remainder first, then lower class id
    order.sort_by_key(|&c| (std::cmp::Reverse((by_class[c].len() * size) % total.max(1)), c));
    for &c in order.iter().take(size - assigned) {
        quota[c] += 1;
    }

    let mut rng = rng::stream(seed, Stream::Subsample);
    let mut picked = Vec::with_capacity(size);
    for (ix, q) in by_class.iter_mut().zip(quota) {
        ix.shuffle(&mut rng);
        picked.extend_from_slice(&ix[..q]);
    }
    picked.sort_unstable();
    Ok(picked)
}

pub fn subsample(data: &Dataset, size: usize, seed: u64) -> Result<Dataset> {
    Ok(data.select(&subsample_indices(data, size, seed)?))
}

/// Sequential batches over a fresh seeded shuffle per epoch. The tail that
/// does not fill a batch is dropped, unless the whole set is smaller than
/// one batch.
#[derive(Debug, Clone)]
pub struct Batcher {
    len: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        let batch = batch.min(len).max(1);
        let mut b = Self {
            len,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut rng::substream(self.seed, Stream::Batch, self.epoch));
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.len {
            self.epoch += 1;
            self.reshuffle();
        }
        let out = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        out
    }
}
