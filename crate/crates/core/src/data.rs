//! Deterministic synthetic sequence-classification tasks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which synthetic task to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Label is the parity of the number of occurrences of the pattern token.
    PatternParity,
    /// Label is 1 iff token A occurs more often than token B.
    MajorityToken,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PatternParity => "pattern-parity",
            TaskKind::MajorityToken => "majority-token",
        }
    }
}

pub const PATTERN_TOKEN: usize = 1;
pub const MAJORITY_A: usize = 1;
pub const MAJORITY_B: usize = 2;

/// Task generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub name: TaskKind,
    pub train_size: usize,
    pub eval_size: usize,
    /// Upper bound on pattern occurrences for `pattern-parity`.
    pub max_occurrences: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            name: TaskKind::PatternParity,
            train_size: 2048,
            eval_size: 512,
            max_occurrences: 2,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self, seq_len: usize, vocab: usize) -> Result<()> {
        if self.train_size == 0 {
            return Err(Error::config("task.train_size", "must be positive"));
        }
        if self.eval_size == 0 {
            return Err(Error::config("task.eval_size", "must be positive"));
        }
        if vocab < 4 {
            return Err(Error::config("model.vocab", "synthetic tasks need at least 4 tokens"));
        }
        if self.name == TaskKind::PatternParity && (self.max_occurrences == 0 || self.max_occurrences > seq_len) {
            return Err(Error::config(
                "task.max_occurrences",
                format!("must lie in [1, seq_len={seq_len}]"),
            ));
        }
        if self.name == TaskKind::MajorityToken && seq_len < 3 {
            return Err(Error::config("model.seq_len", "majority-token needs at least 3 positions"));
        }
        Ok(())
    }
}

/// A labelled set of fixed-length token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    seq_len: usize,
    tokens: Vec<usize>,
    labels: Vec<usize>,
}

/// A contiguous batch, tokens row-major `batch x seq_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn filler<R: Rng>(rng: &mut R, vocab: usize, reserved: usize) -> usize {
    rng.gen_range(reserved + 1..vocab)
}

impl Dataset {
    pub fn generate(task: &TaskConfig, count: usize, seq_len: usize, vocab: usize, seed: u64) -> Result<Self> {
        task.validate(seq_len, vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = Vec::with_capacity(count * seq_len);
        let mut labels = Vec::with_capacity(count);
        let mut positions: Vec<usize> = (0..seq_len).collect();
        for _ in 0..count {
            let mut seq = vec![0; seq_len];
            positions.shuffle(&mut rng);
            let label = match task.name {
                TaskKind::PatternParity => {
                    let occurrences = rng.gen_range(0..=task.max_occurrences);
                    for (i, &p) in positions.iter().enumerate() {
                        seq[p] = if i < occurrences {
                            PATTERN_TOKEN
                        } else {
                            filler(&mut rng, vocab, PATTERN_TOKEN)
                        };
                    }
                    occurrences % 2
                }
                TaskKind::MajorityToken => {
                    // odd total so there is never a tie
                    let max_total = if seq_len % 2 == 1 { seq_len } else { seq_len - 1 };
                    let total = 2 * rng.gen_range(0..=(max_total - 1) / 2) + 1;
                    let a = rng.gen_range(0..=total);
                    for (i, &p) in positions.iter().enumerate() {
                        seq[p] = if i < a {
                            MAJORITY_A
                        } else if i < total {
                            MAJORITY_B
                        } else {
                            filler(&mut rng, vocab, MAJORITY_B)
                        };
                    }
                    usize::from(2 * a > total)
                }
            };
            tokens.extend_from_slice(&seq);
            labels.push(label);
        }
        Ok(Self {
            seq_len,
            tokens,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut tokens = Vec::with_capacity(indices.len() * self.seq_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            tokens.extend_from_slice(self.sequence(i));
            labels.push(self.labels[i]);
        }
        Batch {
            tokens,
            labels,
            seq_len: self.seq_len,
        }
    }

    /// Consecutive batches covering the whole set; the last may be short.
    pub fn chunks(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1))
            .map(|c| self.batch(c))
            .collect::<Vec<_>>()
            .into_iter()
    }
}
