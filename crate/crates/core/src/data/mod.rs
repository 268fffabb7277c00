//! Datasets, vocabularies, batching and the synthetic task generators.

mod corpus;
mod synth;

pub use corpus::{load_tsv_corpus, parse_tsv_corpus, CorpusOptions, Vocab, PAD, UNK};
pub use synth::{
    gen_gated_retrieval, gen_token_retrieval, is_synthetic, read_synthetic, write_synthetic, SynthTask,
    TokenTaskLayout,
};

use crate::error::{Error, Result};
use crate::tensor::Mask;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Tokens {
        ids: Vec<usize>,
        label: usize,
    },
    /// A query vector and `len` value rows of the dataset dimension.
    Vectors {
        query: Vec<f64>,
        values: Vec<f64>,
        len: usize,
        label: usize,
    },
}

impl Sample {
    pub fn label(&self) -> usize {
        match self {
            Sample::Tokens { label, .. } | Sample::Vectors { label, .. } => *label,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Sample::Tokens { ids, .. } => ids.len(),
            Sample::Vectors { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What a dataset's samples look like.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Tokens { vocab_size: usize },
    Vectors { dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input: InputKind,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off everything after the first `n` samples.
    pub fn split_at(mut self, n: usize) -> (Dataset, Dataset) {
        let rest = self.samples.split_off(n.min(self.samples.len()));
        let other = Dataset {
            input: self.input,
            num_classes: self.num_classes,
            samples: rest,
        };
        (self, other)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            input: self.input,
            num_classes: self.num_classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Data(format!("sample {i} is empty")));
            }
            if s.label() >= self.num_classes {
                return Err(Error::Data(format!(
                    "sample {i} has label {} but there are {} classes",
                    s.label(),
                    self.num_classes
                )));
            }
            match (s, self.input) {
                (Sample::Tokens { ids, .. }, InputKind::Tokens { vocab_size }) => {
                    if let Some(&bad) = ids.iter().find(|&&t| t >= vocab_size) {
                        return Err(Error::Data(format!(
                            "sample {i} has token id {bad} outside vocabulary of {vocab_size}"
                        )));
                    }
                }
                (Sample::Vectors { query, values, len, .. }, InputKind::Vectors { dim }) => {
                    if query.len() != dim || values.len() != len * dim {
                        return Err(Error::Data(format!("sample {i} does not have dimension {dim}")));
                    }
                }
                _ => return Err(Error::Data(format!("sample {i} does not match dataset kind"))),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchInput {
    /// `[B×N]` token ids, `PAD` in padded slots.
    Tokens(Vec<usize>),
    /// `[B×d]` queries and `[B×N×d]` values, zeros in padded slots.
    Vectors {
        query: Vec<f64>,
        values: Vec<f64>,
        dim: usize,
    },
}

/// A padded mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    pub input: BatchInput,
    /// `[B×N]`, `true` on real positions.
    pub mask: Mask,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Pads the given samples to the longest one.
    pub fn from_samples(samples: &[&Sample]) -> Result<Batch> {
        let size = samples.len();
        if size == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let seq_len = samples.iter().map(|s| s.len()).max().unwrap_or(0);
        if seq_len == 0 {
            return Err(Error::Data("batch contains only empty samples".into()));
        }
        let mut mask = vec![false; size * seq_len];
        let labels = samples.iter().map(|s| s.label()).collect();
        let input = match samples[0] {
            Sample::Tokens { .. } => {
                let mut ids = vec![PAD; size * seq_len];
                for (b, s) in samples.iter().enumerate() {
                    let Sample::Tokens { ids: src, .. } = s else {
                        return Err(Error::Data("mixed sample kinds in batch".into()));
                    };
                    ids[b * seq_len..b * seq_len + src.len()].copy_from_slice(src);
                    mask[b * seq_len..b * seq_len + src.len()].fill(true);
                }
                BatchInput::Tokens(ids)
            }
            Sample::Vectors { query, .. } => {
                let dim = query.len();
                let mut q = Vec::with_capacity(size * dim);
                let mut v = vec![0.0; size * seq_len * dim];
                for (b, s) in samples.iter().enumerate() {
                    let Sample::Vectors {
                        query, values, len, ..
                    } = s
                    else {
                        return Err(Error::Data("mixed sample kinds in batch".into()));
                    };
                    if query.len() != dim {
                        return Err(Error::Data("mixed vector dimensions in batch".into()));
                    }
                    q.extend_from_slice(query);
                    let off = b * seq_len * dim;
                    v[off..off + len * dim].copy_from_slice(values);
                    mask[b * seq_len..b * seq_len + len].fill(true);
                }
                BatchInput::Vectors {
                    query: q,
                    values: v,
                    dim,
                }
            }
        };
        Ok(Batch {
            size,
            seq_len,
            input,
            mask: Mask::new(vec![size, seq_len], mask)?,
            labels,
        })
    }
}

/// Iterator over padded batches in a seed-determined order.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let samples: Vec<&Sample> = self.order[self.pos..end]
            .iter()
            .map(|&i| &self.dataset.samples[i])
            .collect();
        self.pos = end;
        Some(Batch::from_samples(&samples))
    }
}

/// Splits `dataset` into batches of at most `batch_size`. With `shuffle`
/// the sample order is a permutation drawn from `seed`; otherwise the
/// dataset order is kept.
pub fn batched(dataset: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Batches<'_> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Batches {
        dataset,
        order,
        batch_size: batch_size.max(1),
        pos: 0,
    }
}
