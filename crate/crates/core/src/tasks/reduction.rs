//! Key-value recall: pairs `k v` from disjoint alphabets, a marker, then a
//! query key whose paired value is the label.

use super::{check_indices, Split, Task, TaskConfig, TaskKind};
use crate::error::{Error, Result};
use crate::model::{Batch, Inputs, ModelConfig, Targets};
use crate::numerics::Rng;

/// One sequence and its label. Keys are `0..n_keys`, values
/// `n_keys..vocab-1`, the marker is `vocab-1`. Each sequence draws its own
/// key-to-value map, so every occurrence of a key carries the same value.
/// With odd `len` the first position holds a filler value token.
pub fn reduction_sequence(len: usize, vocab: usize, rng: &mut Rng) -> Result<(Vec<usize>, usize)> {
    if vocab < 4 {
        return Err(Error::Invalid(format!("reduction head needs vocab >= 4, got {vocab}")));
    }
    if len < 8 {
        return Err(Error::Invalid(format!("reduction head needs length >= 8, got {len}")));
    }
    let marker = vocab - 1;
    let n_keys = (vocab - 1) / 2;
    let n_values = vocab - 1 - n_keys;
    let map: Vec<usize> = (0..n_keys).map(|_| n_keys + rng.below(n_values)).collect();

    let mut seq = Vec::with_capacity(len);
    if len % 2 == 1 {
        seq.push(n_keys + rng.below(n_values));
    }
    let mut seen = Vec::new();
    while seq.len() < len - 2 {
        let k = rng.below(n_keys);
        seq.push(k);
        seq.push(map[k]);
        seen.push(k);
    }
    let query = seen[rng.below(seen.len())];
    seq.push(marker);
    seq.push(query);
    Ok((seq, map[query]))
}

pub struct ReductionHead {
    len: usize,
    vocab: usize,
    sizes: [usize; 3],
    rng: Rng,
}

impl ReductionHead {
    pub fn new(len: usize, vocab: usize, sizes: [usize; 3], seed: u64) -> Result<Self> {
        reduction_sequence(len, vocab, &mut Rng::new(seed))?;
        Ok(Self {
            len,
            vocab,
            sizes,
            rng: Rng::new(seed),
        })
    }

    pub fn example(&self, split: Split, index: usize) -> (Vec<usize>, usize) {
        // Splits draw from disjoint streams.
        let mut rng = self.rng.fork((split.tag() << 48) | index as u64);
        reduction_sequence(self.len, self.vocab, &mut rng).expect("sizes checked at construction")
    }
}

impl Task for ReductionHead {
    fn name(&self) -> &'static str {
        "reduction-head"
    }

    fn seq_len(&self) -> usize {
        self.len
    }

    fn len(&self, split: Split) -> usize {
        self.sizes[split.tag() as usize]
    }

    fn configure(&self, model: &mut ModelConfig) {
        model.input = "tokens".into();
        model.head = "lm".into();
        model.vocab = self.vocab;
        model.attn.causal = true;
    }

    /// Only the final position carries a target.
    fn batch(&self, split: Split, indices: &[usize]) -> Result<Batch> {
        check_indices(self, split, indices)?;
        let mut ids = Vec::with_capacity(indices.len() * self.len);
        let mut targets = Vec::with_capacity(ids.capacity());
        for &i in indices {
            let (seq, label) = self.example(split, i);
            ids.extend_from_slice(&seq);
            targets.extend(std::iter::repeat_n(None, self.len - 1));
            targets.push(Some(label));
        }
        Ok(Batch {
            inputs: Inputs::Tokens(ids),
            targets: Targets::Tokens(targets),
            batch_size: indices.len(),
            seq_len: self.len,
        })
    }
}

pub struct ReductionHeadKind;

impl TaskKind for ReductionHeadKind {
    fn build(&self, cfg: &TaskConfig) -> Result<Box<dyn Task>> {
        Ok(Box::new(ReductionHead::new(
            cfg.seq_len,
            cfg.vocab,
            [cfg.n_train, cfg.n_val, cfg.n_test],
            cfg.seed,
        )?))
    }
}
