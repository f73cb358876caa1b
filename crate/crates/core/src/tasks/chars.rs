//! Byte-level text: contiguous 90/5/5 split, fixed-length segments and
//! next-byte targets.

use std::path::Path;

use super::{check_indices, Split, Task, TaskConfig, TaskKind};
use crate::error::{Error, Result};
use crate::model::{Batch, Inputs, ModelConfig, Targets};

/// Cross-entropy in nats per symbol to bits per character.
pub fn bits_per_char(ce: f64) -> f64 {
    ce / std::f64::consts::LN_2
}

/// Non-overlapping segments of `len` symbols with next-symbol targets. The
/// last target of a segment is the first symbol of the next one, if any.
/// A trailing partial segment is dropped.
pub fn segment(stream: &[usize], len: usize) -> Vec<(Vec<usize>, Vec<Option<usize>>)> {
    (0..stream.len() / len)
        .map(|s| {
            let start = s * len;
            let ids = stream[start..start + len].to_vec();
            let targets = (start + 1..=start + len).map(|i| stream.get(i).copied()).collect();
            (ids, targets)
        })
        .collect()
}

pub struct CharCorpus {
    /// Byte value of each symbol id.
    pub alphabet: Vec<u8>,
    splits: [Vec<usize>; 3],
    len: usize,
}

impl CharCorpus {
    pub fn from_bytes(bytes: &[u8], len: usize, vocab_cap: usize) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Invalid("empty corpus".into()));
        }
        let mut present = [false; 256];
        for &b in bytes {
            present[b as usize] = true;
        }
        let alphabet: Vec<u8> = (0..=255u8).filter(|&b| present[b as usize]).collect();
        if alphabet.len() > vocab_cap {
            return Err(Error::config(
                "vocab",
                format!("corpus has {} distinct bytes, cap is {vocab_cap}", alphabet.len()),
            ));
        }
        let mut id = [0usize; 256];
        for (i, &b) in alphabet.iter().enumerate() {
            id[b as usize] = i;
        }
        let stream: Vec<usize> = bytes.iter().map(|&b| id[b as usize]).collect();
        let n = stream.len();
        let (a, b) = (n * 90 / 100, n * 95 / 100);
        Ok(Self {
            alphabet,
            splits: [stream[..a].to_vec(), stream[a..b].to_vec(), stream[b..].to_vec()],
            len,
        })
    }

    pub fn load(path: &Path, len: usize, vocab_cap: usize, max_bytes: usize) -> Result<Self> {
        let mut bytes = std::fs::read(path)?;
        bytes.truncate(max_bytes);
        std::str::from_utf8(&bytes)
            .or_else(|e| match e.error_len() {
                // Truncation may cut a multi-byte character.
                None => std::str::from_utf8(&bytes[..e.valid_up_to()]),
                Some(_) => Err(e),
            })
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, len, vocab_cap)
    }

    pub fn vocab(&self) -> usize {
        self.alphabet.len()
    }

    pub fn stream(&self, split: Split) -> &[usize] {
        &self.splits[split.tag() as usize]
    }
}

impl Task for CharCorpus {
    fn name(&self) -> &'static str {
        "chars"
    }

    fn seq_len(&self) -> usize {
        self.len
    }

    fn len(&self, split: Split) -> usize {
        self.stream(split).len() / self.len
    }

    fn configure(&self, model: &mut ModelConfig) {
        model.input = "tokens".into();
        model.head = "lm".into();
        model.vocab = self.vocab();
        model.attn.causal = true;
    }

    fn batch(&self, split: Split, indices: &[usize]) -> Result<Batch> {
        check_indices(self, split, indices)?;
        let stream = self.stream(split);
        let mut ids = Vec::with_capacity(indices.len() * self.len);
        let mut targets = Vec::with_capacity(ids.capacity());
        for &i in indices {
            let start = i * self.len;
            ids.extend_from_slice(&stream[start..start + self.len]);
            targets.extend((start + 1..=start + self.len).map(|t| stream.get(t).copied()));
        }
        Ok(Batch {
            inputs: Inputs::Tokens(ids),
            targets: Targets::Tokens(targets),
            batch_size: indices.len(),
            seq_len: self.len,
        })
    }
}

pub struct CharCorpusKind;

impl TaskKind for CharCorpusKind {
    fn build(&self, cfg: &TaskConfig) -> Result<Box<dyn Task>> {
        let path = cfg
            .path
            .as_ref()
            .ok_or_else(|| Error::config("path", "the chars task needs a text file"))?;
        Ok(Box::new(CharCorpus::load(path, cfg.seq_len, cfg.vocab.max(1), cfg.max_bytes)?))
    }
}
