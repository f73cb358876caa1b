//! Desk-scale datasets: a synthetic recall probe, pixel-sequence images and
//! a byte-level text corpus.

mod chars;
mod pixels;
mod reduction;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig};
use crate::numerics::Rng;
use crate::registry::Registry;

pub use chars::{bits_per_char, segment, CharCorpus, CharCorpusKind};
pub use pixels::{parse_records, PixelImage, PixelSequences, PixelSequencesKind, IMAGE_PIXELS, RECORD_BYTES};
pub use reduction::{reduction_sequence, ReductionHead, ReductionHeadKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Registered task name.
    pub name: String,
    pub seq_len: usize,
    /// Symbol count for generated tasks; upper bound for text corpora.
    pub vocab: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Seed for generation and fixed splits.
    pub seed: u64,
    /// Data file or directory for file-backed tasks.
    pub path: Option<PathBuf>,
    /// Single luminance channel instead of RGB.
    pub grayscale: bool,
    /// Cap on images read from the training files.
    pub train_images: usize,
    /// Cap on bytes read from a text corpus.
    pub max_bytes: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            name: "reduction-head".into(),
            seq_len: 256,
            vocab: 16,
            n_train: 100_000,
            n_val: 1_000,
            n_test: 1_000,
            seed: 0,
            path: None,
            grayscale: false,
            train_images: 10_000,
            max_bytes: 5 << 20,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let kinds = task_kinds();
        kinds.get(&self.name).map_err(|e| Error::config("name", e))?;
        if self.seq_len == 0 {
            return Err(Error::config("seq_len", "must be >= 1"));
        }
        Ok(())
    }
}

/// A loaded dataset. Examples are addressed by `(split, index)`; building a
/// batch is a pure function of the indices.
pub trait Task: Send + Sync {
    fn name(&self) -> &'static str;

    fn seq_len(&self) -> usize;

    fn len(&self, split: Split) -> usize;

    /// Set the input, head and size fields of `model` to fit this task.
    fn configure(&self, model: &mut ModelConfig);

    fn batch(&self, split: Split, indices: &[usize]) -> Result<Batch>;
}

/// Constructor for a task from its configuration.
pub trait TaskKind: Send + Sync {
    fn build(&self, cfg: &TaskConfig) -> Result<Box<dyn Task>>;
}

pub fn task_kinds() -> Registry<dyn TaskKind> {
    let mut r: Registry<dyn TaskKind> = Registry::new("task");
    r.register("reduction-head", Arc::new(ReductionHeadKind)).unwrap();
    r.register("pixels", Arc::new(PixelSequencesKind)).unwrap();
    r.register("chars", Arc::new(CharCorpusKind)).unwrap();
    r
}

pub fn build_task(cfg: &TaskConfig) -> Result<Box<dyn Task>> {
    cfg.validate()?;
    task_kinds().get(&cfg.name)?.build(cfg)
}

/// Example order for one epoch: a permutation determined by `(seed, epoch)`
/// alone.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).fork(epoch).shuffle(&mut order);
    order
}

fn check_indices(task: &dyn Task, split: Split, indices: &[usize]) -> Result<()> {
    let n = task.len(split);
    if indices.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    match indices.iter().find(|&&i| i >= n) {
        Some(i) => Err(Error::Invalid(format!("index {i} outside {} split of {n}", split.name()))),
        None => Ok(()),
    }
}
