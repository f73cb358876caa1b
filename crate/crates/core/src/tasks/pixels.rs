//! Images from the binary CIFAR-10 batches, read as 1024-step pixel
//! sequences.

use std::path::{Path, PathBuf};

use super::{check_indices, epoch_order, Split, Task, TaskConfig, TaskKind};
use crate::error::{Error, Result};
use crate::model::{Batch, Inputs, ModelConfig, Targets};

pub const IMAGE_PIXELS: usize = 1024;
/// One label byte, then 1024 red, 1024 green and 1024 blue bytes.
pub const RECORD_BYTES: usize = 1 + 3 * IMAGE_PIXELS;
const RECORDS_PER_FILE: usize = 10_000;
const CLASSES: usize = 10;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct PixelImage {
    pub label: u8,
    /// Planar RGB bytes.
    pub planes: Vec<u8>,
}

impl PixelImage {
    /// Per-position channel values in `[0, 1]`: RGB triples, or luminance.
    pub fn sequence(&self, grayscale: bool, out: &mut Vec<f64>) {
        let (r, rest) = self.planes.split_at(IMAGE_PIXELS);
        let (g, b) = rest.split_at(IMAGE_PIXELS);
        for p in 0..IMAGE_PIXELS {
            let (r, g, b) = (r[p] as f64 / 255.0, g[p] as f64 / 255.0, b[p] as f64 / 255.0);
            if grayscale {
                out.push(0.299 * r + 0.587 * g + 0.114 * b);
            } else {
                out.extend_from_slice(&[r, g, b]);
            }
        }
    }
}

/// Split a batch file's bytes into records. `expected` checks the count.
pub fn parse_records(bytes: &[u8], expected: Option<usize>) -> Result<Vec<PixelImage>> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    if let Some(want) = expected {
        if n != want {
            return Err(Error::Format(format!("expected {want} records, found {n}")));
        }
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .map(|rec| {
            if rec[0] as usize >= CLASSES {
                return Err(Error::Format(format!("label {} out of range", rec[0])));
            }
            Ok(PixelImage {
                label: rec[0],
                planes: rec[1..].to_vec(),
            })
        })
        .collect()
}

fn data_dir(path: &Path) -> PathBuf {
    let nested = path.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<PixelImage>> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_records(&bytes, Some(RECORDS_PER_FILE)).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub struct PixelSequences {
    train: Vec<PixelImage>,
    val: Vec<PixelImage>,
    test: Vec<PixelImage>,
    grayscale: bool,
}

impl PixelSequences {
    /// Withhold 10% of the training images (a seeded choice) for validation.
    pub fn from_images(pool: Vec<PixelImage>, test: Vec<PixelImage>, grayscale: bool, seed: u64) -> Self {
        let n_val = pool.len() / 10;
        let order = epoch_order(pool.len(), seed, u64::MAX);
        let mut slots: Vec<Option<PixelImage>> = pool.into_iter().map(Some).collect();
        let val = order[..n_val].iter().map(|&i| slots[i].take().unwrap()).collect();
        let train = slots.into_iter().flatten().collect();
        Self {
            train,
            val,
            test,
            grayscale,
        }
    }

    /// Read at most `train_images` training images, in file order, and the
    /// full test file.
    pub fn load(path: &Path, train_images: usize, grayscale: bool, seed: u64) -> Result<Self> {
        let dir = data_dir(path);
        let mut pool = Vec::new();
        for name in TRAIN_FILES {
            if pool.len() >= train_images {
                break;
            }
            pool.extend(read_file(&dir, name)?);
        }
        pool.truncate(train_images);
        let test = read_file(&dir, TEST_FILE)?;
        Ok(Self::from_images(pool, test, grayscale, seed))
    }

    fn split(&self, split: Split) -> &[PixelImage] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn channels(&self) -> usize {
        if self.grayscale {
            1
        } else {
            3
        }
    }
}

impl Task for PixelSequences {
    fn name(&self) -> &'static str {
        "pixels"
    }

    fn seq_len(&self) -> usize {
        IMAGE_PIXELS
    }

    fn len(&self, split: Split) -> usize {
        self.split(split).len()
    }

    fn configure(&self, model: &mut ModelConfig) {
        model.input = "channels".into();
        model.channels = self.channels();
        model.head = "classify".into();
        model.classes = CLASSES;
    }

    fn batch(&self, split: Split, indices: &[usize]) -> Result<Batch> {
        check_indices(self, split, indices)?;
        let images = self.split(split);
        let mut values = Vec::with_capacity(indices.len() * IMAGE_PIXELS * self.channels());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images[i].sequence(self.grayscale, &mut values);
            labels.push(images[i].label as usize);
        }
        Ok(Batch {
            inputs: Inputs::Channels {
                values,
                channels: self.channels(),
            },
            targets: Targets::Classes(labels),
            batch_size: indices.len(),
            seq_len: IMAGE_PIXELS,
        })
    }
}

pub struct PixelSequencesKind;

impl TaskKind for PixelSequencesKind {
    fn build(&self, cfg: &TaskConfig) -> Result<Box<dyn Task>> {
        let path = cfg
            .path
            .as_ref()
            .ok_or_else(|| Error::config("path", "the pixels task needs the CIFAR-10 binary directory"))?;
        Ok(Box::new(PixelSequences::load(path, cfg.train_images, cfg.grayscale, cfg.seed)?))
    }
}
