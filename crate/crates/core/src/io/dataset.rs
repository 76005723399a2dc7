//! `SNND` sample files and `SNNL` label files.
//!
//! ```text
//! samples: "SNND" | dtype u8 (0 = f32) | rank u8 | dims u32 x rank | payload
//! labels:  "SNNL" | count u32 | u32 x count
//! ```
//!
//! `dims[0]` is the sample count.

use std::borrow::Cow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bytes::{checked_numel, f32s_from_le, push_f32s, Reader};
use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SNND";
pub const LABELS_MAGIC: &[u8; 4] = b"SNNL";

pub fn encode_samples(samples: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * samples.shape().len() + 4 * samples.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.push(super::blob::DTYPE_F32);
    out.push(samples.shape().len() as u8);
    for &d in samples.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    push_f32s(&mut out, samples.data());
    out
}

pub fn decode_samples(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let dtype = r.u8("dtype")?;
    if dtype != super::blob::DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let rank = r.u8("rank")? as usize;
    if rank == 0 {
        return Err(Error::EntryShape {
            name: "samples".into(),
            reason: "rank 0 dataset has no sample dimension".into(),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32("dims")? as usize);
    }
    let need = checked_numel(&dims).and_then(|n| n.checked_mul(4));
    if need != Some(r.remaining()) {
        return Err(Error::EntryShape {
            name: "samples".into(),
            reason: format!(
                "dims {dims:?} do not match the {} payload bytes",
                r.remaining()
            ),
        });
    }
    let data = f32s_from_le(r.take(r.remaining(), "payload")?);
    Tensor::new(dims, data)
}

pub fn encode_labels(labels: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * labels.len());
    out.extend_from_slice(LABELS_MAGIC);
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    let mut r = Reader::new(bytes);
    r.magic(LABELS_MAGIC)?;
    let count = r.u32("label count")? as usize;
    if count.checked_mul(4) != Some(r.remaining()) {
        return Err(Error::EntryShape {
            name: "labels".into(),
            reason: format!(
                "{count} labels do not match {} payload bytes",
                r.remaining()
            ),
        });
    }
    let raw = r.take(count * 4, "labels")?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Samples (dimension 0 = sample index) with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBatch {
    pub data: Tensor,
    pub labels: Option<Vec<u32>>,
    /// Positions of the batch samples in the dataset.
    pub indices: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Option<Vec<u32>>) -> Result<Self> {
        if samples.shape().is_empty() {
            return Err(Error::InvalidConfig(
                "dataset tensor has no sample dimension".into(),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != samples.batch() {
                return Err(Error::EntryShape {
                    name: "labels".into(),
                    reason: format!("{} labels for {} samples", l.len(), samples.batch()),
                });
            }
        }
        Ok(Self { samples, labels })
    }

    pub fn load(path: impl AsRef<Path>, labels: Option<&Path>) -> Result<Self> {
        let samples = decode_samples(&read_file(path.as_ref())?)?;
        let labels = labels
            .map(|p| read_file(p).and_then(|b| decode_labels(&b)))
            .transpose()?;
        Self::new(samples, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>, labels: Option<&Path>) -> Result<()> {
        write_file(path.as_ref(), &encode_samples(&self.samples))?;
        if let (Some(p), Some(l)) = (labels, &self.labels) {
            write_file(p, &encode_labels(l))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.samples.sample_shape()
    }

    pub fn batch(&self, indices: &[usize]) -> DatasetBatch {
        DatasetBatch {
            data: self.samples.select(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            indices: indices.to_vec(),
        }
    }

    /// One pass over the data in file order, or in a seeded shuffled order.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
        Batches::new(Cow::Borrowed(self), batch_size, shuffle_seed)
    }

    /// Endless batches; the order is reshuffled every epoch from one RNG
    /// stream seeded with `seed`.
    pub fn cycle_batches(&self, batch_size: usize, seed: u64) -> Result<CycleBatches<'_>> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::EmptyData);
        }
        Ok(CycleBatches {
            data: self,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pos: 0,
        })
    }
}

pub struct Batches<'a> {
    data: Cow<'a, Dataset>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Batches<'a> {
    fn new(data: Cow<'a, Dataset>, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(Self {
            data,
            order,
            batch_size,
            pos: 0,
        })
    }
}

impl Iterator for Batches<'_> {
    type Item = DatasetBatch;

    fn next(&mut self) -> Option<DatasetBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.data.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(b)
    }
}

pub struct CycleBatches<'a> {
    data: &'a Dataset,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Iterator for CycleBatches<'_> {
    type Item = DatasetBatch;

    fn next(&mut self) -> Option<DatasetBatch> {
        if self.pos >= self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.data.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(b)
    }
}

/// Reads a dataset file and yields `ceil(N / batch_size)` batches; the last
/// one may be short.
pub fn load_batches(
    dataset_path: impl AsRef<Path>,
    labels_path: Option<&Path>,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Batches<'static>> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let data = Dataset::load(dataset_path, labels_path)?;
    Batches::new(Cow::Owned(data), batch_size, shuffle_seed)
}
