//! MNIST ingestion, client partitioning and synthetic target-domain shift.

mod idx;
mod partition;
mod shift;

use std::sync::Arc;

pub use idx::{
    encode_images, encode_labels, load_idx, parse_images, parse_labels, IdxImages, IMAGE_MAGIC,
    LABEL_MAGIC,
};
pub use partition::{partition, Partition, PartitionPlan, Skew};
pub use shift::{apply_shift, rotate_image, DomainShiftSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// MNIST class count.
pub const MNIST_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    /// `1 × rows × cols`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

fn stack_images(samples: &[LabeledSample], ids: &[usize]) -> Result<Tensor> {
    if ids.is_empty() {
        return Err(Error::Config(
            "a shard must hold at least one sample".into(),
        ));
    }
    let shape = samples[ids[0]].image.shape().to_vec();
    let mut data = Vec::with_capacity(ids.len() * samples[ids[0]].image.len());
    for &i in ids {
        let img = &samples[i].image;
        if img.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "sample {i} has shape {:?}, expected {shape:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![ids.len()];
    full.extend(shape);
    Ok(Tensor::from_parts(full, data))
}

fn to_samples(images: &Tensor, labels: Option<&[usize]>) -> Result<Vec<LabeledSample>> {
    let shape = images.shape()[1..].to_vec();
    (0..images.batch())
        .map(|i| {
            Ok(LabeledSample {
                image: Tensor::new(shape.clone(), images.row(i).to_vec())?,
                label: labels.map_or(0, |l| l[i]),
            })
        })
        .collect()
}

/// A labeled client dataset, images stacked as `[n, 1, rows, cols]`.
/// Cloning is cheap; the payload is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledShard {
    inner: Arc<ShardData>,
    labels: Arc<[usize]>,
}

#[derive(Clone, Debug, PartialEq)]
struct ShardData {
    images: Tensor,
    sample_ids: Vec<usize>,
}

impl LabeledShard {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.batch() != labels.len() || labels.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        let n = labels.len();
        Ok(Self {
            inner: Arc::new(ShardData {
                images,
                sample_ids: (0..n).collect(),
            }),
            labels: labels.into(),
        })
    }

    fn gather(samples: &[LabeledSample], ids: Vec<usize>) -> Result<Self> {
        let images = stack_images(samples, &ids)?;
        let labels: Vec<usize> = ids.iter().map(|&i| samples[i].label).collect();
        Ok(Self {
            inner: Arc::new(ShardData {
                images,
                sample_ids: ids,
            }),
            labels: labels.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.inner.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Indices of these samples in the collection they were partitioned from.
    pub fn sample_ids(&self) -> &[usize] {
        &self.inner.sample_ids
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.inner.images.select_rows(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Same samples and ids with every image replaced by `f(image)`.
    pub fn map_images(&self, f: impl Fn(&[LabeledSample]) -> Vec<LabeledSample>) -> Result<Self> {
        let samples = f(&to_samples(self.images(), Some(&self.labels))?);
        let ids: Vec<usize> = (0..samples.len()).collect();
        let mut shard = Self::gather(&samples, ids)?;
        Arc::make_mut(&mut shard.inner).sample_ids = self.inner.sample_ids.clone();
        Ok(shard)
    }

    /// Drops the labels, e.g. to hand this data to the target client.
    pub fn without_labels(&self) -> UnlabeledShard {
        UnlabeledShard {
            inner: Arc::clone(&self.inner),
        }
    }
}

/// Images without labels. The target client trains on this type only, so no
/// training-path code can reach a target label.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledShard {
    inner: Arc<ShardData>,
}

impl UnlabeledShard {
    pub fn new(images: Tensor) -> Result<Self> {
        if images.batch() == 0 {
            return Err(Error::Config("unlabeled shard is empty".into()));
        }
        let n = images.batch();
        Ok(Self {
            inner: Arc::new(ShardData {
                images,
                sample_ids: (0..n).collect(),
            }),
        })
    }

    fn gather(samples: &[LabeledSample], ids: Vec<usize>) -> Result<Self> {
        Ok(Self {
            inner: Arc::new(ShardData {
                images: stack_images(samples, &ids)?,
                sample_ids: ids,
            }),
        })
    }

    pub fn len(&self) -> usize {
        self.inner.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor {
        &self.inner.images
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.inner.sample_ids
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        self.inner.images.select_rows(indices)
    }

    /// Same samples and ids with every image replaced through `f`. Labels
    /// passed to `f` are placeholders.
    pub fn map_images(&self, f: impl Fn(&[LabeledSample]) -> Vec<LabeledSample>) -> Result<Self> {
        let samples = f(&to_samples(self.images(), None)?);
        let ids: Vec<usize> = (0..samples.len()).collect();
        let mut shard = Self::gather(&samples, ids)?;
        Arc::make_mut(&mut shard.inner).sample_ids = self.inner.sample_ids.clone();
        Ok(shard)
    }
}
