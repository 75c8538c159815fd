//! Dataset ingestion and task-sequence synthesis.
//!
//! Images are flat rows of 784 intensities in `[0, 1]`; a task sequence
//! derives one classification task per transform (pixel permutation or
//! rotation) of a shared base dataset. Everything here is a pure function of
//! (base data, settings, seed).

mod cache;
mod idx;
mod sequence;
mod transform;

pub use cache::{cache_status, read_sequence_cache, write_sequence_cache, CacheStatus};
pub use idx::load_idx;
pub use sequence::{
    build_sequence, build_sequence_with_holdout, kfold_split, Objective, SequenceFamily,
    SequenceSettings, TaskDataset, TaskSequence, TaskSpec, Transform,
};
pub use transform::{make_permutation, relabel_one_vs_rest, rotate_image, Permutation};

use crate::error::{Error, Result};
use ndarray::Array2;

/// Number of pixels per image (28 x 28).
pub const IMAGE_DIM: usize = 784;
/// Image side length.
pub const IMAGE_SIDE: usize = 28;
/// Number of classes in the base datasets.
pub const NUM_CLASSES: usize = 10;

/// A labelled set of flat images with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    images: Array2<f32>,
    labels: Vec<u8>,
}

impl ImageSet {
    /// Validates intensities, label range and row/label agreement.
    pub fn new(images: Array2<f32>, labels: Vec<u8>) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} image rows vs {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if images.ncols() != IMAGE_DIM {
            return Err(Error::Consistency(format!(
                "expected {IMAGE_DIM} columns, got {}",
                images.ncols()
            )));
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("intensity {bad} outside [0, 1]")));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= NUM_CLASSES as u8) {
            return Err(Error::Format(format!("label {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Array2<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// New set holding the given rows, in the given order.
    pub fn select(&self, indices: &[u32]) -> Result<Self> {
        let n = self.len();
        if let Some(bad) = indices.iter().find(|i| **i as usize >= n) {
            return Err(Error::Index(format!("row {bad} out of {n}")));
        }
        let mut images = Array2::zeros((indices.len(), IMAGE_DIM));
        let mut labels = Vec::with_capacity(indices.len());
        for (out, &src) in indices.iter().enumerate() {
            images.row_mut(out).assign(&self.images.row(src as usize));
            labels.push(self.labels[src as usize]);
        }
        Ok(Self { images, labels })
    }
}
