//! Synthetic datasets for fast unit tests (crate-internal).

use ndarray::Array2;

use crate::data::{
    build_sequence, ImageSet, SequenceSettings, TaskDataset, TaskSequence, TaskSpec, IMAGE_DIM,
};
use crate::rng::SplitMix64;

/// A quickly learnable synthetic classification set: class `k` lights up a
/// dedicated pixel block, plus uniform background noise.
pub(crate) fn blobs(n: usize, classes: u8, noise: f64, seed: u64) -> ImageSet {
    let mut rng = SplitMix64::new(seed);
    let mut images = Array2::zeros((n, IMAGE_DIM));
    let mut labels = Vec::with_capacity(n);
    let block = IMAGE_DIM / classes as usize;
    for i in 0..n {
        let k = rng.below(classes as u64) as u8;
        labels.push(k);
        for j in 0..IMAGE_DIM {
            images[[i, j]] = (rng.next_f64() * noise) as f32;
        }
        let start = k as usize * block;
        for j in start..start + block / 2 {
            images[[i, j]] = (0.6 + 0.4 * rng.next_f64()) as f32;
        }
    }
    ImageSet::new(images, labels).unwrap()
}

/// Single blob task wrapped as a TaskDataset (identity transform).
pub(crate) fn blob_task(
    train_n: usize,
    val_n: usize,
    test_n: usize,
    classes: u8,
    seed: u64,
) -> TaskDataset {
    use crate::data::{Objective, Transform};
    TaskDataset {
        spec: TaskSpec {
            task_id: 0,
            transform: Transform::Identity,
            objective: Objective::Multiclass10,
        },
        train: blobs(train_n, classes, 0.3, seed),
        val: blobs(val_n, classes, 0.3, seed ^ 0x56414C),
        test: blobs(test_n, classes, 0.3, seed ^ 0x544553),
    }
}

/// Small permuted sequence over blob data.
pub(crate) fn blob_sequence(num_tasks: usize, train_n: usize, seed: u64) -> TaskSequence {
    let pool = blobs(train_n * 2, 10, 0.3, seed);
    let test = blobs(train_n, 10, 0.3, seed ^ 0x54);
    let settings = SequenceSettings {
        family: crate::data::SequenceFamily::Permuted,
        num_tasks,
        train_size: train_n,
        val_size: (train_n / 4).max(10),
        test_size: (train_n / 2).max(10),
    };
    build_sequence(&pool, &test, "blobs", settings, seed).unwrap()
}
