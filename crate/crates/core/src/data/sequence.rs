//! Task-sequence synthesis and k-fold pool splitting.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::transform::{make_permutation, relabel_one_vs_rest, rotate_image};
use super::{ImageSet, IMAGE_DIM};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

/// Per-image transform that defines a task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Permute { seed: u64 },
    Rotate { angle_degrees: f64 },
}

/// Classification objective of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Multiclass10,
    OneVsRest { target_class: u8 },
}

impl Objective {
    /// Output dimension of the task's head.
    pub fn out_dim(&self) -> usize {
        match self {
            Objective::Multiclass10 => 10,
            Objective::OneVsRest { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub transform: Transform,
    pub objective: Objective,
}

/// Family of transforms a sequence draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceFamily {
    /// Fresh pixel permutation per task, 10-way classification.
    Permuted,
    /// Fresh rotation angle per task, one-vs-rest objective with
    /// `target_class = task_id`.
    Rotated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceSettings {
    pub family: SequenceFamily,
    pub num_tasks: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl SequenceSettings {
    pub fn permuted() -> Self {
        Self {
            family: SequenceFamily::Permuted,
            num_tasks: 10,
            train_size: 55_000,
            val_size: 5_000,
            test_size: 10_000,
        }
    }

    pub fn rotated() -> Self {
        Self { family: SequenceFamily::Rotated, ..Self::permuted() }
    }
}

/// One task's transformed train/val/test splits.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub train: ImageSet,
    pub val: ImageSet,
    pub test: ImageSet,
}

#[derive(Debug)]
struct SequenceBase {
    pool: ImageSet,
    test: ImageSet,
    train_idx: Vec<u32>,
    val_idx: Vec<u32>,
    test_idx: Vec<u32>,
}

/// An ordered list of tasks over a shared base dataset.
///
/// Tasks are materialized on demand (`task(i)`); a full-scale 10-task
/// sequence would otherwise hold ~2 GB of pixels. Materialization is pure, so
/// repeated calls return identical data.
#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub base_dataset_name: String,
    pub settings: SequenceSettings,
    specs: Vec<TaskSpec>,
    base: Arc<SequenceBase>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.specs
    }

    /// Split index lists into the base pool (train, val) and test set.
    pub fn split_indices(&self) -> (&[u32], &[u32], &[u32]) {
        (&self.base.train_idx, &self.base.val_idx, &self.base.test_idx)
    }

    /// Materializes task `i`'s transformed splits.
    pub fn task(&self, i: usize) -> Result<TaskDataset> {
        let spec = *self
            .specs
            .get(i)
            .ok_or_else(|| Error::Index(format!("task {i} of {}", self.specs.len())))?;
        Ok(TaskDataset {
            spec,
            train: apply_spec(&self.base.pool.select(&self.base.train_idx)?, &spec)?,
            val: apply_spec(&self.base.pool.select(&self.base.val_idx)?, &spec)?,
            test: apply_spec(&self.base.test.select(&self.base.test_idx)?, &spec)?,
        })
    }

    /// Materializes only task `i`'s test split (enough for evaluation).
    pub fn task_test(&self, i: usize) -> Result<ImageSet> {
        let spec = *self
            .specs
            .get(i)
            .ok_or_else(|| Error::Index(format!("task {i} of {}", self.specs.len())))?;
        apply_spec(&self.base.test.select(&self.base.test_idx)?, &spec)
    }

    /// Rebuilds a sequence from a stored recipe (cache load path).
    pub fn from_recipe(
        pool: ImageSet,
        test: ImageSet,
        name: &str,
        settings: SequenceSettings,
        specs: Vec<TaskSpec>,
        train_idx: Vec<u32>,
        val_idx: Vec<u32>,
        test_idx: Vec<u32>,
    ) -> Result<Self> {
        validate_indices(&train_idx, &val_idx, pool.len())?;
        if test_idx.iter().any(|&i| i as usize >= test.len()) {
            return Err(Error::Index("test index outside test set".into()));
        }
        Ok(Self {
            base_dataset_name: name.to_string(),
            settings,
            specs,
            base: Arc::new(SequenceBase { pool, test, train_idx, val_idx, test_idx }),
        })
    }
}

fn validate_indices(train_idx: &[u32], val_idx: &[u32], pool_len: usize) -> Result<()> {
    let mut seen = vec![false; pool_len];
    for &i in train_idx.iter().chain(val_idx) {
        let i = i as usize;
        if i >= pool_len {
            return Err(Error::Index(format!("pool index {i} out of {pool_len}")));
        }
        if seen[i] {
            return Err(Error::Consistency(format!("pool index {i} used twice")));
        }
        seen[i] = true;
    }
    Ok(())
}

fn apply_spec(set: &ImageSet, spec: &TaskSpec) -> Result<ImageSet> {
    let transformed = match spec.transform {
        Transform::Identity => set.images().clone(),
        Transform::Permute { seed } => {
            let perm = make_permutation(seed);
            let mut out = ndarray::Array2::zeros((set.len(), IMAGE_DIM));
            for (mut dst, src) in out.outer_iter_mut().zip(set.images().outer_iter()) {
                perm.apply(src.as_slice().unwrap(), dst.as_slice_mut().unwrap());
            }
            out
        }
        Transform::Rotate { angle_degrees } => {
            let mut out = ndarray::Array2::zeros((set.len(), IMAGE_DIM));
            for (mut dst, src) in out.outer_iter_mut().zip(set.images().outer_iter()) {
                let rotated = rotate_image(src.as_slice().unwrap(), angle_degrees)?;
                dst.as_slice_mut().unwrap().copy_from_slice(&rotated);
            }
            out
        }
    };
    let labels = match spec.objective {
        Objective::Multiclass10 => set.labels().to_vec(),
        Objective::OneVsRest { target_class } => relabel_one_vs_rest(set.labels(), target_class),
    };
    ImageSet::new(transformed, labels)
}

fn task_specs(settings: &SequenceSettings, seed: u64) -> Vec<TaskSpec> {
    (0..settings.num_tasks)
        .map(|t| {
            // Task 0 keeps the untransformed base data so single-task runs
            // are comparable to ordinary training on the base dataset.
            let transform = if t == 0 {
                Transform::Identity
            } else {
                match settings.family {
                    SequenceFamily::Permuted => {
                        Transform::Permute { seed: derive_seed(seed, t as u64) }
                    }
                    SequenceFamily::Rotated => {
                        let mut r = SplitMix64::new(derive_seed(seed, t as u64));
                        Transform::Rotate { angle_degrees: r.next_f64() * 360.0 }
                    }
                }
            };
            let objective = match settings.family {
                SequenceFamily::Permuted => Objective::Multiclass10,
                SequenceFamily::Rotated => Objective::OneVsRest { target_class: t as u8 },
            };
            TaskSpec { task_id: t, transform, objective }
        })
        .collect()
}

/// Builds a task sequence, carving train/val splits out of `pool` with a
/// seeded shuffle (shared by all tasks) and drawing the test split from
/// `test`.
pub fn build_sequence(
    pool: &ImageSet,
    test: &ImageSet,
    name: &str,
    settings: SequenceSettings,
    seed: u64,
) -> Result<TaskSequence> {
    if settings.num_tasks == 0 {
        return Err(Error::Config("sequence needs at least one task".into()));
    }
    if settings.train_size + settings.val_size > pool.len() {
        return Err(Error::Capacity(format!(
            "pool of {} cannot provide {} train + {} val",
            pool.len(),
            settings.train_size,
            settings.val_size
        )));
    }
    if settings.test_size > test.len() {
        return Err(Error::Capacity(format!(
            "test set of {} cannot provide {}",
            test.len(),
            settings.test_size
        )));
    }
    let mut order: Vec<u32> = (0..pool.len() as u32).collect();
    SplitMix64::new(derive_seed(seed, SPLIT_STREAM)).shuffle(&mut order);
    let train_idx = order[..settings.train_size].to_vec();
    let val_idx = order[settings.train_size..settings.train_size + settings.val_size].to_vec();

    let mut test_order: Vec<u32> = (0..test.len() as u32).collect();
    SplitMix64::new(derive_seed(seed, TEST_STREAM)).shuffle(&mut test_order);
    let test_idx = test_order[..settings.test_size].to_vec();

    TaskSequence::from_recipe(
        pool.clone(),
        test.clone(),
        name,
        settings,
        task_specs(&settings, seed),
        train_idx,
        val_idx,
        test_idx,
    )
}

/// Like [`build_sequence`] but with caller-provided train and validation
/// pools (the k-fold path, where validation is the held-out fold).
pub fn build_sequence_with_holdout(
    train: &ImageSet,
    heldout: &ImageSet,
    test: &ImageSet,
    name: &str,
    mut settings: SequenceSettings,
    seed: u64,
) -> Result<TaskSequence> {
    if settings.train_size > train.len() {
        return Err(Error::Capacity(format!(
            "train pool of {} cannot provide {}",
            train.len(),
            settings.train_size
        )));
    }
    if settings.val_size > heldout.len() {
        return Err(Error::Capacity(format!(
            "heldout pool of {} cannot provide {}",
            heldout.len(),
            settings.val_size
        )));
    }
    // Concatenate train + heldout into one pool; split indices point at the
    // respective halves so the sequence recipe stays a pure index selection.
    let mut images = ndarray::Array2::zeros((train.len() + heldout.len(), IMAGE_DIM));
    images.slice_mut(ndarray::s![..train.len(), ..]).assign(train.images());
    images.slice_mut(ndarray::s![train.len().., ..]).assign(heldout.images());
    let mut labels = train.labels().to_vec();
    labels.extend_from_slice(heldout.labels());
    let pool = ImageSet::new(images, labels)?;

    let train_idx: Vec<u32> = (0..settings.train_size as u32).collect();
    let val_idx: Vec<u32> =
        (train.len() as u32..(train.len() + settings.val_size) as u32).collect();

    settings.test_size = settings.test_size.min(test.len());
    let mut test_order: Vec<u32> = (0..test.len() as u32).collect();
    SplitMix64::new(derive_seed(seed, TEST_STREAM)).shuffle(&mut test_order);
    let test_idx = test_order[..settings.test_size].to_vec();

    TaskSequence::from_recipe(
        pool,
        test.clone(),
        name,
        settings,
        task_specs(&settings, seed),
        train_idx,
        val_idx,
        test_idx,
    )
}

const SPLIT_STREAM: u64 = 0x5350_4C49; // "SPLI"
const TEST_STREAM: u64 = 0x5445_5354; // "TEST"

/// Splits `pool` into fold `fold` of `k` (held out) and the rest (train).
///
/// Folds partition a seeded shuffle of the pool into `k` contiguous segments
/// whose sizes differ by at most one.
pub fn kfold_split(pool: &ImageSet, k: usize, fold: usize, seed: u64) -> Result<(ImageSet, ImageSet)> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if fold >= k {
        return Err(Error::Index(format!("fold {fold} out of {k}")));
    }
    let n = pool.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    SplitMix64::new(derive_seed(seed, FOLD_STREAM)).shuffle(&mut order);

    let base = n / k;
    let extra = n % k;
    let size_of = |f: usize| base + usize::from(f < extra);
    let start: usize = (0..fold).map(size_of).sum();
    let end = start + size_of(fold);

    let heldout = pool.select(&order[start..end])?;
    let train_indices: Vec<u32> =
        order[..start].iter().chain(&order[end..]).copied().collect();
    let train = pool.select(&train_indices)?;
    Ok((train, heldout))
}

const FOLD_STREAM: u64 = 0x464F_4C44; // "FOLD"
