//! Task-sequence orchestration: first-task L1 training, selective
//! retraining, loss-triggered expansion, candidate-weight drift estimation,
//! node duplication and freezing, and anchored full training, with all-task
//! evaluation after every step.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, TaskDataset, TaskSequence};
use crate::drift::{compute_drift, Category, DriftPolicy, DriftReport};
use crate::error::{Error, Result, TaskId};
use crate::network::{Network, NodeId, WeightSnapshot};
use crate::optim::{
    adam_step, eval_accuracy, train, train_scoped, AdamState, Regularizer, TrainHistory,
    TrainScope, TrainingConfig,
};
use crate::rng::{derive_seed, SplitMix64};

/// Head weights whose magnitude exceeds this participate in the selective
/// retraining reachability pass.
const SUBNETWORK_WEIGHT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualConfig {
    pub drift_policy: DriftPolicy,
    /// Fraction of the train split used for candidate-weight estimation.
    pub candidate_fraction: f64,
    pub candidate_iterations: usize,
    /// Neurons appended per hidden layer when expansion triggers.
    pub expansion_k: usize,
    /// Expansion triggers when post-selective-retraining validation accuracy
    /// falls below this ratio of the previous tasks' mean final validation
    /// accuracy.
    pub expansion_trigger_ratio: f64,
    /// Coefficient of the L2 anchor penalty toward the previous snapshot.
    pub anchor_lambda: f64,
    /// Coefficient of the first task's L1 penalty.
    pub mu: f64,
    pub training: TrainingConfig,
    /// Switch off to run the bare duplicate-or-anchor pipeline.
    pub selective_retraining: bool,
    /// Switch off to disable dynamic expansion.
    pub expansion: bool,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            drift_policy: DriftPolicy::angular(30.0),
            candidate_fraction: 0.1,
            candidate_iterations: 430,
            expansion_k: 10,
            expansion_trigger_ratio: 0.9,
            anchor_lambda: 0.1,
            mu: 1e-5,
            training: TrainingConfig::default(),
            selective_retraining: true,
            expansion: true,
        }
    }
}

impl ContinualConfig {
    pub fn validate(&self) -> Result<()> {
        self.drift_policy.validate()?;
        self.training.validate()?;
        if !(0.0 < self.candidate_fraction && self.candidate_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "candidate fraction {} outside (0, 1]",
                self.candidate_fraction
            )));
        }
        if self.candidate_iterations == 0 {
            return Err(Error::Config("candidate estimation needs at least one iteration".into()));
        }
        if self.expansion_k == 0 {
            return Err(Error::Config("expansion_k must be >= 1".into()));
        }
        if self.mu < 0.0 || self.anchor_lambda < 0.0 {
            return Err(Error::Config("penalty coefficients must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuplicationEvent {
    pub task: TaskId,
    pub original: NodeId,
    pub clone: NodeId,
    pub rho: f64,
}

/// Everything recorded while running one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: TaskId,
    /// Validation accuracy after selective retraining (None for task 0 or
    /// when selective retraining is disabled).
    pub selective_val_accuracy: Option<f64>,
    pub expanded: Vec<NodeId>,
    pub duplications: Vec<DuplicationEvent>,
    /// (freeze, regularize, duplicate) counts from the drift report.
    pub drift_category_counts: Option<(usize, usize, usize)>,
    pub widths: Vec<usize>,
    pub frozen_count: usize,
    pub final_val_accuracy: f64,
    #[serde(skip)]
    pub train_history: TrainHistory,
}

/// Lower-triangular accuracy record over the whole sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    /// `accuracy_matrix[i][t]`: test accuracy on task `t` after finishing
    /// task `i` (`t <= i`).
    pub accuracy_matrix: Vec<Vec<f64>>,
    /// Mean of each accuracy row.
    pub average_accuracy: Vec<f64>,
    /// Hidden-layer widths after each task.
    pub node_counts: Vec<Vec<usize>>,
    pub duplication_log: Vec<DuplicationEvent>,
    /// Final validation accuracy per task.
    pub final_val_accuracy: Vec<f64>,
}

impl SequenceResult {
    fn empty() -> Self {
        Self {
            accuracy_matrix: Vec::new(),
            average_accuracy: Vec::new(),
            node_counts: Vec::new(),
            duplication_log: Vec::new(),
            final_val_accuracy: Vec::new(),
        }
    }

    fn push_row(&mut self, row: Vec<f64>, record: &TaskRecord) {
        self.average_accuracy.push(row.iter().sum::<f64>() / row.len() as f64);
        self.accuracy_matrix.push(row);
        self.node_counts.push(record.widths.clone());
        self.duplication_log.extend(record.duplications.iter().copied());
        self.final_val_accuracy.push(record.final_val_accuracy);
    }

    /// Accuracy drop of task `t` from its diagonal to the last row.
    pub fn forgetting(&self, t: usize) -> Option<f64> {
        let last = self.accuracy_matrix.last()?;
        Some(self.accuracy_matrix.get(t)?.get(t)? - last.get(t)?)
    }
}

// Seed-stream tags for the phases of a task (mixed with the task index).
const STREAM_INIT: u64 = 0x494E_4954;
const STREAM_HEAD: u64 = 0x4845_4144;
const STREAM_STAGE1: u64 = 0x5354_4731;
const STREAM_STAGE2: u64 = 0x5354_4732;
const STREAM_CANDIDATE: u64 = 0x4341_4E44;
const STREAM_FULL: u64 = 0x4655_4C4C;

fn phase_config(base: &TrainingConfig, stream: u64, task: TaskId) -> TrainingConfig {
    TrainingConfig { seed: derive_seed(base.seed, stream ^ ((task as u64) << 32)), ..*base }
}

/// Drives one network through a task sequence.
pub struct ContinualEngine {
    net: Network<f32>,
    config: ContinualConfig,
    prev: Option<WeightSnapshot<f32>>,
    completed: usize,
    final_val: Vec<f64>,
}

impl ContinualEngine {
    pub fn new(input_dim: usize, hidden_widths: &[usize], config: ContinualConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::new(
            input_dim,
            hidden_widths,
            derive_seed(config.training.seed, STREAM_INIT),
        )?;
        Ok(Self { net, config, prev: None, completed: 0, final_val: Vec::new() })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn completed_tasks(&self) -> usize {
        self.completed
    }

    pub fn previous_snapshot(&self) -> Option<&WeightSnapshot<f32>> {
        self.prev.as_ref()
    }

    /// Full training of the untouched model on task 0 with the L1 penalty;
    /// stores the first snapshot.
    pub fn train_first_task(&mut self, task: &TaskDataset) -> Result<TaskRecord> {
        if self.completed != 0 {
            return Err(Error::Config(format!(
                "first-task training requires an untrained model ({} tasks done)",
                self.completed
            )));
        }
        if task.spec.task_id != 0 {
            return Err(Error::Consistency(format!(
                "expected task 0, got task {}",
                task.spec.task_id
            )));
        }
        let base = &self.config.training;
        self.net.add_head(0, task.spec.objective.out_dim(), derive_seed(base.seed, STREAM_HEAD))?;
        let history = train(
            &mut self.net,
            task,
            0,
            &phase_config(base, STREAM_FULL, 0),
            &Regularizer::L1 { mu: self.config.mu },
            base.iterations,
        )?;
        let final_val = history.val.last().map_or(0.0, |v| v.accuracy);
        self.prev = Some(self.net.snapshot(0));
        self.completed = 1;
        self.final_val.push(final_val);
        Ok(TaskRecord {
            task: 0,
            selective_val_accuracy: None,
            expanded: Vec::new(),
            duplications: Vec::new(),
            drift_category_counts: None,
            widths: self.net.widths(),
            frozen_count: 0,
            final_val_accuracy: final_val,
            train_history: history,
        })
    }

    /// Stage 1 trains only the new head (body fixed) with L1 on the head
    /// weights; stage 2 retrains exactly the sub-network of hidden units
    /// reachable backward from head weights above the magnitude threshold.
    /// Returns the stage-2 validation accuracy and the unit mask.
    pub fn selective_retrain(
        &mut self,
        task: &TaskDataset,
    ) -> Result<(f64, BTreeSet<NodeId>)> {
        let i = task.spec.task_id;
        let base = self.config.training;
        self.train_head_only(task, i, &phase_config(&base, STREAM_STAGE1, i))?;

        let mask = self.reachable_subnetwork(i)?;
        if mask.is_empty() {
            // All head weights were driven to (near) zero; fall through with
            // the head-only validation accuracy.
            return Ok((eval_accuracy(&self.net, &task.val, i)?, mask));
        }
        let history = train_scoped(
            &mut self.net,
            task,
            i,
            &phase_config(&base, STREAM_STAGE2, i),
            &Regularizer::None,
            base.iterations,
            &TrainScope::Units(mask.clone()),
        )?;
        let val = history.val.last().map_or(0.0, |v| v.accuracy);
        Ok((val, mask))
    }

    /// Head-only training against last-hidden activations precomputed once
    /// (the body is fixed by definition in this stage, so its activations
    /// are batch-independent).
    fn train_head_only(
        &mut self,
        task: &TaskDataset,
        task_id: TaskId,
        config: &TrainingConfig,
    ) -> Result<()> {
        let hidden = self.last_hidden_activations(&task.train)?;
        let n = hidden.nrows();
        let batch_size = config.batch_size.min(n);
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut rng = SplitMix64::new(derive_seed(config.seed, 0x4845_4144));
        let mut cursor = n;

        // A head-shaped satellite network: the head trains as the only layer
        // of a body-less network over the activation features.
        let head = self.net.head_params(task_id)?.clone();
        let mut sat = Network::<f32>::new(head.in_dim(), &[], 0)?;
        sat.add_head(task_id, head.out_dim(), 0)?;
        *sat.head_params_mut(task_id)? = head;
        let mut state = AdamState::new_for(&sat);
        let mask = crate::network::ParamMask::none_for(&sat);

        let mut batch = Array2::<f32>::zeros((batch_size, sat.input_dim()));
        let mut labels = vec![0u8; batch_size];
        for _ in 0..config.iterations {
            if cursor + batch_size > n {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            for (row, &src) in order[cursor..cursor + batch_size].iter().enumerate() {
                batch.row_mut(row).assign(&hidden.row(src as usize));
                labels[row] = task.train.labels()[src as usize];
            }
            cursor += batch_size;
            let (loss, grads) = crate::optim::total_loss_masked(
                &sat,
                batch.view(),
                &labels,
                task_id,
                &Regularizer::L1 { mu: self.config.mu },
                &mask,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { what: "loss", location: "head-only stage".into() });
            }
            adam_step(&mut sat, &grads, &mut state, config, &mask)?;
        }
        *self.net.head_params_mut(task_id)? = sat.head_params(task_id)?.clone();
        Ok(())
    }

    fn last_hidden_activations(&self, set: &ImageSet) -> Result<Array2<f32>> {
        let n = set.len();
        let width = self.net.widths().last().copied().unwrap_or(self.net.input_dim());
        let mut out = Array2::<f32>::zeros((n, width));
        let chunk = 2048;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let batch = set.images().slice(ndarray::s![start..end, ..]);
            let acts = self.net.hidden_activations(batch)?;
            out.slice_mut(ndarray::s![start..end, ..]).assign(&acts);
            start = end;
        }
        Ok(out)
    }

    /// Hidden units reachable backward from head weights above the
    /// magnitude threshold.
    fn reachable_subnetwork(&self, task_id: TaskId) -> Result<BTreeSet<NodeId>> {
        let mut mask = BTreeSet::new();
        let layers = self.net.num_hidden_layers();
        if layers == 0 {
            return Ok(mask);
        }
        let head = self.net.head_params(task_id)?;
        let last = layers - 1;
        let mut selected: Vec<usize> = (0..head.in_dim())
            .filter(|&u| {
                head.weights
                    .column(u)
                    .iter()
                    .any(|w| (w.abs() as f64) > SUBNETWORK_WEIGHT_THRESHOLD)
            })
            .collect();
        for &u in &selected {
            mask.insert(NodeId::new(last, u));
        }
        for layer in (0..last).rev() {
            let above = self.net.hidden_params(layer + 1)?;
            let mut next = Vec::new();
            for u in 0..above.in_dim() {
                if selected.iter().any(|&v| {
                    (above.weights[[v, u]].abs() as f64) > SUBNETWORK_WEIGHT_THRESHOLD
                }) {
                    next.push(u);
                    mask.insert(NodeId::new(layer, u));
                }
            }
            selected = next;
        }
        Ok(mask)
    }

    /// Appends `expansion_k` fresh units to every hidden layer when the
    /// validation accuracy falls below the trigger bar.
    pub fn expand_if_needed(&mut self, val_accuracy: f64) -> Result<Vec<NodeId>> {
        if !self.config.expansion || self.final_val.is_empty() {
            return Ok(Vec::new());
        }
        let prev_mean = self.final_val.iter().sum::<f64>() / self.final_val.len() as f64;
        let bar = self.config.expansion_trigger_ratio * prev_mean;
        if val_accuracy >= bar {
            return Ok(Vec::new());
        }
        let task = self.completed;
        let seed = derive_seed(self.config.training.seed, 0x4558_5041 ^ ((task as u64) << 32));
        let mut added = Vec::new();
        for layer in 0..self.net.num_hidden_layers() {
            added.extend(self.net.expand_layer(
                layer,
                self.config.expansion_k,
                task,
                derive_seed(seed, layer as u64),
            )?);
        }
        Ok(added)
    }

    /// Trains an isolated, fully unfrozen copy of the model on a fraction of
    /// the task's train split and returns its snapshot; the live model is
    /// untouched.
    pub fn estimate_candidate_weights(&self, task: &TaskDataset) -> Result<WeightSnapshot<f32>> {
        let i = task.spec.task_id;
        let n = task.train.len();
        let batch_size = self.config.training.batch_size.min(n);
        let want = ((self.config.candidate_fraction * n as f64).ceil() as usize)
            .max(batch_size)
            .min(n);
        let mut order: Vec<u32> = (0..n as u32).collect();
        SplitMix64::new(derive_seed(self.config.training.seed, STREAM_CANDIDATE ^ i as u64))
            .shuffle(&mut order);
        let mut subset = order[..want].to_vec();
        // Keep pool order so fraction 1.0 degenerates to the identity
        // selection (candidate == full retrain under the same seed).
        subset.sort_unstable();

        let fraction = TaskDataset {
            spec: task.spec,
            train: task.train.select(&subset)?,
            val: task.val.clone(),
            test: task.test.clone(),
        };
        let mut copy = self.net.clone();
        copy.unfreeze_all();
        train(
            &mut copy,
            &fraction,
            i,
            &phase_config(&self.config.training, STREAM_CANDIDATE, i),
            &Regularizer::None,
            self.config.candidate_iterations,
        )?;
        Ok(copy.snapshot(i))
    }

    /// Runs the full per-task pipeline; on error the model rolls back to the
    /// previous snapshot.
    pub fn run_task(&mut self, task: &TaskDataset) -> Result<TaskRecord> {
        let anchor = self
            .prev
            .clone()
            .ok_or_else(|| Error::Config("run_task requires a completed first task".into()))?;
        match self.run_task_inner(task, &anchor) {
            Ok(record) => Ok(record),
            Err(e) => {
                self.net.restore(&anchor);
                Err(e)
            }
        }
    }

    fn run_task_inner(
        &mut self,
        task: &TaskDataset,
        anchor: &WeightSnapshot<f32>,
    ) -> Result<TaskRecord> {
        let i = self.completed;
        if task.spec.task_id != i {
            return Err(Error::Consistency(format!(
                "expected task {i}, got task {}",
                task.spec.task_id
            )));
        }
        let base = self.config.training;
        self.net.add_head(
            i,
            task.spec.objective.out_dim(),
            derive_seed(base.seed, STREAM_HEAD ^ ((i as u64) << 32)),
        )?;

        let (selective_val, _mask) = if self.config.selective_retraining {
            let (val, mask) = self.selective_retrain(task)?;
            (Some(val), mask)
        } else {
            (None, BTreeSet::new())
        };
        let trigger_val = match selective_val {
            Some(v) => v,
            None => eval_accuracy(&self.net, &task.val, i)?,
        };

        let expanded = self.expand_if_needed(trigger_val)?;

        let candidate = self.estimate_candidate_weights(task)?;
        let report = compute_drift(anchor, &candidate, &self.config.drift_policy)?;
        let duplications = self.apply_categories(&report, anchor, i)?;

        let history = train(
            &mut self.net,
            task,
            i,
            &phase_config(&base, STREAM_FULL, i),
            &Regularizer::AnchorL2 { lambda: self.config.anchor_lambda, anchor },
            base.iterations,
        )?;
        let final_val = history.val.last().map_or(0.0, |v| v.accuracy);

        self.prev = Some(self.net.snapshot(i));
        self.completed += 1;
        self.final_val.push(final_val);

        let counts = (
            report.nodes_in(Category::Freeze).count(),
            report.nodes_in(Category::Regularize).count(),
            report.nodes_in(Category::Duplicate).count(),
        );
        Ok(TaskRecord {
            task: i,
            selective_val_accuracy: selective_val,
            expanded,
            duplications,
            drift_category_counts: Some(counts),
            widths: self.net.widths(),
            frozen_count: self.net.frozen_nodes().count(),
            final_val_accuracy: final_val,
            train_history: history,
        })
    }

    /// Duplicates duplicate-category nodes and freezes freeze-category
    /// nodes. Nodes frozen in earlier tasks keep their report entry but
    /// trigger no further action.
    ///
    /// A node freezes at its previous-snapshot state: selective retraining
    /// already moved the live body for the new task, and the freeze exists
    /// to preserve the function the node computed for the tasks before this
    /// one. The clone of a duplicated node keeps the adapted weights.
    fn apply_categories(
        &mut self,
        report: &DriftReport,
        anchor: &WeightSnapshot<f32>,
        task: TaskId,
    ) -> Result<Vec<DuplicationEvent>> {
        let mut events = Vec::new();
        for entry in &report.entries {
            if self.net.is_frozen(entry.node) {
                continue;
            }
            match entry.category {
                Category::Duplicate => {
                    let clone = self.net.duplicate_node(entry.node, task)?;
                    self.net.restore_node_from(entry.node, anchor)?;
                    events.push(DuplicationEvent {
                        task,
                        original: entry.node,
                        clone,
                        rho: entry.rho,
                    });
                }
                Category::Freeze => {
                    self.net.restore_node_from(entry.node, anchor)?;
                    self.net.freeze_node(entry.node, task)?;
                }
                Category::Regularize => {}
            }
        }
        Ok(events)
    }
}

/// Test accuracy on every task up to `upto` (read-only).
pub fn evaluate_all(net: &Network<f32>, seq: &TaskSequence, upto: usize) -> Result<Vec<f64>> {
    let mut row = Vec::with_capacity(upto + 1);
    for t in 0..=upto {
        let test = seq.task_test(t)?;
        row.push(eval_accuracy(net, &test, t)?);
    }
    Ok(row)
}

/// Runs the drift-aware pipeline over a whole sequence.
pub fn run_sequence(
    seq: &TaskSequence,
    hidden_widths: &[usize],
    config: &ContinualConfig,
) -> Result<SequenceResult> {
    let (result, status) = run_sequence_detailed(seq, hidden_widths, config);
    status.map(|_| result)
}

/// Like [`run_sequence`] but preserves the partial result when a later task
/// fails.
pub fn run_sequence_detailed(
    seq: &TaskSequence,
    hidden_widths: &[usize],
    config: &ContinualConfig,
) -> (SequenceResult, Result<()>) {
    let mut partial = SequenceResult::empty();
    if seq.is_empty() {
        return (partial, Err(Error::EmptyInput("sequence has no tasks".into())));
    }
    let mut engine = match ContinualEngine::new(crate::data::IMAGE_DIM, hidden_widths, *config) {
        Ok(engine) => engine,
        Err(e) => return (partial, Err(e)),
    };
    for i in 0..seq.len() {
        let step = (|| -> Result<()> {
            let task = seq.task(i)?;
            let record = if i == 0 {
                engine.train_first_task(&task)?
            } else {
                engine.run_task(&task)?
            };
            let row = evaluate_all(engine.network(), seq, i)?;
            partial.push_row(row, &record);
            Ok(())
        })();
        if let Err(e) = step {
            return (partial, Err(e));
        }
    }
    (partial, Ok(()))
}

/// Naive sequential fine-tuning baseline: one shared body, per-task heads,
/// no penalty, no freezing, no surgery.
pub fn run_sequence_naive(
    seq: &TaskSequence,
    hidden_widths: &[usize],
    training: &TrainingConfig,
) -> Result<SequenceResult> {
    if seq.is_empty() {
        return Err(Error::EmptyInput("sequence has no tasks".into()));
    }
    let mut net = Network::<f32>::new(
        crate::data::IMAGE_DIM,
        hidden_widths,
        derive_seed(training.seed, STREAM_INIT),
    )?;
    let mut result = SequenceResult::empty();
    for i in 0..seq.len() {
        let task = seq.task(i)?;
        net.add_head(
            i,
            task.spec.objective.out_dim(),
            derive_seed(training.seed, STREAM_HEAD ^ ((i as u64) << 32)),
        )?;
        let history = train(
            &mut net,
            &task,
            i,
            &phase_config(training, STREAM_FULL, i),
            &Regularizer::None,
            training.iterations,
        )?;
        let record = TaskRecord {
            task: i,
            selective_val_accuracy: None,
            expanded: Vec::new(),
            duplications: Vec::new(),
            drift_category_counts: None,
            widths: net.widths(),
            frozen_count: 0,
            final_val_accuracy: history.val.last().map_or(0.0, |v| v.accuracy),
            train_history: history,
        };
        let mut row = Vec::with_capacity(i + 1);
        for t in 0..=i {
            row.push(eval_accuracy(&net, &seq.task_test(t)?, t)?);
        }
        result.push_row(row, &record);
    }
    Ok(result)
}
