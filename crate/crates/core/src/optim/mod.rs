//! Adam with freeze-mask support and the two regularized objectives:
//! L1 sparsity for the first task and L2 anchoring to the previous snapshot
//! for every later task.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{ImageSet, TaskDataset};
use crate::error::{Error, Result, TaskId};
use crate::network::{
    apply_mask, Gradients, LayerParams, Network, NodeId, ParamMask, WeightSnapshot,
};
use crate::real::Real;
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 256,
            iterations: 4300,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Penalty added to the data loss.
#[derive(Debug, Clone, Copy)]
pub enum Regularizer<'a, F> {
    None,
    /// `mu * sum |w|` over hidden weights and the active task's head weights
    /// (biases exempt). The subgradient at exactly 0 is taken as 0.
    L1 { mu: f64 },
    /// `lambda * sum (w - w_anchor)^2` over every parameter that exists in
    /// the anchor snapshot; parameters added after the anchor are exempt.
    AnchorL2 { lambda: f64, anchor: &'a WeightSnapshot<F> },
}

/// First/second moment estimates, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    hidden: Vec<(LayerParams<F>, LayerParams<F>)>,
    heads: BTreeMap<TaskId, (LayerParams<F>, LayerParams<F>)>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    /// Zeroed moments for the network's current architecture.
    pub fn new_for(net: &Network<F>) -> Self {
        let zero_grads = Gradients::zeros_like(net);
        let pair = |p: &LayerParams<F>| {
            (
                LayerParams { weights: p.weights.clone(), bias: p.bias.clone() },
                LayerParams { weights: p.weights.clone(), bias: p.bias.clone() },
            )
        };
        AdamState {
            hidden: zero_grads.hidden.iter().map(pair).collect(),
            heads: zero_grads.heads.iter().map(|(t, p)| (*t, pair(p))).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step. Parameters pinned by `mask` are not
/// modified and their moments are not advanced. Non-finite gradients abort
/// with the offending tensor named.
pub fn adam_step<F: Real>(
    net: &mut Network<F>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
    config: &TrainingConfig,
    mask: &ParamMask,
) -> Result<()> {
    check_finite(grads)?;
    state.t += 1;
    let t = state.t as i32;
    let beta1 = F::from_f64(config.adam_beta1);
    let beta2 = F::from_f64(config.adam_beta2);
    // Fold the bias corrections into the step size and epsilon; this is
    // algebraically the textbook update lr * m_hat / (sqrt(v_hat) + eps).
    let corr2 = (1.0 - config.adam_beta2.powi(t)).sqrt();
    let lr_t = F::from_f64(config.learning_rate * corr2 / (1.0 - config.adam_beta1.powi(t)));
    let eps = F::from_f64(config.adam_eps * corr2);
    let one = F::one();

    let update =
        |param: &mut Array2<F>,
         grad: &Array2<F>,
         m: &mut Array2<F>,
         v: &mut Array2<F>,
         pinned: &Array2<bool>| {
            Zip::from(param).and(grad).and(m).and(v).and(pinned).for_each(
                |p, &g, m, v, &pin| {
                    if pin {
                        return;
                    }
                    *m = beta1 * *m + (one - beta1) * g;
                    *v = beta2 * *v + (one - beta2) * g * g;
                    *p = *p - lr_t * *m / (v.sqrt() + eps);
                },
            );
        };
    let update_vec =
        |param: &mut Array1<F>,
         grad: &Array1<F>,
         m: &mut Array1<F>,
         v: &mut Array1<F>,
         pinned: &Array1<bool>| {
            Zip::from(param).and(grad).and(m).and(v).and(pinned).for_each(
                |p, &g, m, v, &pin| {
                    if pin {
                        return;
                    }
                    *m = beta1 * *m + (one - beta1) * g;
                    *v = beta2 * *v + (one - beta2) * g * g;
                    *p = *p - lr_t * *m / (v.sqrt() + eps);
                },
            );
        };

    for (l, layer) in net.layers_mut().enumerate() {
        let (m, v) = &mut state.hidden[l];
        let (mw, mb) = &mask.hidden[l];
        update(&mut layer.weights, &grads.hidden[l].weights, &mut m.weights, &mut v.weights, mw);
        update_vec(&mut layer.bias, &grads.hidden[l].bias, &mut m.bias, &mut v.bias, mb);
    }
    let tasks: Vec<TaskId> = net.head_tasks().collect();
    for task in tasks {
        let (m, v) = state.heads.get_mut(&task).expect("state covers all heads");
        let (mw, mb) = mask.heads.get(&task).expect("mask covers all heads");
        let head = net.head_params_mut(task)?;
        update(&mut head.weights, &grads.heads[&task].weights, &mut m.weights, &mut v.weights, mw);
        update_vec(&mut head.bias, &grads.heads[&task].bias, &mut m.bias, &mut v.bias, mb);
    }
    Ok(())
}

fn check_finite<F: Real>(grads: &Gradients<F>) -> Result<()> {
    for (l, g) in grads.hidden.iter().enumerate() {
        if g.weights.iter().chain(g.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "gradient", location: format!("hidden layer {l}") });
        }
    }
    for (t, g) in &grads.heads {
        if g.weights.iter().chain(g.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "gradient", location: format!("head {t}") });
        }
    }
    Ok(())
}

/// Data loss plus the configured penalty, with gradients for every trainable
/// parameter. Gradients pinned by the network's freeze mask are zeroed.
pub fn total_loss<F: Real>(
    net: &Network<F>,
    batch: ndarray::ArrayView2<'_, F>,
    labels: &[u8],
    task: TaskId,
    reg: &Regularizer<'_, F>,
) -> Result<(f64, Gradients<F>)> {
    let mask = net.freeze_mask();
    total_loss_masked(net, batch, labels, task, reg, &mask)
}

pub(crate) fn total_loss_masked<F: Real>(
    net: &Network<F>,
    batch: ndarray::ArrayView2<'_, F>,
    labels: &[u8],
    task: TaskId,
    reg: &Regularizer<'_, F>,
    mask: &ParamMask,
) -> Result<(f64, Gradients<F>)> {
    let loss_kind = net.loss_kind_for(task)?;
    let (_, cache) = net.forward(batch, task)?;
    let (data_loss, mut grads) = net.backward_masked(&cache, labels, loss_kind, None)?;
    let penalty = apply_regularizer(net, task, reg, &mut grads)?;
    apply_mask(&mut grads, mask);
    Ok((data_loss + penalty, grads))
}

/// Adds the penalty's contribution to `grads`; returns the penalty value.
fn apply_regularizer<F: Real>(
    net: &Network<F>,
    task: TaskId,
    reg: &Regularizer<'_, F>,
    grads: &mut Gradients<F>,
) -> Result<f64> {
    match reg {
        Regularizer::None => Ok(0.0),
        Regularizer::L1 { mu } => {
            if *mu < 0.0 {
                return Err(Error::Config(format!("mu {mu} must be >= 0")));
            }
            let mu_f = F::from_f64(*mu);
            let mut total = 0.0f64;
            for (l, g) in grads.hidden.iter_mut().enumerate() {
                let w = &net.hidden_params(l)?.weights;
                total += l1_accumulate(w, &mut g.weights, mu_f);
            }
            let head_w = &net.head_params(task)?.weights;
            let g = grads.heads.get_mut(&task).expect("gradients cover the active head");
            total += l1_accumulate(head_w, &mut g.weights, mu_f);
            Ok(mu * total)
        }
        Regularizer::AnchorL2 { lambda, anchor } => {
            if *lambda < 0.0 {
                return Err(Error::Config(format!("lambda {lambda} must be >= 0")));
            }
            let lambda_f = F::from_f64(*lambda);
            let mut total = 0.0f64;
            for l in 0..anchor.num_hidden_layers() {
                if l >= net.num_hidden_layers() {
                    return Err(Error::Consistency(format!(
                        "anchor has hidden layer {l}, network does not"
                    )));
                }
                let a = anchor.hidden_params(l)?;
                let p = net.hidden_params(l)?;
                if a.out_dim() > p.out_dim() || a.in_dim() > p.in_dim() {
                    return Err(Error::Consistency(format!(
                        "anchor layer {l} is {}x{}, network shrunk to {}x{}",
                        a.out_dim(),
                        a.in_dim(),
                        p.out_dim(),
                        p.in_dim()
                    )));
                }
                let g = &mut grads.hidden[l];
                total += anchor_accumulate(p, a, g, lambda_f);
            }
            for anchored_task in anchor.head_tasks() {
                let a = anchor.head_params(anchored_task)?;
                let p = net.head_params(anchored_task).map_err(|_| {
                    Error::Consistency(format!("anchor has head {anchored_task}, network does not"))
                })?;
                if a.out_dim() != p.out_dim() || a.in_dim() > p.in_dim() {
                    return Err(Error::Consistency(format!(
                        "anchor head {anchored_task} is {}x{}, network has {}x{}",
                        a.out_dim(),
                        a.in_dim(),
                        p.out_dim(),
                        p.in_dim()
                    )));
                }
                let g = grads.heads.get_mut(&anchored_task).expect("gradients cover all heads");
                total += anchor_accumulate(p, a, g, lambda_f);
            }
            Ok(lambda * total)
        }
    }
}

fn l1_accumulate<F: Real>(w: &Array2<F>, g: &mut Array2<F>, mu: F) -> f64 {
    let mut total = 0.0f64;
    Zip::from(g).and(w).for_each(|g, &w| {
        total += w.abs().into_f64();
        if w > F::zero() {
            *g += mu;
        } else if w < F::zero() {
            *g -= mu;
        }
        // subgradient at exactly zero: 0
    });
    total
}

/// Penalty over the anchor-shaped prefix of `p`; `2*lambda*(w - a)` into the
/// gradients, `(w - a)^2` into the returned sum (weights and biases).
fn anchor_accumulate<F: Real>(
    p: &LayerParams<F>,
    a: &LayerParams<F>,
    g: &mut LayerParams<F>,
    lambda: F,
) -> f64 {
    let two = F::from_f64(2.0);
    let mut total = 0.0f64;
    let (rows, cols) = (a.out_dim(), a.in_dim());
    let pw = p.weights.slice(ndarray::s![..rows, ..cols]);
    let mut gw = g.weights.slice_mut(ndarray::s![..rows, ..cols]);
    Zip::from(&mut gw).and(&pw).and(&a.weights).for_each(|g, &w, &aw| {
        let d = w - aw;
        total += (d * d).into_f64();
        *g += two * lambda * d;
    });
    let pb = p.bias.slice(ndarray::s![..rows]);
    let mut gb = g.bias.slice_mut(ndarray::s![..rows]);
    Zip::from(&mut gb).and(&pb).and(&a.bias).for_each(|g, &b, &ab| {
        let d = b - ab;
        total += (d * d).into_f64();
        *g += two * lambda * d;
    });
    total
}

/// Validation-accuracy sample taken during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub iteration: usize,
    pub accuracy: f64,
}

/// Per-iteration training losses plus periodic validation accuracy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    pub val: Vec<ValPoint>,
}

impl TrainHistory {
    /// Writes `iteration,loss,val_accuracy` CSV rows (validation column
    /// empty between samples).
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,loss,val_accuracy")?;
        let mut val_iter = self.val.iter().peekable();
        for (i, loss) in self.losses.iter().enumerate() {
            let iteration = i + 1;
            let val = match val_iter.peek() {
                Some(v) if v.iteration == iteration => {
                    let v = val_iter.next().unwrap();
                    format!("{}", v.accuracy)
                }
                _ => String::new(),
            };
            writeln!(w, "{iteration},{loss},{val}")?;
        }
        Ok(())
    }
}

/// Restricts which parameters a training run may update, on top of the
/// freeze mask.
#[derive(Debug, Clone)]
pub enum TrainScope {
    /// Everything that is not frozen.
    All,
    /// Only the listed hidden units (their incoming rows and bias), the
    /// active head's bias, and head columns reading the listed last-layer
    /// units. Everything else is pinned.
    Units(std::collections::BTreeSet<NodeId>),
    /// Only the active task's head (body fixed).
    HeadOnly,
}

/// Interval between validation-accuracy samples during training.
pub const VAL_EVERY: usize = 100;

/// Runs `budget` iterations of shuffled mini-batch Adam on the total loss.
/// Deterministic for a fixed (seed, config, data).
pub fn train<F: Real>(
    net: &mut Network<F>,
    data: &TaskDataset,
    task: TaskId,
    config: &TrainingConfig,
    reg: &Regularizer<'_, F>,
    budget: usize,
) -> Result<TrainHistory> {
    train_scoped(net, data, task, config, reg, budget, &TrainScope::All)
}

/// [`train`] with an explicit parameter scope (selective-retraining stages).
pub fn train_scoped<F: Real>(
    net: &mut Network<F>,
    data: &TaskDataset,
    task: TaskId,
    config: &TrainingConfig,
    reg: &Regularizer<'_, F>,
    budget: usize,
    scope: &TrainScope,
) -> Result<TrainHistory> {
    config.validate()?;
    if !net.has_head(task) {
        return Err(Error::UnknownTask(task));
    }
    let mut history = TrainHistory::default();
    if budget == 0 {
        return Ok(history);
    }
    let n = data.train.len();
    if n == 0 {
        return Err(Error::EmptyInput("training split is empty".into()));
    }

    let mask = build_mask(net, task, scope);
    let mut state = AdamState::new_for(net);
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut rng = SplitMix64::new(derive_seed(config.seed, 0x7261_494E ^ task as u64));
    let batch_size = config.batch_size.min(n);
    let mut cursor = n; // force an initial shuffle

    let mut batch = Array2::<F>::zeros((batch_size, data.train.images().ncols()));
    let mut labels = vec![0u8; batch_size];
    for iteration in 1..=budget {
        if cursor + batch_size > n {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        gather_batch(&data.train, &order[cursor..cursor + batch_size], &mut batch, &mut labels);
        cursor += batch_size;

        let (loss, grads) =
            total_loss_masked(net, batch.view(), &labels, task, reg, &mask)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss", location: format!("iteration {iteration}") });
        }
        adam_step(net, &grads, &mut state, config, &mask)?;
        history.losses.push(loss);

        if iteration % VAL_EVERY == 0 || iteration == budget {
            let accuracy = eval_accuracy(net, &data.val, task)?;
            history.val.push(ValPoint { iteration, accuracy });
        }
    }
    Ok(history)
}

fn build_mask<F: Real>(net: &Network<F>, task: TaskId, scope: &TrainScope) -> ParamMask {
    let frozen = net.freeze_mask();
    match scope {
        TrainScope::All => frozen,
        TrainScope::HeadOnly => {
            let mut mask = ParamMask::none_for(net);
            for (w, b) in mask.hidden.iter_mut() {
                w.fill(true);
                b.fill(true);
            }
            for (t, (w, b)) in mask.heads.iter_mut() {
                if *t != task {
                    w.fill(true);
                    b.fill(true);
                }
            }
            mask.union(&frozen)
        }
        TrainScope::Units(units) => {
            let mut mask = ParamMask::none_for(net);
            let last = mask.hidden.len().saturating_sub(1);
            for (l, (w, b)) in mask.hidden.iter_mut().enumerate() {
                for r in 0..w.nrows() {
                    if !units.contains(&NodeId::new(l, r)) {
                        w.row_mut(r).fill(true);
                        b[r] = true;
                    }
                }
            }
            for (t, (w, b)) in mask.heads.iter_mut() {
                if *t != task {
                    w.fill(true);
                    b.fill(true);
                } else {
                    // Head columns stay trainable only where they read an
                    // in-scope last-layer unit.
                    for c in 0..w.ncols() {
                        if !units.contains(&NodeId::new(last, c)) {
                            w.column_mut(c).fill(true);
                        }
                    }
                }
            }
            mask.union(&frozen)
        }
    }
}

pub(crate) fn gather_batch<F: Real>(
    set: &ImageSet,
    indices: &[u32],
    batch: &mut Array2<F>,
    labels: &mut [u8],
) {
    for (row, &src) in indices.iter().enumerate() {
        let src_row = set.images().row(src as usize);
        let mut dst = batch.row_mut(row);
        for (d, &s) in dst.iter_mut().zip(src_row.iter()) {
            *d = F::from_f64(s as f64);
        }
        labels[row] = set.labels()[src as usize];
    }
}

/// Fraction of correctly classified samples. Multiclass heads take the
/// argmax; one-output heads decide positive when the logit exceeds 0.
pub fn eval_accuracy<F: Real>(net: &Network<F>, set: &ImageSet, task: TaskId) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyInput("evaluation over an empty set".into()));
    }
    if !net.has_head(task) {
        return Err(Error::UnknownTask(task));
    }
    let chunk = 2048;
    let n = set.len();
    let mut correct = 0u64;
    let mut batch = Array2::<F>::zeros((chunk.min(n), set.images().ncols()));
    let mut labels = vec![0u8; chunk.min(n)];
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let size = end - start;
        let indices: Vec<u32> = (start as u32..end as u32).collect();
        let mut view = batch.slice_mut(ndarray::s![..size, ..]);
        for (row, &src) in indices.iter().enumerate() {
            let src_row = set.images().row(src as usize);
            for (d, &s) in view.row_mut(row).iter_mut().zip(src_row.iter()) {
                *d = F::from_f64(s as f64);
            }
            labels[row] = set.labels()[src as usize];
        }
        let logits = net.logits(batch.slice(ndarray::s![..size, ..]), task)?;
        if logits.ncols() == 1 {
            for (row, &y) in logits.outer_iter().zip(&labels[..size]) {
                let predicted = u8::from(row[0] > F::zero());
                correct += u64::from(predicted == y);
            }
        } else {
            for (row, &y) in logits.outer_iter().zip(&labels[..size]) {
                let mut best = 0usize;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                correct += u64::from(best == y as usize);
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}
