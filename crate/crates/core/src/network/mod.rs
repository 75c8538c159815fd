//! Dense feed-forward network with ReLU hidden layers, one output head per
//! task, exact backpropagation for the two supported losses, and node
//! surgery (duplicate, expand, freeze).

mod snapshot;

pub use snapshot::WeightSnapshot;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TaskId};
use crate::real::Real;
use crate::rng::{derive_seed, SplitMix64};

/// Identifies a hidden unit: `layer` is the hidden-layer index, `unit` the
/// row within that layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub layer: usize,
    pub unit: usize,
}

impl NodeId {
    pub fn new(layer: usize, unit: usize) -> Self {
        Self { layer, unit }
    }
}

/// Weight matrix (`out_dim x in_dim`) and bias vector of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub weights: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> LayerParams<F> {
    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn he_init(out_dim: usize, in_dim: usize, rng: &mut SplitMix64) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((out_dim, in_dim), || {
            F::from_f64(rng.next_normal() * std)
        });
        LayerParams { weights, bias: Array1::zeros(out_dim) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HiddenLayer<F> {
    pub(crate) params: LayerParams<F>,
    /// Task at which each unit was created (0 for the initial architecture).
    pub(crate) created_at: Vec<TaskId>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Head<F> {
    pub(crate) params: LayerParams<F>,
    pub(crate) created_at: TaskId,
}

/// Provenance of a surgically added unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeOrigin {
    pub origin: NodeId,
    pub created_at_task: TaskId,
}

/// The network. Exclusively owned by one training run at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<F> {
    input_dim: usize,
    pub(crate) hidden: Vec<HiddenLayer<F>>,
    pub(crate) heads: BTreeMap<TaskId, Head<F>>,
    pub(crate) frozen: BTreeMap<NodeId, TaskId>,
    pub(crate) lineage: BTreeMap<NodeId, NodeOrigin>,
}

/// Loss attached to a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Softmax cross-entropy over class-id labels.
    SoftmaxCrossEntropy,
    /// Per-logit sigmoid binary cross-entropy over 0/1 labels.
    SigmoidBinaryCrossEntropy,
}

/// Activations recorded by [`Network::forward`] for the backward pass.
pub struct ForwardCache<F> {
    pub task: TaskId,
    input: Array2<F>,
    /// Post-ReLU activations per hidden layer.
    post: Vec<Array2<F>>,
    pub logits: Array2<F>,
}

/// Gradients with the same shapes as the parameters. Heads other than the
/// task that produced them hold zeros unless a penalty touches them.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub hidden: Vec<LayerParams<F>>,
    pub heads: BTreeMap<TaskId, LayerParams<F>>,
}

impl<F: Real> Gradients<F> {
    pub(crate) fn zeros_like(net: &Network<F>) -> Self {
        Gradients {
            hidden: net
                .hidden
                .iter()
                .map(|l| LayerParams {
                    weights: Array2::zeros(l.params.weights.raw_dim()),
                    bias: Array1::zeros(l.params.bias.raw_dim()),
                })
                .collect(),
            heads: net
                .heads
                .iter()
                .map(|(t, h)| {
                    (
                        *t,
                        LayerParams {
                            weights: Array2::zeros(h.params.weights.raw_dim()),
                            bias: Array1::zeros(h.params.bias.raw_dim()),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Boolean masks mirroring the parameters; `true` marks an entry pinned by
/// freezing (or by a training scope) that the optimizer must not touch.
#[derive(Debug, Clone)]
pub struct ParamMask {
    pub hidden: Vec<(Array2<bool>, Array1<bool>)>,
    pub heads: BTreeMap<TaskId, (Array2<bool>, Array1<bool>)>,
}

impl ParamMask {
    pub fn none_for<F: Real>(net: &Network<F>) -> Self {
        ParamMask {
            hidden: net
                .hidden
                .iter()
                .map(|l| {
                    (
                        Array2::from_elem(l.params.weights.raw_dim(), false),
                        Array1::from_elem(l.params.bias.raw_dim(), false),
                    )
                })
                .collect(),
            heads: net
                .heads
                .iter()
                .map(|(t, h)| {
                    (
                        *t,
                        (
                            Array2::from_elem(h.params.weights.raw_dim(), false),
                            Array1::from_elem(h.params.bias.raw_dim(), false),
                        ),
                    )
                })
                .collect(),
        }
    }

    /// Entry-wise union of two masks over the same architecture.
    pub fn union(mut self, other: &ParamMask) -> ParamMask {
        for (a, b) in self.hidden.iter_mut().zip(&other.hidden) {
            Zip::from(&mut a.0).and(&b.0).for_each(|x, y| *x |= *y);
            Zip::from(&mut a.1).and(&b.1).for_each(|x, y| *x |= *y);
        }
        for (t, a) in self.heads.iter_mut() {
            if let Some(b) = other.heads.get(t) {
                Zip::from(&mut a.0).and(&b.0).for_each(|x, y| *x |= *y);
                Zip::from(&mut a.1).and(&b.1).for_each(|x, y| *x |= *y);
            }
        }
        self
    }
}

impl<F: Real> Network<F> {
    /// Fresh network with He-initialized hidden layers (weights drawn from a
    /// normal with standard deviation `sqrt(2 / in_dim)`, biases zero).
    pub fn new(input_dim: usize, hidden_widths: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        if let Some(w) = hidden_widths.iter().find(|w| **w == 0) {
            return Err(Error::Config(format!("zero-width hidden layer ({w})")));
        }
        let mut hidden = Vec::with_capacity(hidden_widths.len());
        let mut in_dim = input_dim;
        for (l, &width) in hidden_widths.iter().enumerate() {
            let mut rng = SplitMix64::new(derive_seed(seed, l as u64));
            hidden.push(HiddenLayer {
                params: LayerParams::he_init(width, in_dim, &mut rng),
                created_at: vec![0; width],
            });
            in_dim = width;
        }
        Ok(Network {
            input_dim,
            hidden,
            heads: BTreeMap::new(),
            frozen: BTreeMap::new(),
            lineage: BTreeMap::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Current width of each hidden layer.
    pub fn widths(&self) -> Vec<usize> {
        self.hidden.iter().map(|l| l.params.out_dim()).collect()
    }

    pub fn num_hidden_layers(&self) -> usize {
        self.hidden.len()
    }

    fn last_hidden_width(&self) -> usize {
        self.hidden.last().map_or(self.input_dim, |l| l.params.out_dim())
    }

    pub fn hidden_params(&self, layer: usize) -> Result<&LayerParams<F>> {
        self.hidden
            .get(layer)
            .map(|l| &l.params)
            .ok_or_else(|| Error::Index(format!("hidden layer {layer} of {}", self.hidden.len())))
    }

    pub fn head_params(&self, task: TaskId) -> Result<&LayerParams<F>> {
        self.heads.get(&task).map(|h| &h.params).ok_or(Error::UnknownTask(task))
    }

    pub(crate) fn head_params_mut(&mut self, task: TaskId) -> Result<&mut LayerParams<F>> {
        self.heads.get_mut(&task).map(|h| &mut h.params).ok_or(Error::UnknownTask(task))
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerParams<F>> {
        self.hidden.iter_mut().map(|l| &mut l.params)
    }

    /// Loss the head's shape implies: one output trains with sigmoid binary
    /// cross-entropy, anything wider with softmax cross-entropy.
    pub fn loss_kind_for(&self, task: TaskId) -> Result<LossKind> {
        let head = self.heads.get(&task).ok_or(Error::UnknownTask(task))?;
        Ok(if head.params.out_dim() == 1 {
            LossKind::SigmoidBinaryCrossEntropy
        } else {
            LossKind::SoftmaxCrossEntropy
        })
    }

    pub fn has_head(&self, task: TaskId) -> bool {
        self.heads.contains_key(&task)
    }

    pub fn head_tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.heads.keys().copied()
    }

    pub fn unit_created_at(&self, node: NodeId) -> Result<TaskId> {
        self.hidden
            .get(node.layer)
            .and_then(|l| l.created_at.get(node.unit).copied())
            .ok_or(Error::UnknownNode(node))
    }

    pub fn frozen_nodes(&self) -> impl Iterator<Item = (NodeId, TaskId)> + '_ {
        self.frozen.iter().map(|(n, t)| (*n, *t))
    }

    pub fn is_frozen(&self, node: NodeId) -> bool {
        self.frozen.contains_key(&node)
    }

    pub fn node_origin(&self, node: NodeId) -> Option<NodeOrigin> {
        self.lineage.get(&node).copied()
    }

    /// Registers a fresh head for `task` over the current last hidden width.
    pub fn add_head(&mut self, task: TaskId, out_dim: usize, seed: u64) -> Result<()> {
        if self.heads.contains_key(&task) {
            return Err(Error::TaskConflict(task));
        }
        if out_dim == 0 {
            return Err(Error::Config("head needs at least one output".into()));
        }
        let mut rng = SplitMix64::new(derive_seed(seed, 0x4845_4144 ^ task as u64));
        self.heads.insert(
            task,
            Head {
                params: LayerParams::he_init(out_dim, self.last_hidden_width(), &mut rng),
                created_at: task,
            },
        );
        Ok(())
    }

    /// The node's incoming weight row (bias excluded): the feature-detector
    /// direction that drift is measured on.
    pub fn node_vector(&self, node: NodeId) -> Result<ArrayView1<'_, F>> {
        let layer = self.hidden.get(node.layer).ok_or(Error::UnknownNode(node))?;
        if node.unit >= layer.params.out_dim() {
            return Err(Error::UnknownNode(node));
        }
        Ok(layer.params.weights.row(node.unit))
    }

    /// Appends a copy of `node` to its layer with zeroed outgoing weights and
    /// freezes the original. The network function on every existing head is
    /// unchanged at the moment of duplication.
    pub fn duplicate_node(&mut self, node: NodeId, at_task: TaskId) -> Result<NodeId> {
        if node.layer >= self.hidden.len() {
            return Err(Error::Unsupported(format!(
                "cannot duplicate output-head rows (layer {} is past the {} hidden layers)",
                node.layer,
                self.hidden.len()
            )));
        }
        if node.unit >= self.hidden[node.layer].params.out_dim() {
            return Err(Error::UnknownNode(node));
        }
        let layer = &mut self.hidden[node.layer];
        let row = layer.params.weights.row(node.unit).to_owned();
        let bias = layer.params.bias[node.unit];
        layer
            .params
            .weights
            .push_row(row.view())
            .map_err(|e| Error::Consistency(format!("append row: {e}")))?;
        let mut new_bias = layer.params.bias.to_vec();
        new_bias.push(bias);
        layer.params.bias = Array1::from_vec(new_bias);
        layer.created_at.push(at_task);
        let clone_id = NodeId::new(node.layer, layer.params.out_dim() - 1);

        self.grow_downstream(node.layer)?;
        self.frozen.entry(node).or_insert(at_task);
        self.lineage.insert(clone_id, NodeOrigin { origin: node, created_at_task: at_task });
        Ok(clone_id)
    }

    /// Appends `k` fresh He-initialized units to `layer` with zeroed outgoing
    /// weights; existing heads are untouched functionally.
    pub fn expand_layer(
        &mut self,
        layer: usize,
        k: usize,
        at_task: TaskId,
        seed: u64,
    ) -> Result<Vec<NodeId>> {
        if k == 0 {
            return Err(Error::Config("expansion must add a positive neuron count".into()));
        }
        if layer >= self.hidden.len() {
            return Err(Error::Index(format!("hidden layer {layer} of {}", self.hidden.len())));
        }
        let mut rng = SplitMix64::new(derive_seed(seed, 0x4558_5041 ^ layer as u64));
        let in_dim = self.hidden[layer].params.in_dim();
        let std = (2.0 / in_dim as f64).sqrt();
        let mut ids = Vec::with_capacity(k);
        for _ in 0..k {
            let row = Array1::from_shape_simple_fn(in_dim, || F::from_f64(rng.next_normal() * std));
            let l = &mut self.hidden[layer];
            l.params
                .weights
                .push_row(row.view())
                .map_err(|e| Error::Consistency(format!("append row: {e}")))?;
            let mut bias = l.params.bias.to_vec();
            bias.push(F::zero());
            l.params.bias = Array1::from_vec(bias);
            l.created_at.push(at_task);
            let id = NodeId::new(layer, l.params.out_dim() - 1);
            self.lineage.insert(id, NodeOrigin { origin: id, created_at_task: at_task });
            ids.push(id);
            self.grow_downstream(layer)?;
        }
        Ok(ids)
    }

    /// Adds a zero column to whatever consumes `layer`'s output (the next
    /// hidden layer, or every head when `layer` is the last).
    fn grow_downstream(&mut self, layer: usize) -> Result<()> {
        fn grow<F: Real>(params: &mut LayerParams<F>) -> Result<()> {
            let zeros = Array1::zeros(params.out_dim());
            params
                .weights
                .push_column(zeros.view())
                .map_err(|e| Error::Consistency(format!("append column: {e}")))?;
            // push_column can leave the matrix column-major; keep weights in
            // standard layout so row views stay contiguous.
            if !params.weights.is_standard_layout() {
                params.weights = params.weights.as_standard_layout().into_owned();
            }
            Ok(())
        }
        if layer + 1 < self.hidden.len() {
            grow(&mut self.hidden[layer + 1].params)?;
        } else {
            for head in self.heads.values_mut() {
                grow(&mut head.params)?;
            }
        }
        Ok(())
    }

    /// Resets a node's incoming weights and bias to their values in the
    /// snapshot (over the coordinate prefix the snapshot covers; columns
    /// added since are left in place).
    pub fn restore_node_from(&mut self, node: NodeId, snapshot: &WeightSnapshot<F>) -> Result<()> {
        let source = snapshot.node_vector(node)?.to_owned();
        let source_bias = snapshot.hidden_params(node.layer)?.bias[node.unit];
        let layer = self.hidden.get_mut(node.layer).ok_or(Error::UnknownNode(node))?;
        if node.unit >= layer.params.out_dim() || source.len() > layer.params.in_dim() {
            return Err(Error::UnknownNode(node));
        }
        layer
            .params
            .weights
            .row_mut(node.unit)
            .slice_mut(ndarray::s![..source.len()])
            .assign(&source);
        layer.params.bias[node.unit] = source_bias;
        Ok(())
    }

    /// Marks a node frozen as of `at_task` (idempotent; keeps the earliest
    /// freeze time).
    pub fn freeze_node(&mut self, node: NodeId, at_task: TaskId) -> Result<()> {
        if node.layer >= self.hidden.len()
            || node.unit >= self.hidden[node.layer].params.out_dim()
        {
            return Err(Error::UnknownNode(node));
        }
        self.frozen.entry(node).or_insert(at_task);
        Ok(())
    }

    /// Clears all freeze marks (candidate-estimation copies train unfrozen).
    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    /// Pin mask induced by the frozen set: a frozen node's incoming weights
    /// and bias are pinned, as are its outgoing weights into heads created
    /// at-or-before the freeze and into units created strictly before it.
    /// Units created in the freeze's own task (clones, expansion units) are
    /// the new task's capacity and stay trainable, as do later heads.
    pub fn freeze_mask(&self) -> ParamMask {
        let mut mask = ParamMask::none_for(self);
        for (&node, &frozen_at) in &self.frozen {
            let (w, b) = &mut mask.hidden[node.layer];
            w.row_mut(node.unit).fill(true);
            b[node.unit] = true;

            if node.layer + 1 < self.hidden.len() {
                let next_created = &self.hidden[node.layer + 1].created_at;
                let (nw, _) = &mut mask.hidden[node.layer + 1];
                for (r, &created) in next_created.iter().enumerate() {
                    if created < frozen_at {
                        nw[[r, node.unit]] = true;
                    }
                }
            } else {
                for (t, head) in &self.heads {
                    if head.created_at <= frozen_at {
                        let (hw, _) = mask.heads.get_mut(t).expect("mask covers all heads");
                        hw.column_mut(node.unit).fill(true);
                    }
                }
            }
        }
        mask
    }

    /// Forward pass for `task`'s head, recording activations for backward.
    pub fn forward(&self, batch: ArrayView2<'_, F>, task: TaskId) -> Result<(Array2<F>, ForwardCache<F>)> {
        if batch.ncols() != self.input_dim {
            return Err(Error::Consistency(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_dim
            )));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "input", location: "forward batch".into() });
        }
        let head = self.heads.get(&task).ok_or(Error::UnknownTask(task))?;

        let mut post = Vec::with_capacity(self.hidden.len());
        let mut current = batch.to_owned();
        for layer in &self.hidden {
            let mut z = current.dot(&layer.params.weights.t());
            z += &layer.params.bias;
            z.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
            post.push(z.clone());
            current = z;
        }
        let mut logits = current.dot(&head.params.weights.t());
        logits += &head.params.bias;
        let cache = ForwardCache { task, input: batch.to_owned(), post, logits: logits.clone() };
        Ok((logits, cache))
    }

    /// Forward pass without keeping activations (evaluation path).
    pub fn logits(&self, batch: ArrayView2<'_, F>, task: TaskId) -> Result<Array2<F>> {
        self.forward(batch, task).map(|(logits, _)| logits)
    }

    /// Post-ReLU output of the last hidden layer (no head applied).
    pub fn hidden_activations(&self, batch: ArrayView2<'_, F>) -> Result<Array2<F>> {
        if batch.ncols() != self.input_dim {
            return Err(Error::Consistency(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_dim
            )));
        }
        let mut current = batch.to_owned();
        for layer in &self.hidden {
            let mut z = current.dot(&layer.params.weights.t());
            z += &layer.params.bias;
            z.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
            current = z;
        }
        Ok(current)
    }

    /// Exact gradients of the mean data loss over the batch; returns the
    /// loss value as well. Gradients of frozen nodes' incoming weights and
    /// bias (and their pinned outgoing entries) are zeroed.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        labels: &[u8],
        loss: LossKind,
    ) -> Result<(f64, Gradients<F>)> {
        let mask = self.freeze_mask();
        self.backward_masked(cache, labels, loss, Some(&mask))
    }

    /// Backward with a caller-supplied pin mask (train loops reuse one mask
    /// across iterations); `None` leaves the raw gradients untouched.
    pub fn backward_masked(
        &self,
        cache: &ForwardCache<F>,
        labels: &[u8],
        loss: LossKind,
        mask: Option<&ParamMask>,
    ) -> Result<(f64, Gradients<F>)> {
        let head = self.heads.get(&cache.task).ok_or(Error::UnknownTask(cache.task))?;
        let n = cache.logits.nrows();
        if labels.len() != n {
            return Err(Error::Consistency(format!(
                "{n} logit rows vs {} labels",
                labels.len()
            )));
        }
        if n == 0 {
            return Err(Error::EmptyInput("backward over an empty batch".into()));
        }

        let (loss_value, dlogits) = loss_and_dlogits(&cache.logits, labels, loss)?;

        let mut grads = Gradients::zeros_like(self);
        let last_post =
            cache.post.last().map(|p| p.view()).unwrap_or_else(|| cache.input.view());
        let head_grad = grads.heads.get_mut(&cache.task).expect("zeros_like covers all heads");
        head_grad.weights = dlogits.t().dot(&last_post);
        head_grad.bias = dlogits.sum_axis(Axis(0));

        let mut dpost = dlogits.dot(&head.params.weights);
        for l in (0..self.hidden.len()).rev() {
            // ReLU derivative: 1 where the recorded activation is positive.
            let mut dpre = dpost;
            Zip::from(&mut dpre).and(&cache.post[l]).for_each(|g, &a| {
                if a <= F::zero() {
                    *g = F::zero();
                }
            });
            let below = if l == 0 { cache.input.view() } else { cache.post[l - 1].view() };
            grads.hidden[l].weights = dpre.t().dot(&below);
            grads.hidden[l].bias = dpre.sum_axis(Axis(0));
            dpost = dpre.dot(&self.hidden[l].params.weights);
        }

        if let Some(mask) = mask {
            apply_mask(&mut grads, mask);
        }
        Ok((loss_value, grads))
    }

    /// Immutable deep copy of the full state, tagged with the task index.
    pub fn snapshot(&self, task: TaskId) -> WeightSnapshot<F> {
        WeightSnapshot::of(self, task)
    }

    /// Restores the exact state captured by a snapshot.
    pub fn restore(&mut self, snap: &WeightSnapshot<F>) {
        *self = snap.state().clone();
    }
}

/// Zeroes gradient entries wherever the mask pins a parameter.
pub(crate) fn apply_mask<F: Real>(grads: &mut Gradients<F>, mask: &ParamMask) {
    for (g, (mw, mb)) in grads.hidden.iter_mut().zip(&mask.hidden) {
        Zip::from(&mut g.weights).and(mw).for_each(|v, &m| {
            if m {
                *v = F::zero();
            }
        });
        Zip::from(&mut g.bias).and(mb).for_each(|v, &m| {
            if m {
                *v = F::zero();
            }
        });
    }
    for (t, g) in grads.heads.iter_mut() {
        if let Some((mw, mb)) = mask.heads.get(t) {
            Zip::from(&mut g.weights).and(mw).for_each(|v, &m| {
                if m {
                    *v = F::zero();
                }
            });
            Zip::from(&mut g.bias).and(mb).for_each(|v, &m| {
                if m {
                    *v = F::zero();
                }
            });
        }
    }
}

/// Mean loss over the batch plus d(loss)/d(logits), both already divided by
/// the batch size. Loss terms accumulate in f64.
fn loss_and_dlogits<F: Real>(
    logits: &Array2<F>,
    labels: &[u8],
    loss: LossKind,
) -> Result<(f64, Array2<F>)> {
    let n = logits.nrows();
    let k = logits.ncols();
    let inv_n = 1.0 / n as f64;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut total = 0.0f64;
    match loss {
        LossKind::SoftmaxCrossEntropy => {
            for (i, (row, &y)) in logits.outer_iter().zip(labels).enumerate() {
                if (y as usize) >= k {
                    return Err(Error::Consistency(format!(
                        "label {y} outside the {k}-way head"
                    )));
                }
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.into_f64()));
                let sum_exp: f64 = row.iter().map(|v| (v.into_f64() - max).exp()).sum();
                let lse = max + sum_exp.ln();
                total += lse - row[y as usize].into_f64();
                for (j, v) in row.iter().enumerate() {
                    let p = (v.into_f64() - lse).exp();
                    let target = if j == y as usize { 1.0 } else { 0.0 };
                    dlogits[[i, j]] = F::from_f64((p - target) * inv_n);
                }
            }
        }
        LossKind::SigmoidBinaryCrossEntropy => {
            if k != 1 {
                return Err(Error::Consistency(format!(
                    "binary cross-entropy expects a 1-output head, got {k}"
                )));
            }
            for (i, (row, &y)) in logits.outer_iter().zip(labels).enumerate() {
                if y > 1 {
                    return Err(Error::Consistency(format!("label {y} is not binary")));
                }
                let z = row[0].into_f64();
                let yf = y as f64;
                // Stable: max(z,0) - z*y + ln(1 + exp(-|z|)).
                total += z.max(0.0) - z * yf + (-z.abs()).exp().ln_1p();
                let sigma = 1.0 / (1.0 + (-z).exp());
                dlogits[[i, 0]] = F::from_f64((sigma - yf) * inv_n);
            }
        }
    }
    Ok((total * inv_n, dlogits))
}
