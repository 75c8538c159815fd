//! Per-node semantic drift between weight snapshots.
//!
//! A node is identified with its incoming weight vector. Drift between two
//! snapshots is measured per node under an angular or Minkowski metric and
//! each node is assigned one of three categories: freeze (negligible drift),
//! regularize (moderate drift, anchored retraining), or duplicate (drift
//! beyond the separation threshold, the node is cloned and the original
//! frozen).
//!
//! Zero-vector convention for the angular metric: two zero vectors have
//! drift 0 (nothing moved); exactly one zero vector scores 90 degrees —
//! direction undefined, treated as maximal uncertainty short of a reversal.
//! ReLU-dead units make this reachable in practice.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TaskId};
use crate::network::{NodeId, WeightSnapshot};
use crate::real::Real;

/// Drift score assigned to a node whose direction is undefined because
/// exactly one of the compared vectors is zero.
pub const ZERO_VECTOR_ANGLE_DEG: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Angle between the vectors in degrees, `[0, 180]`.
    Angular,
    /// Squared euclidean distance.
    EuclideanSq,
    /// Sum of absolute coordinate differences.
    Manhattan,
}

impl Metric {
    pub fn is_angular(&self) -> bool {
        matches!(self, Metric::Angular)
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Angular => write!(f, "angular"),
            Metric::EuclideanSq => write!(f, "euclidean_sq"),
            Metric::Manhattan => write!(f, "manhattan"),
        }
    }
}

/// Thresholds that partition nodes into the three categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftPolicy {
    pub metric: Metric,
    /// Above this drift a node is duplicated (degrees for the angular
    /// metric, metric units otherwise).
    pub sigma_duplicate: f64,
    /// Below this drift a node is frozen outright (same units).
    pub sigma_freeze: f64,
}

impl DriftPolicy {
    /// Angular policy with the default freeze threshold of 2 degrees.
    pub fn angular(sigma_duplicate_deg: f64) -> Self {
        Self { metric: Metric::Angular, sigma_duplicate: sigma_duplicate_deg, sigma_freeze: 2.0 }
    }

    /// Scalar-metric policy with the default freeze threshold of 1e-3.
    pub fn scalar(metric: Metric, sigma_duplicate: f64) -> Self {
        Self { metric, sigma_duplicate, sigma_freeze: 1e-3 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_freeze < self.sigma_duplicate) {
            return Err(Error::Config(format!(
                "sigma_freeze {} must be below sigma_duplicate {}",
                self.sigma_freeze, self.sigma_duplicate
            )));
        }
        if self.metric.is_angular() && !(0.0 < self.sigma_duplicate && self.sigma_duplicate < 180.0)
        {
            return Err(Error::Config(format!(
                "angular sigma_duplicate {} outside (0, 180)",
                self.sigma_duplicate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Freeze,
    Regularize,
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftEntry {
    pub node: NodeId,
    pub rho: f64,
    pub category: Category,
}

/// Per-node drift between two snapshots under one policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReport {
    pub prev_task: TaskId,
    pub cand_task: TaskId,
    pub policy: DriftPolicy,
    pub entries: Vec<DriftEntry>,
}

impl DriftReport {
    pub fn nodes_in(&self, category: Category) -> impl Iterator<Item = &DriftEntry> + '_ {
        self.entries.iter().filter(move |e| e.category == category)
    }

    /// `layer,unit,rho,category` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "layer,unit,rho,category")?;
        for e in &self.entries {
            let cat = match e.category {
                Category::Freeze => "freeze",
                Category::Regularize => "regularize",
                Category::Duplicate => "duplicate",
            };
            writeln!(w, "{},{},{},{}", e.node.layer, e.node.unit, e.rho, cat)?;
        }
        Ok(())
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Consistency(format!("vector lengths {a} vs {b}")));
    }
    Ok(())
}

/// Angle between two vectors in degrees, `[0, 180]`. The cosine is computed
/// with the norm-product denominator and clamped to `[-1, 1]` before the
/// arccos to absorb floating-point overshoot. Accumulation is in f64.
pub fn angular_distance_deg<F: Real>(w1: &[F], w2: &[F]) -> Result<f64> {
    check_lengths(w1.len(), w2.len())?;
    let mut dot = 0.0f64;
    let mut n1 = 0.0f64;
    let mut n2 = 0.0f64;
    let mut identical = true;
    for (a, b) in w1.iter().zip(w2) {
        identical &= a == b;
        let (a, b) = (a.into_f64(), b.into_f64());
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite { what: "vector entry", location: "angular distance".into() });
        }
        dot += a * b;
        n1 += a * a;
        n2 += b * b;
    }
    let zero1 = n1 == 0.0;
    let zero2 = n2 == 0.0;
    if zero1 && zero2 {
        return Ok(0.0);
    }
    if zero1 || zero2 {
        return Ok(ZERO_VECTOR_ANGLE_DEG);
    }
    if identical {
        return Ok(0.0);
    }
    // Single square root of the norm product: exact for exactly-parallel
    // integer-valued vectors, tighter than sqrt(n1)*sqrt(n2) in general.
    let cos = (dot / (n1 * n2).sqrt()).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

/// Sum of squared coordinate differences (f64 accumulation).
pub fn euclidean_sq_distance<F: Real>(w1: &[F], w2: &[F]) -> Result<f64> {
    check_lengths(w1.len(), w2.len())?;
    let mut sum = 0.0f64;
    for (a, b) in w1.iter().zip(w2) {
        let d = a.into_f64() - b.into_f64();
        sum += d * d;
    }
    Ok(sum)
}

/// Sum of absolute coordinate differences (f64 accumulation).
pub fn manhattan_distance<F: Real>(w1: &[F], w2: &[F]) -> Result<f64> {
    check_lengths(w1.len(), w2.len())?;
    let mut sum = 0.0f64;
    for (a, b) in w1.iter().zip(w2) {
        sum += (a.into_f64() - b.into_f64()).abs();
    }
    Ok(sum)
}

pub fn metric_distance<F: Real>(metric: Metric, w1: &[F], w2: &[F]) -> Result<f64> {
    match metric {
        Metric::Angular => angular_distance_deg(w1, w2),
        Metric::EuclideanSq => euclidean_sq_distance(w1, w2),
        Metric::Manhattan => manhattan_distance(w1, w2),
    }
}

fn categorize(rho: f64, policy: &DriftPolicy) -> Category {
    if rho > policy.sigma_duplicate {
        Category::Duplicate
    } else if rho < policy.sigma_freeze {
        Category::Freeze
    } else {
        Category::Regularize
    }
}

/// Per-node drift of every hidden node present in `prev`, measured against
/// the candidate snapshot.
///
/// The candidate architecture must extend the previous one (units are
/// append-only). When a node's in-dimension grew through upstream expansion,
/// only the coordinate prefix common to both snapshots is compared; new
/// coordinates have no previous value. Nodes added after `prev` carry no
/// drift and are excluded.
pub fn compute_drift<F: Real>(
    prev: &WeightSnapshot<F>,
    cand: &WeightSnapshot<F>,
    policy: &DriftPolicy,
) -> Result<DriftReport> {
    policy.validate()?;
    if cand.num_hidden_layers() != prev.num_hidden_layers() {
        return Err(Error::Consistency(format!(
            "snapshots have {} vs {} hidden layers",
            prev.num_hidden_layers(),
            cand.num_hidden_layers()
        )));
    }
    let mut entries = Vec::new();
    for layer in 0..prev.num_hidden_layers() {
        let p = prev.hidden_params(layer)?;
        let c = cand.hidden_params(layer)?;
        if c.out_dim() < p.out_dim() || c.in_dim() < p.in_dim() {
            return Err(Error::Consistency(format!(
                "candidate layer {layer} shrank from {}x{} to {}x{}",
                p.out_dim(),
                p.in_dim(),
                c.out_dim(),
                c.in_dim()
            )));
        }
        let common = p.in_dim();
        for unit in 0..p.out_dim() {
            let node = NodeId::new(layer, unit);
            let pv = p.weights.row(unit);
            let cv = c.weights.row(unit);
            let pv = pv.as_slice().ok_or_else(|| Error::Consistency("non-contiguous row".into()))?;
            let cv_full =
                cv.as_slice().ok_or_else(|| Error::Consistency("non-contiguous row".into()))?;
            let rho = metric_distance(policy.metric, pv, &cv_full[..common])?;
            entries.push(DriftEntry { node, rho, category: categorize(rho, policy) });
        }
    }
    Ok(DriftReport { prev_task: prev.task(), cand_task: cand.task(), policy: *policy, entries })
}

/// One (policy, threshold) row of the separation diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub metric: Metric,
    pub threshold: f64,
    pub duplicate_count: usize,
}

/// Distribution summary for one metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    /// Coefficient of variation of the drift values (0 when the mean is 0).
    pub coefficient_of_variation: f64,
    /// `(bin_low, bin_high, count)` over `[0, max]` (angular: `[0, 180]`).
    pub histogram: Vec<(f64, f64, usize)>,
}

/// How separable the per-node drift values are under each metric: value
/// histograms, dispersion, and the duplicate-set size each threshold grid
/// point would select.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparationDiagnostics {
    pub summaries: Vec<MetricSummary>,
    pub rows: Vec<DiagnosticsRow>,
}

const HISTOGRAM_BINS: usize = 20;

pub fn separation_diagnostics<F: Real>(
    prev: &WeightSnapshot<F>,
    cand: &WeightSnapshot<F>,
    policies: &[DriftPolicy],
    threshold_grid: &[f64],
) -> Result<SeparationDiagnostics> {
    let mut summaries = Vec::new();
    let mut rows = Vec::new();
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for policy in policies {
        let report = compute_drift(prev, cand, policy)?;
        let rhos: Vec<f64> = report.entries.iter().map(|e| e.rho).collect();
        per_metric.entry(policy.metric.to_string()).or_insert_with(|| rhos.clone());

        for &threshold in threshold_grid {
            let duplicate_count = rhos.iter().filter(|&&r| r > threshold).count();
            rows.push(DiagnosticsRow { metric: policy.metric, threshold, duplicate_count });
        }

        let n = rhos.len() as f64;
        let mean = rhos.iter().sum::<f64>() / n;
        let var = rhos.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let cv = if mean == 0.0 { 0.0 } else { var.sqrt() / mean };

        let top = if policy.metric.is_angular() {
            180.0
        } else {
            rhos.iter().fold(0.0f64, |m, &r| m.max(r)).max(f64::MIN_POSITIVE)
        };
        let width = top / HISTOGRAM_BINS as f64;
        let mut histogram: Vec<(f64, f64, usize)> = (0..HISTOGRAM_BINS)
            .map(|b| (b as f64 * width, (b + 1) as f64 * width, 0))
            .collect();
        for &r in &rhos {
            let bin = ((r / width) as usize).min(HISTOGRAM_BINS - 1);
            histogram[bin].2 += 1;
        }
        summaries.push(MetricSummary {
            metric: policy.metric,
            coefficient_of_variation: cv,
            histogram,
        });
    }
    Ok(SeparationDiagnostics { summaries, rows })
}
