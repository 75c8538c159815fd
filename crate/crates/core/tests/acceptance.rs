//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! Stated wall-clock limits assume an 8-core machine; on smaller machines
//! the limit is scaled by 8/cores and the measured time is reported.

mod common;

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use driftnet::continual::{
    run_sequence, run_sequence_naive, ContinualConfig, SequenceResult,
};
use driftnet::data::{
    build_sequence, SequenceFamily, SequenceSettings, TaskDataset, TaskSequence, TaskSpec,
};
use driftnet::drift::{
    angular_distance_deg, euclidean_sq_distance, metric_distance, DriftPolicy, Metric,
};
use driftnet::network::{finite_difference_check, LossKind, Network, NodeId};
use driftnet::optim::{eval_accuracy, train, Regularizer, TrainingConfig};
use driftnet::rng::SplitMix64;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!("[acceptance] {criterion}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

/// Scales an 8-core wall-clock budget to this machine.
fn scaled_budget_secs(stated: f64) -> f64 {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    stated * (8.0 / cores as f64).max(1.0)
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut total_checked = 0usize;
    for seed in 1..=20u64 {
        for kind in [LossKind::SoftmaxCrossEntropy, LossKind::SigmoidBinaryCrossEntropy] {
            let (max_rel, checked) = finite_difference_check(seed, kind);
            worst = worst.max(max_rel);
            total_checked += checked;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 1e-3 && elapsed < scaled_budget_secs(60.0);
    report(
        "criterion 1 (gradient correctness)",
        pass,
        &format!("max rel err {worst:.2e} over {total_checked} params, {elapsed:.1}s"),
    );
    assert!(worst < 1e-3, "finite-difference relative error {worst}");
    assert!(
        elapsed < scaled_budget_secs(60.0),
        "gradient check took {elapsed:.1}s (budget {:.0}s)",
        scaled_budget_secs(60.0)
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: metric suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_metric_suite() {
    let mut rng = SplitMix64::new(0x4D45_5452);
    let mut checked = 0usize;
    for case in 0..10_000 {
        let len = 2 + (rng.below(62)) as usize;
        let sparse = case % 3 == 0; // a third of the pairs are 90% zeros
        let near_parallel = case % 5 == 0;
        let mut v1 = vec![0.0f64; len];
        let mut v2 = vec![0.0f64; len];
        for i in 0..len {
            if sparse && rng.next_f64() < 0.9 {
                continue;
            }
            v1[i] = rng.next_f64() * 20.0 - 10.0;
            v2[i] = if near_parallel {
                v1[i] * (1.0 + 1e-9 * (rng.next_f64() - 0.5))
            } else {
                rng.next_f64() * 20.0 - 10.0
            };
        }

        // Range and clamping.
        let d = angular_distance_deg(&v1, &v2).unwrap();
        assert!((0.0..=180.0).contains(&d), "angle {d} out of range");

        // Symmetry for every metric.
        for metric in [Metric::Angular, Metric::EuclideanSq, Metric::Manhattan] {
            let ab = metric_distance(metric, &v1, &v2).unwrap();
            let ba = metric_distance(metric, &v2, &v1).unwrap();
            assert!((ab - ba).abs() < 1e-9, "{metric} asymmetric");
            let aa = metric_distance(metric, &v1, &v1).unwrap();
            assert_eq!(aa, 0.0, "{metric} nonzero on identity");
        }

        // Scale invariance.
        let a = 0.5 + rng.next_f64() * 10.0;
        let b = 0.5 + rng.next_f64() * 10.0;
        let s1: Vec<f64> = v1.iter().map(|x| x * a).collect();
        let s2: Vec<f64> = v2.iter().map(|x| x * b).collect();
        let ds = angular_distance_deg(&s1, &s2).unwrap();
        assert!((d - ds).abs() < 1e-4, "scale variance: {d} vs {ds}");
        checked += 1;
    }

    // Pinned regression pair.
    let w1 = [10.0f64; 5];
    let w2 = [13.0f64; 5];
    let euclid = euclidean_sq_distance(&w1, &w2).unwrap();
    let angle = angular_distance_deg(&w1, &w2).unwrap();
    let pass = euclid == 45.0 && angle == 0.0;
    report(
        "criterion 2 (metric suite)",
        pass,
        &format!("{checked} random pairs; regression pair euclid_sq={euclid}, angular={angle}"),
    );
    assert_eq!(euclid, 45.0);
    assert_eq!(angle, 0.0);
}

// ---------------------------------------------------------------------------
// Criterion 3: surgery function preservation
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_surgery_function_preservation() {
    let (train_set, _) = common::load_mnist();
    let mut net = Network::<f32>::new(784, &[312, 128], 0xACCE).unwrap();
    net.add_head(0, 10, 1).unwrap();
    net.add_head(1, 1, 2).unwrap();
    let batch = train_set.images().slice(ndarray::s![..100, ..]);

    let before0 = net.logits(batch, 0).unwrap();
    let before1 = net.logits(batch, 1).unwrap();

    net.duplicate_node(NodeId::new(0, 17), 1).unwrap();
    net.duplicate_node(NodeId::new(1, 99), 1).unwrap();
    for layer in 0..2 {
        net.expand_layer(layer, 10, 1, 0xEEE + layer as u64).unwrap();
    }

    let after0 = net.logits(batch, 0).unwrap();
    let after1 = net.logits(batch, 1).unwrap();
    let pass = before0 == after0 && before1 == after1;
    report(
        "criterion 3 (surgery function preservation)",
        pass,
        "duplication + K-expansion, exact equality on 100 MNIST samples",
    );
    assert_eq!(before0, after0, "multiclass head logits changed");
    assert_eq!(before1, after1, "one-vs-rest head logits changed");
}

// ---------------------------------------------------------------------------
// Criterion 4: single-task MNIST baseline
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_single_task_baseline() {
    let start = Instant::now();
    let (pool, test) = common::load_mnist();
    let settings = SequenceSettings { num_tasks: 1, ..SequenceSettings::permuted() };
    let seq = build_sequence(pool, test, "mnist", settings, 0xBA5E).unwrap();
    let task0 = seq.task(0).unwrap();

    let config = TrainingConfig { seed: 0xBA5E, ..Default::default() };
    let mut net = Network::<f32>::new(784, &[312, 128], 0xBA5E).unwrap();
    net.add_head(0, 10, 0xBA5E).unwrap();
    let history =
        train(&mut net, &task0, 0, &config, &Regularizer::L1 { mu: 1e-5 }, config.iterations)
            .unwrap();
    let accuracy = eval_accuracy(&net, &task0.test, 0).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    // Loss trend: decreasing window medians over the first 2000 iterations.
    let median = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let medians: Vec<f64> = (0..4).map(|w| median(&history.losses[w * 500..(w + 1) * 500])).collect();
    let trend_ok = medians.windows(2).all(|w| w[1] < w[0]);

    let budget = scaled_budget_secs(20.0 * 60.0);
    let pass = accuracy >= 0.97 && elapsed < budget && trend_ok;
    report(
        "criterion 4 (single-task MNIST baseline)",
        pass,
        &format!("test accuracy {accuracy:.4}, {elapsed:.0}s, loss medians {medians:?}"),
    );
    assert!(accuracy >= 0.97, "baseline accuracy {accuracy}");
    assert!(trend_ok, "loss medians not decreasing: {medians:?}");
    assert!(elapsed < budget, "baseline took {elapsed:.0}s (budget {budget:.0}s)");
}

// ---------------------------------------------------------------------------
// Desk-scale machinery shared by criteria 5, 6 and 8
// ---------------------------------------------------------------------------

const DESK_TASKS: usize = 5;
const DESK_SEEDS: [u64; 3] = [11, 22, 33];
const DESK_ARCH: [usize; 2] = [312, 128];

fn desk_settings() -> SequenceSettings {
    SequenceSettings {
        family: SequenceFamily::Permuted,
        num_tasks: DESK_TASKS,
        train_size: 10_000,
        val_size: 1_000,
        test_size: 2_000,
    }
}

fn desk_sequence(seed: u64) -> TaskSequence {
    let (pool, test) = common::load_mnist();
    build_sequence(pool, test, "mnist-desk", desk_settings(), seed).unwrap()
}

fn desk_config(seed: u64, policy: DriftPolicy) -> ContinualConfig {
    ContinualConfig {
        drift_policy: policy,
        candidate_iterations: 100,
        training: TrainingConfig { iterations: 1000, seed, ..Default::default() },
        ..Default::default()
    }
}

struct DeskRuns {
    angular: Vec<SequenceResult>,
    naive: Vec<SequenceResult>,
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let angular = DESK_SEEDS
            .iter()
            .map(|&seed| {
                let seq = desk_sequence(seed);
                run_sequence(&seq, &DESK_ARCH, &desk_config(seed, DriftPolicy::angular(30.0)))
                    .expect("angular desk run")
            })
            .collect();
        let naive = DESK_SEEDS
            .iter()
            .map(|&seed| {
                let seq = desk_sequence(seed);
                let training = TrainingConfig { iterations: 1000, seed, ..Default::default() };
                run_sequence_naive(&seq, &DESK_ARCH, &training).expect("naive desk run")
            })
            .collect();
        DeskRuns { angular, naive }
    })
}

// ---------------------------------------------------------------------------
// Criterion 5: desk-scale forgetting contrast
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_desk_scale_forgetting_contrast() {
    let runs = desk_runs();
    let mut majority = 0usize;
    let mut details = Vec::new();
    for (i, seed) in DESK_SEEDS.iter().enumerate() {
        let pipeline = &runs.angular[i];
        let naive = &runs.naive[i];
        let avg = *pipeline.average_accuracy.last().unwrap();
        let pipeline_task0 = pipeline.accuracy_matrix[DESK_TASKS - 1][0];
        let naive_task0 = naive.accuracy_matrix[DESK_TASKS - 1][0];
        let contrast = pipeline_task0 - naive_task0;
        let ok = avg >= 0.85 && contrast >= 0.20;
        majority += usize::from(ok);
        details.push(format!(
            "seed {seed}: avg {avg:.4}, task-0 pipeline {pipeline_task0:.4} vs naive {naive_task0:.4}"
        ));
    }
    let pass = majority >= 2;
    report(
        "criterion 5 (desk-scale forgetting contrast)",
        pass,
        &details.join("; "),
    );
    assert!(pass, "criterion failed on a majority of seeds: {details:?}");
}

// ---------------------------------------------------------------------------
// Criterion 6: metric ordering at desk scale (soft criterion)
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_metric_ordering_at_desk_scale() {
    let runs = desk_runs();
    let angular_mean = mean(runs.angular.iter().map(|r| *r.average_accuracy.last().unwrap()));
    let angular_nodes = mean_nodes(&runs.angular);

    // Best-of-grid euclidean variant over the scalar threshold grid.
    let grid = [0.01, 0.1, 1.0, 10.0];
    let mut best: Option<(f64, f64, f64)> = None; // (mean acc, nodes, sigma)
    let mut table = Vec::new();
    for &sigma in &grid {
        let results: Vec<SequenceResult> = DESK_SEEDS
            .iter()
            .map(|&seed| {
                let seq = desk_sequence(seed);
                run_sequence(
                    &seq,
                    &DESK_ARCH,
                    &desk_config(seed, DriftPolicy::scalar(Metric::EuclideanSq, sigma)),
                )
                .expect("euclidean desk run")
            })
            .collect();
        let acc = mean(results.iter().map(|r| *r.average_accuracy.last().unwrap()));
        let nodes = mean_nodes(&results);
        table.push(format!("euclid sigma {sigma}: acc {acc:.4}, final nodes {nodes:.0}"));
        if best.map_or(true, |(b, _, _)| acc > b) {
            best = Some((acc, nodes, sigma));
        }
    }
    let (best_acc, best_nodes, best_sigma) = best.unwrap();

    let acc_ok = angular_mean >= best_acc - 0.005;
    let nodes_ok = angular_nodes <= best_nodes;
    let pass = acc_ok && nodes_ok;
    report(
        "criterion 6 (metric ordering, soft)",
        pass,
        &format!(
            "angular acc {angular_mean:.4} @ {angular_nodes:.0} nodes vs best euclidean (sigma {best_sigma}) {best_acc:.4} @ {best_nodes:.0} nodes; grid: {}",
            table.join(", ")
        ),
    );
    if !pass {
        // Soft criterion: a miss requires written analysis, not a reject.
        println!(
            "[acceptance] criterion 6 analysis: angular mean {angular_mean:.4} vs euclidean \
             best-of-grid {best_acc:.4} (margin {:.4}); angular final nodes {angular_nodes:.0} vs \
             {best_nodes:.0}. The reference margin between the two metric families is ~1.3 \
             accuracy points at full scale, so desk-scale noise can invert the ordering; see the \
             per-threshold grid above for the full picture.",
            best_acc - angular_mean
        );
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_nodes(results: &[SequenceResult]) -> f64 {
    mean(results.iter().map(|r| r.node_counts.last().unwrap().iter().sum::<usize>() as f64))
}

// ---------------------------------------------------------------------------
// Criterion 8: bit-identical reproducibility of the desk-scale run
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_reproducibility() {
    let runs = desk_runs();
    let seed = DESK_SEEDS[0];
    let seq = desk_sequence(seed);
    let rerun =
        run_sequence(&seq, &DESK_ARCH, &desk_config(seed, DriftPolicy::angular(30.0))).unwrap();
    let a = serde_json::to_vec(&runs.angular[0]).unwrap();
    let b = serde_json::to_vec(&rerun).unwrap();
    let pass = a == b;
    report(
        "criterion 8 (reproducibility)",
        pass,
        &format!("two executions serialized to {} identical bytes", a.len()),
    );
    assert_eq!(a, b, "SequenceResult files differ between identical executions");
}

// ---------------------------------------------------------------------------
// Criterion 7: full-scale reproduction (documented, not gating; run with
// `cargo test --test acceptance -- --ignored criterion_7 --nocapture`)
// ---------------------------------------------------------------------------

#[test]
#[ignore = "multi-hour full-scale reproduction; documented in the README"]
fn criterion_7_full_scale_reproduction() {
    let (pool, test) = common::load_mnist();
    let seq = build_sequence(pool, test, "mnist", SequenceSettings::permuted(), 0xF111).unwrap();
    let config = ContinualConfig {
        drift_policy: DriftPolicy::angular(30.0),
        training: TrainingConfig { seed: 0xF111, ..Default::default() },
        ..Default::default()
    };
    let result = run_sequence(&seq, &DESK_ARCH, &config).unwrap();
    let avg = *result.average_accuracy.last().unwrap();
    let target = 0.9649;
    let pass = (avg - target).abs() <= 0.015;
    report(
        "criterion 7 (full-scale permuted-MNIST, non-gating)",
        pass,
        &format!("average accuracy {avg:.4} vs target {target} +- 0.015"),
    );
    let mut matrix = String::new();
    for row in &result.accuracy_matrix {
        matrix.push_str(&format!("{row:.4?}\n"));
    }
    println!("accuracy matrix:\n{matrix}");
    let _ = BTreeMap::<i32, i32>::new();
    let _ = Mutex::new(());
    let _: Vec<TaskSpec> = Vec::new();
    let _: Option<TaskDataset> = None;
}
