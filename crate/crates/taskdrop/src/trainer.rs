//! Training and evaluation: seeded minibatch Adam over per-graph
//! forwards, early stopping on a train-loss plateau, cross-validation,
//! and a deterministic run report.
//!
//! Batches are processed one graph at a time on a fresh tape, and the
//! per-graph gradients are averaged before the optimizer step. For a
//! mean batch loss this is exactly the gradient of the batched forward
//! (the graphs share no edges), so batching is a throughput knob, not a
//! modelling choice.
//!
//! Everything downstream of `(seed, config, dataset)` is deterministic:
//! shuffles, dropout masks, triplet edits, and fold assignment all draw
//! from counter-based streams. Wall-clock throughput is measured but
//! kept out of [`RunReport`] so reports compare bitwise across runs.

use crate::graph::{kfold_split, GraphInstance, GraphSet};
use crate::model::{
    dotin_forward, DropoutCfg, ForwardCtx, ModelSpec, ParameterStore, Selection,
};
use crate::tasks::{
    classification_loss, ged_margin_loss, gen_ged_triplet, multitask_loss, pair_auc,
    triplet_accuracy, TaskKind,
};
use crate::tensor::{matmul_raw, AdamConfig, AdamState, Tape, Tensor};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::time::Instant;

/// Knobs for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without the train loss improving.
    pub patience: usize,
    /// Smallest loss drop that still counts as an improvement.
    pub min_delta: f64,
    /// Connection dropout rate; 0 disables it.
    pub dropout: f64,
    pub seed: u64,
    /// Edge substitutions for positive and negative distance examples.
    pub ged_kp: usize,
    pub ged_kn: usize,
    /// Drop-stage strategy, for baselines; training and evaluation use
    /// the same one.
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 8e-4,
            batch_size: 8,
            epochs: 50,
            patience: 10,
            min_delta: 1e-4,
            dropout: 0.2,
            seed: 0,
            ged_kp: 1,
            ged_kn: 3,
            selection: Selection::Attentive,
        }
    }
}

/// What one call to [`train`] did.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// Mean per-graph loss for each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub epochs_run: usize,
    /// Wall-clock throughput; never written into reports.
    pub batches_per_sec: f64,
}

/// One report row: a metric value at a point in the run. Test metrics
/// carry no epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub fold: usize,
    pub epoch: Option<usize>,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

/// Mean and population standard deviation over folds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

/// A full cross-validation run: every row, plus per-metric aggregates.
/// Identical `(seed, config, dataset)` inputs reproduce this bitwise.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<MetricRow>,
    pub summary: BTreeMap<String, Aggregate>,
}

/// Trains in place, shuffling each epoch, averaging gradients per batch
/// and stepping Adam once per batch. Stops early when the epoch loss
/// plateaus. A non-finite loss aborts with the failing batch index.
pub fn train(
    spec: &ModelSpec,
    store: &mut ParameterStore,
    graphs: &[GraphInstance],
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    spec.validate()?;
    if graphs.is_empty() {
        return Err(Error::Invalid("cannot train on an empty set".into()));
    }
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dropout = (cfg.dropout > 0.0).then_some(DropoutCfg {
        rate: cfg.dropout,
        // Distinct from the shuffle stream but still seed-derived.
        seed: cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
    });

    let mut epoch_losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut batch_index = 0usize;
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..graphs.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut per_graph_loss = vec![0.0f64; graphs.len()];
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grads: Vec<Tensor> = store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect();
            for &gi in chunk {
                let instance = epoch as u64 * graphs.len() as u64 + gi as u64;
                let loss = match graph_loss_into_grads(
                    spec, store, &graphs[gi], cfg, instance, dropout, &mut grads,
                ) {
                    Ok(l) if l.is_finite() => l,
                    Ok(_) => return Err(Error::Diverged { batch: batch_index }),
                    // Propagation always puts self-loops in the support,
                    // so a support that empties out mid-training means
                    // the values went non-finite: the run diverged.
                    Err(Error::NonFinite { .. }) | Err(Error::EmptySupport) => {
                        return Err(Error::Diverged { batch: batch_index })
                    }
                    Err(e) => return Err(e),
                };
                per_graph_loss[gi] = loss;
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            adam.step(store.tensors_mut(), &grads)?;
            batch_index += 1;
        }
        // Summed in graph order, so the epoch mean is independent of
        // the shuffle at fixed parameters.
        let mean = per_graph_loss.iter().sum::<f64>() / graphs.len() as f64;
        epoch_losses.push(mean);
        if best - mean > cfg.min_delta {
            best = mean;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(TrainTrace {
        epochs_run: epoch_losses.len(),
        epoch_losses,
        batches_per_sec: if secs > 0.0 {
            batch_index as f64 / secs
        } else {
            0.0
        },
    })
}

/// Forward, per-task losses, mean, backward; accumulates parameter
/// gradients into `grads` and returns the loss value.
fn graph_loss_into_grads(
    spec: &ModelSpec,
    store: &ParameterStore,
    g: &GraphInstance,
    cfg: &TrainConfig,
    instance: u64,
    dropout: Option<DropoutCfg>,
    grads: &mut [Tensor],
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = store.leafs(&mut tape, spec)?;
    // Triplet members get their own dropout and selection streams.
    let sub_ctx = |sub: u64| ForwardCtx {
        selection: cfg.selection.clone(),
        instance: instance.wrapping_mul(3).wrapping_add(sub),
        dropout,
    };
    let out = dotin_forward(&mut tape, spec, &vars, g, &sub_ctx(0))?;
    let mut losses = Vec::with_capacity(spec.tasks.len());
    for (t, task) in spec.tasks.iter().enumerate() {
        match task.kind {
            TaskKind::Classification { .. } => {
                let label = g.labels.get(&task.name).copied().ok_or_else(|| {
                    Error::Invalid(format!("graph lacks a {:?} label", task.name))
                })?;
                let head = vars.task_heads[t].expect("classification task has a head");
                losses.push(classification_loss(
                    &mut tape,
                    out.task_embeddings[t],
                    head,
                    label,
                )?);
            }
            TaskKind::Ged { gamma } => {
                let triplet = gen_ged_triplet(
                    g,
                    cfg.ged_kp,
                    cfg.ged_kn,
                    cfg.seed.wrapping_add(instance.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
                )?;
                let pos = dotin_forward(&mut tape, spec, &vars, &triplet.positive, &sub_ctx(1))?;
                let neg = dotin_forward(&mut tape, spec, &vars, &triplet.negative, &sub_ctx(2))?;
                losses.push(ged_margin_loss(
                    &mut tape,
                    out.task_embeddings[t],
                    pos.task_embeddings[t],
                    neg.task_embeddings[t],
                    gamma,
                )?);
            }
        }
    }
    let loss = multitask_loss(&mut tape, &losses)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    for (acc, &v) in grads.iter_mut().zip(&vars.flat) {
        let g = tape.grad(v);
        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }
    Ok(value)
}

/// Test-set metrics, keyed `task.metric`: classification tasks report
/// `accuracy`; distance tasks report `pair_auc` and `triplet_accuracy`
/// over one fixed triplet per graph. Evaluation runs in eval mode (no
/// dropout) and never touches the weights; its triplet edits are drawn
/// from a stream independent of the training seed so runs that differ
/// only in seed are scored on identical examples.
pub fn evaluate(
    spec: &ModelSpec,
    store: &ParameterStore,
    graphs: &[GraphInstance],
    cfg: &TrainConfig,
) -> Result<BTreeMap<String, f64>> {
    spec.validate()?;
    if graphs.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty set".into()));
    }
    let mut correct: Vec<usize> = vec![0; spec.tasks.len()];
    let mut sims: Vec<Vec<f64>> = vec![Vec::new(); spec.tasks.len()];
    let mut sim_labels: Vec<Vec<bool>> = vec![Vec::new(); spec.tasks.len()];
    let mut dist_pairs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); spec.tasks.len()];

    for (i, g) in graphs.iter().enumerate() {
        let mut tape = Tape::new();
        let vars = store.leafs(&mut tape, spec)?;
        let ctx = ForwardCtx {
            selection: cfg.selection.clone(),
            instance: i as u64,
            dropout: None,
        };
        let out = dotin_forward(&mut tape, spec, &vars, g, &ctx)?;
        for (t, task) in spec.tasks.iter().enumerate() {
            match task.kind {
                TaskKind::Classification { .. } => {
                    let label = g.labels.get(&task.name).copied().ok_or_else(|| {
                        Error::Invalid(format!("graph lacks a {:?} label", task.name))
                    })?;
                    let head = vars.task_heads[t].expect("classification task has a head");
                    let logits =
                        matmul_raw(tape.value(out.task_embeddings[t]), tape.value(head));
                    if argmax(logits.data()) == label {
                        correct[t] += 1;
                    }
                }
                TaskKind::Ged { .. } => {
                    let triplet =
                        gen_ged_triplet(g, cfg.ged_kp, cfg.ged_kn, eval_edit_seed(i))?;
                    let pos = dotin_forward(&mut tape, spec, &vars, &triplet.positive, &ctx)?;
                    let neg = dotin_forward(&mut tape, spec, &vars, &triplet.negative, &ctx)?;
                    let anchor = tape.value(out.task_embeddings[t]).data().to_vec();
                    let d_pos = sq_dist(&anchor, tape.value(pos.task_embeddings[t]).data());
                    let d_neg = sq_dist(&anchor, tape.value(neg.task_embeddings[t]).data());
                    sims[t].push(-d_pos);
                    sim_labels[t].push(true);
                    sims[t].push(-d_neg);
                    sim_labels[t].push(false);
                    dist_pairs[t].push((d_pos, d_neg));
                }
            }
        }
    }

    let mut metrics = BTreeMap::new();
    for (t, task) in spec.tasks.iter().enumerate() {
        match task.kind {
            TaskKind::Classification { .. } => {
                metrics.insert(
                    format!("{}.accuracy", task.name),
                    correct[t] as f64 / graphs.len() as f64,
                );
            }
            TaskKind::Ged { .. } => {
                metrics.insert(
                    format!("{}.pair_auc", task.name),
                    pair_auc(&sims[t], &sim_labels[t])?,
                );
                metrics.insert(
                    format!("{}.triplet_accuracy", task.name),
                    triplet_accuracy(&dist_pairs[t])?,
                );
            }
        }
    }
    Ok(metrics)
}

fn eval_edit_seed(graph_index: usize) -> u64 {
    0x00e7_a100_0000_0000 ^ (graph_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// First index of the largest value; NaN entries are never selected.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Seeded k-fold cross-validation: a fresh model per fold, trained on
/// the fold's train split and scored on its test split. Rows carry the
/// per-epoch train losses and the final test metrics; the summary
/// aggregates each test metric over folds.
pub fn run_cross_validation(
    spec: &ModelSpec,
    set: &GraphSet,
    cfg: &TrainConfig,
    folds: usize,
) -> Result<RunReport> {
    let splits = kfold_split(set, folds, cfg.seed)?;
    let mut rows = Vec::new();
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (f, fold) in splits.iter().enumerate() {
        let train_set: Vec<GraphInstance> =
            fold.train.iter().map(|&i| set.graphs[i].clone()).collect();
        let test_set: Vec<GraphInstance> =
            fold.test.iter().map(|&i| set.graphs[i].clone()).collect();
        let mut store = ParameterStore::init(spec, cfg.seed.wrapping_add(f as u64))?;
        let trace = train(spec, &mut store, &train_set, cfg)?;
        for (e, &loss) in trace.epoch_losses.iter().enumerate() {
            rows.push(MetricRow {
                fold: f,
                epoch: Some(e),
                task: "all".into(),
                metric: "train_loss".into(),
                value: loss,
            });
        }
        for (key, &value) in &evaluate(spec, &store, &test_set, cfg)? {
            let (task, metric) = key.split_once('.').unwrap_or(("all", key.as_str()));
            rows.push(MetricRow {
                fold: f,
                epoch: None,
                task: task.into(),
                metric: metric.into(),
                value,
            });
            per_metric.entry(key.clone()).or_default().push(value);
        }
    }
    let summary = per_metric
        .into_iter()
        .map(|(k, vs)| {
            let mean = vs.iter().sum::<f64>() / vs.len() as f64;
            let var = vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vs.len() as f64;
            (k, Aggregate { mean, std: var.sqrt() })
        })
        .collect();
    Ok(RunReport { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CLASSIFICATION;
    use crate::model::Backbone;
    use crate::tasks::TaskSpec;
    use rand::Rng;

    fn tiny_spec(alpha: f64) -> ModelSpec {
        let mut s = ModelSpec::new(
            Backbone::Gat,
            2,
            3,
            8,
            alpha,
            vec![TaskSpec::classification(CLASSIFICATION, 2)],
        );
        s.activation = crate::backbone::Activation::Elu;
        s
    }

    fn labeled_graph(rng: &mut ChaCha8Rng, n: usize, label: usize) -> GraphInstance {
        let mut a = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(0.4) {
                    a.set(i, j, 1.0);
                    a.set(j, i, 1.0);
                }
            }
        }
        let mut labels = BTreeMap::new();
        labels.insert(CLASSIFICATION.to_string(), label);
        GraphInstance {
            adjacency: a,
            features: Tensor::gaussian(n, 3, 1.0, rng),
            labels,
        }
    }

    fn small_set(count: usize, seed: u64) -> Vec<GraphInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|i| labeled_graph(&mut rng, 8, i % 2)).collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let spec = tiny_spec(0.3);
        let mut store = ParameterStore::init(&spec, 1).unwrap();
        let before = store.fingerprint();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        train(&spec, &mut store, &small_set(4, 2), &cfg).unwrap();
        assert_eq!(store.fingerprint(), before);
    }

    #[test]
    fn one_graph_is_memorized_well_below_chance_loss() {
        let spec = tiny_spec(0.0);
        let mut store = ParameterStore::init(&spec, 3).unwrap();
        let graphs = small_set(1, 4);
        let cfg = TrainConfig {
            epochs: 80,
            batch_size: 1,
            dropout: 0.0,
            patience: 80,
            ..TrainConfig::default()
        };
        let trace = train(&spec, &mut store, &graphs, &cfg).unwrap();
        let last = *trace.epoch_losses.last().unwrap();
        assert!(
            last < (2.0f64).ln() * 0.5,
            "final loss {last} has not beaten chance"
        );
    }

    #[test]
    fn identical_seeds_reproduce_the_trajectory_bitwise() {
        let spec = tiny_spec(0.4);
        let graphs = small_set(6, 5);
        let run = |seed: u64| {
            let mut store = ParameterStore::init(&spec, seed).unwrap();
            let cfg = TrainConfig {
                epochs: 3,
                seed,
                ..TrainConfig::default()
            };
            let trace = train(&spec, &mut store, &graphs, &cfg).unwrap();
            (trace.epoch_losses, store.fingerprint())
        };
        let (losses_a, fp_a) = run(7);
        let (losses_b, fp_b) = run(7);
        assert_eq!(losses_a, losses_b);
        assert_eq!(fp_a, fp_b);
        let (losses_c, _) = run(8);
        assert_ne!(losses_a, losses_c);
    }

    #[test]
    fn evaluation_never_mutates_the_store() {
        let spec = tiny_spec(0.4);
        let store = ParameterStore::init(&spec, 9).unwrap();
        let before = store.fingerprint();
        let metrics =
            evaluate(&spec, &store, &small_set(5, 10), &TrainConfig::default()).unwrap();
        assert_eq!(store.fingerprint(), before);
        let acc = metrics["classification.accuracy"];
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn a_flat_loss_curve_stops_at_the_patience_limit() {
        let spec = tiny_spec(0.0);
        let mut store = ParameterStore::init(&spec, 11).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 50,
            patience: 3,
            min_delta: 0.0,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let trace = train(&spec, &mut store, &small_set(4, 12), &cfg).unwrap();
        // Epoch 0 improves on infinity; the next `patience` do not.
        assert_eq!(trace.epochs_run, 4);
        let first = trace.epoch_losses[0];
        assert!(trace.epoch_losses.iter().all(|&l| l == first));
    }

    #[test]
    fn divergence_reports_the_failing_batch() {
        let spec = tiny_spec(0.0);
        let mut store = ParameterStore::init(&spec, 13).unwrap();
        store.tensors_mut()[0].data_mut()[0] = f64::NAN;
        let err = train(
            &spec,
            &mut store,
            &small_set(4, 14),
            &TrainConfig::default(),
        )
        .unwrap_err();
        match err {
            Error::Diverged { batch } => assert_eq!(batch, 0),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn cross_validation_reports_every_fold() {
        let spec = tiny_spec(0.0);
        let set = GraphSet {
            name: "tiny".into(),
            graphs: small_set(4, 15),
            feature_dim: 3,
            classes: 2,
        };
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let report = run_cross_validation(&spec, &set, &cfg, 2).unwrap();
        let acc_rows: Vec<&MetricRow> = report
            .rows
            .iter()
            .filter(|r| r.metric == "accuracy")
            .collect();
        assert_eq!(acc_rows.len(), 2);
        assert!(acc_rows.iter().any(|r| r.fold == 0));
        assert!(acc_rows.iter().any(|r| r.fold == 1));
        let agg = report.summary["classification.accuracy"];
        assert!((0.0..=1.0).contains(&agg.mean));
        assert!(agg.std >= 0.0);

        // Same inputs, same report, bit for bit.
        let again = run_cross_validation(&spec, &set, &cfg, 2).unwrap();
        assert_eq!(report.rows, again.rows);
    }

    #[test]
    fn distance_task_trains_and_scores() {
        let mut spec = tiny_spec(0.0);
        spec.tasks = vec![TaskSpec::ged("edit_distance", 1.0)];
        let mut store = ParameterStore::init(&spec, 17).unwrap();
        let graphs = small_set(5, 18);
        let cfg = TrainConfig {
            epochs: 2,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        train(&spec, &mut store, &graphs, &cfg).unwrap();
        let metrics = evaluate(&spec, &store, &graphs, &cfg).unwrap();
        for key in ["edit_distance.pair_auc", "edit_distance.triplet_accuracy"] {
            assert!((0.0..=1.0).contains(&metrics[key]), "{key} out of range");
        }
    }

    #[test]
    fn multitask_training_covers_both_heads() {
        let mut spec = tiny_spec(0.3);
        spec.tasks = vec![
            TaskSpec::classification(CLASSIFICATION, 2),
            TaskSpec::ged("edit_distance", 1.0),
        ];
        let mut store = ParameterStore::init(&spec, 19).unwrap();
        let graphs = small_set(6, 20);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let trace = train(&spec, &mut store, &graphs, &cfg).unwrap();
        assert_eq!(trace.epochs_run, 2);
        let metrics = evaluate(&spec, &store, &graphs, &cfg).unwrap();
        assert!(metrics.contains_key("classification.accuracy"));
        assert!(metrics.contains_key("edit_distance.pair_auc"));
    }
}
