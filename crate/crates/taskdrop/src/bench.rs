//! Efficiency accounting and the drop-ratio ablation harness.
//!
//! The cost model is analytic, not sampled: [`flop_count`] walks the
//! architecture exactly as [`dotin_forward`](crate::model::dotin_forward)
//! executes it, charging 2mkn per dense m x k x n matmul and the plain
//! loop bounds for attention masking, softmax passes, fusion, and
//! rewiring. [`peak_activation_elements`] charges every stage's live
//! tensors under full reverse-mode retention (the backward pass starts
//! with all of them alive), which is what actually bounds memory.
//!
//! [`sweep_drop_ratio`] trains one model per (ratio, strategy) cell and
//! measures wall-clock training throughput; [`export_attentiveness_ranks`]
//! reproduces the rank-scatter protocol for multi-task models. Sweeps
//! run sequentially so records reproduce bit for bit (the timing column
//! is exempt).

use crate::backbone::{gat_layer, gcn_layer, normalize_adjacency, with_self_loops, GcnVars};
use crate::dropping::{inject_virtual_nodes, remaining_count, AugmentedGraph};
use crate::graph::{GraphInstance, GraphSet};
use crate::model::{Backbone, LayerVars, ModelSpec, ParamVars, ParameterStore, Selection};
use crate::tasks::TaskKind;
use crate::tensor::{Tape, Tensor};
use crate::trainer::{evaluate, train, TrainConfig};
use crate::{Error, Result};
use std::time::Instant;

/// Cost of one dense `m x k` times `k x n` product.
pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

/// Ordinary-row count entering each layer (virtual rows excluded), as
/// the drop schedule shrinks the graph.
pub fn stage_ordinary_rows(spec: &ModelSpec, nodes: usize) -> Vec<usize> {
    let k = spec.task_count();
    let mut n_ord = nodes;
    let mut rows = Vec::with_capacity(spec.layers);
    for l in 0..spec.layers {
        rows.push(n_ord);
        if spec.alphas[l] > 0.0 {
            // remaining_count reports ordinary plus virtual rows.
            n_ord = remaining_count(n_ord, spec.alphas[l], k) - k;
        }
    }
    rows
}

/// Exact multiply-add count for one forward pass on an `nodes`-node
/// graph, per the documented cost model.
pub fn flop_count(spec: &ModelSpec, nodes: usize) -> u64 {
    let k = spec.task_count();
    let d = spec.hidden_dim;
    let a = spec.att_dim;
    let mut total = matmul_flops(nodes, spec.feature_dim, d);
    let mut n_ord = nodes;
    for l in 0..spec.layers {
        let rows = n_ord + k;
        match spec.backbone {
            Backbone::Gat => {
                let dh = d / spec.heads;
                for _ in 0..spec.heads {
                    total += 2 * matmul_flops(rows, d, a); // XW1, XW2
                    total += matmul_flops(rows, a, rows); // logit matrix
                    if spec.edge_prior {
                        total += 2 * (rows * rows) as u64; // ln(w) and add
                    }
                    total += 5 * (rows * rows) as u64; // masked softmax
                    total += matmul_flops(rows, rows, d); // S X
                    total += matmul_flops(rows, d, dh); // output block
                }
                total += (rows * d) as u64; // activation
            }
            Backbone::Gcn => {
                total += 3 * (rows * rows) as u64 + rows as u64; // normalization
                total += matmul_flops(rows, d, d); // X theta
                total += matmul_flops(rows, rows, d); // propagate
                total += (rows * d) as u64; // activation
            }
        }
        let alpha = spec.alphas[l];
        if alpha > 0.0 {
            let m = (n_ord as f64 * alpha).floor() as usize;
            // Scoring runs regardless of how many nodes go.
            total += matmul_flops(k, d, a) + matmul_flops(n_ord, d, a); // projections
            total += (k * a) as u64 + matmul_flops(1, a, n_ord); // summed logits
            total += 5 * n_ord as u64; // attentiveness softmax
            if m > 0 {
                let kept = n_ord - m;
                let nv = kept + 1;
                total += 5 * m as u64; // fusion weights
                total += matmul_flops(1, m, d); // fused row
                total += (kept * kept) as u64; // kept-to-kept copy
                total += 2 * (kept * m) as u64; // kept-to-fused sums
                total += (m * (kept + k)) as u64; // fused row sums
                total += 5 * ((nv + k) * (nv + k)) as u64; // rewiring softmax
                n_ord = nv;
            }
        }
    }
    for task in &spec.tasks {
        if let TaskKind::Classification { classes } = task.kind {
            total += matmul_flops(1, d, classes);
        }
    }
    total
}

/// Per-batch FLOPs: `batch_size` independent forwards.
pub fn flops_per_batch(spec: &ModelSpec, nodes: usize, batch_size: usize) -> u64 {
    batch_size as u64 * flop_count(spec, nodes)
}

/// Live activation elements for one forward+backward. Reverse-mode
/// differentiation retains every stage's activations until the backward
/// pass consumes them, so the peak (reached as the backward starts) is
/// the sum over stages of features plus attention-sized matrices.
pub fn peak_activation_elements(spec: &ModelSpec, nodes: usize) -> u64 {
    let k = spec.task_count();
    let d = spec.hidden_dim;
    let a = spec.att_dim;
    let mut total = (nodes * d) as u64; // projected input
    let mut n_ord = nodes;
    total += ((nodes + k) * d) as u64; // injected features
    for l in 0..spec.layers {
        let rows = n_ord + k;
        match spec.backbone {
            Backbone::Gat => {
                total += (spec.heads * (2 * rows * a + rows * rows)) as u64; // projections + S
                total += (rows * d) as u64; // layer output
            }
            Backbone::Gcn => {
                total += (rows * rows) as u64; // normalized adjacency
                total += 2 * (rows * d) as u64; // X theta and output
            }
        }
        let alpha = spec.alphas[l];
        if alpha > 0.0 {
            let m = (n_ord as f64 * alpha).floor() as usize;
            total += n_ord as u64; // attentiveness
            if m > 0 {
                let nv = n_ord - m + 1;
                total += m as u64 + d as u64; // fusion weights and fused row
                total += ((nv + k) * (nv + k)) as u64; // rewired adjacency
                n_ord = nv;
            }
        }
    }
    total
}

/// Node-selection strategies the ablation compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Dotin,
    RandomDrop,
    NoDrop,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Dotin, Strategy::RandomDrop, Strategy::NoDrop];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Dotin => "dotin",
            Strategy::RandomDrop => "random-drop",
            Strategy::NoDrop => "no-drop",
        }
    }
}

/// One sweep cell: configuration identity, exact cost-model numbers,
/// measured throughput, and end-of-training accuracy.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub fingerprint: String,
    pub strategy: String,
    pub ratio: f64,
    pub layers: usize,
    pub hidden: usize,
    pub batch_size: usize,
    /// Cost-model FLOPs for the first batch of the dataset.
    pub flops_per_batch: u64,
    /// Cost-model peak over the first batch's graphs.
    pub peak_elements: u64,
    /// Median training throughput; the one non-reproducible column.
    pub batches_per_sec: f64,
    /// First classification task's accuracy, or the first metric the
    /// evaluator reports when there is none.
    pub accuracy: f64,
}

fn fingerprint_config(spec: &ModelSpec, cfg: &TrainConfig) -> String {
    let text = format!("{spec:?}|{cfg:?}");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Trains and times one model per (ratio, strategy) cell. A zero ratio
/// collapses to a single no-drop record since every strategy coincides
/// there. Ratios must lie in `[0, 1)`.
pub fn sweep_drop_ratio(
    spec: &ModelSpec,
    set: &GraphSet,
    cfg: &TrainConfig,
    ratios: &[f64],
) -> Result<Vec<BenchRecord>> {
    for &r in ratios {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Config(format!("drop ratio {r} outside [0, 1)")));
        }
    }
    let mut records = Vec::new();
    for &ratio in ratios {
        let strategies: &[Strategy] = if ratio == 0.0 {
            &[Strategy::NoDrop]
        } else {
            &Strategy::ALL
        };
        for &strategy in strategies {
            records.push(run_cell(spec, set, cfg, ratio, strategy, 30, 5)?);
        }
    }
    Ok(records)
}

/// Builds the (spec, config) pair a sweep cell trains with.
pub fn cell_config(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    ratio: f64,
    strategy: Strategy,
) -> (ModelSpec, TrainConfig) {
    let mut cell_spec = spec.clone();
    cell_spec.alphas = match strategy {
        Strategy::NoDrop => vec![0.0; spec.layers],
        _ => ModelSpec::uniform_alphas(ratio, spec.layers),
    };
    let mut cell_cfg = cfg.clone();
    cell_cfg.selection = match strategy {
        Strategy::RandomDrop => Selection::Random { seed: cfg.seed },
        _ => Selection::Attentive,
    };
    (cell_spec, cell_cfg)
}

fn run_cell(
    spec: &ModelSpec,
    set: &GraphSet,
    cfg: &TrainConfig,
    ratio: f64,
    strategy: Strategy,
    timed_batches: usize,
    timing_repeats: usize,
) -> Result<BenchRecord> {
    let (cell_spec, cell_cfg) = cell_config(spec, cfg, ratio, strategy);
    let mut store = ParameterStore::init(&cell_spec, cell_cfg.seed)?;
    train(&cell_spec, &mut store, &set.graphs, &cell_cfg)?;
    let batches_per_sec = measure_batches_per_sec(
        &cell_spec,
        &store,
        &set.graphs,
        &cell_cfg,
        timed_batches,
        timing_repeats,
    )?;
    let metrics = evaluate(&cell_spec, &store, &set.graphs, &cell_cfg)?;
    let accuracy = cell_spec
        .tasks
        .iter()
        .find(|t| t.is_classification())
        .and_then(|t| metrics.get(&format!("{}.accuracy", t.name)))
        .or_else(|| metrics.values().next())
        .copied()
        .unwrap_or(f64::NAN);

    let first_batch = &set.graphs[..cell_cfg.batch_size.min(set.len())];
    let flops = first_batch
        .iter()
        .map(|g| flop_count(&cell_spec, g.node_count()))
        .sum();
    let peak = first_batch
        .iter()
        .map(|g| peak_activation_elements(&cell_spec, g.node_count()))
        .max()
        .unwrap_or(0);
    Ok(BenchRecord {
        fingerprint: fingerprint_config(&cell_spec, &cell_cfg),
        strategy: strategy.name().into(),
        ratio,
        layers: cell_spec.layers,
        hidden: cell_spec.hidden_dim,
        batch_size: cell_cfg.batch_size,
        flops_per_batch: flops,
        peak_elements: peak,
        batches_per_sec,
        accuracy,
    })
}

/// Times full training batches (forward, backward, optimizer step) on a
/// cloned store: a short warmup, then `timed_batches` measured batches
/// per repeat, median rate over repeats. Monotonic clock.
pub fn measure_batches_per_sec(
    spec: &ModelSpec,
    store: &ParameterStore,
    graphs: &[GraphInstance],
    cfg: &TrainConfig,
    timed_batches: usize,
    repeats: usize,
) -> Result<f64> {
    if graphs.is_empty() || timed_batches == 0 || repeats == 0 {
        return Err(Error::Invalid("timing needs graphs, batches, repeats".into()));
    }
    // Enough epochs to cover the requested batch count when cycling a
    // small set.
    let batches_per_epoch = graphs.len().div_ceil(cfg.batch_size.max(1));
    let epochs_needed = (timed_batches + 3).div_ceil(batches_per_epoch);
    let mut rates = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut scratch = store.clone();
        let warm_cfg = TrainConfig {
            epochs: epochs_needed,
            patience: usize::MAX,
            ..cfg.clone()
        };
        // Warmup: one epoch untimed.
        let mut warm = TrainConfig {
            epochs: 1,
            ..warm_cfg.clone()
        };
        warm.patience = usize::MAX;
        train(spec, &mut scratch, graphs, &warm)?;
        let start = Instant::now();
        let trace = train(spec, &mut scratch, graphs, &warm_cfg)?;
        let elapsed = start.elapsed().as_secs_f64();
        let batches = trace.epochs_run * batches_per_epoch;
        rates.push(batches as f64 / elapsed.max(1e-9));
    }
    rates.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(rates[rates.len() / 2])
}

/// One row of the rank export.
#[derive(Debug, Clone)]
pub struct RankRow {
    pub graph: usize,
    pub node: usize,
    /// Per-task raw scores before the mean over tasks.
    pub scores: Vec<f64>,
    /// Per-task rank, 1 = highest score; ties broken by node index.
    pub ranks: Vec<usize>,
}

/// Rank export over a graph list, plus the per-graph Spearman
/// correlation between the first two tasks' rank columns.
#[derive(Debug, Clone)]
pub struct AttentivenessExport {
    pub rows: Vec<RankRow>,
    pub spearman: Vec<f64>,
}

impl AttentivenessExport {
    pub fn mean_spearman(&self) -> f64 {
        self.spearman.iter().sum::<f64>() / self.spearman.len().max(1) as f64
    }
}

/// Per-task attentiveness ranks over all nodes, following the scatter
/// protocol: dropping is disabled so every node is scored, feature rows
/// are L2-normalized before the attention products, and scores stay
/// separated per task (no mean). Scoring uses the first dropping
/// layer's projections, or layer 0's on a no-drop attention model.
/// Needs at least two tasks.
pub fn export_attentiveness_ranks(
    spec: &ModelSpec,
    store: &ParameterStore,
    graphs: &[GraphInstance],
) -> Result<AttentivenessExport> {
    if spec.task_count() < 2 {
        return Err(Error::Invalid(format!(
            "rank export compares tasks, so it needs at least 2 virtual nodes, found {}",
            spec.task_count()
        )));
    }
    let score_layer = spec
        .alphas
        .iter()
        .position(|&a| a > 0.0)
        .unwrap_or(match spec.backbone {
            Backbone::Gat => 0,
            Backbone::Gcn => {
                return Err(Error::Invalid(
                    "a no-drop GCN model has no scoring projections to export".into(),
                ))
            }
        });
    let k = spec.task_count();
    let mut rows = Vec::new();
    let mut spearman = Vec::new();
    for (gi, g) in graphs.iter().enumerate() {
        let n = g.node_count();
        let mut tape = Tape::new();
        let vars = store.leafs(&mut tape, spec)?;
        let aug = features_at_layer(&mut tape, spec, &vars, g, score_layer)?;
        let feats = tape.value(aug.features).clone();
        let normalized = l2_normalize_rows(&feats);
        let (w1, w2) = scoring_pair(&vars, score_layer)?;
        let x = tape.constant(normalized);
        let virt = tape.gather_rows(x, &(n..n + k).collect::<Vec<_>>())?;
        let ordinary = tape.gather_rows(x, &(0..n).collect::<Vec<_>>())?;
        let p1 = tape.matmul(virt, w1)?;
        let p2 = tape.matmul(ordinary, w2)?;
        let p2t = tape.transpose(p2)?;
        let score_matrix = tape.matmul(p1, p2t)?; // K x n
        let scores = tape.value(score_matrix).clone();

        let mut rank_columns = Vec::with_capacity(k);
        for t in 0..k {
            let col: Vec<f64> = (0..n).map(|i| scores.at(t, i)).collect();
            rank_columns.push(descending_ranks(&col));
        }
        for i in 0..n {
            rows.push(RankRow {
                graph: gi,
                node: i,
                scores: (0..k).map(|t| scores.at(t, i)).collect(),
                ranks: rank_columns.iter().map(|c| c[i]).collect(),
            });
        }
        spearman.push(spearman_of_permutations(&rank_columns[0], &rank_columns[1]));
    }
    Ok(AttentivenessExport { rows, spearman })
}

/// Propagates through layers `0..=upto` with dropping and dropout off,
/// returning the augmented graph at that depth.
fn features_at_layer(
    tape: &mut Tape,
    spec: &ModelSpec,
    vars: &ParamVars,
    g: &GraphInstance,
    upto: usize,
) -> Result<AugmentedGraph> {
    let raw = tape.constant(g.features.clone());
    let projected = tape.matmul(raw, vars.input_proj)?;
    let mut aug = inject_virtual_nodes(tape, projected, &g.adjacency, vars.virtual_bank)?;
    for l in 0..=upto {
        let out = match &vars.layers[l] {
            LayerVars::Gat(lv) => {
                let support = with_self_loops(&aug.adjacency);
                gat_layer(tape, aug.features, &support, lv, spec.activation, spec.edge_prior)?.out
            }
            LayerVars::Gcn { theta, .. } => {
                let a_norm = normalize_adjacency(&aug.adjacency)?;
                gcn_layer(tape, aug.features, &a_norm, GcnVars { theta: *theta }, spec.activation)?
            }
        };
        aug = AugmentedGraph {
            features: out,
            adjacency: aug.adjacency,
            origins: aug.origins,
        };
    }
    Ok(aug)
}

fn scoring_pair(vars: &ParamVars, layer: usize) -> Result<(crate::tensor::Var, crate::tensor::Var)> {
    match &vars.layers[layer] {
        LayerVars::Gat(g) => Ok((g.heads[0].w1, g.heads[0].w2)),
        LayerVars::Gcn { score, .. } => score.ok_or_else(|| {
            Error::Invalid(format!("layer {layer} has no scoring projections"))
        }),
    }
}

fn l2_normalize_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let cols = t.cols();
    for r in 0..t.rows() {
        let norm: f64 = (0..cols).map(|c| t.at(r, c) * t.at(r, c)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for c in 0..cols {
                out.set(r, c, t.at(r, c) / norm);
            }
        }
    }
    out
}

/// Rank 1 goes to the largest value; equal values rank by node index.
fn descending_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut ranks = vec![0usize; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        ranks[i] = rank + 1;
    }
    ranks
}

/// Spearman rho for two tie-free rank permutations.
fn spearman_of_permutations(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    if a.len() < 2 {
        return 1.0;
    }
    let d2: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}
