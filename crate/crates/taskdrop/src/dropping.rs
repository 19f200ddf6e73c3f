//! Task-guided node dropping.
//!
//! The mechanism threads five steps through a tape so fusion weights
//! stay differentiable end to end:
//!
//! 1. [`inject_virtual_nodes`] adds K learnable task rows wired to every
//!    ordinary node (never to each other).
//! 2. [`attentiveness`] scores each ordinary node by its projected inner
//!    product against the task rows, softmaxed over ordinary nodes only.
//! 3. [`select_drop`] marks the `floor(N * alpha)` lowest-scoring nodes.
//! 4. [`fuse_dropped`] collapses the marked rows into one stand-in row,
//!    weighted by a softmax over their scores.
//! 5. [`rewire_edges`] reroutes edges that pointed into the dropped set
//!    through the stand-in node and renormalizes each surviving row.
//!
//! [`drop_stage`] chains steps 2 through 5 and returns the reduced
//! [`AugmentedGraph`] together with the [`DropPlan`] describing what was
//! removed. Selection itself is discrete and carries no gradient; the
//! gradient path runs through the fusion weights and the fused feature
//! row.
//!
//! Row layout is a crate-wide invariant: ordinary (raw and fused) rows
//! first, the K virtual rows last. Stage-local indices in a [`DropPlan`]
//! therefore equal augmented row indices.

use crate::tensor::{softmax_slice, Tape, Tensor, Var};
use crate::{Error, Result};
use rand::Rng;

/// Where a row in an [`AugmentedGraph`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeOrigin {
    /// An input node, tagged with its index in the original graph.
    Raw(usize),
    /// The stand-in produced by the given drop stage.
    Fused(usize),
    /// The k-th task node.
    Virtual(usize),
}

impl NodeOrigin {
    pub fn is_virtual(&self) -> bool {
        matches!(self, NodeOrigin::Virtual(_))
    }
}

/// K learnable task embeddings, one per task name. Rows are drawn from a
/// Gaussian so the tasks start distinguishable.
#[derive(Debug, Clone)]
pub struct VirtualNodeBank {
    pub tasks: Vec<String>,
    pub embeddings: Tensor,
}

impl VirtualNodeBank {
    pub fn new<R: Rng>(tasks: Vec<String>, dim: usize, std: f64, rng: &mut R) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Invalid("a virtual node bank needs at least one task".into()));
        }
        let embeddings = Tensor::gaussian(tasks.len(), dim, std, rng);
        Ok(VirtualNodeBank { tasks, embeddings })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }
}

/// A graph carrying task rows and zero or more fused stand-ins.
///
/// `features` lives on the tape; `adjacency` holds directed edge weights
/// off the tape (structure is not differentiated through). Rows follow
/// the layout invariant: ordinary rows first, virtual rows last.
#[derive(Debug, Clone)]
pub struct AugmentedGraph {
    pub features: Var,
    pub adjacency: Tensor,
    pub origins: Vec<NodeOrigin>,
}

impl AugmentedGraph {
    pub fn node_count(&self) -> usize {
        self.origins.len()
    }

    pub fn virtual_count(&self) -> usize {
        self.origins.iter().filter(|o| o.is_virtual()).count()
    }

    pub fn non_virtual_count(&self) -> usize {
        self.node_count() - self.virtual_count()
    }

    /// Checks the structural invariants: square adjacency of matching
    /// size, ordinary-then-virtual row layout, every virtual row wired
    /// to every ordinary row in both directions, and no virtual-virtual
    /// edges.
    pub fn validate(&self) -> Result<()> {
        let m = self.node_count();
        if self.adjacency.rank() != 2 || self.adjacency.rows() != m || self.adjacency.cols() != m {
            return Err(Error::Invalid(format!(
                "adjacency shape {:?} does not match {m} tagged rows",
                self.adjacency.shape()
            )));
        }
        let nv = self.non_virtual_count();
        for (i, origin) in self.origins.iter().enumerate() {
            if origin.is_virtual() != (i >= nv) {
                return Err(Error::Invalid(format!(
                    "row {i} breaks the ordinary-then-virtual layout"
                )));
            }
        }
        for v in nv..m {
            for j in 0..m {
                let w = self.adjacency.at(v, j);
                let back = self.adjacency.at(j, v);
                if j >= nv {
                    if w != 0.0 {
                        return Err(Error::Invalid(format!(
                            "virtual rows {v} and {j} are connected"
                        )));
                    }
                } else if w == 0.0 || back == 0.0 {
                    return Err(Error::Invalid(format!(
                        "virtual row {v} lost its link to ordinary row {j}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Wires the bank's K task rows into a graph: features grow by K rows,
/// the adjacency gains weight-1 edges between every task row and every
/// ordinary row, and no task-task edges.
pub fn inject_virtual_nodes(
    tape: &mut Tape,
    features: Var,
    adjacency: &Tensor,
    bank: Var,
) -> Result<AugmentedGraph> {
    let n = tape.value(features).rows();
    if adjacency.rank() != 2 || adjacency.rows() != n || adjacency.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "inject_virtual_nodes",
            a: adjacency.shape().to_vec(),
            b: tape.value(features).shape().to_vec(),
        });
    }
    let k = tape.value(bank).rows();
    let joined = tape.concat_rows(&[features, bank])?;
    let m = n + k;
    let mut grown = Tensor::zeros(vec![m, m]);
    for i in 0..n {
        for j in 0..n {
            let w = adjacency.at(i, j);
            if w != 0.0 {
                grown.set(i, j, w);
            }
        }
    }
    for v in n..m {
        for j in 0..n {
            grown.set(v, j, 1.0);
            grown.set(j, v, 1.0);
        }
    }
    let mut origins: Vec<NodeOrigin> = (0..n).map(NodeOrigin::Raw).collect();
    origins.extend((0..k).map(NodeOrigin::Virtual));
    Ok(AugmentedGraph {
        features: joined,
        adjacency: grown,
        origins,
    })
}

/// Pre-softmax attentiveness: entry i is the sum over tasks of the
/// projected inner products between task row k and ordinary row i.
/// Both inputs arrive already projected (task rows through one
/// projection, ordinary rows through the other).
pub fn attentiveness_logits(
    tape: &mut Tape,
    projected_virtuals: Var,
    projected_ordinary: Var,
) -> Result<Var> {
    let k = tape.value(projected_virtuals).rows();
    let n = tape.value(projected_ordinary).rows();
    if n == 0 {
        return Err(Error::EmptySupport);
    }
    let ones = tape.constant(Tensor::full(vec![1, k], 1.0));
    let summed = tape.matmul(ones, projected_virtuals)?;
    let ordinary_t = tape.transpose(projected_ordinary)?;
    let logits = tape.matmul(summed, ordinary_t)?;
    tape.reshape(logits, vec![n])
}

/// Scores ordinary nodes against the task rows: a probability vector
/// over the ordinary nodes, softmax of [`attentiveness_logits`] with
/// temperature `tau`.
pub fn attentiveness(
    tape: &mut Tape,
    projected_virtuals: Var,
    projected_ordinary: Var,
    tau: f64,
) -> Result<Var> {
    let logits = attentiveness_logits(tape, projected_virtuals, projected_ordinary)?;
    let n = tape.value(logits).numel();
    tape.masked_softmax(logits, &vec![true; n], tau)
}

/// What one drop stage removed: the score vector it acted on, the
/// dropped and kept index sets (ascending), and the fusion weights
/// parallel to `dropped`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropPlan {
    pub s: Vec<f64>,
    pub dropped: Vec<usize>,
    pub kept: Vec<usize>,
    pub lambda: Vec<f64>,
}

impl DropPlan {
    pub fn drop_count(&self) -> usize {
        self.dropped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dropped.is_empty()
    }
}

/// Picks the `floor(N * alpha)` nodes with the smallest scores, ties
/// broken toward the lower index. The fusion weights are a softmax over
/// the dropped nodes' scores. A drop count of zero yields an empty plan.
///
/// `alpha` must sit strictly inside (0, 1), so at least one node always
/// survives. The count is evaluated in f64, matching how ratios arrive
/// from configuration.
pub fn select_drop(s: &[f64], alpha: f64) -> DropPlan {
    assert!(
        alpha > 0.0 && alpha < 1.0,
        "drop ratio must sit strictly inside (0, 1), got {alpha}"
    );
    let n = s.len();
    let drop_count = (n as f64 * alpha).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        s[a].partial_cmp(&s[b])
            .expect("attentiveness scores must be finite")
            .then(a.cmp(&b))
    });
    let mut dropped = order[..drop_count].to_vec();
    dropped.sort_unstable();
    let mut is_dropped = vec![false; n];
    for &i in &dropped {
        is_dropped[i] = true;
    }
    let kept: Vec<usize> = (0..n).filter(|&i| !is_dropped[i]).collect();
    let lambda = if drop_count == 0 {
        Vec::new()
    } else {
        let vals: Vec<f64> = dropped.iter().map(|&i| s[i]).collect();
        softmax_slice(&vals, &vec![true; vals.len()], 1.0)
            .expect("nonempty drop set has nonempty support")
    };
    DropPlan {
        s: s.to_vec(),
        dropped,
        kept,
        lambda,
    }
}

/// Collapses the dropped rows into one: `x_new = sum_i lambda_i x_i`,
/// expressed as a 1 x m by m x D product on the tape.
pub fn fuse_dropped(tape: &mut Tape, x_dropped: Var, lambda: Var) -> Result<Var> {
    let m = tape.value(lambda).numel();
    let row = tape.reshape(lambda, vec![1, m])?;
    tape.matmul(row, x_dropped)
}

/// Rebuilds the adjacency after a drop: the fused node inherits every
/// edge that crossed between the kept set and the dropped set, with
/// weights summed over the dropped endpoints; each surviving ordinary
/// row (fused included) is then renormalized by a softmax over its
/// nonzero entries; virtual rows are rewired to every surviving ordinary
/// node at weight 1. The fused node gets no self-loop, and a row with no
/// edges stays zero.
///
/// Output layout: kept ordinary rows in their old relative order, then
/// the fused row, then the `virtual_count` virtual rows.
pub fn rewire_edges(a: &Tensor, plan: &DropPlan, virtual_count: usize) -> Result<Tensor> {
    if plan.is_empty() {
        return Err(Error::Invalid("rewire_edges needs a nonempty drop plan".into()));
    }
    let total = a.rows();
    let nv = total - virtual_count;
    if plan.s.len() != nv {
        return Err(Error::Invalid(format!(
            "plan scored {} rows but the adjacency has {nv} ordinary rows",
            plan.s.len()
        )));
    }
    let mut w = rewire_presoftmax(a, plan, virtual_count);
    let kept = plan.kept.len();
    let m = kept + 1 + virtual_count;
    // Renormalize ordinary rows (kept plus fused) over their support.
    for i in 0..=kept {
        let row: Vec<f64> = (0..m).map(|j| w.at(i, j)).collect();
        let mask: Vec<bool> = row.iter().map(|&v| v != 0.0).collect();
        if mask.iter().any(|&b| b) {
            let soft = softmax_slice(&row, &mask, 1.0).expect("support checked nonempty");
            for (j, (&sv, &keep)) in soft.iter().zip(&mask).enumerate() {
                w.set(i, j, if keep { sv } else { 0.0 });
            }
        }
    }
    for v in 0..virtual_count {
        for j in 0..=kept {
            w.set(kept + 1 + v, j, 1.0);
        }
    }
    Ok(w)
}

/// Edge accumulation before row normalization: kept-to-kept entries copy
/// over, each kept row's fused entry sums its old weights into the
/// dropped set, and the fused row sums the dropped rows' outgoing
/// weights. Virtual rows are left for [`rewire_edges`] to reset.
fn rewire_presoftmax(a: &Tensor, plan: &DropPlan, virtual_count: usize) -> Tensor {
    let total = a.rows();
    let nv = total - virtual_count;
    let kept = plan.kept.len();
    let fused = kept;
    let m = kept + 1 + virtual_count;
    let mut w = Tensor::zeros(vec![m, m]);
    for (ri, &i) in plan.kept.iter().enumerate() {
        for (rj, &j) in plan.kept.iter().enumerate() {
            let v = a.at(i, j);
            if v != 0.0 {
                w.set(ri, rj, v);
            }
        }
        let into_dropped: f64 = plan.dropped.iter().map(|&j| a.at(i, j)).sum();
        if into_dropped != 0.0 {
            w.set(ri, fused, into_dropped);
        }
        for t in 0..virtual_count {
            let v = a.at(i, nv + t);
            if v != 0.0 {
                w.set(ri, fused + 1 + t, v);
            }
        }
    }
    for (rj, &j) in plan.kept.iter().enumerate() {
        let from_dropped: f64 = plan.dropped.iter().map(|&d| a.at(d, j)).sum();
        if from_dropped != 0.0 {
            w.set(fused, rj, from_dropped);
        }
    }
    for t in 0..virtual_count {
        let from_dropped: f64 = plan.dropped.iter().map(|&d| a.at(d, nv + t)).sum();
        if from_dropped != 0.0 {
            w.set(fused, fused + 1 + t, from_dropped);
        }
    }
    w
}

/// Surviving row count after one stage on `n` ordinary nodes with ratio
/// `alpha` and `k` task nodes: `n - floor(n*alpha) + k + 1` when the
/// floor is positive (kept rows, task rows, one fused row), otherwise
/// `n + k` because an empty drop set creates no fused node. This equals
/// `ceil(n*(1-alpha) + k) + 1` in exact arithmetic whenever anything
/// drops.
pub fn remaining_count(n: usize, alpha: f64, k: usize) -> usize {
    let drop_count = if alpha <= 0.0 {
        0
    } else {
        (n as f64 * alpha).floor() as usize
    };
    if drop_count == 0 {
        n + k
    } else {
        n - drop_count + k + 1
    }
}

/// Which values feed the fusion-weight softmax: the post-softmax
/// attentiveness (the formula as written) or the raw logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LambdaSource {
    #[default]
    PostSoftmax,
    PreSoftmaxLogits,
}

impl LambdaSource {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "post-softmax" => Ok(LambdaSource::PostSoftmax),
            "pre-softmax" => Ok(LambdaSource::PreSoftmaxLogits),
            other => Err(Error::Config(format!(
                "unknown fusion-weight source {other:?}; expected post-softmax or pre-softmax"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LambdaSource::PostSoftmax => "post-softmax",
            LambdaSource::PreSoftmaxLogits => "pre-softmax",
        }
    }
}

/// Attentiveness of one stage, kept as tape variables so fusion weights
/// can pull gradient from either form.
#[derive(Debug, Clone, Copy)]
pub struct StageScores {
    pub logits: Var,
    pub s: Var,
}

/// Projects the current rows through the stage's scoring parameters and
/// returns both attentiveness forms. The softmax temperature is the
/// square root of the projection width.
pub fn score_stage(
    tape: &mut Tape,
    graph: &AugmentedGraph,
    w1: Var,
    w2: Var,
) -> Result<StageScores> {
    let nv = graph.non_virtual_count();
    let k = graph.virtual_count();
    let ordinary_idx: Vec<usize> = (0..nv).collect();
    let virtual_idx: Vec<usize> = (nv..nv + k).collect();
    let x_virt = tape.gather_rows(graph.features, &virtual_idx)?;
    let x_ord = tape.gather_rows(graph.features, &ordinary_idx)?;
    let p_virt = tape.matmul(x_virt, w1)?;
    let p_ord = tape.matmul(x_ord, w2)?;
    let logits = attentiveness_logits(tape, p_virt, p_ord)?;
    let att_dim = tape.value(w1).cols();
    let n = nv;
    let s = tape.masked_softmax(logits, &vec![true; n], (att_dim as f64).sqrt())?;
    Ok(StageScores { logits, s })
}

/// Executes a drop plan against the graph: fuses the dropped rows with
/// weights softmaxed from the chosen score form, rewires the adjacency,
/// and retags provenance. The returned plan carries the fusion weights
/// actually used. An empty plan passes the graph through untouched.
pub fn apply_plan(
    tape: &mut Tape,
    graph: &AugmentedGraph,
    scores: &StageScores,
    plan: DropPlan,
    lambda_source: LambdaSource,
    stage: usize,
) -> Result<(AugmentedGraph, DropPlan)> {
    if plan.is_empty() {
        return Ok((graph.clone(), plan));
    }
    let k = graph.virtual_count();
    let nv = graph.non_virtual_count();
    let source = match lambda_source {
        LambdaSource::PostSoftmax => scores.s,
        LambdaSource::PreSoftmaxLogits => scores.logits,
    };
    let picked = tape.gather_rows(source, &plan.dropped)?;
    let lambda = tape.masked_softmax(picked, &vec![true; plan.dropped.len()], 1.0)?;
    let x_dropped = tape.gather_rows(graph.features, &plan.dropped)?;
    let fused = fuse_dropped(tape, x_dropped, lambda)?;
    let x_kept = tape.gather_rows(graph.features, &plan.kept)?;
    let virtual_idx: Vec<usize> = (nv..nv + k).collect();
    let x_virt = tape.gather_rows(graph.features, &virtual_idx)?;
    let features = tape.concat_rows(&[x_kept, fused, x_virt])?;
    let adjacency = rewire_edges(&graph.adjacency, &plan, k)?;

    let mut origins: Vec<NodeOrigin> = plan.kept.iter().map(|&i| graph.origins[i]).collect();
    origins.push(NodeOrigin::Fused(stage));
    origins.extend((0..k).map(NodeOrigin::Virtual));
    let mut plan = plan;
    plan.lambda = tape.value(lambda).data().to_vec();
    Ok((
        AugmentedGraph {
            features,
            adjacency,
            origins,
        },
        plan,
    ))
}

/// One full drop stage. Scores the ordinary rows with the given
/// projections, selects the `floor(N * alpha)` least attentive, fuses,
/// and rewires. When the floor is zero the graph passes through
/// untouched and the plan is empty.
pub fn drop_stage(
    tape: &mut Tape,
    graph: &AugmentedGraph,
    w1: Var,
    w2: Var,
    alpha: f64,
    stage: usize,
) -> Result<(AugmentedGraph, DropPlan)> {
    let scores = score_stage(tape, graph, w1, w2)?;
    let plan = select_drop(tape.value(scores.s).data(), alpha);
    apply_plan(tape, graph, &scores, plan, LambdaSource::PostSoftmax, stage)
}

/// Diagnostic for why mean-aggregating backbones collapse multi-task
/// training: with identity weights and a linear activation, one step
/// sends every task row to `(sum_i x_i + x_g) / (2 + n_kept)`, so the
/// gap between any two task rows contracts by exactly `1 / (2 +
/// n_kept)` per step and their task-specific content washes out
/// geometrically.
pub fn gcn_virtual_degeneracy_probe(
    n_kept: usize,
    virtuals: &Tensor,
    features: &Tensor,
) -> Result<Tensor> {
    if virtuals.cols() != features.cols() {
        return Err(Error::ShapeMismatch {
            op: "gcn_virtual_degeneracy_probe",
            a: virtuals.shape().to_vec(),
            b: features.shape().to_vec(),
        });
    }
    let d = virtuals.cols();
    let mut column_sum = vec![0.0; d];
    for i in 0..features.rows() {
        for c in 0..d {
            column_sum[c] += features.at(i, c);
        }
    }
    let scale = 1.0 / (2.0 + n_kept as f64);
    let mut out = Tensor::zeros(vec![virtuals.rows(), d]);
    for r in 0..virtuals.rows() {
        for c in 0..d {
            out.set(r, c, (column_sum[c] + virtuals.at(r, c)) * scale);
        }
    }
    Ok(out)
}
