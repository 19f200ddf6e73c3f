//! Model assembly: architecture description, parameter storage, the
//! stacked forward pass, and checkpoints.
//!
//! [`dotin_forward`] is the full pipeline: project input features, wire
//! in the task nodes, then alternate propagation layers with drop
//! stages according to the per-layer ratio schedule. The last K rows of
//! the final graph are the task embeddings handed to the task heads.
//!
//! Parameters live in a [`ParameterStore`] as named tensors in a fixed
//! registration order; each forward leafs them onto a fresh tape via
//! [`ParameterStore::leafs`], and the trainer steps the store in place
//! with gradients read back in the same order.

use crate::backbone::{
    gat_layer, gcn_layer, normalize_adjacency, with_self_loops, Activation, GatHeadVars,
    GatLayerVars, GcnVars,
};
use crate::dropping::{
    apply_plan, inject_virtual_nodes, score_stage, select_drop, AugmentedGraph, DropPlan,
    LambdaSource, NodeOrigin,
};
use crate::graph::GraphInstance;
use crate::tasks::{TaskKind, TaskSpec};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Which propagation rule the layers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backbone {
    #[default]
    Gat,
    Gcn,
}

impl Backbone {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "gat" => Ok(Backbone::Gat),
            "gcn" => Ok(Backbone::Gcn),
            other => Err(Error::Config(format!(
                "unknown backbone {other:?}; expected gat or gcn"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backbone::Gat => "gat",
            Backbone::Gcn => "gcn",
        }
    }
}

/// Complete architecture description. Shapes and the drop schedule are
/// fixed here; weights live in the [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub backbone: Backbone,
    pub layers: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub att_dim: usize,
    pub heads: usize,
    /// Drop ratio per layer; 0 disables the stage after that layer.
    pub alphas: Vec<f64>,
    pub activation: Activation,
    pub tasks: Vec<TaskSpec>,
    pub lambda_source: LambdaSource,
    /// Feed rewired edge weights into attention as a log prior.
    pub edge_prior: bool,
}

impl ModelSpec {
    /// A spec with the defaults used throughout: single head, scoring
    /// width equal to the hidden width, ELU, and a uniform drop ratio
    /// at every layer except the last (a drop after the final
    /// propagation cannot save any work).
    pub fn new(
        backbone: Backbone,
        layers: usize,
        feature_dim: usize,
        hidden_dim: usize,
        alpha: f64,
        tasks: Vec<TaskSpec>,
    ) -> Self {
        ModelSpec {
            backbone,
            layers,
            feature_dim,
            hidden_dim,
            att_dim: hidden_dim,
            heads: 1,
            alphas: Self::uniform_alphas(alpha, layers),
            activation: Activation::Elu,
            tasks,
            lambda_source: LambdaSource::PostSoftmax,
            edge_prior: false,
        }
    }

    /// `alpha` at every layer except the last, which gets 0.
    pub fn uniform_alphas(alpha: f64, layers: usize) -> Vec<f64> {
        (0..layers)
            .map(|l| if l + 1 == layers { 0.0 } else { alpha })
            .collect()
    }

    /// Task count, which is also the virtual-node count.
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layer count must be at least 1".into()));
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("att_dim", self.att_dim),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.alphas.len() != self.layers {
            return Err(Error::Config(format!(
                "{} drop ratios for {} layers",
                self.alphas.len(),
                self.layers
            )));
        }
        for &a in &self.alphas {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Config(format!("drop ratio {a} outside [0, 1)")));
            }
        }
        if self.backbone == Backbone::Gat && self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        for t in &self.tasks {
            if let TaskKind::Classification { classes } = t.kind {
                if classes < 2 {
                    return Err(Error::Config(format!(
                        "task {:?} needs at least 2 classes",
                        t.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in registration order: the input projection,
/// each layer's weights (attention layers carry per-head projections
/// and an output block; GCN layers carry theta plus, on dropping
/// layers, a dedicated scoring pair), the virtual-node bank, and one
/// linear head per classification task.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParameterStore {
    /// Gaussian initialization, scaled by the inverse square root of
    /// each matrix's input width; the virtual bank uses unit scale so
    /// tasks start well separated.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let push = |names: &mut Vec<String>, tensors: &mut Vec<Tensor>, name: String, t: Tensor| {
            names.push(name);
            tensors.push(t);
        };
        let d = spec.hidden_dim;
        let a = spec.att_dim;
        let in_std = 1.0 / (spec.feature_dim as f64).sqrt();
        let hid_std = 1.0 / (d as f64).sqrt();

        push(
            &mut names,
            &mut tensors,
            "input_proj".into(),
            Tensor::gaussian(spec.feature_dim, d, in_std, &mut rng),
        );
        for l in 0..spec.layers {
            match spec.backbone {
                Backbone::Gat => {
                    for h in 0..spec.heads {
                        push(
                            &mut names,
                            &mut tensors,
                            format!("layer{l}.head{h}.w1"),
                            Tensor::gaussian(d, a, hid_std, &mut rng),
                        );
                        push(
                            &mut names,
                            &mut tensors,
                            format!("layer{l}.head{h}.w2"),
                            Tensor::gaussian(d, a, hid_std, &mut rng),
                        );
                        push(
                            &mut names,
                            &mut tensors,
                            format!("layer{l}.head{h}.w_out"),
                            Tensor::gaussian(d, d / spec.heads, hid_std, &mut rng),
                        );
                    }
                }
                Backbone::Gcn => {
                    push(
                        &mut names,
                        &mut tensors,
                        format!("layer{l}.theta"),
                        Tensor::gaussian(d, d, hid_std, &mut rng),
                    );
                    if spec.alphas[l] > 0.0 {
                        push(
                            &mut names,
                            &mut tensors,
                            format!("layer{l}.score.w1"),
                            Tensor::gaussian(d, a, hid_std, &mut rng),
                        );
                        push(
                            &mut names,
                            &mut tensors,
                            format!("layer{l}.score.w2"),
                            Tensor::gaussian(d, a, hid_std, &mut rng),
                        );
                    }
                }
            }
        }
        push(
            &mut names,
            &mut tensors,
            "virtual_bank".into(),
            Tensor::gaussian(spec.task_count(), d, 1.0, &mut rng),
        );
        for (t, task) in spec.tasks.iter().enumerate() {
            if let TaskKind::Classification { classes } = task.kind {
                push(
                    &mut names,
                    &mut tensors,
                    format!("task{t}.head"),
                    Tensor::gaussian(d, classes, hid_std, &mut rng),
                );
            }
        }
        Ok(ParameterStore { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Order-sensitive content hash, used to prove evaluation does not
    /// touch the weights.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bits: u64| {
            h ^= bits;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, t) in self.names.iter().zip(&self.tensors) {
            for b in name.bytes() {
                mix(b as u64);
            }
            for &v in t.data() {
                mix(v.to_bits());
            }
        }
        h
    }

    /// Writes the documented flat binary: the magic `TDCKPT01`, a u32
    /// block count, then per block a u16 name length and UTF-8 name, a
    /// u8 rank with u64 dimensions, and the row-major f64 values. All
    /// integers and floats are little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::with_capacity(16 + self.total_elements() * 8);
        buf.extend_from_slice(b"TDCKPT01");
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.push(t.rank() as u8);
            for &dim in t.shape() {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|source| Error::Ingestion {
            path: path.display().to_string(),
            source,
        })?;
        f.write_all(&buf).map_err(|source| Error::Ingestion {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let badly = |message: String| Error::DataFormat {
            path: path.display().to_string(),
            line: 0,
            message,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| Error::Ingestion {
                path: path.display().to_string(),
                source,
            })?;
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if at + n > bytes.len() {
                return Err(badly(format!(
                    "truncated checkpoint: wanted {n} bytes at offset {at}"
                )));
            }
            let s = &bytes[at..at + n];
            at += n;
            Ok(s)
        };
        if take(8)? != b"TDCKPT01" {
            return Err(badly("bad checkpoint magic".into()));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut names = Vec::with_capacity(count);
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|e| badly(format!("parameter name is not UTF-8: {e}")))?;
            let rank = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| badly(format!("parameter {name:?}: {e}")))?;
            names.push(name);
            tensors.push(t);
        }
        if at != bytes.len() {
            return Err(badly(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(ParameterStore { names, tensors })
    }

    /// Confirms the store carries exactly the blocks a spec would
    /// create, by name and shape, so a loaded checkpoint cannot be run
    /// under the wrong architecture.
    pub fn assert_layout(&self, spec: &ModelSpec) -> Result<()> {
        let fresh = ParameterStore::init(spec, 0)?;
        if fresh.names != self.names {
            return Err(Error::Invalid(format!(
                "checkpoint blocks {:?} do not match the spec's {:?}",
                self.names, fresh.names
            )));
        }
        for ((name, a), b) in self.names.iter().zip(&self.tensors).zip(&fresh.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Invalid(format!(
                    "parameter {name:?} has shape {:?}, spec wants {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Leafs every tensor onto the tape (all trainable) and returns the
    /// structured view the forward pass consumes. `flat` is aligned
    /// with the store's registration order for gradient readback.
    pub fn leafs(&self, tape: &mut Tape, spec: &ModelSpec) -> Result<ParamVars> {
        self.assert_layout(spec)?;
        let flat: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let mut cursor = 0usize;
        let mut next = || {
            let v = flat[cursor];
            cursor += 1;
            v
        };
        let input_proj = next();
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            match spec.backbone {
                Backbone::Gat => {
                    let mut heads = Vec::with_capacity(spec.heads);
                    for _ in 0..spec.heads {
                        heads.push(GatHeadVars {
                            w1: next(),
                            w2: next(),
                            w_out: next(),
                        });
                    }
                    layers.push(LayerVars::Gat(GatLayerVars { heads }));
                }
                Backbone::Gcn => {
                    let theta = next();
                    let score = if spec.alphas[l] > 0.0 {
                        Some((next(), next()))
                    } else {
                        None
                    };
                    layers.push(LayerVars::Gcn { theta, score });
                }
            }
        }
        let virtual_bank = next();
        let mut task_heads = Vec::with_capacity(spec.tasks.len());
        for task in &spec.tasks {
            task_heads.push(match task.kind {
                TaskKind::Classification { .. } => Some(next()),
                TaskKind::Ged { .. } => None,
            });
        }
        Ok(ParamVars {
            flat,
            input_proj,
            layers,
            virtual_bank,
            task_heads,
        })
    }
}

/// One layer's parameters as tape variables.
#[derive(Debug, Clone)]
pub enum LayerVars {
    Gat(GatLayerVars),
    Gcn {
        theta: Var,
        /// Scoring projections for the drop stage after this layer;
        /// present exactly when the schedule drops here.
        score: Option<(Var, Var)>,
    },
}

/// The parameter store leafed onto one tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    /// All variables in registration order (for gradient readback).
    pub flat: Vec<Var>,
    pub input_proj: Var,
    pub layers: Vec<LayerVars>,
    pub virtual_bank: Var,
    /// Per task: the classification head, or None for embedding tasks.
    pub task_heads: Vec<Option<Var>>,
}

/// How drop stages choose their victims.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Selection {
    /// The mechanism as designed: lowest attentiveness.
    #[default]
    Attentive,
    /// Uniform random sets of the same size, for the ablation baseline.
    Random { seed: u64 },
    /// Externally fixed drop sets, one per executed stage, for
    /// comparing strategies on identical selections.
    Fixed(Vec<Vec<usize>>),
}

/// Connection dropout applied to layer activations during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutCfg {
    pub rate: f64,
    pub seed: u64,
}

/// Per-forward context: selection strategy, a per-graph stream id
/// feeding the random strategies, and optional training-time dropout
/// (None means evaluation mode).
#[derive(Debug, Clone, Default)]
pub struct ForwardCtx {
    pub selection: Selection,
    pub instance: u64,
    pub dropout: Option<DropoutCfg>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx::default()
    }
}

/// One executed drop stage, for reporting: which layer it followed, the
/// provenance of the rows it scored, and the plan itself.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub layer: usize,
    pub origins: Vec<NodeOrigin>,
    pub plan: DropPlan,
}

/// Everything a forward pass produces.
#[derive(Debug)]
pub struct ForwardOutput {
    /// One embedding row (1 x hidden) per task, in task order.
    pub task_embeddings: Vec<Var>,
    /// The final reduced graph.
    pub graph: AugmentedGraph,
    /// Executed (nonempty) drop stages in order.
    pub plans: Vec<StagePlan>,
}

/// The full pipeline on one graph: input projection, virtual-node
/// injection, then per layer a propagation step followed (where the
/// schedule says so) by a drop stage. Layers with ratio 0 skip the
/// scoring machinery entirely, so a no-drop schedule reduces to the
/// plain backbone over the augmented graph.
pub fn dotin_forward(
    tape: &mut Tape,
    spec: &ModelSpec,
    vars: &ParamVars,
    graph: &GraphInstance,
    ctx: &ForwardCtx,
) -> Result<ForwardOutput> {
    if graph.feature_dim() != spec.feature_dim {
        return Err(Error::ShapeMismatch {
            op: "dotin_forward",
            a: graph.features.shape().to_vec(),
            b: vec![graph.node_count(), spec.feature_dim],
        });
    }
    let mut dropout_rng = ctx.dropout.map(|cfg| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(ctx.instance);
        r
    });
    let mut selection_rng = match ctx.selection {
        Selection::Random { seed } => {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(ctx.instance);
            Some(r)
        }
        _ => None,
    };

    let raw = tape.constant(graph.features.clone());
    let projected = tape.matmul(raw, vars.input_proj)?;
    let mut aug = inject_virtual_nodes(tape, projected, &graph.adjacency, vars.virtual_bank)?;
    let mut plans = Vec::new();

    for l in 0..spec.layers {
        // Propagate.
        let out = match &vars.layers[l] {
            LayerVars::Gat(layer_vars) => {
                let support = with_self_loops(&aug.adjacency);
                gat_layer(
                    tape,
                    aug.features,
                    &support,
                    layer_vars,
                    spec.activation,
                    spec.edge_prior,
                )?
                .out
            }
            LayerVars::Gcn { theta, .. } => {
                let a_norm = normalize_adjacency(&aug.adjacency)?;
                gcn_layer(tape, aug.features, &a_norm, GcnVars { theta: *theta }, spec.activation)?
            }
        };
        let mut out = out;
        // Connection dropout between layers, training only.
        if l + 1 < spec.layers {
            if let (Some(cfg), Some(rng)) = (&ctx.dropout, dropout_rng.as_mut()) {
                if cfg.rate > 0.0 {
                    out = apply_dropout(tape, out, cfg.rate, rng)?;
                }
            }
        }
        aug = AugmentedGraph {
            features: out,
            adjacency: aug.adjacency,
            origins: aug.origins,
        };

        // Drop stage, skipped entirely at ratio 0.
        let alpha = spec.alphas[l];
        if alpha > 0.0 {
            let (w1, w2) = stage_projections(vars, l)?;
            let scores = score_stage(tape, &aug, w1, w2)?;
            let s_values = tape.value(scores.s).data().to_vec();
            let plan = match &ctx.selection {
                Selection::Attentive => select_drop(&s_values, alpha),
                Selection::Random { .. } => {
                    let rng = selection_rng.as_mut().expect("rng built for Random");
                    let n = s_values.len();
                    let count = (n as f64 * alpha).floor() as usize;
                    let mut dropped: Vec<usize> =
                        rand::seq::index::sample(rng, n, count).into_vec();
                    dropped.sort_unstable();
                    plan_for_dropped(&s_values, dropped)?
                }
                Selection::Fixed(sets) => {
                    let i = plans.len();
                    let set = sets.get(i).ok_or_else(|| {
                        Error::Invalid(format!("fixed selection has no set for stage {i}"))
                    })?;
                    plan_for_dropped(&s_values, set.clone())?
                }
            };
            if !plan.is_empty() {
                let origins = aug.origins[..aug.non_virtual_count()].to_vec();
                let (reduced, plan) =
                    apply_plan(tape, &aug, &scores, plan, spec.lambda_source, plans.len())?;
                aug = reduced;
                plans.push(StagePlan {
                    layer: l,
                    origins,
                    plan,
                });
            }
        }
    }

    let nv = aug.non_virtual_count();
    let mut task_embeddings = Vec::with_capacity(spec.task_count());
    for t in 0..spec.task_count() {
        task_embeddings.push(tape.gather_rows(aug.features, &[nv + t])?);
    }
    Ok(ForwardOutput {
        task_embeddings,
        graph: aug,
        plans,
    })
}

/// Builds a plan around an externally chosen drop set: indices are
/// checked and sorted, the kept set is the complement, and fusion
/// weights come from the scores as usual.
fn plan_for_dropped(s: &[f64], mut dropped: Vec<usize>) -> Result<DropPlan> {
    let n = s.len();
    dropped.sort_unstable();
    dropped.dedup();
    if dropped.len() >= n {
        return Err(Error::Invalid(format!(
            "drop set of {} would empty the {n}-node graph",
            dropped.len()
        )));
    }
    if let Some(&bad) = dropped.iter().find(|&&i| i >= n) {
        return Err(Error::Invalid(format!(
            "drop index {bad} out of range for {n} nodes"
        )));
    }
    let mut is_dropped = vec![false; n];
    for &i in &dropped {
        is_dropped[i] = true;
    }
    let kept: Vec<usize> = (0..n).filter(|&i| !is_dropped[i]).collect();
    let lambda = if dropped.is_empty() {
        Vec::new()
    } else {
        let vals: Vec<f64> = dropped.iter().map(|&i| s[i]).collect();
        crate::tensor::softmax_slice(&vals, &vec![true; vals.len()], 1.0)?
    };
    Ok(DropPlan {
        s: s.to_vec(),
        dropped,
        kept,
        lambda,
    })
}

fn stage_projections(vars: &ParamVars, layer: usize) -> Result<(Var, Var)> {
    match &vars.layers[layer] {
        LayerVars::Gat(g) => Ok((g.heads[0].w1, g.heads[0].w2)),
        LayerVars::Gcn { score, .. } => score.ok_or_else(|| {
            Error::Invalid(format!(
                "layer {layer} drops but carries no scoring projections; spec/store mismatch"
            ))
        }),
    }
}

/// Inverted dropout: zero each activation with probability `rate`,
/// scale survivors by 1/(1-rate). The mask enters the tape as a
/// constant, so gradients route through the same sparsity.
fn apply_dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    use rand::Rng;
    let shape = tape.value(x).shape().to_vec();
    let keep = 1.0 - rate;
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = tape.constant(Tensor::new(shape, data)?);
    tape.mul(x, mask)
}
