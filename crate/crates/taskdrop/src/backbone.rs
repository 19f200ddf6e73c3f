//! Message-passing layers over dense adjacency.
//!
//! Two backbones share one calling convention: node features enter as a
//! tape variable, graph structure enters as plain (non-differentiated)
//! tensors, and the layer returns the next feature matrix.
//!
//! * [`gcn_layer`] propagates with the symmetric normalization
//!   `D^{-1/2} (A + I) D^{-1/2}` computed by [`normalize_adjacency`];
//!   the layer never alters the adjacency it was handed.
//! * [`gat_layer`] scores pairs with two projections,
//!   `S = softmax((X W1)(X W2)^T / sqrt(d_att))` row by row over the
//!   support of the graph, then mixes features as `act(S X W_out)`.
//!   Support comes from a caller-provided matrix whose diagonal must be
//!   nonzero (see [`with_self_loops`]); a row with empty support is an
//!   error, not a silent uniform. Edge weights can optionally enter the
//!   score as a multiplicative prior, implemented as `ln w` added to the
//!   logits so rows still sum to one.
//!
//! Multiple attention heads each carry their own projections and output
//! block; head outputs are concatenated feature-wise. The drop stages in
//! [`crate::dropping`] reuse head 0's projections for scoring.

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Elementwise nonlinearity applied by both layer kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Elu,
    Relu,
    Linear,
}

impl Activation {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Elu => tape.elu(x),
            Activation::Relu => tape.relu(x),
            Activation::Linear => x,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "elu" => Ok(Activation::Elu),
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Config(format!(
                "unknown activation {other:?}; expected elu, relu, or linear"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }
}

/// Symmetric GCN normalization `D^{-1/2} (A + I) D^{-1/2}`, where `D` is
/// the degree (row-sum) matrix of `A + I`. Self-loops guarantee every
/// degree is at least one, so isolated nodes are safe.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || a.rows() != a.cols() {
        return Err(Error::ShapeMismatch {
            op: "normalize_adjacency",
            a: a.shape().to_vec(),
            b: a.shape().to_vec(),
        });
    }
    let n = a.rows();
    let mut hat = a.clone();
    for i in 0..n {
        for j in 0..n {
            let w = hat.at(i, j);
            if w < 0.0 {
                return Err(Error::NegativeWeight { i, j, value: w });
            }
        }
        hat.set(i, i, hat.at(i, i) + 1.0);
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = (0..n).map(|j| hat.at(i, j)).sum();
            1.0 / d.sqrt()
        })
        .collect();
    let mut out = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            let w = hat.at(i, j);
            if w != 0.0 {
                out.set(i, j, inv_sqrt_deg[i] * w * inv_sqrt_deg[j]);
            }
        }
    }
    Ok(out)
}

/// Support matrix for attention: a copy of `a` whose zero diagonal
/// entries are raised to 1.0.
pub fn with_self_loops(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for i in 0..a.rows() {
        if out.at(i, i) == 0.0 {
            out.set(i, i, 1.0);
        }
    }
    out
}

/// Parameters of one GCN layer.
#[derive(Debug, Clone, Copy)]
pub struct GcnVars {
    pub theta: Var,
}

/// One GCN propagation step: `act(A_norm (X theta))`. `a_norm` must
/// already be normalized; the layer reads it as a constant and returns
/// only the new features, leaving graph structure to the caller.
pub fn gcn_layer(
    tape: &mut Tape,
    x: Var,
    a_norm: &Tensor,
    vars: GcnVars,
    activation: Activation,
) -> Result<Var> {
    let a = tape.constant(a_norm.clone());
    let xw = tape.matmul(x, vars.theta)?;
    let mixed = tape.matmul(a, xw)?;
    Ok(activation.apply(tape, mixed))
}

/// Parameters of one attention head: score projections and the output
/// block.
#[derive(Debug, Clone, Copy)]
pub struct GatHeadVars {
    pub w1: Var,
    pub w2: Var,
    pub w_out: Var,
}

/// Parameters of one attention layer: one or more heads.
#[derive(Debug, Clone)]
pub struct GatLayerVars {
    pub heads: Vec<GatHeadVars>,
}

/// Output of [`gat_layer`]: mixed features plus each head's attention
/// matrix (row-stochastic over the support).
#[derive(Debug)]
pub struct GatOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

/// One attention layer over `support` (nonzero diagonal required by the
/// caller; see [`with_self_loops`]). The temperature is the square root
/// of the score projection width. With `weight_prior`, support weights
/// multiply the attention via `ln w` added to the logits.
pub fn gat_layer(
    tape: &mut Tape,
    x: Var,
    support: &Tensor,
    vars: &GatLayerVars,
    activation: Activation,
    weight_prior: bool,
) -> Result<GatOutput> {
    if vars.heads.is_empty() {
        return Err(Error::Invalid("attention layer with zero heads".into()));
    }
    let n = support.rows();
    if support.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "gat_layer",
            a: support.shape().to_vec(),
            b: support.shape().to_vec(),
        });
    }
    let mask: Vec<bool> = support.data().iter().map(|&w| w != 0.0).collect();
    let prior = if weight_prior {
        let mut p = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            for j in 0..n {
                let w = support.at(i, j);
                if w < 0.0 {
                    return Err(Error::NegativeWeight { i, j, value: w });
                }
                if w > 0.0 {
                    p.set(i, j, w.ln());
                }
            }
        }
        Some(tape.constant(p))
    } else {
        None
    };

    let mut head_outs = Vec::with_capacity(vars.heads.len());
    let mut attention = Vec::with_capacity(vars.heads.len());
    for head in &vars.heads {
        let att_dim = tape.value(head.w1).cols();
        let tau = (att_dim as f64).sqrt();
        let xw1 = tape.matmul(x, head.w1)?;
        let xw2 = tape.matmul(x, head.w2)?;
        let xw2t = tape.transpose(xw2)?;
        let mut logits = tape.matmul(xw1, xw2t)?;
        if let Some(p) = prior {
            logits = tape.add(logits, p)?;
        }
        let scores = tape.masked_softmax_rows(logits, &mask, tau)?;
        let mixed = tape.matmul(scores, x)?;
        let projected = tape.matmul(mixed, head.w_out)?;
        head_outs.push(activation.apply(tape, projected));
        attention.push(scores);
    }

    let out = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        // Column-wise concat via transpose + row concat + transpose.
        let mut transposed = Vec::with_capacity(head_outs.len());
        for h in head_outs {
            transposed.push(tape.transpose(h)?);
        }
        let stacked = tape.concat_rows(&transposed)?;
        tape.transpose(stacked)?
    };
    Ok(GatOutput { out, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path2() -> Tensor {
        Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn normalize_two_node_path() {
        let norm = normalize_adjacency(&path2()).unwrap();
        for (got, want) in norm.data().iter().zip(&[0.5, 0.5, 0.5, 0.5]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_handles_isolated_nodes() {
        let a = Tensor::zeros(vec![3, 3]);
        let norm = normalize_adjacency(&a).unwrap();
        for i in 0..3 {
            assert!((norm.at(i, i) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_rejects_negative_weights() {
        let mut a = path2();
        a.set(0, 1, -1.0);
        assert!(matches!(
            normalize_adjacency(&a),
            Err(Error::NegativeWeight { i: 0, j: 1, .. })
        ));
    }

    #[test]
    fn gcn_identity_weights_average_the_path() {
        // Path of two nodes, features [2], [4], identity weights, linear:
        // both rows become 3.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 1, vec![2.0, 4.0]).unwrap(), false);
        let theta = tape.leaf(Tensor::matrix(1, 1, vec![1.0]).unwrap(), false);
        let a_norm = normalize_adjacency(&path2()).unwrap();
        let out = gcn_layer(&mut tape, x, &a_norm, GcnVars { theta }, Activation::Linear).unwrap();
        let got = tape.value(out).data();
        assert!((got[0] - 3.0).abs() < 1e-15);
        assert!((got[1] - 3.0).abs() < 1e-15);
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Tensor {
        let mut a = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(p) {
                    let w = rng.gen_range(0.2..2.0);
                    a.set(i, j, w);
                    a.set(j, i, w);
                }
            }
        }
        a
    }

    fn gat_head(tape: &mut Tape, d_in: usize, d_att: usize, d_out: usize, rng: &mut ChaCha8Rng) -> GatHeadVars {
        GatHeadVars {
            w1: tape.leaf(Tensor::gaussian(d_in, d_att, 0.5, rng), true),
            w2: tape.leaf(Tensor::gaussian(d_in, d_att, 0.5, rng), true),
            w_out: tape.leaf(Tensor::gaussian(d_in, d_out, 0.5, rng), true),
        }
    }

    #[test]
    fn gat_attention_matches_a_hand_softmax_and_is_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = rng.gen_range(2..7);
            let (d_in, d_att) = (3, 4);
            let a = random_graph(&mut rng, n, 0.5);
            let support = with_self_loops(&a);
            let xs = Tensor::gaussian(n, d_in, 1.0, &mut rng);

            let mut tape = Tape::new();
            let x = tape.leaf(xs.clone(), true);
            let vars = GatLayerVars {
                heads: vec![gat_head(&mut tape, d_in, d_att, 2, &mut rng)],
            };
            let got = gat_layer(&mut tape, x, &support, &vars, Activation::Elu, false).unwrap();
            let scores = tape.value(got.attention[0]).clone();

            // Independent recomputation with plain loops.
            let w1 = tape.value(vars.heads[0].w1).clone();
            let w2 = tape.value(vars.heads[0].w2).clone();
            let tau = (d_att as f64).sqrt();
            for i in 0..n {
                let mut logits = vec![f64::NEG_INFINITY; n];
                for j in 0..n {
                    if support.at(i, j) == 0.0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for t in 0..d_att {
                        let pi: f64 = (0..d_in).map(|c| xs.at(i, c) * w1.at(c, t)).sum();
                        let pj: f64 = (0..d_in).map(|c| xs.at(j, c) * w2.at(c, t)).sum();
                        dot += pi * pj;
                    }
                    logits[j] = dot;
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits
                    .iter()
                    .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { ((l - m) / tau).exp() })
                    .collect();
                let z: f64 = exps.iter().sum();
                let mut row_sum = 0.0;
                for j in 0..n {
                    let want = exps[j] / z;
                    assert!(
                        (scores.at(i, j) - want).abs() < 1e-10,
                        "entry ({i},{j}): {} vs {want}",
                        scores.at(i, j)
                    );
                    if support.at(i, j) == 0.0 {
                        assert_eq!(scores.at(i, j), 0.0);
                    }
                    row_sum += scores.at(i, j);
                }
                assert!((row_sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gat_empty_support_row_is_an_error() {
        // Support without a self-loop on an isolated node: row 2 is empty.
        let mut support = with_self_loops(&random_graph(
            &mut ChaCha8Rng::seed_from_u64(3),
            3,
            1.0,
        ));
        support.set(2, 0, 0.0);
        support.set(2, 1, 0.0);
        support.set(2, 2, 0.0);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = tape.leaf(Tensor::gaussian(3, 2, 1.0, &mut rng), false);
        let vars = GatLayerVars {
            heads: vec![gat_head(&mut tape, 2, 2, 2, &mut rng)],
        };
        let err = gat_layer(&mut tape, x, &support, &vars, Activation::Elu, false).unwrap_err();
        assert!(matches!(err, Error::EmptySupport));
    }

    fn permutation_matrix(perm: &[usize]) -> Tensor {
        let n = perm.len();
        let mut p = Tensor::zeros(vec![n, n]);
        for (row, &src) in perm.iter().enumerate() {
            p.set(row, src, 1.0);
        }
        p
    }

    #[test]
    fn both_layers_are_permutation_equivariant() {
        use crate::tensor::matmul_raw;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..15 {
            let n = rng.gen_range(3..8);
            let d = 3;
            let a = random_graph(&mut rng, n, 0.6);
            let xs = Tensor::gaussian(n, d, 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let p = permutation_matrix(&perm);
            let pa = matmul_raw(&matmul_raw(&p, &a), &p.transposed());
            let px = matmul_raw(&p, &xs);

            // Shared parameters across both orderings.
            let theta_t = Tensor::gaussian(d, d, 0.7, &mut rng);
            let w1_t = Tensor::gaussian(d, d, 0.7, &mut rng);
            let w2_t = Tensor::gaussian(d, d, 0.7, &mut rng);
            let wo_t = Tensor::gaussian(d, d, 0.7, &mut rng);

            let run = |adj: &Tensor, feats: &Tensor| -> (Tensor, Tensor) {
                let mut tape = Tape::new();
                let x = tape.leaf(feats.clone(), false);
                let theta = tape.leaf(theta_t.clone(), false);
                let gcn_out = gcn_layer(
                    &mut tape,
                    x,
                    &normalize_adjacency(adj).unwrap(),
                    GcnVars { theta },
                    Activation::Elu,
                )
                .unwrap();
                let vars = GatLayerVars {
                    heads: vec![GatHeadVars {
                        w1: tape.leaf(w1_t.clone(), false),
                        w2: tape.leaf(w2_t.clone(), false),
                        w_out: tape.leaf(wo_t.clone(), false),
                    }],
                };
                let gat_out = gat_layer(
                    &mut tape,
                    x,
                    &with_self_loops(adj),
                    &vars,
                    Activation::Elu,
                    true,
                )
                .unwrap();
                (tape.value(gcn_out).clone(), tape.value(gat_out.out).clone())
            };

            let (gcn_base, gat_base) = run(&a, &xs);
            let (gcn_perm, gat_perm) = run(&pa, &px);
            let gcn_expect = matmul_raw(&p, &gcn_base);
            let gat_expect = matmul_raw(&p, &gat_base);
            assert!(
                gcn_perm.max_abs_diff(&gcn_expect) < 1e-9,
                "trial {trial}: gcn broke equivariance"
            );
            assert!(
                gat_perm.max_abs_diff(&gat_expect) < 1e-9,
                "trial {trial}: gat broke equivariance"
            );
        }
    }

    #[test]
    fn two_heads_concatenate_feature_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d) = (4, 4);
        let a = random_graph(&mut rng, n, 0.7);
        let support = with_self_loops(&a);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::gaussian(n, d, 1.0, &mut rng), false);
        let h0 = gat_head(&mut tape, d, 3, 2, &mut rng);
        let h1 = gat_head(&mut tape, d, 3, 2, &mut rng);
        let both = GatLayerVars { heads: vec![h0, h1] };
        let got = gat_layer(&mut tape, x, &support, &both, Activation::Elu, false).unwrap();
        assert_eq!(tape.value(got.out).shape(), &[n, 4]);

        let solo0 = GatLayerVars { heads: vec![h0] };
        let only0 = gat_layer(&mut tape, x, &support, &solo0, Activation::Elu, false).unwrap();
        for i in 0..n {
            for j in 0..2 {
                assert_eq!(tape.value(got.out).at(i, j), tape.value(only0.out).at(i, j));
            }
        }
    }
}
