//! Graph-level objectives and their metrics.
//!
//! Each task owns one virtual node. Classification reads that node
//! through a linear head into class logits; the edit-distance task
//! compares raw embeddings between graphs, trained with a margin loss
//! over generated triplets and scored by pair AUC and triplet accuracy.

use crate::graph::GraphInstance;
use crate::tensor::{Tape, Var};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a task head looks like and how its loss is parameterized.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    /// Linear head into `classes` logits, cross-entropy loss.
    Classification { classes: usize },
    /// No head; the embedding itself is compared, margin `gamma`.
    Ged { gamma: f64 },
}

/// One named task. The name doubles as the label key for classification
/// datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
}

impl TaskSpec {
    pub fn classification(name: impl Into<String>, classes: usize) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::Classification { classes },
        }
    }

    pub fn ged(name: impl Into<String>, gamma: f64) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::Ged { gamma },
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.kind, TaskKind::Classification { .. })
    }
}

/// Cross-entropy of `head(x_g)` against `label`. `x_g` is one embedding
/// row, `head` the task's linear layer.
pub fn classification_loss(tape: &mut Tape, x_g: Var, head: Var, label: usize) -> Result<Var> {
    let logits = tape.matmul(x_g, head)?;
    tape.cross_entropy_from_logits(logits, label)
}

/// Arithmetic mean of the per-task losses.
pub fn multitask_loss(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    tape.mean_scalars(losses)
}

/// An anchor graph with an edit-near positive and an edit-far negative.
#[derive(Debug, Clone)]
pub struct GedTriplet {
    pub anchor: GraphInstance,
    pub positive: GraphInstance,
    pub negative: GraphInstance,
    pub k_p: usize,
    pub k_n: usize,
}

/// Builds a triplet by edge substitution: the positive replaces `k_p`
/// edges of the anchor, the negative replaces `k_n`, with `k_p < k_n` so
/// the positive is the closer graph by construction. Each variant
/// removes `k` distinct anchor edges and adds `k` distinct anchor
/// non-edges (all weight 1), so node count and edge count are preserved
/// and the edge-set symmetric difference is exactly `2k`. Deterministic
/// for a given seed.
pub fn gen_ged_triplet(g: &GraphInstance, k_p: usize, k_n: usize, seed: u64) -> Result<GedTriplet> {
    if k_p < 1 || k_p >= k_n {
        return Err(Error::Invalid(format!(
            "edit counts must satisfy 1 <= k_p < k_n, got k_p={k_p}, k_n={k_n}"
        )));
    }
    let n = g.node_count();
    let mut present = Vec::new();
    let mut absent = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if g.adjacency.at(i, j) != 0.0 {
                present.push((i, j));
            } else {
                absent.push((i, j));
            }
        }
    }
    if present.len() < k_n || absent.len() < k_n {
        return Err(Error::Invalid(format!(
            "graph has {} edges and {} absent pairs; {k_n} substitutions need both",
            present.len(),
            absent.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let substitute = |k: usize, rng: &mut ChaCha8Rng| -> GraphInstance {
        let removed = rand::seq::index::sample(rng, present.len(), k);
        let added = rand::seq::index::sample(rng, absent.len(), k);
        let mut edited = g.clone();
        for idx in removed.iter() {
            let (i, j) = present[idx];
            edited.adjacency.set(i, j, 0.0);
            edited.adjacency.set(j, i, 0.0);
        }
        for idx in added.iter() {
            let (i, j) = absent[idx];
            edited.adjacency.set(i, j, 1.0);
            edited.adjacency.set(j, i, 1.0);
        }
        edited
    };
    let positive = substitute(k_p, &mut rng);
    let negative = substitute(k_n, &mut rng);
    Ok(GedTriplet {
        anchor: g.clone(),
        positive,
        negative,
        k_p,
        k_n,
    })
}

/// Margin loss over embedding rows: `max(0, gamma + |e_a - e_p|^2 -
/// |e_a - e_n|^2)`. Zero exactly when the negative sits at least
/// `gamma` further (in squared distance) than the positive.
pub fn ged_margin_loss(tape: &mut Tape, e_a: Var, e_p: Var, e_n: Var, gamma: f64) -> Result<Var> {
    let squared_distance = |tape: &mut Tape, a: Var, b: Var| -> Result<Var> {
        let diff = tape.sub(a, b)?;
        let sq = tape.mul(diff, diff)?;
        Ok(tape.sum(sq))
    };
    let d_pos = squared_distance(tape, e_a, e_p)?;
    let d_neg = squared_distance(tape, e_a, e_n)?;
    let gap = tape.sub(d_pos, d_neg)?;
    let shifted = tape.affine(gap, 1.0, gamma);
    Ok(tape.relu(shifted))
}

/// Mann-Whitney statistic: the fraction of (similar, dissimilar) pairs
/// where the similar one scores strictly higher, ties counting one
/// half. Computed through average ranks; `labels[i]` marks score `i` as
/// a similar pair. Both classes must be present.
pub fn pair_auc(similarities: &[f64], labels: &[bool]) -> Result<f64> {
    if similarities.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores against {} labels",
            similarities.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&b| b).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(
            "pair AUC needs both a similar and a dissimilar example".into(),
        ));
    }
    let mut order: Vec<usize> = (0..similarities.len()).collect();
    order.sort_by(|&a, &b| {
        similarities[a]
            .partial_cmp(&similarities[b])
            .expect("similarities must be finite")
    });
    // Average ranks across tie groups, then the rank-sum identity.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && similarities[order[j]] == similarities[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let wins = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(wins / (n_pos * n_neg) as f64)
}

/// Fraction of triplets whose positive distance is strictly below the
/// negative distance; ties count as incorrect.
pub fn triplet_accuracy(distances: &[(f64, f64)]) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::Invalid("no triplets to score".into()));
    }
    let correct = distances.iter().filter(|(p, n)| p < n).count();
    Ok(correct as f64 / distances.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn zero_head_costs_ln_c() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 4, vec![0.3, -0.2, 0.9, 0.1]).unwrap(), true);
        let head = tape.leaf(Tensor::zeros(vec![4, 3]), true);
        let loss = classification_loss(&mut tape, x, head, 1).unwrap();
        assert!((tape.value(loss).data()[0] - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logit_costs_nothing() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 1, vec![50.0]).unwrap(), false);
        let head = tape.leaf(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap(), false);
        let loss = classification_loss(&mut tape, x, head, 0).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-8);
    }

    #[test]
    fn classification_loss_composes_head_and_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::gaussian(1, 5, 1.0, &mut rng), false);
        let head = tape.leaf(Tensor::gaussian(5, 3, 1.0, &mut rng), false);
        let loss = classification_loss(&mut tape, x, head, 2).unwrap();
        let logits = tape.matmul(x, head).unwrap();
        let direct = tape.cross_entropy_from_logits(logits, 2).unwrap();
        assert_eq!(tape.value(loss).data()[0], tape.value(direct).data()[0]);
    }

    #[test]
    fn classification_loss_rejects_out_of_range_labels() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2]), false);
        let head = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        assert!(matches!(
            classification_loss(&mut tape, x, head, 3),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn multitask_loss_is_the_mean_with_uniform_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(0.4), true);
        let b = tape.leaf(Tensor::scalar(0.6), true);
        let mean = multitask_loss(&mut tape, &[a, b]).unwrap();
        assert!((tape.value(mean).data()[0] - 0.5).abs() < 1e-15);
        tape.backward(mean).unwrap();
        assert_eq!(tape.grad(a).data()[0], 0.5);
        assert_eq!(tape.grad(b).data()[0], 0.5);

        let single = multitask_loss(&mut tape, &[a]).unwrap();
        assert_eq!(tape.value(single).data()[0], 0.4);
        assert!(multitask_loss(&mut tape, &[]).is_err());
    }

    fn ring(n: usize) -> GraphInstance {
        let mut a = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            let j = (i + 1) % n;
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        GraphInstance {
            adjacency: a,
            features: Tensor::full(vec![n, 1], 1.0),
            labels: Default::default(),
        }
    }

    fn edge_set(g: &GraphInstance) -> BTreeSet<(usize, usize)> {
        let n = g.node_count();
        let mut out = BTreeSet::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if g.adjacency.at(i, j) != 0.0 {
                    out.insert((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn one_substitution_flips_exactly_one_edge_pair() {
        let g = ring(8);
        for seed in 0..30 {
            let t = gen_ged_triplet(&g, 1, 3, seed).unwrap();
            let anchor = edge_set(&t.anchor);
            let positive = edge_set(&t.positive);
            assert_eq!(anchor.symmetric_difference(&positive).count(), 2);
            let negative = edge_set(&t.negative);
            assert_eq!(anchor.symmetric_difference(&negative).count(), 6);
            // Substitution preserves both counts.
            assert_eq!(t.positive.node_count(), g.node_count());
            assert_eq!(t.positive.edge_count(), g.edge_count());
            assert_eq!(t.negative.edge_count(), g.edge_count());
            t.positive.validate().unwrap();
            t.negative.validate().unwrap();
        }
    }

    #[test]
    fn triplets_are_deterministic_per_seed() {
        let g = ring(10);
        let a = gen_ged_triplet(&g, 2, 4, 99).unwrap();
        let b = gen_ged_triplet(&g, 2, 4, 99).unwrap();
        assert!(a.positive.adjacency.max_abs_diff(&b.positive.adjacency) == 0.0);
        assert!(a.negative.adjacency.max_abs_diff(&b.negative.adjacency) == 0.0);
        let c = gen_ged_triplet(&g, 2, 4, 100).unwrap();
        assert!(
            a.positive.adjacency.max_abs_diff(&c.positive.adjacency) > 0.0
                || a.negative.adjacency.max_abs_diff(&c.negative.adjacency) > 0.0
        );
    }

    #[test]
    fn triplet_preconditions_are_enforced() {
        let g = ring(8);
        assert!(gen_ged_triplet(&g, 0, 2, 1).is_err());
        assert!(gen_ged_triplet(&g, 2, 2, 1).is_err());
        // A ring of 8 has 8 edges; asking for 9 substitutions fails.
        assert!(gen_ged_triplet(&g, 1, 9, 1).is_err());
        // A 3-clique has no absent pairs at all.
        let mut full = Tensor::zeros(vec![3, 3]);
        for &(i, j) in &[(0, 1), (1, 2), (0, 2)] {
            full.set(i, j, 1.0);
            full.set(j, i, 1.0);
        }
        let clique = GraphInstance {
            adjacency: full,
            features: Tensor::full(vec![3, 1], 1.0),
            labels: Default::default(),
        };
        assert!(gen_ged_triplet(&clique, 1, 2, 1).is_err());
    }

    #[test]
    fn margin_loss_matches_the_hand_cases() {
        let mut tape = Tape::new();
        let zero = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), false);
        let e_p = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), false);
        let e_n = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap(), false);
        // gamma + 1 - 4 < 0: margin met.
        let l = ged_margin_loss(&mut tape, zero, e_p, e_n, 1.0).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);

        // Positive equals negative: loss is exactly gamma.
        let l2 = ged_margin_loss(&mut tape, zero, e_p, e_p, 0.7).unwrap();
        assert!((tape.value(l2).data()[0] - 0.7).abs() < 1e-15);

        // Positive at the anchor, negative at squared distance 2 gamma.
        let far = tape.leaf(Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap(), false);
        let l3 = ged_margin_loss(&mut tape, zero, zero, far, 2.0).unwrap();
        assert_eq!(tape.value(l3).data()[0], 0.0);
    }

    proptest! {
        #[test]
        fn margin_loss_is_nonnegative_and_zero_iff_met(
            a in proptest::collection::vec(-2.0f64..2.0, 3),
            p in proptest::collection::vec(-2.0f64..2.0, 3),
            n in proptest::collection::vec(-2.0f64..2.0, 3),
            gamma in 0.1f64..3.0,
        ) {
            let mut tape = Tape::new();
            let va = tape.leaf(Tensor::matrix(1, 3, a.clone()).unwrap(), false);
            let vp = tape.leaf(Tensor::matrix(1, 3, p.clone()).unwrap(), false);
            let vn = tape.leaf(Tensor::matrix(1, 3, n.clone()).unwrap(), false);
            let loss = ged_margin_loss(&mut tape, va, vp, vn, gamma).unwrap();
            let got = tape.value(loss).data()[0];
            let d = |x: &[f64], y: &[f64]| -> f64 {
                x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum()
            };
            let slack = gamma + d(&a, &p) - d(&a, &n);
            prop_assert!(got >= 0.0);
            if slack > 1e-12 {
                prop_assert!((got - slack).abs() < 1e-12);
            } else if slack < -1e-12 {
                prop_assert_eq!(got, 0.0);
            }
        }

        #[test]
        fn pair_auc_is_a_rank_statistic(
            scores in proptest::collection::vec(-5.0f64..5.0, 4..40),
            flags in proptest::collection::vec(any::<bool>(), 4..40),
        ) {
            let n = scores.len().min(flags.len());
            let scores = &scores[..n];
            let mut labels = flags[..n].to_vec();
            labels[0] = true;
            labels[1] = false;
            let auc = pair_auc(scores, &labels).unwrap();

            // Brute-force pair counting oracle.
            let mut wins = 0.0;
            let mut total = 0.0;
            for (i, &li) in labels.iter().enumerate() {
                if !li { continue; }
                for (j, &lj) in labels.iter().enumerate() {
                    if lj { continue; }
                    total += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
            prop_assert_eq!(auc, wins / total);

            // Invariance under a strictly increasing transform.
            let warped: Vec<f64> = scores.iter().map(|&v| v.exp() + 0.3 * v).collect();
            prop_assert_eq!(pair_auc(&warped, &labels).unwrap(), auc);
        }
    }

    #[test]
    fn pair_auc_frozen_examples() {
        assert_eq!(pair_auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(pair_auc(&[0.9, 0.8, 0.1], &[false, false, true]).unwrap(), 0.0);
        assert_eq!(pair_auc(&[0.7, 0.2, 0.5], &[true, true, false]).unwrap(), 0.5);
        assert!(pair_auc(&[0.5, 0.6], &[true, true]).is_err());
    }

    #[test]
    fn triplet_accuracy_counts_strict_wins() {
        assert_eq!(triplet_accuracy(&[(1.0, 2.0), (0.1, 0.2)]).unwrap(), 1.0);
        assert_eq!(triplet_accuracy(&[(1.0, 1.0), (2.0, 2.0)]).unwrap(), 0.0);
        assert_eq!(triplet_accuracy(&[(1.0, 2.0), (3.0, 1.0)]).unwrap(), 0.5);
        assert!(triplet_accuracy(&[]).is_err());
    }

    #[test]
    fn margin_loss_gradients_match_central_differences() {
        use crate::tensor::gradcheck::{central_difference, max_relative_error};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let d = 4;
            let a0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let run = |av: &[f64], pv: &[f64], nv: &[f64]| -> (f64, Vec<f64>) {
                let mut tape = Tape::new();
                let a = tape.leaf(Tensor::matrix(1, d, av.to_vec()).unwrap(), true);
                let p = tape.leaf(Tensor::matrix(1, d, pv.to_vec()).unwrap(), true);
                let n = tape.leaf(Tensor::matrix(1, d, nv.to_vec()).unwrap(), true);
                let loss = ged_margin_loss(&mut tape, a, p, n, 1.0).unwrap();
                let v = tape.value(loss).data()[0];
                tape.backward(loss).unwrap();
                let mut g = Vec::new();
                for var in [a, p, n] {
                    g.extend_from_slice(tape.grad(var).data());
                }
                (v, g)
            };
            let (value, analytic) = run(&a0, &p0, &n0);
            // Skip configurations at the hinge kink, where one-sided
            // derivatives differ and the check is meaningless.
            if value.abs() < 1e-3 {
                continue;
            }
            let mut flat = a0.clone();
            flat.extend_from_slice(&p0);
            flat.extend_from_slice(&n0);
            let numeric = central_difference(
                |x: &[f64]| run(&x[..d], &x[d..2 * d], &x[2 * d..]).0,
                &flat,
                1e-6,
            );
            assert!(max_relative_error(&analytic, &numeric) < 1e-4);
        }
    }
}
