//! Graph data: instances, sets, batching, and fold splits.
//!
//! A [`GraphInstance`] is a dense non-negative adjacency matrix with a
//! zero diagonal, a row-per-node feature matrix, and a map from task name
//! to integer label. A [`GraphSet`] is a list of instances that agree on
//! feature width and (for labeled sets) on a contiguous 0-based class
//! range. Datasets come from the TU text format ([`parse_tu_dataset`]) or
//! the synthetic motif generator ([`make_synthetic`]).

mod synthetic;
mod tu;

pub use synthetic::{make_synthetic, Motif, SyntheticSpec};
pub use tu::{parse_tu_dataset, write_tu_dataset};

use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Task name under which classification labels are stored.
pub const CLASSIFICATION: &str = "classification";

/// One graph: adjacency, node features, and per-task labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInstance {
    /// `N x N`, symmetric support, non-negative, zero diagonal at ingestion.
    pub adjacency: Tensor,
    /// `N x F` node features.
    pub features: Tensor,
    /// Task name to label index.
    pub labels: BTreeMap<String, usize>,
}

impl GraphInstance {
    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Undirected edge count: nonzero entries above the diagonal.
    pub fn edge_count(&self) -> usize {
        let n = self.node_count();
        let mut edges = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adjacency.at(i, j) != 0.0 {
                    edges += 1;
                }
            }
        }
        edges
    }

    pub fn class_label(&self) -> Option<usize> {
        self.labels.get(CLASSIFICATION).copied()
    }

    /// Checks the ingestion invariants: square adjacency matching the
    /// feature rows, finite entries, non-negative weights, zero diagonal,
    /// symmetric support.
    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if self.adjacency.rank() != 2 || self.adjacency.rows() != n || self.adjacency.cols() != n {
            return Err(Error::ShapeMismatch {
                op: "graph",
                a: self.adjacency.shape().to_vec(),
                b: self.features.shape().to_vec(),
            });
        }
        if !self.adjacency.all_finite() || !self.features.all_finite() {
            return Err(Error::NonFinite {
                context: "in graph data".into(),
            });
        }
        for i in 0..n {
            if self.adjacency.at(i, i) != 0.0 {
                return Err(Error::Invalid(format!("self loop at node {i}")));
            }
            for j in 0..n {
                let w = self.adjacency.at(i, j);
                if w < 0.0 {
                    return Err(Error::NegativeWeight { i, j, value: w });
                }
                if (w != 0.0) != (self.adjacency.at(j, i) != 0.0) {
                    return Err(Error::Invalid(format!(
                        "asymmetric edge support between {i} and {j}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A named collection of graphs with shared feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSet {
    pub name: String,
    pub graphs: Vec<GraphInstance>,
    pub feature_dim: usize,
    /// Number of classification classes; zero when the set is unlabeled.
    pub classes: usize,
}

impl GraphSet {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Validates every instance plus the set-level invariants: uniform
    /// feature width and labels inside `0..classes`.
    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.graphs.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::Invalid(format!("graph {i}: {e}")))?;
            if g.feature_dim() != self.feature_dim {
                return Err(Error::Invalid(format!(
                    "graph {i} has feature width {} but the set declares {}",
                    g.feature_dim(),
                    self.feature_dim
                )));
            }
            if let Some(label) = g.class_label() {
                if label >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label,
                        classes: self.classes,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Several graphs packed into one disconnected graph: block-diagonal
/// adjacency, stacked features, and per-graph row ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub adjacency: Tensor,
    pub features: Tensor,
    /// `(first_row, node_count)` per member graph.
    pub ranges: Vec<(usize, usize)>,
    pub labels: Vec<BTreeMap<String, usize>>,
}

impl Batch {
    pub fn member_count(&self) -> usize {
        self.ranges.len()
    }

    /// Extracts member `i` back out of the block structure.
    pub fn member(&self, i: usize) -> GraphInstance {
        let (start, len) = self.ranges[i];
        let f = self.features.cols();
        let mut adjacency = Tensor::zeros(vec![len, len]);
        let mut features = Tensor::zeros(vec![len, f]);
        for r in 0..len {
            for c in 0..len {
                adjacency.set(r, c, self.adjacency.at(start + r, start + c));
            }
            for c in 0..f {
                features.set(r, c, self.features.at(start + r, c));
            }
        }
        GraphInstance {
            adjacency,
            features,
            labels: self.labels[i].clone(),
        }
    }
}

/// Packs graphs into a [`Batch`]. All members must share feature width;
/// rows keep the input order, so unbatching is exact.
pub fn batch_graphs(graphs: &[&GraphInstance]) -> Result<Batch> {
    if graphs.is_empty() {
        return Err(Error::Invalid("cannot batch zero graphs".into()));
    }
    let f = graphs[0].feature_dim();
    let total: usize = graphs.iter().map(|g| g.node_count()).sum();
    let mut adjacency = Tensor::zeros(vec![total, total]);
    let mut features = Tensor::zeros(vec![total, f]);
    let mut ranges = Vec::with_capacity(graphs.len());
    let mut labels = Vec::with_capacity(graphs.len());
    let mut start = 0;
    for g in graphs {
        if g.feature_dim() != f {
            return Err(Error::ShapeMismatch {
                op: "batch_graphs",
                a: vec![f],
                b: vec![g.feature_dim()],
            });
        }
        let n = g.node_count();
        for r in 0..n {
            for c in 0..n {
                let w = g.adjacency.at(r, c);
                if w != 0.0 {
                    adjacency.set(start + r, start + c, w);
                }
            }
            for c in 0..f {
                features.set(start + r, c, g.features.at(r, c));
            }
        }
        ranges.push((start, n));
        labels.push(g.labels.clone());
        start += n;
    }
    Ok(Batch {
        adjacency,
        features,
        ranges,
        labels,
    })
}

/// One cross-validation fold: index lists into the owning set.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits a set into `k` folds, seeded and deterministic. Test folds are
/// disjoint, cover every graph exactly once, and differ in size by at most
/// one. When every graph carries a classification label the split is
/// stratified: each class is shuffled and dealt separately so fold class
/// mixes track the full set.
pub fn kfold_split(set: &GraphSet, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > set.len() {
        return Err(Error::Invalid(format!(
            "need 2 <= k <= {} graphs, got k = {k}",
            set.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stratified = !set.graphs.is_empty() && set.graphs.iter().all(|g| g.class_label().is_some());

    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); k];
    if stratified {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, g) in set.graphs.iter().enumerate() {
            by_class.entry(g.class_label().unwrap()).or_default().push(i);
        }
        for (_, mut members) in by_class {
            members.shuffle(&mut rng);
            for idx in members {
                // Deal each graph to the currently smallest fold; ties go
                // to the lowest fold id, which keeps sizes within one.
                let target = (0..k)
                    .min_by_key(|&f| (fold_members[f].len(), f))
                    .unwrap();
                fold_members[target].push(idx);
            }
        }
    } else {
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng);
        for (pos, idx) in order.into_iter().enumerate() {
            fold_members[pos % k].push(idx);
        }
    }

    let folds = (0..k)
        .map(|f| {
            let mut test = fold_members[f].clone();
            test.sort_unstable();
            let mut train: Vec<usize> = (0..k)
                .filter(|&o| o != f)
                .flat_map(|o| fold_members[o].iter().copied())
                .collect();
            train.sort_unstable();
            Fold { train, test }
        })
        .collect();
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_graph(n: usize, label: usize, weight: f64) -> GraphInstance {
        // Path graph on n nodes with the given edge weight.
        let mut adjacency = Tensor::zeros(vec![n, n]);
        for i in 0..n.saturating_sub(1) {
            adjacency.set(i, i + 1, weight);
            adjacency.set(i + 1, i, weight);
        }
        let mut features = Tensor::zeros(vec![n, 2]);
        for i in 0..n {
            features.set(i, 0, i as f64);
            features.set(i, 1, label as f64);
        }
        let mut labels = BTreeMap::new();
        labels.insert(CLASSIFICATION.to_string(), label);
        GraphInstance {
            adjacency,
            features,
            labels,
        }
    }

    fn tiny_set(sizes_labels: &[(usize, usize)]) -> GraphSet {
        let graphs = sizes_labels
            .iter()
            .map(|&(n, l)| tiny_graph(n, l, 1.0))
            .collect();
        GraphSet {
            name: "tiny".into(),
            graphs,
            feature_dim: 2,
            classes: 2,
        }
    }

    #[test]
    fn validate_catches_negative_weight_and_self_loop() {
        let mut g = tiny_graph(3, 0, 1.0);
        g.adjacency.set(0, 1, -0.5);
        g.adjacency.set(1, 0, -0.5);
        assert!(matches!(
            g.validate(),
            Err(Error::NegativeWeight { i: 0, j: 1, .. })
        ));
        let mut g = tiny_graph(3, 0, 1.0);
        g.adjacency.set(2, 2, 1.0);
        assert!(g.validate().is_err());
    }

    #[test]
    fn batch_is_block_diagonal_and_round_trips() {
        let a = tiny_graph(2, 0, 1.0);
        let b = tiny_graph(3, 1, 0.5);
        let batch = batch_graphs(&[&a, &b]).unwrap();
        assert_eq!(batch.adjacency.shape(), &[5, 5]);
        assert_eq!(batch.ranges, vec![(0, 2), (2, 3)]);
        // No cross-member edges anywhere.
        for i in 0..2 {
            for j in 2..5 {
                assert_eq!(batch.adjacency.at(i, j), 0.0);
                assert_eq!(batch.adjacency.at(j, i), 0.0);
            }
        }
        assert_eq!(batch.member(0), a);
        assert_eq!(batch.member(1), b);
    }

    #[test]
    fn batch_rejects_mixed_feature_widths() {
        let a = tiny_graph(2, 0, 1.0);
        let mut b = tiny_graph(2, 1, 1.0);
        b.features = Tensor::zeros(vec![2, 3]);
        assert!(batch_graphs(&[&a, &b]).is_err());
    }

    #[test]
    fn kfold_is_a_deterministic_partition() {
        let set = tiny_set(&[(3, 0); 23].map(|(n, _)| (n, 0)));
        let folds = kfold_split(&set, 5, 9).unwrap();
        let again = kfold_split(&set, 5, 9).unwrap();
        assert_eq!(folds, again);
        let mut seen: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
        for f in &folds {
            assert!(f.test.len() == 4 || f.test.len() == 5);
            assert_eq!(f.train.len() + f.test.len(), 23);
            assert!(f.test.iter().all(|i| !f.train.contains(i)));
        }
    }

    #[test]
    fn kfold_different_seeds_differ() {
        let set = tiny_set(&[(3, 0); 30].map(|(n, _)| (n, 0)));
        let a = kfold_split(&set, 3, 1).unwrap();
        let b = kfold_split(&set, 3, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn kfold_stratifies_when_labels_cover_the_set() {
        // 40 of class 0, 20 of class 1, k = 4: every fold gets exactly
        // 10 + 5.
        let mut spec = Vec::new();
        spec.extend(std::iter::repeat((3usize, 0usize)).take(40));
        spec.extend(std::iter::repeat((3usize, 1usize)).take(20));
        let set = tiny_set(&spec);
        let folds = kfold_split(&set, 4, 7).unwrap();
        for f in &folds {
            let ones = f
                .test
                .iter()
                .filter(|&&i| set.graphs[i].class_label() == Some(1))
                .count();
            assert_eq!(f.test.len(), 15);
            assert_eq!(ones, 5);
        }
    }

    #[test]
    fn kfold_sizes_stay_within_one_under_awkward_remainders() {
        // Two classes with remainder 4 each under k = 10 would pile up to
        // size-gap 2 if extras always landed on the lowest folds.
        let mut spec = Vec::new();
        spec.extend(std::iter::repeat((2usize, 0usize)).take(24));
        spec.extend(std::iter::repeat((2usize, 1usize)).take(14));
        let set = tiny_set(&spec);
        let folds = kfold_split(&set, 10, 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1, "sizes {sizes:?}");
    }

    #[test]
    fn kfold_fold_sizes_for_a_1178_graph_two_class_set() {
        // A two-class set of 1178 graphs split ten ways must come out in
        // test folds of 117 or 118.
        let mut spec = Vec::new();
        spec.extend(std::iter::repeat((2usize, 0usize)).take(691));
        spec.extend(std::iter::repeat((2usize, 1usize)).take(487));
        let set = tiny_set(&spec);
        let folds = kfold_split(&set, 10, 0).unwrap();
        for f in &folds {
            assert!(
                f.test.len() == 117 || f.test.len() == 118,
                "fold size {}",
                f.test.len()
            );
        }
    }

    #[test]
    fn kfold_rejects_bad_k() {
        let set = tiny_set(&[(2, 0), (2, 1), (2, 0)]);
        assert!(kfold_split(&set, 1, 0).is_err());
        assert!(kfold_split(&set, 4, 0).is_err());
        assert!(kfold_split(&set, 3, 0).is_ok());
    }
}
