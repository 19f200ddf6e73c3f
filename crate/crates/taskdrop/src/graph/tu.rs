//! Reader for the TU collection's plain-text graph format.
//!
//! A dataset `DS` in directory `dir` is the file family:
//!
//! * `DS_A.txt` - one `i, j` edge per line, node ids 1-based over the
//!   whole collection;
//! * `DS_graph_indicator.txt` - line `n` holds the graph id of node `n`;
//! * `DS_graph_labels.txt` - line `g` holds the class of graph `g`;
//! * `DS_node_labels.txt` - optional, line `n` holds a discrete node label.
//!
//! Graph labels are remapped to contiguous 0-based classes in sorted
//! order. Node labels become one-hot features over the label alphabet of
//! the whole dataset; without them every node gets the single constant
//! feature `1.0`. Edges are symmetrized with weight `1.0`; self-loop lines
//! are dropped so the diagonal stays zero. Continuous node or edge
//! attribute files are ignored.

use super::{GraphInstance, GraphSet, CLASSIFICATION};
use crate::tensor::Tensor;
use crate::{Error, Result};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Ingestion {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

fn parse_int(path: &Path, line_no: usize, field: &str) -> Result<i64> {
    field.trim().parse::<i64>().map_err(|_| Error::DataFormat {
        path: path.display().to_string(),
        line: line_no,
        message: format!("expected an integer, got {field:?}"),
    })
}

/// Loads dataset `name` from `dir` into a validated [`GraphSet`].
pub fn parse_tu_dataset(dir: &Path, name: &str) -> Result<GraphSet> {
    let file = |suffix: &str| dir.join(format!("{name}_{suffix}.txt"));

    // Node -> graph memberships define node counts and index bases.
    let indicator_path = file("graph_indicator");
    let indicator = read_lines(&indicator_path)?;
    let mut node_graph = Vec::with_capacity(indicator.len());
    for (i, line) in indicator.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let gid = parse_int(&indicator_path, i + 1, line)?;
        if gid < 1 {
            return Err(Error::DataFormat {
                path: indicator_path.display().to_string(),
                line: i + 1,
                message: format!("graph ids are 1-based, got {gid}"),
            });
        }
        node_graph.push(gid as usize - 1);
    }
    let total_nodes = node_graph.len();
    let graph_count = node_graph.iter().copied().max().map_or(0, |m| m + 1);
    if graph_count == 0 {
        return Err(Error::DataFormat {
            path: indicator_path.display().to_string(),
            line: 1,
            message: "dataset has no nodes".into(),
        });
    }

    let mut sizes = vec![0usize; graph_count];
    for &g in &node_graph {
        sizes[g] += 1;
    }
    // First global node id of each graph; nodes of one graph are
    // consecutive in this format.
    let mut base = vec![0usize; graph_count];
    for g in 1..graph_count {
        base[g] = base[g - 1] + sizes[g - 1];
    }
    let local_of = |node: usize| node - base[node_graph[node]];

    // Graph labels, remapped to 0-based contiguous classes.
    let labels_path = file("graph_labels");
    let label_lines = read_lines(&labels_path)?;
    let mut raw_labels = Vec::with_capacity(graph_count);
    for (i, line) in label_lines.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        raw_labels.push(parse_int(&labels_path, i + 1, line)?);
    }
    if raw_labels.len() != graph_count {
        return Err(Error::DataFormat {
            path: labels_path.display().to_string(),
            line: raw_labels.len() + 1,
            message: format!("{} labels for {graph_count} graphs", raw_labels.len()),
        });
    }
    let alphabet: BTreeSet<i64> = raw_labels.iter().copied().collect();
    let class_of: BTreeMap<i64, usize> = alphabet.iter().enumerate().map(|(c, &l)| (l, c)).collect();
    let classes = class_of.len();

    // Optional node labels drive one-hot features.
    let node_labels_path = file("node_labels");
    let features_per_graph: Vec<Tensor> = if node_labels_path.exists() {
        let lines = read_lines(&node_labels_path)?;
        let mut raw = Vec::with_capacity(total_nodes);
        for (i, line) in lines.iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            raw.push(parse_int(&node_labels_path, i + 1, line)?);
        }
        if raw.len() != total_nodes {
            return Err(Error::DataFormat {
                path: node_labels_path.display().to_string(),
                line: raw.len() + 1,
                message: format!("{} node labels for {total_nodes} nodes", raw.len()),
            });
        }
        let alphabet: BTreeSet<i64> = raw.iter().copied().collect();
        let hot_of: BTreeMap<i64, usize> =
            alphabet.iter().enumerate().map(|(c, &l)| (l, c)).collect();
        let width = hot_of.len();
        let mut feats: Vec<Tensor> = sizes.iter().map(|&n| Tensor::zeros(vec![n, width])).collect();
        for (node, &label) in raw.iter().enumerate() {
            let g = node_graph[node];
            feats[g].set(local_of(node), hot_of[&label], 1.0);
        }
        feats
    } else {
        sizes.iter().map(|&n| Tensor::full(vec![n, 1], 1.0)).collect()
    };
    let feature_dim = features_per_graph.first().map_or(1, |f| f.cols());

    // Edges: 1-based global ids, symmetrized at weight 1.0.
    let mut adjacency: Vec<Tensor> = sizes.iter().map(|&n| Tensor::zeros(vec![n, n])).collect();
    let edges_path = file("A");
    let edge_lines = read_lines(&edges_path)?;
    for (i, line) in edge_lines.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let line_no = i + 1;
        let mut parts = line.split(',');
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::DataFormat {
                    path: edges_path.display().to_string(),
                    line: line_no,
                    message: format!("expected \"i, j\", got {line:?}"),
                })
            }
        };
        let u = parse_int(&edges_path, line_no, a)?;
        let v = parse_int(&edges_path, line_no, b)?;
        for id in [u, v] {
            if id < 1 || id as usize > total_nodes {
                return Err(Error::DataFormat {
                    path: edges_path.display().to_string(),
                    line: line_no,
                    message: format!("node id {id} outside 1..={total_nodes}"),
                });
            }
        }
        let (u, v) = (u as usize - 1, v as usize - 1);
        if node_graph[u] != node_graph[v] {
            return Err(Error::DataFormat {
                path: edges_path.display().to_string(),
                line: line_no,
                message: format!(
                    "edge joins graph {} and graph {}",
                    node_graph[u] + 1,
                    node_graph[v] + 1
                ),
            });
        }
        if u == v {
            continue; // keep the diagonal zero
        }
        let g = node_graph[u];
        let (lu, lv) = (local_of(u), local_of(v));
        adjacency[g].set(lu, lv, 1.0);
        adjacency[g].set(lv, lu, 1.0);
    }

    let graphs = adjacency
        .into_iter()
        .zip(features_per_graph)
        .zip(&raw_labels)
        .map(|((adjacency, features), raw)| {
            let mut labels = BTreeMap::new();
            labels.insert(CLASSIFICATION.to_string(), class_of[raw]);
            GraphInstance {
                adjacency,
                features,
                labels,
            }
        })
        .collect();

    let set = GraphSet {
        name: name.to_string(),
        graphs,
        feature_dim,
        classes,
    };
    set.validate()?;
    Ok(set)
}

/// Writes a set back out as the TU file family: edge list (both
/// directions per undirected edge, weights not representable), graph
/// indicator, graph labels, and node labels when every feature row in
/// the set is one-hot. Every graph must carry a classification label.
pub fn write_tu_dataset(set: &GraphSet, dir: &Path, name: &str) -> Result<()> {
    set.validate()?;
    let mut indicator = String::new();
    let mut edges = String::new();
    let mut labels = String::new();
    let mut base = 1usize; // global node ids are 1-based
    for (gi, g) in set.graphs.iter().enumerate() {
        let class = g.class_label().ok_or_else(|| {
            Error::Invalid(format!("graph {gi} has no class label to write"))
        })?;
        labels.push_str(&format!("{class}\n"));
        let n = g.node_count();
        for i in 0..n {
            indicator.push_str(&format!("{}\n", gi + 1));
            for j in (i + 1)..n {
                if g.adjacency.at(i, j) != 0.0 {
                    edges.push_str(&format!("{}, {}\n", base + i, base + j));
                    edges.push_str(&format!("{}, {}\n", base + j, base + i));
                }
            }
        }
        base += n;
    }

    let one_hot_index = |row: &[f64]| -> Option<usize> {
        let mut hot = None;
        for (c, &v) in row.iter().enumerate() {
            if v == 1.0 {
                if hot.is_some() {
                    return None;
                }
                hot = Some(c);
            } else if v != 0.0 {
                return None;
            }
        }
        hot
    };
    let mut node_labels = String::new();
    let all_one_hot = set.graphs.iter().all(|g| {
        (0..g.node_count()).all(|i| match one_hot_index(g.features.row(i)) {
            Some(hot) => {
                node_labels.push_str(&format!("{hot}\n"));
                true
            }
            None => false,
        })
    });

    std::fs::create_dir_all(dir)?;
    let file = |suffix: &str| dir.join(format!("{name}_{suffix}.txt"));
    std::fs::write(file("A"), edges)?;
    std::fs::write(file("graph_indicator"), indicator)?;
    std::fs::write(file("graph_labels"), labels)?;
    if all_one_hot {
        std::fs::write(file("node_labels"), node_labels)?;
    }
    Ok(())
}
