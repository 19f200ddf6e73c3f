//! CSV and plain-text emission for run results.
//!
//! Every CSV has a header row. Floats are written with Rust's shortest
//! round-trip formatting, so a file regenerated from the same numbers
//! is byte-identical.

use crate::bench::{AttentivenessExport, BenchRecord};
use crate::dropping::NodeOrigin;
use crate::graph::GraphSet;
use crate::model::StagePlan;
use crate::trainer::{MetricRow, RunReport};
use crate::Result;
use std::fmt::Write as _;
use std::path::Path;

pub fn metric_rows_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("fold,epoch,task,metric,value\n");
    for r in rows {
        let epoch = r.epoch.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.fold, epoch, r.task, r.metric, r.value);
    }
    out
}

pub fn write_metric_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metric_rows_csv(rows))?;
    Ok(())
}

pub fn bench_records_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(
        "fingerprint,strategy,ratio,layers,hidden,batch_size,flops_per_batch,peak_elements,batches_per_sec,accuracy\n",
    );
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.fingerprint,
            r.strategy,
            r.ratio,
            r.layers,
            r.hidden,
            r.batch_size,
            r.flops_per_batch,
            r.peak_elements,
            r.batches_per_sec,
            r.accuracy
        );
    }
    out
}

pub fn write_bench_records(path: &Path, records: &[BenchRecord]) -> Result<()> {
    std::fs::write(path, bench_records_csv(records))?;
    Ok(())
}

/// One row per (graph, node), one rank column per task.
pub fn attentiveness_csv(export: &AttentivenessExport) -> String {
    let tasks = export.rows.first().map_or(0, |r| r.ranks.len());
    let mut out = String::from("graph,node");
    for t in 0..tasks {
        let _ = write!(out, ",rank_task{}", t + 1);
    }
    out.push('\n');
    for r in &export.rows {
        let _ = write!(out, "{},{}", r.graph, r.node);
        for rank in &r.ranks {
            let _ = write!(out, ",{rank}");
        }
        out.push('\n');
    }
    out
}

pub fn write_attentiveness(path: &Path, export: &AttentivenessExport) -> Result<()> {
    std::fs::write(path, attentiveness_csv(export))?;
    Ok(())
}

/// Executed drop stages, one row per scored node: which stage looked at
/// it, its attentiveness, and whether it was dropped. Nodes are named
/// by original index; a stand-in from an earlier stage shows up as
/// `fused<stage>`.
pub fn drop_plans_csv(plans_per_graph: &[Vec<StagePlan>]) -> String {
    let mut out = String::from("graph,stage,node,s,dropped\n");
    for (g, stages) in plans_per_graph.iter().enumerate() {
        for (stage, sp) in stages.iter().enumerate() {
            for (i, &s) in sp.plan.s.iter().enumerate() {
                let node = match sp.origins[i] {
                    NodeOrigin::Raw(orig) => orig.to_string(),
                    NodeOrigin::Fused(from) => format!("fused{from}"),
                    NodeOrigin::Virtual(k) => format!("virtual{k}"),
                };
                let dropped = sp.plan.dropped.binary_search(&i).is_ok();
                let _ = writeln!(out, "{g},{stage},{node},{s},{dropped}");
            }
        }
    }
    out
}

pub fn write_drop_plans(path: &Path, plans_per_graph: &[Vec<StagePlan>]) -> Result<()> {
    std::fs::write(path, drop_plans_csv(plans_per_graph))?;
    Ok(())
}

pub fn graphset_summary_csv(set: &GraphSet) -> String {
    let mut out = String::from("name,nodes,edges,label\n");
    for (i, g) in set.graphs.iter().enumerate() {
        let label = g.class_label().map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{}/{i},{},{},{label}",
            set.name,
            g.node_count(),
            g.edge_count()
        );
    }
    out
}

pub fn write_graphset_summary(path: &Path, set: &GraphSet) -> Result<()> {
    std::fs::write(path, graphset_summary_csv(set))?;
    Ok(())
}

/// The human-readable side of a report: one `metric: mean +/- std` line
/// per aggregate, in name order.
pub fn summary_text(report: &RunReport) -> String {
    let mut out = String::new();
    for (name, agg) in &report.summary {
        let _ = writeln!(out, "{name}: {:.4} +/- {:.4}", agg.mean, agg.std);
    }
    out
}
