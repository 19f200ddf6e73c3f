//! Run configuration: a flat `key = value` file format with `#`
//! comments, a typed view over it, and builders for the model spec,
//! trainer knobs, and dataset it describes.
//!
//! Every key has a default, so an empty file is a valid configuration;
//! [`RunConfig::to_text`] writes the complete effective configuration
//! back out, which is what lands in a run directory. [`KEY_DOCS`] is
//! the single source for `--help`.

use crate::backbone::Activation;
use crate::dropping::LambdaSource;
use crate::graph::{make_synthetic, parse_tu_dataset, GraphSet, Motif, SyntheticSpec, CLASSIFICATION};
use crate::model::{Backbone, ModelSpec, Selection};
use crate::tasks::TaskSpec;
use crate::trainer::TrainConfig;
use crate::{Error, Result};
use std::path::Path;

/// Every configuration key with its documentation line, in file order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("run.name", "run directory name under the output root (default: run)"),
    ("data.source", "dataset source: synthetic | tu (default: synthetic)"),
    ("data.dir", "directory holding the TU file family (tu source only)"),
    ("data.name", "TU dataset name, the file prefix (tu source only)"),
    ("synth.motifs", "comma list of planted motifs, one class each: clique<k>, star<k>, cycle<k> (default: clique3,star5)"),
    ("synth.per_class", "synthetic graphs per class (default: 100)"),
    ("synth.min_nodes", "smallest synthetic graph (default: 20)"),
    ("synth.max_nodes", "largest synthetic graph (default: 40)"),
    ("synth.noise", "background edge probability (default: 0.05)"),
    ("synth.seed", "synthetic generator seed (default: 7)"),
    ("model.backbone", "propagation rule: gat | gcn (default: gat)"),
    ("model.layers", "propagation layer count (default: 3)"),
    ("model.hidden", "hidden feature width (default: 64)"),
    ("model.att_dim", "attention projection width; 0 means hidden (default: 0)"),
    ("model.heads", "attention heads, gat only (default: 1)"),
    ("model.alpha", "uniform drop ratio, applied at every layer but the last (default: 0.5)"),
    ("model.alphas", "explicit per-layer drop ratios, comma list; overrides model.alpha when set"),
    ("model.activation", "layer activation: elu | relu | linear (default: elu)"),
    ("model.lambda_source", "fusion weight source: post-softmax | pre-softmax (default: post-softmax)"),
    ("model.edge_prior", "feed rewired edge weights into attention as a log prior: true | false (default: false)"),
    ("tasks", "comma list of task heads: classification, ged (default: classification)"),
    ("ged.margin", "margin of the distance triplet loss (default: 1.0)"),
    ("ged.kp", "edge substitutions for the positive example (default: 1)"),
    ("ged.kn", "edge substitutions for the negative example (default: 3)"),
    ("train.lr", "Adam learning rate (default: 0.001)"),
    ("train.weight_decay", "decoupled weight decay (default: 0.0008)"),
    ("train.batch", "graphs per optimizer step (default: 8)"),
    ("train.epochs", "epoch budget (default: 50)"),
    ("train.patience", "epochs without improvement before early stop (default: 10)"),
    ("train.min_delta", "loss drop that counts as improvement (default: 0.0001)"),
    ("train.dropout", "connection dropout rate between layers (default: 0.2)"),
    ("train.folds", "cross-validation folds (default: 10)"),
    ("train.seed", "master seed for init, shuffling, dropout, folds (default: 0)"),
    ("train.selection", "drop-stage selection: attentive | random (default: attentive)"),
    ("bench.ratios", "drop ratios a sweep visits, comma list (default: 0.1,0.5,0.9)"),
];

/// The typed view of a configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_name: String,
    pub data_source: String,
    pub data_dir: String,
    pub data_name: String,
    pub synth_motifs: String,
    pub synth_per_class: usize,
    pub synth_min_nodes: usize,
    pub synth_max_nodes: usize,
    pub synth_noise: f64,
    pub synth_seed: u64,
    pub backbone: String,
    pub layers: usize,
    pub hidden: usize,
    pub att_dim: usize,
    pub heads: usize,
    pub alpha: f64,
    pub alphas: String,
    pub activation: String,
    pub lambda_source: String,
    pub edge_prior: bool,
    pub tasks: String,
    pub ged_margin: f64,
    pub ged_kp: usize,
    pub ged_kn: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub dropout: f64,
    pub folds: usize,
    pub seed: u64,
    pub selection: String,
    pub bench_ratios: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_name: "run".into(),
            data_source: "synthetic".into(),
            data_dir: String::new(),
            data_name: String::new(),
            synth_motifs: "clique3,star5".into(),
            synth_per_class: 100,
            synth_min_nodes: 20,
            synth_max_nodes: 40,
            synth_noise: 0.05,
            synth_seed: 7,
            backbone: "gat".into(),
            layers: 3,
            hidden: 64,
            att_dim: 0,
            heads: 1,
            alpha: 0.5,
            alphas: String::new(),
            activation: "elu".into(),
            lambda_source: "post-softmax".into(),
            edge_prior: false,
            tasks: "classification".into(),
            ged_margin: 1.0,
            ged_kp: 1,
            ged_kn: 3,
            lr: 1e-3,
            weight_decay: 8e-4,
            batch: 8,
            epochs: 50,
            patience: 10,
            min_delta: 1e-4,
            dropout: 0.2,
            folds: 10,
            seed: 0,
            selection: "attentive".into(),
            bench_ratios: "0.1,0.5,0.9".into(),
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "{key}: expected true or false, got {other:?}"
        ))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "run.name" => self.run_name = value.into(),
            "data.source" => match value {
                "synthetic" | "tu" => self.data_source = value.into(),
                other => {
                    return Err(Error::Config(format!(
                        "data.source: expected synthetic or tu, got {other:?}"
                    )))
                }
            },
            "data.dir" => self.data_dir = value.into(),
            "data.name" => self.data_name = value.into(),
            "synth.motifs" => self.synth_motifs = value.into(),
            "synth.per_class" => self.synth_per_class = parse_as(key, value)?,
            "synth.min_nodes" => self.synth_min_nodes = parse_as(key, value)?,
            "synth.max_nodes" => self.synth_max_nodes = parse_as(key, value)?,
            "synth.noise" => self.synth_noise = parse_as(key, value)?,
            "synth.seed" => self.synth_seed = parse_as(key, value)?,
            "model.backbone" => self.backbone = value.into(),
            "model.layers" => self.layers = parse_as(key, value)?,
            "model.hidden" => self.hidden = parse_as(key, value)?,
            "model.att_dim" => self.att_dim = parse_as(key, value)?,
            "model.heads" => self.heads = parse_as(key, value)?,
            "model.alpha" => self.alpha = parse_as(key, value)?,
            "model.alphas" => self.alphas = value.into(),
            "model.activation" => self.activation = value.into(),
            "model.lambda_source" => self.lambda_source = value.into(),
            "model.edge_prior" => self.edge_prior = parse_bool(key, value)?,
            "tasks" => self.tasks = value.into(),
            "ged.margin" => self.ged_margin = parse_as(key, value)?,
            "ged.kp" => self.ged_kp = parse_as(key, value)?,
            "ged.kn" => self.ged_kn = parse_as(key, value)?,
            "train.lr" => self.lr = parse_as(key, value)?,
            "train.weight_decay" => self.weight_decay = parse_as(key, value)?,
            "train.batch" => self.batch = parse_as(key, value)?,
            "train.epochs" => self.epochs = parse_as(key, value)?,
            "train.patience" => self.patience = parse_as(key, value)?,
            "train.min_delta" => self.min_delta = parse_as(key, value)?,
            "train.dropout" => self.dropout = parse_as(key, value)?,
            "train.folds" => self.folds = parse_as(key, value)?,
            "train.seed" => self.seed = parse_as(key, value)?,
            "train.selection" => match value {
                "attentive" | "random" => self.selection = value.into(),
                other => {
                    return Err(Error::Config(format!(
                        "train.selection: expected attentive or random, got {other:?}"
                    )))
                }
            },
            "bench.ratios" => self.bench_ratios = value.into(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses the flat file format: one `key = value` per line, `#`
    /// starts a comment anywhere, blank lines ignored.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    i + 1
                )));
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Ingestion {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::parse(&text)
    }

    /// The complete effective configuration, one key per line; parsing
    /// it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        push("run.name", self.run_name.clone());
        push("data.source", self.data_source.clone());
        push("data.dir", self.data_dir.clone());
        push("data.name", self.data_name.clone());
        push("synth.motifs", self.synth_motifs.clone());
        push("synth.per_class", self.synth_per_class.to_string());
        push("synth.min_nodes", self.synth_min_nodes.to_string());
        push("synth.max_nodes", self.synth_max_nodes.to_string());
        push("synth.noise", self.synth_noise.to_string());
        push("synth.seed", self.synth_seed.to_string());
        push("model.backbone", self.backbone.clone());
        push("model.layers", self.layers.to_string());
        push("model.hidden", self.hidden.to_string());
        push("model.att_dim", self.att_dim.to_string());
        push("model.heads", self.heads.to_string());
        push("model.alpha", self.alpha.to_string());
        push("model.alphas", self.alphas.clone());
        push("model.activation", self.activation.clone());
        push("model.lambda_source", self.lambda_source.clone());
        push("model.edge_prior", self.edge_prior.to_string());
        push("tasks", self.tasks.clone());
        push("ged.margin", self.ged_margin.to_string());
        push("ged.kp", self.ged_kp.to_string());
        push("ged.kn", self.ged_kn.to_string());
        push("train.lr", self.lr.to_string());
        push("train.weight_decay", self.weight_decay.to_string());
        push("train.batch", self.batch.to_string());
        push("train.epochs", self.epochs.to_string());
        push("train.patience", self.patience.to_string());
        push("train.min_delta", self.min_delta.to_string());
        push("train.dropout", self.dropout.to_string());
        push("train.folds", self.folds.to_string());
        push("train.seed", self.seed.to_string());
        push("train.selection", self.selection.clone());
        push("bench.ratios", self.bench_ratios.clone());
        out
    }

    /// Loads the dataset this configuration names.
    pub fn dataset(&self) -> Result<GraphSet> {
        match self.data_source.as_str() {
            "synthetic" => {
                let motifs = parse_motifs(&self.synth_motifs)?;
                let spec = SyntheticSpec {
                    motifs,
                    per_class: self.synth_per_class,
                    n_range: (self.synth_min_nodes, self.synth_max_nodes),
                    noise_p: self.synth_noise,
                };
                make_synthetic(&spec, self.synth_seed)
            }
            "tu" => {
                if self.data_dir.is_empty() || self.data_name.is_empty() {
                    return Err(Error::Config(
                        "tu source needs data.dir and data.name".into(),
                    ));
                }
                parse_tu_dataset(Path::new(&self.data_dir), &self.data_name)
            }
            other => Err(Error::Config(format!("unknown data source {other:?}"))),
        }
    }

    /// Builds the model spec for a dataset with the given feature width
    /// and class count.
    pub fn model_spec(&self, feature_dim: usize, classes: usize) -> Result<ModelSpec> {
        let mut tasks = Vec::new();
        for name in split_list(&self.tasks) {
            match name.as_str() {
                "classification" => {
                    if classes < 2 {
                        return Err(Error::Config(format!(
                            "classification task on a dataset with {classes} classes"
                        )));
                    }
                    tasks.push(TaskSpec::classification(CLASSIFICATION, classes));
                }
                "ged" => tasks.push(TaskSpec::ged("ged", self.ged_margin)),
                other => return Err(Error::Config(format!("unknown task {other:?}"))),
            }
        }
        let alphas = if self.alphas.trim().is_empty() {
            ModelSpec::uniform_alphas(self.alpha, self.layers)
        } else {
            parse_ratio_list("model.alphas", &self.alphas)?
        };
        let spec = ModelSpec {
            backbone: Backbone::parse(&self.backbone)?,
            layers: self.layers,
            feature_dim,
            hidden_dim: self.hidden,
            att_dim: if self.att_dim == 0 { self.hidden } else { self.att_dim },
            heads: self.heads,
            alphas,
            activation: Activation::parse(&self.activation)?,
            tasks,
            lambda_source: LambdaSource::parse(&self.lambda_source)?,
            edge_prior: self.edge_prior,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let selection = match self.selection.as_str() {
            "attentive" => Selection::Attentive,
            "random" => Selection::Random { seed: self.seed },
            other => {
                return Err(Error::Config(format!(
                    "train.selection: unknown strategy {other:?}"
                )))
            }
        };
        Ok(TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch,
            epochs: self.epochs,
            patience: self.patience,
            min_delta: self.min_delta,
            dropout: self.dropout,
            seed: self.seed,
            ged_kp: self.ged_kp,
            ged_kn: self.ged_kn,
            selection,
        })
    }

    /// The sweep's drop-ratio grid.
    pub fn ratios(&self) -> Result<Vec<f64>> {
        parse_ratio_list("bench.ratios", &self.bench_ratios)
    }
}

fn split_list(text: &str) -> Vec<String> {
    text.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_ratio_list(key: &str, text: &str) -> Result<Vec<f64>> {
    let parts = split_list(text);
    if parts.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    parts.iter().map(|p| parse_as::<f64>(key, p)).collect()
}

fn parse_motifs(text: &str) -> Result<Vec<Motif>> {
    let motifs: Vec<Motif> = split_list(text)
        .iter()
        .map(|part| Motif::parse(part))
        .collect::<Result<_>>()?;
    if motifs.is_empty() {
        return Err(Error::Config("synth.motifs: empty list".into()));
    }
    Ok(motifs)
}
