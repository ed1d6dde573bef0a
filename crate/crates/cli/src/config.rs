//! Experiment configuration: a TOML document, `--set key=value` overrides,
//! then dedicated flags, in increasing precedence.

use std::path::{Path, PathBuf};

use fedgat::gat::ModelConfig;
use fedgat::graph::{generate_sbm, load_graph, Graph, GraphFormat, SbmParams};
use fedgat::precompute::Variant;
use fedgat::train::{TrainConfig, TrainVariant};
use fedgat::verify::VerifyConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "FEDGAT_OUT_DIR";
pub const DEFAULT_OUT_ROOT: &str = "fedgat-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dataset {
    /// Synthetic graph; the generator seed is the experiment seed.
    Sbm { n: usize, classes: usize, p_in: f64, p_out: f64, dim: usize, noise: f64 },
    Csv {
        edges: PathBuf,
        features: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        masks: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_classes: Option<usize>,
    },
    Json { path: PathBuf },
    CoraRaw { dir: PathBuf },
}

impl Default for Dataset {
    fn default() -> Self {
        Dataset::Sbm { n: 600, classes: 4, p_in: 0.03, p_out: 0.003, dim: 32, noise: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: usize,
    pub heads: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { hidden: 8, heads: 8 }
    }
}

/// Grid of a `sweep` run. An empty axis yields header-only CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub clients: Vec<usize>,
    pub degrees: Vec<usize>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Variants of the accuracy-vs-clients figure.
    pub variants: Vec<TrainVariant>,
    /// Package variants of the communication figure.
    pub comm_variants: Vec<Variant>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            clients: vec![1, 2, 5, 10],
            degrees: vec![8, 16, 24],
            betas: vec![1.0, 10000.0],
            seeds: vec![0],
            variants: vec![TrainVariant::FedgatVector, TrainVariant::Distgat],
            comm_variants: vec![Variant::Matrix, Variant::Vector],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Fixes the synthetic graph across cells; otherwise each cell generates
    /// its graph from its own seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph_seed: Option<u64>,
    /// Runs of `train`; repeat `r` uses seed `seed + r`.
    pub repeats: usize,
    pub clients: usize,
    /// Dirichlet concentration of the label split.
    pub beta: f64,
    /// Hops of the client subgraphs.
    pub hops: usize,
    pub drop_single_cross: bool,
    /// Hash features down to this many dimensions after loading.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_hash_dim: Option<usize>,
    /// Not written back, so the resolved config of a run does not depend on
    /// where it was written.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    /// Concurrent sweep cells.
    pub workers: usize,
    pub dataset: Dataset,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub verify: VerifyConfig,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            graph_seed: None,
            repeats: 1,
            clients: 10,
            beta: 10000.0,
            hops: 2,
            drop_single_cross: true,
            feature_hash_dim: None,
            out_dir: None,
            workers: 1,
            dataset: Dataset::default(),
            model: ModelSpec::default(),
            train: TrainConfig { variant: TrainVariant::FedgatVector, ..TrainConfig::default() },
            verify: VerifyConfig::default(),
            sweep: SweepGrid::default(),
        }
    }
}

/// Overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// `dotted.key=value` pairs; values parse as TOML, else as strings.
    pub set: Vec<String>,
    /// `(dotted key, TOML value)` pairs from dedicated flags.
    pub flags: Vec<(&'static str, toml::Value)>,
}

fn parse_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.to_string())),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Config(format!("empty key in {key:?}")))?;
    let mut table = root;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("{key}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        Self::resolve(Some(text), &Overrides::default())
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn resolve(text: Option<&str>, overrides: &Overrides) -> CliResult<Self> {
        let mut root: toml::Table = match text {
            Some(t) => t.parse().map_err(|e| CliError::Config(format!("config: {e}")))?,
            None => toml::Table::new(),
        };
        for kv in &overrides.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects key=value, got {kv:?}")))?;
            set_path(&mut root, k.trim(), parse_value(v.trim()))?;
        }
        for (k, v) in &overrides.flags {
            set_path(&mut root, k, v.clone())?;
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(root).try_into().map_err(|e| CliError::Config(format!("config: {e}")))?;
        // one seed drives every stream
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.repeats == 0 || self.workers == 0 || self.clients == 0 {
            return bad("repeats, workers and clients must be at least 1".into());
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return bad(format!("beta {} must be positive", self.beta));
        }
        if self.hops < 2 {
            return bad(format!("hops {} is below the model depth 2", self.hops));
        }
        if self.model.hidden == 0 || self.model.heads == 0 {
            return bad("model hidden width and heads must be positive".into());
        }
        if self.feature_hash_dim == Some(0) {
            return bad("feature_hash_dim must be positive".into());
        }
        if self.sweep.betas.iter().any(|b| !(b.is_finite() && *b > 0.0)) || self.sweep.clients.contains(&0) {
            return bad("sweep betas must be positive and client counts at least 1".into());
        }
        if self.train.degree == 0 || self.sweep.degrees.contains(&0) {
            return bad("series degree must be at least 1".into());
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    /// Output directory: config or flag, else `$FEDGAT_OUT_DIR/<command>`,
    /// else `fedgat-out/<command>`.
    pub fn out_dir(&self, command: &str) -> PathBuf {
        if let Some(d) = &self.out_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from);
        root.join(command)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("serializing config: {e}")))
    }

    /// The dataset graph of a cell with `seed`; file datasets ignore it.
    pub fn graph(&self, seed: u64) -> CliResult<Graph> {
        let seed = self.graph_seed.unwrap_or(seed);
        let g = match &self.dataset {
            &Dataset::Sbm { n, classes, p_in, p_out, dim, noise } => {
                generate_sbm(&SbmParams { n, classes, p_in, p_out, dim, noise, seed }).map_err(|e| CliError::Config(e.to_string()))?
            }
            Dataset::Csv { edges, features, masks, n_classes } => {
                let fmt = GraphFormat::Csv { edges: edges.clone(), features: features.clone(), masks: masks.clone(), n_classes: *n_classes };
                load_graph(&fmt)?.0
            }
            Dataset::Json { path } => load_graph(&GraphFormat::Json { path: path.clone() })?.0,
            Dataset::CoraRaw { dir } => load_graph(&GraphFormat::CoraRaw { dir: dir.clone() })?.0,
        };
        match self.feature_hash_dim {
            Some(dim) => Ok(g.hashed_features(dim, self.seed)?),
            None => Ok(g),
        }
    }

    pub fn model_for(&self, g: &Graph) -> ModelConfig {
        ModelConfig::standard(g.feature_dim(), self.model.hidden, self.model.heads, g.n_classes())
    }
}
