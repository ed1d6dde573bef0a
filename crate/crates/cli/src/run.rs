//! Subcommand bodies. Each writes its artifacts plus `config.toml` into the
//! output directory and returns what it wrote.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use fedgat::gat::ModelParams;
use fedgat::graph::{dirichlet_partition, expand_l_hop, Graph, PartitionPlan};
use fedgat::precompute::{neighborhood_sizes, pretrain_round, CommLedger, PackageSet, Variant};
use fedgat::train::{neighborhoods, train, TrainHistory, TrainSummary, TrainVariant};
use fedgat::verify::{run_all, VerifyReport};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::schema::{ACCURACY_HEADER, COMM_HEADER, FAILURES_HEADER};

pub(crate) fn write(path: &Path, text: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write(path, serde_json::to_string_pretty(value)?)
}

pub(crate) fn prepare(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write(&out.join("config.toml"), cfg.to_toml()?)
}

/// Dirichlet split of `g`, with the single-cross drop rule from the config.
pub fn partition_graph(cfg: &ExperimentConfig, g: &Graph, clients: usize, beta: f64, seed: u64) -> CliResult<PartitionPlan> {
    let mut plan = if clients == 1 { PartitionPlan::single(g) } else { dirichlet_partition(g, clients, beta, seed)? };
    plan.drop_single_cross = cfg.drop_single_cross;
    Ok(plan)
}

/// Pre-training round for a package variant.
pub fn packages(cfg: &ExperimentConfig, g: &Graph, plan: &PartitionPlan, variant: TrainVariant, seed: u64) -> CliResult<Option<(PackageSet, CommLedger)>> {
    let Some(v) = variant.package_variant() else { return Ok(None) };
    let expanded = expand_l_hop(g, plan, cfg.hops)?;
    let nbrs = neighborhoods(variant, g, plan);
    Ok(Some(pretrain_round(g, &expanded, &nbrs, true, v, seed)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub clients: usize,
    pub beta: f64,
    pub seed: u64,
    pub hops: usize,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub owned_counts: Vec<usize>,
    /// Node counts of the L-hop client subgraphs.
    pub subgraph_sizes: Vec<usize>,
    pub b_l: usize,
    pub cross_edges: usize,
    /// Directed pairs removed by the single-cross rule.
    pub dropped_pairs: usize,
    /// Total variation distance of each client's label histogram from the
    /// global one.
    pub label_tv: Vec<f64>,
}

pub fn cmd_partition(cfg: &ExperimentConfig, out: &Path) -> CliResult<PartitionReport> {
    prepare(cfg, out)?;
    let g = cfg.graph(cfg.seed)?;
    let plan = partition_graph(cfg, &g, cfg.clients, cfg.beta, cfg.seed)?;
    let expanded = expand_l_hop(&g, &plan, cfg.hops)?;
    plan.save(&out.join("plan.json"))?;
    let report = PartitionReport {
        clients: plan.n_clients,
        beta: cfg.beta,
        seed: cfg.seed,
        hops: cfg.hops,
        n_nodes: g.n_nodes(),
        n_edges: g.n_edges(),
        owned_counts: plan.owned_counts(),
        subgraph_sizes: expanded.subgraph_sizes(),
        b_l: expanded.b_l(),
        cross_edges: plan.cross_edges.len(),
        dropped_pairs: plan.dropped_pairs(&g).len(),
        label_tv: plan.label_tv(&g),
    };
    write_json(&out.join("partition.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub variant: Variant,
    pub package_sha256: String,
    pub omitted_nodes: usize,
    pub b_l: usize,
    pub ledger: CommLedger,
    /// Total from neighborhood sizes alone.
    pub closed_form_total: usize,
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> CliResult<PretrainReport> {
    let variant = cfg.train.variant;
    if variant.package_variant().is_none() {
        return Err(CliError::Config(format!("{variant} does not use packages")));
    }
    prepare(cfg, out)?;
    let g = cfg.graph(cfg.seed)?;
    let plan = partition_graph(cfg, &g, cfg.clients, cfg.beta, cfg.seed)?;
    let expanded = expand_l_hop(&g, &plan, cfg.hops)?;
    let (set, ledger) = packages(cfg, &g, &plan, variant, cfg.seed)?.expect("package variant");
    plan.save(&out.join("plan.json"))?;
    let sha = set.save(&out.join("packages.json"))?;
    let degs = neighborhood_sizes(&neighborhoods(variant, &g, &plan), true);
    let closed = CommLedger::closed_form(set.variant, set.d, &expanded, &degs);
    let report = PretrainReport {
        variant: set.variant,
        package_sha256: sha,
        omitted_nodes: set.omitted().len(),
        b_l: expanded.b_l(),
        closed_form_total: closed.total(),
        ledger,
    };
    write_json(&out.join("ledger.json"), &report)?;
    Ok(report)
}

/// One training configuration of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: TrainVariant,
    pub clients: usize,
    pub beta: f64,
    pub degree: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub summary: TrainSummary,
    /// Pre-training scalars, zero for variants without packages.
    pub pretrain_scalars: usize,
}

/// Trains one cell. Centralized cells ignore the client count.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> CliResult<(CellResult, TrainHistory, ModelParams)> {
    let g = cfg.graph(cell.seed)?;
    let plan = match cell.variant {
        TrainVariant::Centralized => PartitionPlan::single(&g),
        _ => partition_graph(cfg, &g, cell.clients, cell.beta, cell.seed)?,
    };
    let pk = packages(cfg, &g, &plan, cell.variant, cell.seed)?;
    let pretrain_scalars = pk.as_ref().map_or(0, |(_, l)| l.total());
    let tc = fedgat::train::TrainConfig { variant: cell.variant, degree: cell.degree, seed: cell.seed, ..cfg.train.clone() };
    let model = cfg.model_for(&g);
    let (h, p) = train(&tc, &model, &g, &plan, pk.map(|(s, _)| Arc::new(s)))?;
    Ok((CellResult { cell: *cell, summary: h.summary(), pretrain_scalars }, h, p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation, zero for a single value.
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Stat { mean, std, values }
    }
}

/// Aggregate over the repeats of `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub variant: TrainVariant,
    pub clients: usize,
    pub beta: f64,
    pub degree: usize,
    pub repeats: usize,
    pub seeds: Vec<u64>,
    pub test_at_best_val: Stat,
    pub final_test_accuracy: Stat,
    pub best_val_accuracy: Stat,
    pub pretrain_scalars: Vec<usize>,
    pub runs: Vec<TrainSummary>,
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> CliResult<ExperimentSummary> {
    prepare(cfg, out)?;
    let mut results = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let cell = Cell { variant: cfg.train.variant, clients: cfg.clients, beta: cfg.beta, degree: cfg.train.degree, seed: cfg.seed + r as u64 };
        let (res, h, p) = run_cell(cfg, &cell)?;
        let dir = out.join(format!("run-{r:02}"));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        h.write(&dir)?;
        let g = cfg.graph(cell.seed)?;
        p.save(&cfg.model_for(&g), &dir.join("model.json"))?;
        results.push(res);
    }
    let stat = |f: fn(&TrainSummary) -> f64| Stat::of(results.iter().map(|r| f(&r.summary)).collect());
    let summary = ExperimentSummary {
        variant: cfg.train.variant,
        clients: cfg.clients,
        beta: cfg.beta,
        degree: cfg.train.degree,
        repeats: cfg.repeats,
        seeds: results.iter().map(|r| r.cell.seed).collect(),
        test_at_best_val: stat(|s| s.test_at_best_val),
        final_test_accuracy: stat(|s| s.final_test_accuracy),
        best_val_accuracy: stat(|s| s.best_val_accuracy),
        pretrain_scalars: results.iter().map(|r| r.pretrain_scalars).collect(),
        runs: results.into_iter().map(|r| r.summary).collect(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Writes `verify.json`; a failed check is an error after the report is on
/// disk.
pub fn cmd_verify(cfg: &ExperimentConfig, out: &Path) -> CliResult<VerifyReport> {
    prepare(cfg, out)?;
    let report = run_all(&cfg.verify)?;
    write_json(&out.join("verify.json"), &report)?;
    let failures = report.failures();
    if !failures.is_empty() {
        return Err(CliError::Verify(failures.join(", ")));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub variant: Variant,
    pub clients: usize,
    pub beta: f64,
    pub seed: u64,
    pub b_l: usize,
    pub max_degree: usize,
    pub upload: usize,
    pub download: usize,
    pub total: usize,
    pub closed_form_total: usize,
}

pub fn comm_row(cfg: &ExperimentConfig, variant: Variant, clients: usize, beta: f64, seed: u64) -> CliResult<CommRow> {
    let g = cfg.graph(seed)?;
    let plan = partition_graph(cfg, &g, clients, beta, seed)?;
    let tv = match variant {
        Variant::Matrix => TrainVariant::FedgatMatrix,
        Variant::Vector => TrainVariant::FedgatVector,
    };
    let expanded = expand_l_hop(&g, &plan, cfg.hops)?;
    let (_, ledger) = packages(cfg, &g, &plan, tv, seed)?.expect("package variant");
    let degs = neighborhood_sizes(&neighborhoods(tv, &g, &plan), true);
    let closed = CommLedger::closed_form(variant, g.feature_dim(), &expanded, &degs);
    Ok(CommRow {
        variant,
        clients,
        beta,
        seed,
        b_l: expanded.b_l(),
        max_degree: g.max_degree(),
        upload: ledger.total_upload,
        download: ledger.total_download,
        total: ledger.total(),
        closed_form_total: closed.total(),
    })
}

pub(crate) fn comm_csv(rows: &[CommRow]) -> String {
    let mut s = format!("{COMM_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant, r.clients, r.beta, r.seed, r.b_l, r.max_degree, r.upload, r.download, r.total, r.closed_form_total
        );
    }
    s
}

pub(crate) fn accuracy_csv(rows: &[CellResult]) -> String {
    let mut s = format!("{ACCURACY_HEADER}\n");
    for r in rows {
        let (c, m) = (&r.cell, &r.summary);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.variant,
            c.clients,
            c.beta,
            c.degree,
            c.seed,
            m.test_at_best_val,
            m.final_test_accuracy,
            m.best_val_accuracy,
            m.best_round,
            m.exchange_scalars,
            r.pretrain_scalars
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub figure: String,
    pub cell: Cell,
    pub error: String,
}

pub(crate) fn failures_csv(rows: &[Failure]) -> String {
    let mut s = format!("{FAILURES_HEADER}\n");
    for f in rows {
        let c = &f.cell;
        let msg = f.error.replace(['\n', ','], " ");
        let _ = writeln!(s, "{},{},{},{},{},{},{msg}", f.figure, c.variant, c.clients, c.beta, c.degree, c.seed);
    }
    s
}

/// `comm.csv` over the sweep grid's client counts, betas, seeds and package
/// variants.
pub fn cmd_bench_comm(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<CommRow>> {
    prepare(cfg, out)?;
    let grid = &cfg.sweep;
    let mut rows = Vec::new();
    for &v in &grid.comm_variants {
        for &k in &grid.clients {
            for &beta in &grid.betas {
                for &seed in &grid.seeds {
                    rows.push(comm_row(cfg, v, k, beta, seed)?);
                }
            }
        }
    }
    write(&out.join("comm.csv"), comm_csv(&rows))?;
    Ok(rows)
}
