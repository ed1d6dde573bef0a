//! Figure-data sweeps. Cells run on a pool of `workers` threads; rows come
//! out in grid order whatever the completion order.

use std::path::Path;

use fedgat::train::TrainVariant;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::run::{accuracy_csv, comm_csv, comm_row, failures_csv, prepare, run_cell, write, Cell, CellResult, CommRow, Failure};

pub const CLIENTS_CSV: &str = "accuracy_vs_clients.csv";
pub const DEGREE_CSV: &str = "accuracy_vs_degree.csv";
pub const COMM_CSV: &str = "comm_vs_clients.csv";
pub const FAILURES_CSV: &str = "failures.csv";

/// Accuracy-vs-clients cells: every variant, client count, beta and seed at
/// the configured series degree.
pub fn clients_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let g = &cfg.sweep;
    let mut cells = Vec::new();
    for &variant in &g.variants {
        for &clients in &g.clients {
            for &beta in &g.betas {
                for &seed in &g.seeds {
                    cells.push(Cell { variant, clients, beta, degree: cfg.train.degree, seed });
                }
            }
        }
    }
    cells
}

/// Accuracy-vs-degree cells: package variants of the grid at the configured
/// client count.
pub fn degree_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let g = &cfg.sweep;
    let mut cells = Vec::new();
    for &variant in g.variants.iter().filter(|v| v.package_variant().is_some()) {
        for &degree in &g.degrees {
            for &beta in &g.betas {
                for &seed in &g.seeds {
                    cells.push(Cell { variant, clients: cfg.clients, beta, degree, seed });
                }
            }
        }
    }
    cells
}

fn pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| CliError::Internal(e.to_string()))
}

/// Trains each distinct cell once, preserving input order.
pub fn run_cells(cfg: &ExperimentConfig, cells: &[Cell]) -> CliResult<Vec<CliResult<CellResult>>> {
    let mut unique: Vec<Cell> = Vec::new();
    for c in cells {
        if !unique.contains(c) {
            unique.push(*c);
        }
    }
    let done: Vec<CliResult<CellResult>> = pool(cfg.workers)?.install(|| unique.par_iter().map(|c| run_cell(cfg, c).map(|r| r.0)).collect());
    Ok(cells
        .iter()
        .map(|c| {
            let k = unique.iter().position(|u| u == c).expect("listed");
            done[k].clone()
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub clients: Vec<CellResult>,
    pub degree: Vec<CellResult>,
    pub comm: Vec<CommRow>,
    pub failures: Vec<Failure>,
}

fn split(figure: &str, cells: &[Cell], results: Vec<CliResult<CellResult>>, failures: &mut Vec<Failure>) -> Vec<CellResult> {
    let mut ok = Vec::new();
    for (c, r) in cells.iter().zip(results) {
        match r {
            Ok(r) => ok.push(r),
            Err(e) => failures.push(Failure { figure: figure.into(), cell: *c, error: e.to_string() }),
        }
    }
    ok
}

/// Runs the grid and writes one CSV per figure plus `failures.csv`.
/// Completed cells are written even when others fail.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> CliResult<SweepReport> {
    prepare(cfg, out)?;
    let (cc, dc) = (clients_cells(cfg), degree_cells(cfg));
    let all: Vec<Cell> = cc.iter().chain(&dc).copied().collect();
    let mut results = run_cells(cfg, &all)?;
    let degree_results = results.split_off(cc.len());
    let mut report = SweepReport::default();
    report.clients = split("accuracy_vs_clients", &cc, results, &mut report.failures);
    report.degree = split("accuracy_vs_degree", &dc, degree_results, &mut report.failures);

    let g = &cfg.sweep;
    let mut comm_cells = Vec::new();
    for &v in &g.comm_variants {
        for &k in &g.clients {
            for &beta in &g.betas {
                for &seed in &g.seeds {
                    comm_cells.push((v, k, beta, seed));
                }
            }
        }
    }
    let comm: Vec<CliResult<CommRow>> = pool(cfg.workers)?.install(|| comm_cells.par_iter().map(|&(v, k, b, s)| comm_row(cfg, v, k, b, s)).collect());
    for (&(v, k, beta, seed), r) in comm_cells.iter().zip(comm) {
        match r {
            Ok(row) => report.comm.push(row),
            Err(e) => {
                let variant = match v {
                    fedgat::precompute::Variant::Matrix => TrainVariant::FedgatMatrix,
                    fedgat::precompute::Variant::Vector => TrainVariant::FedgatVector,
                };
                let cell = Cell { variant, clients: k, beta, degree: 0, seed };
                report.failures.push(Failure { figure: "comm_vs_clients".into(), cell, error: e.to_string() });
            }
        }
    }

    write(&out.join(CLIENTS_CSV), accuracy_csv(&report.clients))?;
    write(&out.join(DEGREE_CSV), accuracy_csv(&report.degree))?;
    write(&out.join(COMM_CSV), comm_csv(&report.comm))?;
    write(&out.join(FAILURES_CSV), failures_csv(&report.failures))?;
    if !report.failures.is_empty() {
        return Err(CliError::Partial { failed: report.failures.len(), total: all.len() + comm_cells.len() });
    }
    Ok(report)
}
