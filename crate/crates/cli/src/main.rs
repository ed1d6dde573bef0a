use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedgat_cli::config::Overrides;
use fedgat_cli::run::{cmd_bench_comm, cmd_partition, cmd_pretrain, cmd_train, cmd_verify};
use fedgat_cli::sweep::cmd_sweep;
use fedgat_cli::{CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedgat-sim", version, about = "Federated GAT simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split the dataset across clients and write the plan.
    Partition(Common),
    /// Run the pre-training round and write packages and the ledger.
    Pretrain(Common),
    /// Train `repeats` times and aggregate the summaries.
    Train(Common),
    /// Run the bound verification suite.
    Verify(Common),
    /// Sweep the grid and write one CSV per figure.
    Sweep(Common),
    /// Meter the pre-training round over the grid.
    BenchComm(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `dotted.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory [default: $FEDGAT_OUT_DIR/<command>].
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    hops: Option<usize>,
    /// fedgat-matrix, fedgat-vector, distgat or centralized.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

fn int(v: usize) -> toml::Value {
    toml::Value::Integer(v as i64)
}

impl Common {
    fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut flags: Vec<(&'static str, toml::Value)> = Vec::new();
        if let Some(v) = self.seed {
            flags.push(("seed", toml::Value::Integer(v as i64)));
        }
        if let Some(v) = self.clients {
            flags.push(("clients", int(v)));
        }
        if let Some(v) = self.beta {
            flags.push(("beta", toml::Value::Float(v)));
        }
        if let Some(v) = self.hops {
            flags.push(("hops", int(v)));
        }
        if let Some(v) = &self.variant {
            flags.push(("train.variant", toml::Value::String(v.clone())));
        }
        if let Some(v) = self.degree {
            flags.push(("train.degree", int(v)));
        }
        if let Some(v) = self.rounds {
            flags.push(("train.rounds", int(v)));
        }
        if let Some(v) = self.repeats {
            flags.push(("repeats", int(v)));
        }
        if let Some(v) = self.workers {
            flags.push(("workers", int(v)));
        }
        if let Some(v) = &self.out {
            flags.push(("out_dir", toml::Value::String(v.display().to_string())));
        }
        ExperimentConfig::load(self.config.as_deref(), &Overrides { set: self.set.clone(), flags })
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let (name, common) = match &cli.command {
        Command::Partition(c) => ("partition", c),
        Command::Pretrain(c) => ("pretrain", c),
        Command::Train(c) => ("train", c),
        Command::Verify(c) => ("verify", c),
        Command::Sweep(c) => ("sweep", c),
        Command::BenchComm(c) => ("bench-comm", c),
    };
    let cfg = common.resolve()?;
    let out = cfg.out_dir(name);
    match cli.command {
        Command::Partition(_) => {
            let r = cmd_partition(&cfg, &out)?;
            println!("clients {} b_l {} cross_edges {} dropped_pairs {}", r.clients, r.b_l, r.cross_edges, r.dropped_pairs);
        }
        Command::Pretrain(_) => {
            let r = cmd_pretrain(&cfg, &out)?;
            let l = &r.ledger;
            println!("{} upload {} download {} total {} scalars", r.variant, l.total_upload, l.total_download, l.total());
            println!("packages sha256 {}", r.package_sha256);
        }
        Command::Train(_) => {
            let s = cmd_train(&cfg, &out)?;
            println!(
                "{} test {:.4} ± {:.4} over {} runs",
                s.variant, s.test_at_best_val.mean, s.test_at_best_val.std, s.repeats
            );
        }
        Command::Verify(_) => {
            let r = cmd_verify(&cfg, &out)?;
            println!("all checks passed ({} coefficient-bound edges)", r.coefficient.edges);
        }
        Command::Sweep(_) => {
            let r = cmd_sweep(&cfg, &out)?;
            println!("{} client cells, {} degree cells, {} comm rows", r.clients.len(), r.degree.len(), r.comm.len());
        }
        Command::BenchComm(_) => {
            for r in cmd_bench_comm(&cfg, &out)? {
                println!("{} K={} beta={} seed={} total {}", r.variant, r.clients, r.beta, r.seed, r.total);
            }
        }
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedgat-sim: {e}");
            e.exit_code()
        }
    }
}
