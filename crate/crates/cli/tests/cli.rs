use std::fs;
use std::path::Path;
use std::process::Command;

use fedgat_cli::config::{Dataset, Overrides};
use fedgat_cli::error::code;
use fedgat_cli::run::{cmd_bench_comm, cmd_partition, cmd_pretrain, cmd_train, ExperimentSummary};
use fedgat_cli::schema::{self, OUTPUTS, RUN_SUMMARY_SCHEMA, SUMMARY_SCHEMA};
use fedgat_cli::sweep::{cmd_sweep, CLIENTS_CSV, COMM_CSV, DEGREE_CSV, FAILURES_CSV};
use fedgat_cli::{CliError, ExperimentConfig};
use serde_json::Value;

const TINY: &str = r#"
seed = 3
clients = 3
beta = 1.0

[dataset]
kind = "sbm"
n = 90
classes = 3
p_in = 0.1
p_out = 0.01
dim = 6
noise = 0.5

[model]
hidden = 4
heads = 2

[train]
rounds = 4
degree = 8

[verify]
score_instances = 4
coefficient_instances = 4
propagation_instances = 3
log_bound_grid = 10

[verify.cost]
n = 40
clients = [2]
seeds = [0]
densities = [[0.1, 0.02]]

[sweep]
clients = [1, 2]
degrees = [8, 16]
betas = [1.0]
seeds = [0]
variants = ["fedgat-vector", "distgat"]
comm_variants = ["vector"]
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedgat-sim"))
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

fn check_headers(dir: &Path) {
    let outputs: Value = serde_json::from_str(OUTPUTS).unwrap();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if let Some(cols) = outputs["csv"].get(&name) {
            let cols: Vec<&str> = cols.as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
            assert_eq!(header(&path), cols.join(","), "{name}");
        }
    }
}

fn validator(schema: &str) -> jsonschema::Validator {
    let run: Value = serde_json::from_str(RUN_SUMMARY_SCHEMA).unwrap();
    let mut root: Value = serde_json::from_str(schema).unwrap();
    // resolve the sibling file reference without a retriever
    if let Some(items) = root.pointer_mut("/properties/runs/items") {
        *items = run.clone();
    }
    jsonschema::validator_for(&root).unwrap()
}

#[test]
fn defaults_and_shipped_config_resolve() {
    let d = ExperimentConfig::resolve(None, &Overrides::default()).unwrap();
    assert_eq!(d, ExperimentConfig::default());
    let desk = ExperimentConfig::load(Some(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml"))), &Overrides::default()).unwrap();
    assert_eq!(desk.repeats, 5);
    assert!(matches!(desk.dataset, Dataset::Sbm { n: 600, classes: 4, dim: 32, .. }));
}

#[test]
fn resolved_config_round_trips() {
    let c = tiny();
    let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn flags_win_over_set_over_file() {
    let o = Overrides {
        set: vec!["clients=5".into(), "train.degree = 24".into(), "train.variant=distgat".into(), "sweep.betas=[2.0]".into()],
        flags: vec![("clients", toml::Value::Integer(7))],
    };
    let c = ExperimentConfig::resolve(Some(TINY), &o).unwrap();
    assert_eq!(c.clients, 7);
    assert_eq!(c.train.degree, 24);
    assert_eq!(c.train.variant.as_str(), "distgat");
    assert_eq!(c.sweep.betas, vec![2.0]);
    assert_eq!(c.train.seed, 3);
}

#[test]
fn invalid_configs_are_config_errors() {
    for bad in ["clients=0", "beta=-1.0", "hops=1", "nonsense=1", "train.rounds=0", "dataset.kind=\"nope\"", "sweep.clients=[0]"] {
        let o = Overrides { set: vec![bad.into()], flags: vec![] };
        let e = ExperimentConfig::resolve(Some(TINY), &o).unwrap_err();
        assert_eq!(e.code(), code::CONFIG, "{bad}: {e}");
    }
    assert!(matches!(ExperimentConfig::from_toml("seed = ["), Err(CliError::Config(_))));
}

#[test]
fn single_client_partition_owns_everything() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig { clients: 1, ..tiny() };
    let r = cmd_partition(&c, dir.path()).unwrap();
    assert_eq!(r.owned_counts, vec![90]);
    assert_eq!(r.cross_edges, 0);
    assert!(dir.path().join("plan.json").exists() && dir.path().join("config.toml").exists());
}

#[test]
fn pretrain_manifest_is_reproducible_and_matches_closed_form() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = cmd_pretrain(&tiny(), a.path()).unwrap();
    let rb = cmd_pretrain(&tiny(), b.path()).unwrap();
    assert_eq!(ra.package_sha256, rb.package_sha256);
    assert_eq!(fs::read(a.path().join("packages.json")).unwrap(), fs::read(b.path().join("packages.json")).unwrap());
    assert_eq!(ra.ledger.total(), ra.closed_form_total);
    let e = cmd_pretrain(&ExperimentConfig { train: fedgat::train::TrainConfig { variant: fedgat::train::TrainVariant::Distgat, ..tiny().train }, ..tiny() }, a.path());
    assert!(matches!(e, Err(CliError::Config(_))));
}

#[test]
fn train_outputs_follow_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig { repeats: 2, ..tiny() };
    let s = cmd_train(&c, dir.path()).unwrap();
    assert_eq!(s.seeds, vec![3, 4]);
    assert_eq!(s.runs.len(), 2);
    let text = fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let json: Value = serde_json::from_str(&text).unwrap();
    let v = validator(SUMMARY_SCHEMA);
    assert!(v.is_valid(&json), "{:?}", v.iter_errors(&json).map(|e| e.to_string()).collect::<Vec<_>>());
    let back: ExperimentSummary = serde_json::from_value(json).unwrap();
    assert_eq!(back, s);
    let run_v = validator(RUN_SUMMARY_SCHEMA);
    for r in 0..2 {
        let run = dir.path().join(format!("run-{r:02}"));
        let json: Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
        assert!(run_v.is_valid(&json));
        assert!(run.join("model.json").exists());
        check_headers(&run);
    }
    // a broken document is rejected
    assert!(!v.is_valid(&serde_json::json!({ "variant": "gat" })));
}

#[test]
fn schema_file_matches_writers() {
    let outputs: Value = serde_json::from_str(OUTPUTS).unwrap();
    for (name, cols) in outputs["csv"].as_object().unwrap() {
        let cols: Vec<&str> = cols.as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
        assert_eq!(schema::header(name), Some(cols.join(",").as_str()), "{name}");
    }
}

#[test]
fn sweep_writes_every_figure_in_grid_order() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let r = cmd_sweep(&tiny(), a.path()).unwrap();
    assert_eq!(r.clients.len(), 4);
    assert_eq!(r.degree.len(), 2);
    assert_eq!(r.comm.len(), 2);
    assert!(r.comm.iter().all(|c| c.total == c.closed_form_total));
    check_headers(a.path());
    let csv = fs::read_to_string(a.path().join(CLIENTS_CSV)).unwrap();
    let variants: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["fedgat-vector", "fedgat-vector", "distgat", "distgat"]);
    // more workers, same bytes
    let c = ExperimentConfig { workers: 3, ..tiny() };
    cmd_sweep(&c, b.path()).unwrap();
    for f in [CLIENTS_CSV, DEGREE_CSV, COMM_CSV, FAILURES_CSV] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn empty_grid_gives_header_only_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.sweep.seeds.clear();
    let r = cmd_sweep(&c, dir.path()).unwrap();
    assert!(r.clients.is_empty() && r.degree.is_empty() && r.comm.is_empty());
    for f in [CLIENTS_CSV, DEGREE_CSV, COMM_CSV, FAILURES_CSV] {
        assert_eq!(fs::read_to_string(dir.path().join(f)).unwrap().lines().count(), 1, "{f}");
    }
}

#[test]
fn failed_cells_are_listed_and_the_rest_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    // more clients than nodes of some class cannot be split
    c.sweep.clients = vec![1, 500];
    c.sweep.comm_variants.clear();
    c.sweep.degrees.clear();
    let e = cmd_sweep(&c, dir.path()).unwrap_err();
    assert_eq!(e.code(), code::PARTIAL, "{e}");
    let ok = fs::read_to_string(dir.path().join(CLIENTS_CSV)).unwrap();
    let failed = fs::read_to_string(dir.path().join(FAILURES_CSV)).unwrap();
    assert_eq!(ok.lines().count(), 1 + 2);
    assert_eq!(failed.lines().count(), 1 + 2);
    assert!(failed.lines().skip(1).all(|l| l.starts_with("accuracy_vs_clients,") && l.contains(",500,")));
}

#[test]
fn bench_comm_rows_cover_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.sweep.comm_variants = vec![fedgat::precompute::Variant::Matrix, fedgat::precompute::Variant::Vector];
    let rows = cmd_bench_comm(&c, dir.path()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.total == r.closed_form_total && r.upload > 0));
    assert!(rows[..2].iter().zip(&rows[2..]).all(|(m, v)| m.b_l == v.b_l));
    check_headers(dir.path());
}

#[test]
fn exit_codes_by_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let status = |args: &[&str]| bin().args(args).env("FEDGAT_OUT_DIR", dir.path()).output().unwrap().status.code();
    let c = cfg.to_str().unwrap();
    assert_eq!(status(&["partition", "-c", c]), Some(code::OK as i32));
    assert!(dir.path().join("partition/plan.json").exists());
    assert_eq!(status(&["train", "-c", c, "--rounds", "0"]), Some(code::CONFIG as i32));
    assert_eq!(status(&["train", "--bogus"]), Some(code::CONFIG as i32));
    assert_eq!(status(&["train", "-c", "/does/not/exist.toml"]), Some(code::IO as i32));
    assert_eq!(status(&["verify", "-c", c]), Some(code::OK as i32));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify/verify.json")).unwrap()).unwrap();
    assert!(report["coefficient"]["edges"].as_u64().unwrap() > 0);
    let out = dir.path().join("elsewhere");
    assert_eq!(status(&["pretrain", "-c", c, "-o", out.to_str().unwrap(), "--variant", "fedgat-matrix"]), Some(0));
    let ledger: Value = serde_json::from_str(&fs::read_to_string(out.join("ledger.json")).unwrap()).unwrap();
    assert_eq!(ledger["variant"], "matrix");
}
