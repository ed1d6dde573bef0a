//! Column orders of every CSV the CLI writes, mirrored in
//! `schema/outputs.json`.

pub use fedgat::train::{HISTORY_HEADER, TIMINGS_HEADER};

pub const ACCURACY_HEADER: &str =
    "variant,clients,beta,degree,seed,test_at_best_val,final_test_accuracy,best_val_accuracy,best_round,exchange_scalars,pretrain_scalars";
pub const COMM_HEADER: &str = "variant,clients,beta,seed,b_l,max_degree,upload,download,total,closed_form_total";
pub const FAILURES_HEADER: &str = "figure,variant,clients,beta,degree,seed,error";

pub const OUTPUTS: &str = include_str!("../schema/outputs.json");
pub const SUMMARY_SCHEMA: &str = include_str!("../schema/summary.schema.json");
pub const RUN_SUMMARY_SCHEMA: &str = include_str!("../schema/run_summary.schema.json");

/// Header of a CSV file the CLI writes, by file name.
pub fn header(file: &str) -> Option<&'static str> {
    Some(match file {
        "history.csv" => HISTORY_HEADER,
        "timings.csv" => TIMINGS_HEADER,
        "accuracy_vs_clients.csv" | "accuracy_vs_degree.csv" => ACCURACY_HEADER,
        "comm_vs_clients.csv" | "comm.csv" => COMM_HEADER,
        "failures.csv" => FAILURES_HEADER,
        _ => return None,
    })
}
