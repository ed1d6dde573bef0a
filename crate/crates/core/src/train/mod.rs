//! Federated training: broadcast, lockstep local steps, aggregation.

mod aggregate;
mod metrics;
mod optim;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use aggregate::{fedavg_aggregate, Admm, Aggregator, ClientUpdate, FedAvg, FedProx, Weighting};
pub use metrics::{accuracy, argmax, confusion, cross_entropy_loss};
pub use optim::{Optimizer, OptimizerConfig};

use crate::autodiff::Tape;
use crate::cheb::PowerSeries;
use crate::error::{invalid, Error, Result};
use crate::fedgat::{Federation, FirstLayer, ForeignRows};
use crate::gat::{ModelConfig, ModelParams, Neighborhoods, ParamVars, SpectralMethod};
use crate::graph::{Graph, PartitionPlan};
use crate::precompute::{self, PackageSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainVariant {
    FedgatMatrix,
    FedgatVector,
    Distgat,
    Centralized,
}

impl TrainVariant {
    pub const ALL: [TrainVariant; 4] = [TrainVariant::FedgatMatrix, TrainVariant::FedgatVector, TrainVariant::Distgat, TrainVariant::Centralized];

    pub fn package_variant(self) -> Option<precompute::Variant> {
        match self {
            TrainVariant::FedgatMatrix => Some(precompute::Variant::Matrix),
            TrainVariant::FedgatVector => Some(precompute::Variant::Vector),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainVariant::FedgatMatrix => "fedgat-matrix",
            TrainVariant::FedgatVector => "fedgat-vector",
            TrainVariant::Distgat => "distgat",
            TrainVariant::Centralized => "centralized",
        }
    }
}

impl std::fmt::Display for TrainVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TrainVariant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| Error::Invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerState {
    /// Fresh optimizer state for every client at the start of each round.
    #[default]
    Reset,
    /// Each client keeps its state across rounds.
    Persistent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub sample_fraction: f64,
    pub optimizer: OptimizerConfig,
    pub optimizer_state: OptimizerState,
    pub weighting: Weighting,
    pub seed: u64,
    pub variant: TrainVariant,
    /// Degree of the score series.
    pub degree: usize,
    /// The series is fitted on `[-radius, radius]`.
    pub radius: f64,
    /// Rescale `W` to spectral norm one and `a` to unit norm after each step.
    pub project: bool,
    /// Source of foreign rows past the first layer.
    pub foreign_rows: ForeignRows,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 50,
            local_epochs: 1,
            sample_fraction: 1.0,
            optimizer: OptimizerConfig::default(),
            optimizer_state: OptimizerState::Reset,
            weighting: Weighting::Uniform,
            seed: 0,
            variant: TrainVariant::FedgatMatrix,
            degree: 16,
            radius: 2.0,
            project: true,
            foreign_rows: ForeignRows::Local,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 {
            return invalid("rounds and local epochs must be at least 1");
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return invalid(format!("sample fraction {} is outside (0, 1]", self.sample_fraction));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return invalid(format!("series radius {} must be positive", self.radius));
        }
        self.optimizer.validate()
    }
}

/// Attention neighborhoods a variant trains on.
pub fn neighborhoods(variant: TrainVariant, g: &Graph, plan: &PartitionPlan) -> Neighborhoods {
    match variant {
        TrainVariant::FedgatMatrix | TrainVariant::FedgatVector => Neighborhoods::federated(g, plan),
        TrainVariant::Distgat => Neighborhoods::intra_client(g, plan),
        TrainVariant::Centralized => Neighborhoods::full(g),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Cross-entropy of the broadcast model over all training nodes.
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Embedding scalars published between clients during the round.
    pub exchange_scalars: usize,
    pub participants: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: TrainVariant,
    pub rounds: usize,
    pub final_train_loss: f64,
    pub final_val_accuracy: f64,
    pub final_test_accuracy: f64,
    pub best_round: usize,
    pub best_val_accuracy: f64,
    /// Test accuracy of the round with the best validation accuracy (first
    /// such round on ties).
    pub test_at_best_val: f64,
    pub exchange_scalars: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub variant: TrainVariant,
    pub records: Vec<RoundRecord>,
    /// Wall time per round in seconds; kept apart from the records so those
    /// stay reproducible.
    pub seconds: Vec<f64>,
}

pub const HISTORY_HEADER: &str = "round,train_loss,val_accuracy,test_accuracy,exchange_scalars,participants";
pub const TIMINGS_HEADER: &str = "round,seconds";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.round, r.train_loss, r.val_accuracy, r.test_accuracy, r.exchange_scalars, r.participants);
        }
        s
    }

    pub fn timings_csv(&self) -> String {
        let mut s = String::from(TIMINGS_HEADER);
        s.push('\n');
        for (r, t) in self.seconds.iter().enumerate() {
            let _ = writeln!(s, "{},{t:.6}", r + 1);
        }
        s
    }

    pub fn summary(&self) -> TrainSummary {
        let last = self.records.last().expect("at least one round");
        let mut best = &self.records[0];
        for r in &self.records {
            if r.val_accuracy > best.val_accuracy {
                best = r;
            }
        }
        TrainSummary {
            variant: self.variant,
            rounds: self.records.len(),
            final_train_loss: last.train_loss,
            final_val_accuracy: last.val_accuracy,
            final_test_accuracy: last.test_accuracy,
            best_round: best.round,
            best_val_accuracy: best.val_accuracy,
            test_at_best_val: best.test_accuracy,
            exchange_scalars: self.records.iter().map(|r| r.exchange_scalars).sum(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("history.csv", self.to_csv())?;
        put("timings.csv", self.timings_csv())?;
        put("summary.json", serde_json::to_string_pretty(&self.summary())?)
    }
}

/// Loss and accuracies of one parameter set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Everything fixed for the duration of a run.
pub struct Session<'g> {
    g: &'g Graph,
    cfg: TrainConfig,
    model: ModelConfig,
    fed: Federation,
    /// Per client: local rows and labels of owned training nodes.
    train_rows: Vec<Vec<usize>>,
    train_labels: Vec<Vec<usize>>,
}

impl<'g> Session<'g> {
    pub fn new(cfg: &TrainConfig, model: &ModelConfig, g: &'g Graph, plan: &PartitionPlan, packages: Option<Arc<PackageSet>>) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let plan = if cfg.variant == TrainVariant::Centralized { PartitionPlan::single(g) } else { plan.clone() };
        let nbrs = neighborhoods(cfg.variant, g, &plan);
        let first = match cfg.variant.package_variant() {
            Some(v) => {
                let packages = packages.ok_or_else(|| Error::Invalid(format!("{} needs pre-training packages", cfg.variant)))?;
                if packages.variant != v {
                    return invalid(format!("{} cannot train on {} packages", cfg.variant, packages.variant));
                }
                let ps = PowerSeries::for_scores(model.layers[0].psi, cfg.radius, cfg.degree)?;
                FirstLayer::Approx { packages, q: ps.coeffs.into() }
            }
            None => FirstLayer::Exact,
        };
        let fed = Federation::new(g, &plan, &nbrs, model, first, cfg.foreign_rows)?;
        let mut is_train = vec![false; g.n_nodes()];
        g.masks().train.iter().for_each(|&i| is_train[i] = true);
        let mut train_rows = Vec::with_capacity(fed.n_clients());
        let mut train_labels = Vec::with_capacity(fed.n_clients());
        for k in 0..fed.n_clients() {
            let (rows, labels): (Vec<usize>, Vec<usize>) =
                fed.owned(k).iter().enumerate().filter(|(_, &i)| is_train[i]).map(|(r, &i)| (r, g.labels()[i])).unzip();
            train_rows.push(rows);
            train_labels.push(labels);
        }
        if train_rows.iter().all(|r| r.is_empty()) {
            return invalid("no training nodes");
        }
        Ok(Session { g, cfg: cfg.clone(), model: model.clone(), fed, train_rows, train_labels })
    }

    pub fn federation(&self) -> &Federation {
        &self.fed
    }

    pub fn initial_params(&self) -> ModelParams {
        let mut p = ModelParams::init(&self.model, self.cfg.seed);
        if self.cfg.project {
            p.project(SpectralMethod::Exact);
        }
        p
    }

    pub fn evaluate(&self, params: &ModelParams) -> Result<Evaluation> {
        let logits = self.fed.forward_global(self.g, params)?;
        let m = self.g.masks();
        let labels = self.g.labels();
        Ok(Evaluation {
            train_loss: cross_entropy_loss(&logits, labels, &m.train)?,
            val_accuracy: if m.val.is_empty() { 0.0 } else { accuracy(&logits, labels, &m.val)? },
            test_accuracy: if m.test.is_empty() { 0.0 } else { accuracy(&logits, labels, &m.test)? },
        })
    }

    fn sampled(&self, rng: &mut ChaCha8Rng) -> Vec<bool> {
        let k = self.fed.n_clients();
        let mut mask = vec![false; k];
        if self.cfg.sample_fraction >= 1.0 {
            mask.iter_mut().for_each(|m| *m = true);
        } else {
            let take = ((self.cfg.sample_fraction * k as f64).ceil() as usize).clamp(1, k);
            sample(rng, k, take).into_iter().for_each(|c| mask[c] = true);
        }
        mask
    }

    pub fn run(&self) -> Result<(TrainHistory, ModelParams)> {
        let k_clients = self.fed.n_clients();
        let mut global = self.initial_params();
        let n = global.n_params();
        let aggregator = FedAvg { weighting: self.cfg.weighting };
        let mut opts: Vec<Optimizer> = (0..k_clients).map(|_| Optimizer::new(self.cfg.optimizer, n)).collect();
        let mut sampler = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        sampler.set_stream(1);
        let total_train: usize = self.train_rows.iter().map(Vec::len).sum();
        let mut records = Vec::with_capacity(self.cfg.rounds);
        let mut seconds = Vec::with_capacity(self.cfg.rounds);

        for round in 1..=self.cfg.rounds {
            let started = Instant::now();
            let sampled = self.sampled(&mut sampler);
            if self.cfg.optimizer_state == OptimizerState::Reset {
                opts.iter_mut().for_each(Optimizer::reset);
            }
            let theta = global.flatten();
            let mut local: Vec<Vec<f64>> = vec![theta.clone(); k_clients];
            let mut train_loss = f64::NAN;
            for epoch in 0..self.cfg.local_epochs {
                let models: Vec<ModelParams> = local
                    .iter()
                    .map(|flat| {
                        let mut m = global.clone();
                        m.assign_flat(flat);
                        m
                    })
                    .collect();
                let mut tapes: Vec<Tape> = (0..k_clients).map(|_| Tape::new()).collect();
                let vars: Vec<ParamVars> = tapes.iter_mut().zip(&models).map(|(t, m)| m.record(t)).collect();
                let outs = self.fed.forward_traced(self.g, &mut tapes, &vars)?;
                let steps: Vec<Option<(f64, Option<Vec<f64>>)>> = tapes
                    .par_iter_mut()
                    .enumerate()
                    .map(|(k, tape)| {
                        if self.train_rows[k].is_empty() || (!sampled[k] && epoch > 0) {
                            return Ok(None);
                        }
                        let loss = tape.softmax_cross_entropy(outs[k], &self.train_rows[k], &self.train_labels[k])?;
                        let value = tape.value(loss).item();
                        if !value.is_finite() {
                            return Err(Error::Numeric(format!("loss is {value} for client {k} in round {round}, local step {epoch}")));
                        }
                        let grad = if sampled[k] {
                            let grads = tape.backward(loss)?;
                            Some(models[k].flat_gradient(&vars[k], &grads))
                        } else {
                            None
                        };
                        Ok(Some((value, grad)))
                    })
                    .collect::<Result<_>>()?;
                if epoch == 0 {
                    let weighted: f64 = steps
                        .iter()
                        .enumerate()
                        .filter_map(|(k, s)| s.as_ref().map(|(l, _)| l * self.train_rows[k].len() as f64))
                        .sum();
                    train_loss = weighted / total_train as f64;
                }
                for (k, step) in steps.into_iter().enumerate() {
                    if let Some((_, Some(grad))) = step {
                        opts[k].step(&mut local[k], &grad);
                        if self.cfg.project {
                            let mut m = global.clone();
                            m.assign_flat(&local[k]);
                            m.project(SpectralMethod::Exact);
                            local[k] = m.flatten();
                        }
                    }
                }
            }
            let updates: Vec<ClientUpdate> = (0..k_clients)
                .filter(|&k| sampled[k] && !self.train_rows[k].is_empty())
                .map(|k| ClientUpdate { client: k, params: std::mem::take(&mut local[k]), train_nodes: self.train_rows[k].len() })
                .collect();
            let participants = updates.len();
            global.assign_flat(&aggregator.aggregate(&theta, &updates)?);
            let eval = self.evaluate(&global)?;
            records.push(RoundRecord {
                round,
                train_loss,
                val_accuracy: eval.val_accuracy,
                test_accuracy: eval.test_accuracy,
                exchange_scalars: self.cfg.local_epochs * self.fed.exchange_per_forward(),
                participants,
            });
            seconds.push(started.elapsed().as_secs_f64());
        }
        Ok((TrainHistory { variant: self.cfg.variant, records, seconds }, global))
    }
}

/// Builds a session and runs it.
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    g: &Graph,
    plan: &PartitionPlan,
    packages: Option<Arc<PackageSet>>,
) -> Result<(TrainHistory, ModelParams)> {
    Session::new(cfg, model, g, plan, packages)?.run()
}
