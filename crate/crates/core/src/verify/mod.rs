//! Measured checks of the error bounds, the Chebyshev rate, the log bound
//! behind error propagation, and the communication cost formulas.
//!
//! Every inequality is evaluated on measured quantities and reported with
//! its margin, `bound − measured`. Negative margins are violations; each
//! one carries enough of its instance to reproduce it.

use std::f64::consts::E;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::cheb::{derivative_variation, empirical_max_error, chebyshev_bound, ChebSeries, PowerSeries, DEFAULT_OVERSAMPLE};
use crate::error::{invalid, Result};
use crate::fedgat::approx_layer_unfused;
use crate::gat::{attention_coeffs, attention_logit, attention_score, forward_layers, HeadMerge, LayerConfig, ModelConfig, ModelParams, Neighborhoods, SpectralMethod};
use crate::graph::{dirichlet_partition, expand_l_hop, generate_sbm, Graph, Masks, PartitionPlan, SbmParams};
use crate::precompute::{node_cost, pretrain_round, CommLedger, PackageSet, Variant};
use crate::tensor::Tensor;

/// Candidate constants for the error-propagation hypothesis, ascending.
pub const C_CANDIDATES: [f64; 5] = [1.1, 1.5, 2.0, E, 5.0];

/// Quantities entering one layer's error budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    /// Max score error `|ê − e|` over all edges of the layer.
    pub eps: f64,
    /// `2ε/(1−ε)`, the relative coefficient error; `None` when `ε ≥ 1`.
    pub eps_hat: Option<f64>,
    /// Max embedding error `‖ĥ − h‖` after the layer.
    pub delta: f64,
    pub kappa_phi: f64,
    pub kappa_psi: f64,
    /// Smallest candidate with `δ_prev ≤ log(c)/(2κ_ψ)`; `None` on layer 1 or
    /// when no candidate qualifies.
    pub c: Option<f64>,
    /// Degree of the score series.
    pub p: usize,
}

impl ErrorBudget {
    pub fn coefficient_factor(eps: f64) -> Option<f64> {
        (eps >= 0.0 && eps < 1.0).then(|| 2.0 * eps / (1.0 - eps))
    }
}

/// Smallest `c` in [`C_CANDIDATES`] with `δ ≤ log(c)/(2κ_ψ)`.
pub fn choose_c(delta: f64, kappa_psi: f64) -> Option<f64> {
    C_CANDIDATES.into_iter().find(|c| delta <= c.ln() / (2.0 * kappa_psi))
}

/// A random graph and norm-projected parameters.
#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub graph: Graph,
    pub model: ModelConfig,
    pub params: ModelParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceShape {
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub max_degree: usize,
    pub dim: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl Default for InstanceShape {
    fn default() -> Self {
        InstanceShape { min_nodes: 8, max_nodes: 24, max_degree: 8, dim: 4, hidden: 4, depth: 1 }
    }
}

fn single_head(out_dim: usize, phi: Activation) -> LayerConfig {
    LayerConfig { heads: 1, out_dim, phi, psi: Activation::leaky_relu(0.2), merge: HeadMerge::Concat, self_loops: true }
}

/// Graph with features of norm at most one, degrees capped at
/// `max_degree`, single-head elu layers and projected parameters.
pub fn random_instance(shape: &InstanceShape, seed: u64) -> Result<Instance> {
    if shape.min_nodes < 2 || shape.max_nodes < shape.min_nodes || shape.max_degree == 0 || shape.depth == 0 || shape.depth > 4 {
        return invalid(format!("bad instance shape {shape:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(shape.min_nodes..=shape.max_nodes);
    let d = shape.dim;
    let mut feats = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = rng.random_range(0.2..1.0) / norm.max(1e-12);
        feats.extend(row.iter().map(|v| v * scale));
    }
    let p = (shape.max_degree as f64 / n as f64).min(0.5);
    let mut deg = vec![0usize; n];
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if deg[u] < shape.max_degree && deg[v] < shape.max_degree && rng.random_bool(p) {
                edges.push((u, v));
                deg[u] += 1;
                deg[v] += 1;
            }
        }
    }
    let labels = (0..n).map(|i| i % 2).collect();
    let graph = Graph::new(Tensor::matrix(n, d, feats)?, labels, 2, edges, Masks::default())?;
    let layers = (0..shape.depth).map(|_| single_head(shape.hidden, Activation::elu(1.0))).collect();
    let model = ModelConfig { in_dim: d, layers };
    let mut params = ModelParams::init(&model, rng.random());
    params.project(SpectralMethod::Exact);
    Ok(Instance { seed, graph, model, params })
}

pub fn random_instances(shape: &InstanceShape, count: usize, seed: u64) -> Result<Vec<Instance>> {
    (0..count as u64).into_par_iter().map(|k| random_instance(shape, seed.wrapping_mul(1_000_003).wrapping_add(k))).collect()
}

fn kappa(a: Activation) -> f64 {
    a.lipschitz().expect("validated activations are Lipschitz")
}

fn psi_score(psi: Activation, x: f64) -> f64 {
    psi.apply(x).exp()
}

/// Max `|ps(x) − e^{ψ(x)}|` over the first-layer edges of `inst`.
pub fn first_layer_score_error(inst: &Instance, ps: &PowerSeries) -> f64 {
    let g = &inst.graph;
    let lc = &inst.model.layers[0];
    let nbrs = Neighborhoods::full(g);
    let mut eps: f64 = 0.0;
    for head in &inst.params.layers[0] {
        for i in 0..g.n_nodes() {
            for j in nbrs.of(i, lc.self_loops) {
                let x = attention_logit(g.feature(i), g.feature(j), head);
                eps = eps.max((ps.eval(x) - psi_score(lc.psi, x)).abs());
            }
        }
    }
    eps
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreErrorReport {
    pub degrees: Vec<usize>,
    pub radius: f64,
    /// `eps[k][m]`: instance `k`, degree `degrees[m]`.
    pub eps: Vec<Vec<f64>>,
    pub max_eps: Vec<f64>,
    /// Instances whose error grows between consecutive degrees.
    pub monotone_violations: usize,
}

/// Score error per instance and degree, with the monotonicity check.
pub fn verify_score_error(instances: &[Instance], degrees: &[usize], radius: f64) -> Result<ScoreErrorReport> {
    let psi = instances.first().map_or(Activation::leaky_relu(0.2), |i| i.model.layers[0].psi);
    let series: Vec<PowerSeries> = degrees.iter().map(|&p| PowerSeries::for_scores(psi, radius, p)).collect::<Result<_>>()?;
    let eps: Vec<Vec<f64>> = instances.par_iter().map(|inst| series.iter().map(|ps| first_layer_score_error(inst, ps)).collect()).collect();
    let max_eps = (0..degrees.len()).map(|m| eps.iter().map(|e| e[m]).fold(0.0, f64::max)).collect();
    let monotone_violations = eps.iter().filter(|e| e.windows(2).any(|w| w[1] > w[0])).count();
    Ok(ScoreErrorReport { degrees: degrees.to_vec(), radius, eps, max_eps, monotone_violations })
}

/// One coefficient whose error exceeded its bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientViolation {
    pub instance: u64,
    pub node: usize,
    pub neighbor: usize,
    pub alpha: f64,
    pub alpha_hat: f64,
    pub bound: f64,
    /// Smallest exact score in the neighborhood; below one the bound's
    /// `e ≥ 1` premise does not hold.
    pub min_score: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub instances: usize,
    pub edges: usize,
    /// Instances skipped because `ε ≥ 1`.
    pub skipped: usize,
    pub violations: usize,
    /// Violations in neighborhoods with some score below one.
    pub premise_failures: usize,
    /// Smallest `bound − |α̂ − α|` over all checked edges.
    pub min_margin: f64,
    pub records: Vec<CoefficientViolation>,
}

/// Checks `|α̂_ij − α_ij| ≤ α_ij·2ε/(1−ε)` for one neighborhood.
fn check_coefficients(
    instance: u64,
    node: usize,
    nbrs: &[usize],
    exact: &[f64],
    approx: &[f64],
    eps: f64,
    out: &mut CoefficientReport,
) -> Result<()> {
    let a = attention_coeffs(exact)?;
    let ah = attention_coeffs(approx)?;
    let factor = ErrorBudget::coefficient_factor(eps).expect("caller checked ε < 1");
    let min_score = exact.iter().cloned().fold(f64::INFINITY, f64::min);
    for k in 0..nbrs.len() {
        let bound = a[k] * factor;
        let err = (ah[k] - a[k]).abs();
        out.edges += 1;
        out.min_margin = out.min_margin.min(bound - err);
        if err > bound {
            out.violations += 1;
            if min_score < 1.0 {
                out.premise_failures += 1;
            }
            out.records.push(CoefficientViolation { instance, node, neighbor: nbrs[k], alpha: a[k], alpha_hat: ah[k], bound, min_score, eps });
        }
    }
    Ok(())
}

fn empty_coefficient_report(instances: usize) -> CoefficientReport {
    CoefficientReport { instances, edges: 0, skipped: 0, violations: 0, premise_failures: 0, min_margin: f64::INFINITY, records: Vec::new() }
}

/// Coefficient error of the first layer under a degree-`p` series.
pub fn verify_coefficient_bound(instances: &[Instance], p: usize, radius: f64) -> Result<CoefficientReport> {
    let parts: Vec<CoefficientReport> = instances
        .par_iter()
        .map(|inst| {
            let lc = &inst.model.layers[0];
            let ps = PowerSeries::for_scores(lc.psi, radius, p)?;
            let eps = first_layer_score_error(inst, &ps);
            let mut rep = empty_coefficient_report(1);
            if eps >= 1.0 {
                rep.skipped = 1;
                return Ok(rep);
            }
            let g = &inst.graph;
            let nbrs = Neighborhoods::full(g);
            for head in &inst.params.layers[0] {
                for i in 0..g.n_nodes() {
                    let nb = nbrs.of(i, lc.self_loops);
                    let xs: Vec<f64> = nb.iter().map(|&j| attention_logit(g.feature(i), g.feature(j), head)).collect();
                    let exact: Vec<f64> = xs.iter().map(|&x| psi_score(lc.psi, x)).collect();
                    let approx: Vec<f64> = xs.iter().map(|&x| ps.eval(x)).collect();
                    check_coefficients(inst.seed, i, &nb, &exact, &approx, eps, &mut rep)?;
                }
            }
            Ok(rep)
        })
        .collect::<Result<_>>()?;
    let mut out = empty_coefficient_report(instances.len());
    for r in parts {
        out.edges += r.edges;
        out.skipped += r.skipped;
        out.violations += r.violations;
        out.premise_failures += r.premise_failures;
        out.min_margin = out.min_margin.min(r.min_margin);
        out.records.extend(r.records);
    }
    Ok(out)
}

/// A neighborhood with scores far below one: a small score's absolute error
/// is a large relative error, which the bound does not allow for.
pub fn coefficient_adversarial() -> Result<CoefficientReport> {
    let exact = [(-3.0f64).exp(), 3.0f64.exp()];
    let eps = 0.05;
    let approx = [exact[0] + eps, exact[1] - eps];
    let mut rep = empty_coefficient_report(1);
    check_coefficients(0, 0, &[0, 1], &exact, &approx, eps, &mut rep)?;
    Ok(rep)
}

/// Bound checks for one layer past the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMargins {
    /// `2cκ_ψδ_prev − ε`.
    pub score: f64,
    /// Smallest `α·ε̂ − |α̂ − α|` over the layer's edges.
    pub coefficient: f64,
    /// `κ_φ(ε̂ + δ_prev) − δ`.
    pub embedding: f64,
    /// `δ/δ_prev`, against `κ_φ(1 + 4cκ_ψ)`.
    pub growth: f64,
    pub growth_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instance: u64,
    pub layers: Vec<ErrorBudget>,
    /// `2κ_φε/(1−ε) − δ` for the first layer.
    pub first_layer_margin: f64,
    /// Entry `l − 1` is layer `l`; `None` when the layer was skipped.
    pub deeper: Vec<Option<LayerMargins>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationReport {
    pub p: usize,
    pub radius: f64,
    pub instances: usize,
    pub first_layer_violations: usize,
    pub score_violations: usize,
    pub coefficient_violations: usize,
    pub embedding_violations: usize,
    pub growth_violations: usize,
    /// Layers past the first with no admissible `c`, or `ε ≥ 1`.
    pub skipped_layers: usize,
    pub trajectories: Vec<Trajectory>,
}

fn row_dist(a: &Tensor, b: &Tensor, r: usize) -> f64 {
    a.row_slice(r).iter().zip(b.row_slice(r)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn max_row_dist(a: &Tensor, b: &Tensor) -> f64 {
    (0..a.rows()).map(|r| row_dist(a, b, r)).fold(0.0, f64::max)
}

fn single_layer(in_dim: usize, lc: &LayerConfig) -> ModelConfig {
    ModelConfig { in_dim, layers: vec![lc.clone()] }
}

/// Packages for every node of the whole graph, as one client.
pub fn whole_graph_packages(g: &Graph, variant: Variant, seed: u64) -> Result<PackageSet> {
    let plan = expand_l_hop(g, &PartitionPlan::single(g), 1)?;
    Ok(pretrain_round(g, &plan, &Neighborhoods::full(g), true, variant, seed)?.0)
}

/// First-layer FedGAT output on every node.
pub fn fedgat_first_layer(inst: &Instance, packages: &PackageSet, ps: &PowerSeries) -> Result<Tensor> {
    let targets: Vec<usize> = (0..inst.graph.n_nodes()).collect();
    approx_layer_unfused(&inst.params.layers[0], &inst.model.layers[0], packages, &targets, &ps.coeffs)
}

fn trajectory(inst: &Instance, p: usize, radius: f64, variant: Variant) -> Result<Trajectory> {
    let g = &inst.graph;
    let nbrs = Neighborhoods::full(g);
    let cfg = &inst.model;
    let lc0 = &cfg.layers[0];
    let ps = PowerSeries::for_scores(lc0.psi, radius, p)?;
    let packages = whole_graph_packages(g, variant, inst.seed)?;
    let exact = forward_layers(g.features(), cfg, &inst.params, &nbrs)?;
    let mut approx = fedgat_first_layer(inst, &packages, &ps)?;
    let eps1 = first_layer_score_error(inst, &ps);
    let delta1 = max_row_dist(&approx, &exact[0]);
    let (kphi, kpsi) = (kappa(lc0.phi), kappa(lc0.psi));
    let first_layer_margin = match ErrorBudget::coefficient_factor(eps1) {
        Some(f) => kphi * f - delta1,
        None => f64::INFINITY,
    };
    let mut layers = vec![ErrorBudget { eps: eps1, eps_hat: ErrorBudget::coefficient_factor(eps1), delta: delta1, kappa_phi: kphi, kappa_psi: kpsi, c: None, p }];
    let mut deeper = Vec::new();
    for l in 1..cfg.depth() {
        let lc = &cfg.layers[l];
        let (kphi, kpsi) = (kappa(lc.phi), kappa(lc.psi));
        let prev_exact = &exact[l - 1];
        let prev_delta = layers[l - 1].delta;
        let mut eps: f64 = 0.0;
        let mut scores = Vec::with_capacity(g.n_nodes());
        for head in &inst.params.layers[l] {
            for i in 0..g.n_nodes() {
                let nb = nbrs.of(i, lc.self_loops);
                let e: Vec<f64> = nb.iter().map(|&j| attention_score(prev_exact.row_slice(i), prev_exact.row_slice(j), head, lc.psi)).collect::<Result<_>>()?;
                let eh: Vec<f64> = nb.iter().map(|&j| attention_score(approx.row_slice(i), approx.row_slice(j), head, lc.psi)).collect::<Result<_>>()?;
                eps = e.iter().zip(&eh).map(|(a, b)| (a - b).abs()).fold(eps, f64::max);
                scores.push((e, eh));
            }
        }
        let sub = single_layer(cfg.layer_in_dim(l), lc);
        let sub_params = ModelParams { layers: vec![inst.params.layers[l].clone()] };
        let next = forward_layers(&approx, &sub, &sub_params, &nbrs)?.pop().expect("one layer");
        let delta = max_row_dist(&next, &exact[l]);
        let c = choose_c(prev_delta, kpsi);
        let eps_hat = ErrorBudget::coefficient_factor(eps);
        let margins = match (c, eps_hat) {
            (Some(c), Some(eh)) => {
                let mut coefficient = f64::INFINITY;
                for (e, ehat) in &scores {
                    let a = attention_coeffs(e)?;
                    let ah = attention_coeffs(ehat)?;
                    coefficient = a.iter().zip(&ah).map(|(x, y)| x * eh - (x - y).abs()).fold(coefficient, f64::min);
                }
                Some(LayerMargins {
                    score: 2.0 * c * kpsi * prev_delta - eps,
                    coefficient,
                    embedding: kphi * (eh + prev_delta) - delta,
                    growth: if prev_delta > 0.0 { delta / prev_delta } else { 0.0 },
                    growth_bound: kphi * (1.0 + 4.0 * c * kpsi),
                })
            }
            _ => None,
        };
        deeper.push(margins);
        layers.push(ErrorBudget { eps, eps_hat, delta, kappa_phi: kphi, kappa_psi: kpsi, c, p });
        approx = next;
    }
    Ok(Trajectory { instance: inst.seed, layers, first_layer_margin, deeper })
}

/// Per-layer error trajectory of FedGAT against the exact model.
pub fn verify_propagation(instances: &[Instance], p: usize, radius: f64, variant: Variant) -> Result<PropagationReport> {
    if let Some(inst) = instances.iter().find(|i| i.model.depth() > 4) {
        return invalid(format!("instance {} has {} layers; at most 4 are checked", inst.seed, inst.model.depth()));
    }
    let trajectories: Vec<Trajectory> = instances.par_iter().map(|inst| trajectory(inst, p, radius, variant)).collect::<Result<_>>()?;
    let mut rep = PropagationReport {
        p,
        radius,
        instances: instances.len(),
        first_layer_violations: 0,
        score_violations: 0,
        coefficient_violations: 0,
        embedding_violations: 0,
        growth_violations: 0,
        skipped_layers: 0,
        trajectories: Vec::new(),
    };
    for t in &trajectories {
        rep.first_layer_violations += usize::from(t.first_layer_margin < 0.0);
        for m in &t.deeper {
            match m {
                None => rep.skipped_layers += 1,
                Some(m) => {
                    rep.score_violations += usize::from(m.score < 0.0);
                    rep.coefficient_violations += usize::from(m.coefficient < 0.0);
                    rep.embedding_violations += usize::from(m.embedding < 0.0);
                    rep.growth_violations += usize::from(m.growth > m.growth_bound);
                }
            }
        }
    }
    rep.trajectories = trajectories;
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogBoundReport {
    pub points: usize,
    pub violations: usize,
    /// Smallest `c·x − (eˣ − 1)`.
    pub min_margin: f64,
}

/// `eˣ − 1 ≤ c·x` on an `nc × nx` grid with `c ∈ (1, 10]`, `x ∈ [0, log c]`.
pub fn verify_log_bound(nc: usize, nx: usize) -> LogBoundReport {
    let mut rep = LogBoundReport { points: 0, violations: 0, min_margin: f64::INFINITY };
    for a in 1..=nc {
        let c = 1.0 + 9.0 * a as f64 / nc as f64;
        for b in 0..nx {
            let x = c.ln() * b as f64 / (nx - 1).max(1) as f64;
            let margin = c * x - x.exp_m1();
            rep.points += 1;
            rep.min_margin = rep.min_margin.min(margin);
            if margin < 0.0 {
                rep.violations += 1;
            }
        }
    }
    rep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChebyshevProbe {
    pub function: String,
    pub k: usize,
    pub p: usize,
    pub variation: f64,
    pub bound: f64,
    pub measured: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChebyshevReport {
    pub probes: Vec<ChebyshevProbe>,
    pub violations: usize,
}

/// Chebyshev error of smooth and kinked score functions against the
/// closed-form rate, for each probed `(k, p)`.
pub fn verify_chebyshev_rate(radius: f64, degrees: &[usize]) -> Result<ChebyshevReport> {
    let cases: [(&str, Activation, &[usize]); 2] = [("exp", Activation::Identity, &[1, 2, 3]), ("exp(leaky_relu)", Activation::leaky_relu(0.2), &[1])];
    let mut probes = Vec::new();
    for (name, psi, ks) in cases {
        let f = move |x| psi_score(psi, x);
        for &k in ks {
            let variation = derivative_variation(&f, -radius, radius, k, 4000)?;
            for &p in degrees.iter().filter(|&&p| p > k) {
                let ps = ChebSeries::fit(&f, -radius, radius, p, DEFAULT_OVERSAMPLE)?.to_power_series()?;
                let measured = empirical_max_error(&f, &ps, 2001)?;
                let bound = chebyshev_bound(variation, k, p)?;
                probes.push(ChebyshevProbe { function: name.to_string(), k, p, variation, bound, measured });
            }
        }
    }
    let violations = probes.iter().filter(|q| q.measured > q.bound).count();
    Ok(ChebyshevReport { probes, violations })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub variant: Variant,
    pub clients: usize,
    pub beta: f64,
    pub graph_seed: u64,
    pub max_degree: usize,
    pub b_l: usize,
    pub d: usize,
    pub total: usize,
    pub closed_form: usize,
    /// `total / (K·B_L·d·B^k)` with `k = 2` (matrix) or `1` (vector).
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// Rows whose ledger differs from the closed form.
    pub mismatches: usize,
    /// Largest ratio per variant, matrix first.
    pub fitted_c: [f64; 2],
    /// Analytic constant: every ratio is at most this.
    pub analytic_c: [f64; 2],
    pub bound_violations: usize,
    /// Log-log slope of per-node cost in the degree, matrix first.
    pub degree_exponents: [f64; 2],
}

/// Per-node cost over `deg ∈ [lo, hi]`, least-squares slope of log cost.
pub fn degree_exponent(variant: Variant, d: usize, degs: &[usize]) -> f64 {
    let pts: Vec<(f64, f64)> = degs.iter().map(|&k| ((k as f64).ln(), (node_cost(variant, k, d) as f64).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostSweep {
    pub n: usize,
    pub d: usize,
    pub hops: usize,
    pub clients: Vec<usize>,
    pub betas: Vec<f64>,
    /// SBM edge probabilities `(p_in, p_out)`, one graph family each.
    pub densities: Vec<(f64, f64)>,
    pub seeds: Vec<u64>,
}

impl Default for CostSweep {
    fn default() -> Self {
        CostSweep {
            n: 120,
            d: 8,
            hops: 2,
            clients: vec![2, 5, 10, 20],
            betas: vec![1.0, 10000.0],
            densities: vec![(0.04, 0.005), (0.1, 0.01)],
            seeds: vec![0, 1],
        }
    }
}

/// Ledger totals against closed forms and the scaling bound.
pub fn verify_cost_scaling(sweep: &CostSweep) -> Result<CostReport> {
    let mut cells = Vec::new();
    for (gi, &(p_in, p_out)) in sweep.densities.iter().enumerate() {
        for &seed in &sweep.seeds {
            for &k in &sweep.clients {
                for &beta in &sweep.betas {
                    cells.push((gi, p_in, p_out, seed, k, beta));
                }
            }
        }
    }
    let rows: Vec<Vec<CostRow>> = cells
        .par_iter()
        .map(|&(gi, p_in, p_out, seed, k, beta)| {
            let graph_seed = seed * 100 + gi as u64;
            let g = generate_sbm(&SbmParams { n: sweep.n, classes: 4, p_in, p_out, dim: sweep.d, noise: 0.5, seed: graph_seed })?;
            let plan = expand_l_hop(&g, &dirichlet_partition(&g, k, beta, seed)?, sweep.hops)?;
            let nbrs = Neighborhoods::federated(&g, &plan);
            let degs: Vec<usize> = (0..g.n_nodes()).map(|i| nbrs.of(i, true).len()).collect();
            let b = g.max_degree().max(1);
            [Variant::Matrix, Variant::Vector]
                .into_iter()
                .map(|variant| {
                    let (_, ledger) = pretrain_round(&g, &plan, &nbrs, true, variant, seed)?;
                    let closed = CommLedger::closed_form(variant, sweep.d, &plan, &degs);
                    let power = if variant == Variant::Matrix { 2 } else { 1 };
                    let scale = (k * plan.b_l() * sweep.d) as f64 * (b as f64).powi(power);
                    Ok(CostRow {
                        variant,
                        clients: k,
                        beta,
                        graph_seed,
                        max_degree: b,
                        b_l: plan.b_l(),
                        d: sweep.d,
                        total: ledger.total(),
                        closed_form: if closed == ledger { ledger.total() } else { usize::MAX },
                        ratio: ledger.total() as f64 / scale,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<CostRow> = rows.into_iter().flatten().collect();
    let mismatches = rows.iter().filter(|r| r.closed_form != r.total).count();
    let fit = |v: Variant| rows.iter().filter(|r| r.variant == v).map(|r| r.ratio).fold(0.0, f64::max);
    // m = 2|N_i| ≤ 2(B + 1) ≤ 4B per node
    let analytic_c = [40.0, 20.0];
    let bound_violations = rows.iter().filter(|r| r.ratio > analytic_c[usize::from(r.variant == Variant::Vector)]).count();
    let degs: Vec<usize> = (0..8).map(|k| 16 << k).collect();
    Ok(CostReport {
        fitted_c: [fit(Variant::Matrix), fit(Variant::Vector)],
        analytic_c,
        bound_violations,
        degree_exponents: [degree_exponent(Variant::Matrix, sweep.d, &degs), degree_exponent(Variant::Vector, sweep.d, &degs)],
        rows,
        mismatches,
    })
}

/// Sizes of a full verification run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub radius: f64,
    pub degree: usize,
    pub degrees: Vec<usize>,
    pub score_instances: usize,
    pub coefficient_instances: usize,
    pub propagation_instances: usize,
    pub depth: usize,
    pub log_bound_grid: usize,
    pub variant: Variant,
    pub cost: CostSweep,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            radius: 2.0,
            degree: 16,
            degrees: vec![8, 16, 24],
            score_instances: 200,
            coefficient_instances: 1000,
            propagation_instances: 200,
            depth: 2,
            log_bound_grid: 100,
            variant: Variant::Vector,
            cost: CostSweep::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub score_error: ScoreErrorReport,
    pub chebyshev: ChebyshevReport,
    pub coefficient: CoefficientReport,
    pub coefficient_adversarial: CoefficientReport,
    pub propagation: PropagationReport,
    pub log_bound: LogBoundReport,
    pub cost_scaling: CostReport,
}

impl VerifyReport {
    /// Names of the checks that failed. The adversarial case is expected to
    /// fail and is not listed.
    pub fn failures(&self) -> Vec<&'static str> {
        let t = &self.propagation;
        [
            ("score error grows with degree", self.score_error.monotone_violations > 0),
            ("chebyshev rate", self.chebyshev.violations > 0),
            ("coefficient bound", self.coefficient.violations > 0),
            ("first-layer embedding bound", t.first_layer_violations > 0),
            ("deeper score bound", t.score_violations > 0),
            ("deeper coefficient bound", t.coefficient_violations > 0),
            ("deeper embedding bound", t.embedding_violations > 0),
            ("log bound", self.log_bound.violations > 0),
            ("ledger closed form", self.cost_scaling.mismatches > 0),
            ("cost scaling", self.cost_scaling.bound_violations > 0),
        ]
        .into_iter()
        .filter_map(|(name, bad)| bad.then_some(name))
        .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

pub fn run_all(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let shape = InstanceShape::default();
    let score = random_instances(&shape, cfg.score_instances, cfg.seed)?;
    let coeff = random_instances(&shape, cfg.coefficient_instances, cfg.seed.wrapping_add(1))?;
    let deep = InstanceShape { depth: cfg.depth, ..shape };
    let deeper = random_instances(&deep, cfg.propagation_instances, cfg.seed.wrapping_add(2))?;
    Ok(VerifyReport {
        config: cfg.clone(),
        score_error: verify_score_error(&score, &cfg.degrees, cfg.radius)?,
        chebyshev: verify_chebyshev_rate(cfg.radius, &cfg.degrees)?,
        coefficient: verify_coefficient_bound(&coeff, cfg.degree, cfg.radius)?,
        coefficient_adversarial: coefficient_adversarial()?,
        propagation: verify_propagation(&deeper, cfg.degree, cfg.radius, cfg.variant)?,
        log_bound: verify_log_bound(cfg.log_bound_grid, cfg.log_bound_grid),
        cost_scaling: verify_cost_scaling(&cfg.cost)?,
    })
}

#[cfg(test)]
mod tests;
