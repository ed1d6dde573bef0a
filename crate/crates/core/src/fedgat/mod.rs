//! Client-side approximate attention layer and the multi-client forward pass.
//!
//! The first layer never sees foreign features: each owned node aggregates
//! through its package, with `num = Σ_n q_n E^(n)` and `den = Σ_n q_n F^(n)`
//! standing in for `Σ_j e_ij h_j` and `Σ_j e_ij`. Deeper layers are ordinary
//! attention layers over the client's owned nodes and their foreign
//! neighbors, whose rows are either recomputed locally from downloaded
//! packages or published by their owners after every layer.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::gat::{gat_layer_traced, merge_heads, HeadParams, HeadVars, LayerConfig, LocalEdges, ModelConfig, ModelParams, Neighborhoods, ParamVars};
use crate::graph::{Graph, PartitionPlan};
use crate::precompute::PackageSet;
use crate::tensor::Tensor;

/// Fused package aggregation for one head. Input: `b = [b1ᵀ, b2ᵀ]` as a
/// `1 × 2d` row. Output: one row `[num | den]` per target.
#[derive(Debug)]
pub struct FedGatAggregate {
    packages: Arc<PackageSet>,
    targets: Arc<[usize]>,
    q: Arc<[f64]>,
}

impl FedGatAggregate {
    pub fn new(packages: Arc<PackageSet>, targets: impl Into<Arc<[usize]>>, q: impl Into<Arc<[f64]>>) -> Result<Self> {
        let targets = targets.into();
        for &i in targets.iter() {
            if packages.get(i).is_none() {
                return Err(Error::Protocol(format!("node {i} has no pre-training package")));
            }
        }
        Ok(FedGatAggregate { packages, targets, q: q.into() })
    }

    fn check_b(&self, b: &Tensor) -> Result<()> {
        if b.rows() != 1 || b.cols() != 2 * self.packages.d {
            return Err(Error::shape("fedgat_aggregate", format!("b is {:?}, expected 1x{}", b.shape(), 2 * self.packages.d)));
        }
        Ok(())
    }
}

impl CustomOp for FedGatAggregate {
    fn name(&self) -> &'static str {
        "fedgat_aggregate"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let b = inputs[0];
        self.check_b(b)?;
        let d = self.packages.d;
        let rows: Vec<Vec<f64>> = self
            .targets
            .par_iter()
            .map(|&i| {
                let pkg = self.packages.get(i).expect("checked at construction");
                let (mut num, den) = pkg.aggregate(b.data(), &self.q);
                if !den.is_finite() || num.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: format!("fedgat_aggregate at node {i}") });
                }
                if den <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "approximate score sum {den} at node {i} is not positive; attention logits left the region where the series keeps its positivity margin"
                    )));
                }
                num.push(den);
                Ok(num)
            })
            .collect::<Result<_>>()?;
        Tensor::matrix(rows.len(), d + 1, rows.concat())
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let b = inputs[0];
        let d = self.packages.d;
        let parts: Vec<Vec<f64>> = self
            .targets
            .par_iter()
            .enumerate()
            .map(|(t, &i)| {
                let g = grad.row_slice(t);
                let mut gb = vec![0.0; 2 * d];
                if g.iter().any(|&v| v != 0.0) {
                    let pkg = self.packages.get(i).expect("checked at construction");
                    pkg.aggregate_backward(b.data(), &self.q, &g[..d], g[d], &mut gb);
                }
                gb
            })
            .collect();
        // fixed summation order keeps the result independent of scheduling
        let mut total = vec![0.0; 2 * d];
        for p in &parts {
            total.iter_mut().zip(p).for_each(|(a, v)| *a += v);
        }
        Ok(vec![Tensor::row(total)])
    }
}

/// Approximate first layer on the tape; one output row per target.
pub fn approx_layer_traced(
    tape: &mut Tape,
    heads: &[HeadVars],
    cfg: &LayerConfig,
    packages: &Arc<PackageSet>,
    targets: &[usize],
    q: &Arc<[f64]>,
) -> Result<Var> {
    let d = packages.d;
    let targets: Arc<[usize]> = targets.into();
    let mut outs = Vec::with_capacity(heads.len());
    for hv in heads {
        if tape.value(hv.w).cols() != d {
            return Err(Error::shape("approx_layer", format!("W has {} columns, packages have d = {d}", tape.value(hv.w).cols())));
        }
        let a1t = tape.transpose(hv.a1)?;
        let a2t = tape.transpose(hv.a2)?;
        let b1 = tape.matmul(a1t, hv.w)?;
        let b2 = tape.matmul(a2t, hv.w)?;
        let b = tape.concat_cols(&[b1, b2])?;
        let op = FedGatAggregate::new(packages.clone(), targets.clone(), q.clone())?;
        let agg = tape.custom(Arc::new(op), &[b])?;
        let num = tape.slice_cols(agg, 0, d)?;
        let den = tape.slice_cols(agg, d, d + 1)?;
        let mean = tape.div_col(num, den)?;
        let wt = tape.transpose(hv.w)?;
        outs.push(tape.matmul(mean, wt)?);
    }
    merge_heads(tape, &outs, cfg)
}

/// Same layer evaluated from explicit moment lists, without the fused kernel.
pub fn approx_layer_unfused(heads: &[HeadParams], cfg: &LayerConfig, packages: &PackageSet, targets: &[usize], q: &[f64]) -> Result<Tensor> {
    let p = q.len().saturating_sub(1);
    let mut tape = Tape::new();
    let mut outs = Vec::with_capacity(heads.len());
    for h in heads {
        let (b1, b2) = h.projection();
        let b: Vec<f64> = b1.data().iter().chain(b2.data()).copied().collect();
        let mut rows = Vec::with_capacity(targets.len());
        for &i in targets {
            let pkg = packages.get(i).ok_or_else(|| Error::Protocol(format!("node {i} has no pre-training package")))?;
            let (e, f) = pkg.moments(&b, p);
            let den: f64 = q.iter().zip(&f).map(|(a, b)| a * b).sum();
            let num: Vec<f64> = (0..packages.d).map(|s| q.iter().zip(&e).map(|(a, en)| a * en[s]).sum::<f64>() / den).collect();
            rows.push(num);
        }
        let mean = Tensor::from_rows(&rows)?;
        outs.push(tape.constant(mean.matmul(&h.w.transpose())?));
    }
    let out = merge_heads(&mut tape, &outs, cfg)?;
    Ok(tape.value(out).clone())
}

/// Smallest and largest first-layer logit over all edges and heads. This
/// reads raw features and is meant for server-side diagnostics and tests.
pub fn logit_range(g: &Graph, nbrs: &Neighborhoods, self_loops: bool, heads: &[HeadParams]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for h in heads {
        for i in 0..g.n_nodes() {
            for j in nbrs.of(i, self_loops) {
                let x = crate::gat::attention_logit(g.feature(i), g.feature(j), h);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
    }
    (lo, hi)
}

/// How the first layer is computed.
#[derive(Clone, Debug)]
pub enum FirstLayer {
    /// From pre-training packages with series coefficients `q`.
    Approx { packages: Arc<PackageSet>, q: Arc<[f64]> },
    /// Exact attention; foreign neighbors contribute raw features.
    Exact,
}

/// Where a client's foreign rows for layers past the first come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForeignRows {
    /// Recomputed on the client's own tape from the L-hop packages it
    /// downloaded; gradients reach the foreign computation and nothing
    /// is exchanged during training.
    #[default]
    Local,
    /// Published by the owning client after every layer of every forward
    /// pass and received as constants.
    Exchanged,
}

impl fmt::Display for ForeignRows {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForeignRows::Local => "local",
            ForeignRows::Exchanged => "exchanged",
        })
    }
}

impl FromStr for ForeignRows {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(ForeignRows::Local),
            "exchanged" => Ok(ForeignRows::Exchanged),
            _ => Err(Error::Invalid(format!("unknown foreign-row mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
struct ClientView {
    owned: Vec<usize>,
    /// Foreign one-hop neighbors of owned nodes, ascending.
    foreign: Vec<usize>,
    /// Global ids of the output rows of each layer. The last entry is `owned`.
    targets: Vec<Vec<usize>>,
    /// Global ids of the first layer's input rows.
    inputs: Vec<usize>,
    /// Edge index per layer; `None` for an approximate first layer.
    edges: Vec<Option<LocalEdges>>,
}

/// Partitioned model evaluation. Each client computes layer `l` for the
/// nodes its later layers read; in the exchanged mode the clients run in
/// lockstep and publish owned rows between layers.
#[derive(Clone, Debug)]
pub struct Federation {
    cfg: ModelConfig,
    first: FirstLayer,
    rows: ForeignRows,
    clients: Vec<ClientView>,
    n_nodes: usize,
}

fn with_neighbors(base: &[usize], nbrs: &Neighborhoods) -> Vec<usize> {
    let mut seen: std::collections::HashSet<usize> = base.iter().copied().collect();
    let mut extra: Vec<usize> = base.iter().flat_map(|&i| nbrs.raw(i).iter().copied()).filter(|j| !seen.contains(j)).collect();
    extra.sort_unstable();
    extra.dedup();
    seen.extend(&extra);
    base.iter().copied().chain(extra).collect()
}

impl Federation {
    pub fn new(g: &Graph, plan: &PartitionPlan, nbrs: &Neighborhoods, cfg: &ModelConfig, first: FirstLayer, rows: ForeignRows) -> Result<Self> {
        cfg.validate()?;
        let n = g.n_nodes();
        if cfg.in_dim != g.feature_dim() || plan.owner.len() != n || nbrs.n_nodes() != n {
            return Err(Error::shape("Federation", "graph, plan, neighborhoods and model disagree"));
        }
        let approx = matches!(first, FirstLayer::Approx { .. });
        let depth = cfg.depth();
        let mut clients = Vec::with_capacity(plan.n_clients);
        for k in 0..plan.n_clients {
            let owned = plan.owned(k);
            let mut foreign: Vec<usize> = owned.iter().flat_map(|&i| nbrs.raw(i).iter().copied()).filter(|&j| plan.owner[j] != k).collect();
            foreign.sort_unstable();
            foreign.dedup();
            let (targets, mut layer_inputs): (Vec<Vec<usize>>, Vec<Vec<usize>>) = match rows {
                ForeignRows::Local => {
                    let mut sets = vec![owned.clone()];
                    for _ in 0..depth {
                        let next = with_neighbors(sets.last().expect("non-empty"), nbrs);
                        sets.push(next);
                    }
                    sets.reverse();
                    (sets[1..].to_vec(), sets[..depth].to_vec())
                }
                ForeignRows::Exchanged => {
                    let all: Vec<usize> = owned.iter().chain(&foreign).copied().collect();
                    (vec![owned.clone(); depth], vec![all; depth])
                }
            };
            let mut local = vec![usize::MAX; n];
            let edges = cfg
                .layers
                .iter()
                .enumerate()
                .map(|(l, lc)| {
                    if l == 0 && approx {
                        return Ok(None);
                    }
                    for (r, &i) in layer_inputs[l].iter().enumerate() {
                        local[i] = r;
                    }
                    let lists: Vec<Vec<usize>> =
                        targets[l].iter().map(|&i| nbrs.of(i, lc.self_loops).into_iter().map(|j| local[j]).collect()).collect();
                    for &i in &layer_inputs[l] {
                        local[i] = usize::MAX;
                    }
                    let out: Vec<usize> = (0..targets[l].len()).collect();
                    LocalEdges::new(&out, &lists).map(Some)
                })
                .collect::<Result<_>>()?;
            let inputs = std::mem::take(&mut layer_inputs[0]);
            clients.push(ClientView { owned, foreign, targets, inputs, edges });
        }
        if let FirstLayer::Approx { packages, .. } = &first {
            if packages.d != g.feature_dim() || packages.n_nodes() != n {
                return Err(Error::shape("Federation", "packages were built for a different graph"));
            }
            let sl = cfg.layers[0].self_loops;
            for c in &clients {
                for &i in &c.targets[0] {
                    let want = nbrs.of(i, sl).len();
                    match packages.get(i) {
                        Some(p) if p.deg() == want => {}
                        Some(p) => {
                            return Err(Error::Protocol(format!("package of node {i} covers {} nodes, neighborhood has {want}", p.deg())))
                        }
                        None if want == 0 => {}
                        None => return Err(Error::Protocol(format!("node {i} has no pre-training package"))),
                    }
                }
            }
        }
        Ok(Federation { cfg: cfg.clone(), first, rows, clients, n_nodes: n })
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn foreign_rows(&self) -> ForeignRows {
        self.rows
    }

    pub fn owned(&self, k: usize) -> &[usize] {
        &self.clients[k].owned
    }

    pub fn foreign(&self, k: usize) -> &[usize] {
        &self.clients[k].foreign
    }

    /// Nodes whose first-layer rows client `k` computes.
    pub fn first_layer_targets(&self, k: usize) -> &[usize] {
        &self.clients[k].targets[0]
    }

    /// Scalars published between clients during one forward pass.
    pub fn exchange_per_forward(&self) -> usize {
        if self.rows == ForeignRows::Local {
            return 0;
        }
        let foreign: usize = self.clients.iter().map(|c| c.foreign.len()).sum();
        let mut widths: usize = (1..self.cfg.depth()).map(|l| self.cfg.layers[l - 1].output_dim()).sum();
        if matches!(self.first, FirstLayer::Exact) {
            widths += self.cfg.in_dim;
        }
        foreign * widths
    }

    fn first_layer(&self, g: &Graph, k: usize, tape: &mut Tape, pv: &ParamVars) -> Result<Var> {
        let c = &self.clients[k];
        let lc = &self.cfg.layers[0];
        match &self.first {
            FirstLayer::Approx { packages, q } => approx_layer_traced(tape, &pv.layers[0], lc, packages, &c.targets[0], q),
            FirstLayer::Exact => {
                let h = tape.constant(g.features().select_rows(&c.inputs));
                gat_layer_traced(tape, h, &pv.layers[0], lc, c.edges[0].as_ref().expect("exact edges"))
            }
        }
    }

    /// Runs every client on its own tape and returns the logits of each
    /// client's owned nodes. Exchanged rows enter as constants.
    pub fn forward_traced(&self, g: &Graph, tapes: &mut [Tape], vars: &[ParamVars]) -> Result<Vec<Var>> {
        if tapes.len() != self.clients.len() || vars.len() != self.clients.len() {
            return Err(Error::shape("forward_traced", "one tape and one parameter set per client"));
        }
        let mut h: Vec<Var> = tapes
            .par_iter_mut()
            .zip(vars.par_iter())
            .enumerate()
            .map(|(k, (tape, pv))| self.first_layer(g, k, tape, pv))
            .collect::<Result<_>>()?;
        for l in 1..self.cfg.depth() {
            let table = match self.rows {
                ForeignRows::Local => None,
                ForeignRows::Exchanged => {
                    let width = self.cfg.layers[l - 1].output_dim();
                    let mut table = Tensor::zeros(self.n_nodes, width);
                    for (c, (tape, &hk)) in self.clients.iter().zip(tapes.iter().zip(&h)) {
                        let value = tape.value(hk);
                        for (r, &i) in c.owned.iter().enumerate() {
                            table.data_mut()[i * width..(i + 1) * width].copy_from_slice(value.row_slice(r));
                        }
                    }
                    Some(table)
                }
            };
            let lc = &self.cfg.layers[l];
            h = tapes
                .par_iter_mut()
                .zip(vars.par_iter())
                .enumerate()
                .map(|(k, (tape, pv))| {
                    let c = &self.clients[k];
                    let input = match &table {
                        Some(t) if !c.foreign.is_empty() => {
                            let received = tape.constant(t.select_rows(&c.foreign));
                            tape.concat_rows(&[h[k], received])?
                        }
                        _ => h[k],
                    };
                    gat_layer_traced(tape, input, &pv.layers[l], lc, c.edges[l].as_ref().expect("exact edges"))
                })
                .collect::<Result<_>>()?;
        }
        Ok(h)
    }

    /// Untraced forward with the same parameters on every client.
    pub fn forward(&self, g: &Graph, params: &ModelParams) -> Result<Vec<Tensor>> {
        let mut tapes: Vec<Tape> = (0..self.n_clients()).map(|_| Tape::new()).collect();
        let vars: Vec<ParamVars> = tapes.iter_mut().map(|t| params.record(t)).collect();
        let outs = self.forward_traced(g, &mut tapes, &vars)?;
        Ok(tapes.iter().zip(outs).map(|(t, v)| t.value(v).clone()).collect())
    }

    /// Scatters per-client rows into one `n × width` matrix.
    pub fn assemble(&self, per_client: &[Tensor]) -> Result<Tensor> {
        let width = per_client.first().map_or(0, |t| t.cols());
        let mut out = Tensor::zeros(self.n_nodes, width);
        for (c, t) in self.clients.iter().zip(per_client) {
            if t.rows() != c.owned.len() || t.cols() != width {
                return Err(Error::shape("assemble", "client output does not match its node count"));
            }
            for (r, &i) in c.owned.iter().enumerate() {
                out.data_mut()[i * width..(i + 1) * width].copy_from_slice(t.row_slice(r));
            }
        }
        Ok(out)
    }

    pub fn forward_global(&self, g: &Graph, params: &ModelParams) -> Result<Tensor> {
        self.assemble(&self.forward(g, params)?)
    }
}
