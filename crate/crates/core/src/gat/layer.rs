use std::sync::Arc;

use rayon::prelude::*;

use super::{HeadMerge, HeadParams, HeadVars, LayerConfig, ModelConfig, ModelParams, ParamVars};
use crate::activation::Activation;
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, PartitionPlan};
use crate::tensor::Tensor;

/// Per-node neighbor lists, without self loops. Lists may be asymmetric once
/// the single-foreign-neighbor rule has been applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhoods {
    lists: Vec<Vec<usize>>,
}

impl Neighborhoods {
    pub fn full(g: &Graph) -> Self {
        Neighborhoods { lists: (0..g.n_nodes()).map(|i| g.neighbors(i).to_vec()).collect() }
    }

    /// Neighborhoods seen by the federated model under `plan`.
    pub fn federated(g: &Graph, plan: &PartitionPlan) -> Self {
        Neighborhoods { lists: (0..g.n_nodes()).map(|i| plan.attention_neighbors(g, i, false)).collect() }
    }

    /// Only neighbors owned by the same client.
    pub fn intra_client(g: &Graph, plan: &PartitionPlan) -> Self {
        let lists = (0..g.n_nodes())
            .map(|i| g.neighbors(i).iter().copied().filter(|&j| !plan.is_cross(i, j)).collect())
            .collect();
        Neighborhoods { lists }
    }

    pub fn from_lists(mut lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        for (i, l) in lists.iter_mut().enumerate() {
            l.sort_unstable();
            l.dedup();
            if l.iter().any(|&j| j >= n || j == i) {
                return invalid(format!("neighbor list of {i} holds itself or an unknown node"));
            }
        }
        Ok(Neighborhoods { lists })
    }

    pub fn n_nodes(&self) -> usize {
        self.lists.len()
    }

    /// Sorted attention neighborhood of `i`.
    pub fn of(&self, i: usize, self_loops: bool) -> Vec<usize> {
        let mut nb = self.lists[i].clone();
        if self_loops {
            let pos = nb.partition_point(|&j| j < i);
            nb.insert(pos, i);
        }
        nb
    }

    pub fn raw(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }
}

/// Edge index for one layer in a local row space: target `t` lives in row
/// `target_rows[t]` of the input and attends to rows `lists[t]`.
#[derive(Clone, Debug)]
pub struct LocalEdges {
    n_targets: usize,
    tgt: Arc<[usize]>,
    src: Arc<[usize]>,
    seg: Arc<[usize]>,
}

impl LocalEdges {
    pub fn new(target_rows: &[usize], lists: &[Vec<usize>]) -> Result<Self> {
        if target_rows.len() != lists.len() {
            return Err(Error::shape("LocalEdges", "one neighbor list per target required"));
        }
        let mut tgt = Vec::new();
        let mut src = Vec::new();
        let mut seg = Vec::new();
        for (t, (&row, list)) in target_rows.iter().zip(lists).enumerate() {
            if list.is_empty() {
                return invalid(format!("target {t} has an empty neighborhood; enable self loops"));
            }
            for &j in list {
                tgt.push(row);
                src.push(j);
                seg.push(t);
            }
        }
        Ok(LocalEdges { n_targets: lists.len(), tgt: tgt.into(), src: src.into(), seg: seg.into() })
    }

    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }
}

/// One attention layer on the tape. `h` holds one row per local node; the
/// result has one row per target.
pub fn gat_layer_traced(tape: &mut Tape, h: Var, heads: &[HeadVars], cfg: &LayerConfig, edges: &LocalEdges) -> Result<Var> {
    let mut outs = Vec::with_capacity(heads.len());
    for hv in heads {
        let wt = tape.transpose(hv.w)?;
        let z = tape.matmul(h, wt)?;
        let s1 = tape.matmul(z, hv.a1)?;
        let s2 = tape.matmul(z, hv.a2)?;
        let xi = tape.gather_rows(s1, edges.tgt.clone())?;
        let xj = tape.gather_rows(s2, edges.src.clone())?;
        let x = tape.add(xi, xj)?;
        let px = tape.activation(x, cfg.psi)?;
        // per-target max shift; the coefficients do not depend on it
        let mut m = vec![f64::NEG_INFINITY; edges.n_targets];
        for (&t, &v) in edges.seg.iter().zip(tape.value(px).data()) {
            m[t] = m[t].max(v);
        }
        let shift = tape.constant(Tensor::column(edges.seg.iter().map(|&t| m[t]).collect()));
        let centered = tape.sub(px, shift)?;
        let e = tape.exp(centered)?;
        let den = tape.segment_sum(e, edges.seg.clone(), edges.n_targets)?;
        let zj = tape.gather_rows(z, edges.src.clone())?;
        let weighted = tape.mul_col(zj, e)?;
        let num = tape.segment_sum(weighted, edges.seg.clone(), edges.n_targets)?;
        outs.push(tape.div_col(num, den)?);
    }
    merge_heads(tape, &outs, cfg)
}

/// Applies `φ` and combines per-head aggregates.
pub(crate) fn merge_heads(tape: &mut Tape, outs: &[Var], cfg: &LayerConfig) -> Result<Var> {
    match cfg.merge {
        HeadMerge::Concat => {
            let acts: Result<Vec<Var>> = outs.iter().map(|&o| tape.activation(o, cfg.phi)).collect();
            let acts = acts?;
            if acts.len() == 1 {
                Ok(acts[0])
            } else {
                tape.concat_cols(&acts)
            }
        }
        HeadMerge::Average => {
            let avg = if outs.len() == 1 { outs[0] } else { tape.mean(outs)? };
            tape.activation(avg, cfg.phi)
        }
    }
}

fn global_edges(nbrs: &Neighborhoods, self_loops: bool) -> Result<LocalEdges> {
    let n = nbrs.n_nodes();
    let rows: Vec<usize> = (0..n).collect();
    let lists: Vec<Vec<usize>> = (0..n).map(|i| nbrs.of(i, self_loops)).collect();
    LocalEdges::new(&rows, &lists)
}

/// Output of every layer on the whole graph.
pub fn forward_layers(features: &Tensor, cfg: &ModelConfig, params: &ModelParams, nbrs: &Neighborhoods) -> Result<Vec<Tensor>> {
    if features.rows() != nbrs.n_nodes() || features.cols() != cfg.in_dim {
        return Err(Error::shape("forward", format!("features {:?} for {} nodes, in_dim {}", features.shape(), nbrs.n_nodes(), cfg.in_dim)));
    }
    let mut tape = Tape::new();
    let pv = params.record(&mut tape);
    let mut h = tape.constant(features.clone());
    let mut outs = Vec::with_capacity(cfg.depth());
    for (l, lc) in cfg.layers.iter().enumerate() {
        let edges = global_edges(nbrs, lc.self_loops)?;
        h = gat_layer_traced(&mut tape, h, &pv.layers[l], lc, &edges)?;
        outs.push(tape.value(h).clone());
    }
    Ok(outs)
}

/// Logits of every node.
pub fn forward(features: &Tensor, cfg: &ModelConfig, params: &ModelParams, nbrs: &Neighborhoods) -> Result<Tensor> {
    Ok(forward_layers(features, cfg, params, nbrs)?.pop().expect("at least one layer"))
}

/// Traced forward of one client that only sees its owned nodes and the edges
/// among them. Returns the logits of `owned`, in order.
pub(crate) fn isolated_client_traced(
    tape: &mut Tape,
    pv: &ParamVars,
    g: &Graph,
    owned: &[usize],
    nbrs: &Neighborhoods,
    cfg: &ModelConfig,
) -> Result<Var> {
    let mut local = vec![usize::MAX; g.n_nodes()];
    for (r, &i) in owned.iter().enumerate() {
        local[i] = r;
    }
    let rows: Vec<usize> = (0..owned.len()).collect();
    let mut h = tape.constant(g.features().select_rows(owned));
    for (l, lc) in cfg.layers.iter().enumerate() {
        let lists: Vec<Vec<usize>> = owned
            .iter()
            .map(|&i| nbrs.of(i, lc.self_loops).into_iter().filter(|&j| local[j] != usize::MAX).map(|j| local[j]).collect())
            .collect();
        let edges = LocalEdges::new(&rows, &lists)?;
        h = gat_layer_traced(tape, h, &pv.layers[l], lc, &edges)?;
    }
    Ok(h)
}

/// Each client runs the model on its own nodes with cross-client edges
/// removed. Entry `k` holds the logits of `plan.owned(k)`.
pub fn dist_gat_forward(g: &Graph, plan: &PartitionPlan, cfg: &ModelConfig, params: &ModelParams) -> Result<Vec<Tensor>> {
    let nbrs = Neighborhoods::intra_client(g, plan);
    (0..plan.n_clients)
        .into_par_iter()
        .map(|k| {
            let owned = plan.owned(k);
            let mut tape = Tape::new();
            let pv = params.record(&mut tape);
            let out = isolated_client_traced(&mut tape, &pv, g, &owned, &nbrs, cfg)?;
            Ok(tape.value(out).clone())
        })
        .collect()
}

/// `a1ᵀW h_i + a2ᵀW h_j`.
pub fn attention_logit(h_i: &[f64], h_j: &[f64], head: &HeadParams) -> f64 {
    let (b1, b2) = head.projection();
    let dot = |b: &Tensor, h: &[f64]| b.data().iter().zip(h).map(|(x, y)| x * y).sum::<f64>();
    dot(&b1, h_i) + dot(&b2, h_j)
}

/// `e_ij = exp(ψ(a1ᵀW h_i + a2ᵀW h_j))`.
pub fn attention_score(h_i: &[f64], h_j: &[f64], head: &HeadParams, psi: Activation) -> Result<f64> {
    let e = psi.apply(attention_logit(h_i, h_j, head)).exp();
    if !e.is_finite() {
        return Err(Error::Numeric(format!("attention score overflowed ({e})")));
    }
    Ok(e)
}

/// Normalizes nonnegative scores over one neighborhood.
pub fn attention_coeffs(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return invalid("empty neighborhood: no attention coefficients");
    }
    let total: f64 = scores.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numeric(format!("score sum {total} is not positive and finite")));
    }
    Ok(scores.iter().map(|s| s / total).collect())
}
