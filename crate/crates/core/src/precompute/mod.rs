//! Server-side pre-training round: per-node packages and their
//! communication cost.

pub mod matrix;
pub mod ortho;
pub mod vector;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use matrix::MatrixPackage;
pub use ortho::{build_u, OrthoSet};
pub use vector::{VectorPackage, VectorWitness};

use crate::error::{invalid, Error, Result};
use crate::gat::Neighborhoods;
use crate::graph::{Graph, PartitionPlan};
use crate::store;

const PACKAGE_KIND: &str = "packages";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Matrix,
    Vector,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Matrix => "matrix",
            Variant::Vector => "vector",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matrix" => Ok(Variant::Matrix),
            "vector" => Ok(Variant::Vector),
            _ => invalid(format!("unknown package variant {s:?}")),
        }
    }
}

/// Scalars in one package for a neighborhood of `deg` nodes (self loop
/// included) and feature width `d`.
pub fn node_cost(variant: Variant, deg: usize, d: usize) -> usize {
    let m = 2 * deg;
    match variant {
        Variant::Matrix => 2 * d * m * m + m + m * d,
        Variant::Vector => 3 * m * d + 2 * m,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NodePackage {
    Matrix(MatrixPackage),
    Vector(VectorPackage),
}

impl NodePackage {
    pub fn deg(&self) -> usize {
        match self {
            NodePackage::Matrix(p) => p.deg(),
            NodePackage::Vector(p) => p.deg(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            NodePackage::Matrix(p) => p.d,
            NodePackage::Vector(p) => p.d,
        }
    }

    pub fn scalar_count(&self) -> usize {
        match self {
            NodePackage::Matrix(p) => p.scalar_count(),
            NodePackage::Vector(p) => p.scalar_count(),
        }
    }

    pub fn moments(&self, b: &[f64], p: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        match self {
            NodePackage::Matrix(pk) => pk.moments(b, p),
            NodePackage::Vector(pk) => pk.moments(b, p),
        }
    }

    /// `(Σ_n q_n E^(n), Σ_n q_n F^(n))`.
    pub fn aggregate(&self, b: &[f64], q: &[f64]) -> (Vec<f64>, f64) {
        match self {
            NodePackage::Matrix(pk) => pk.aggregate(b, q),
            NodePackage::Vector(pk) => pk.aggregate(b, q),
        }
    }

    /// Accumulates the gradient with respect to `b` into `gb`.
    pub fn aggregate_backward(&self, b: &[f64], q: &[f64], gnum: &[f64], gden: f64, gb: &mut [f64]) {
        match self {
            NodePackage::Matrix(pk) => pk.aggregate_backward(b, q, gnum, gden, gb),
            NodePackage::Vector(pk) => pk.aggregate_backward(b, q, gnum, gden, gb),
        }
    }

    fn payload(&self, out: &mut Vec<f64>) {
        match self {
            NodePackage::Matrix(p) => p.payload(out),
            NodePackage::Vector(p) => p.payload(out),
        }
    }
}

/// Builds the package of node `i` from its attention neighborhood, seeding a
/// private stream from `(seed, i)`.
pub fn build_node_package(g: &Graph, i: usize, nbrs: &[usize], variant: Variant, seed: u64) -> Result<NodePackage> {
    if nbrs.is_empty() {
        return invalid(format!("node {i} has an empty attention neighborhood"));
    }
    let mut rng = node_rng(seed, i);
    Ok(match variant {
        Variant::Matrix => {
            let set = OrthoSet::generate(nbrs.len(), &mut rng)?;
            NodePackage::Matrix(MatrixPackage::build(g.features(), i, nbrs, &set)?)
        }
        Variant::Vector => NodePackage::Vector(VectorPackage::build(g.features(), i, nbrs, &mut rng)?.0),
    })
}

pub fn node_rng(seed: u64, node: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(node as u64);
    rng
}

/// One package per node; `None` marks nodes with an empty neighborhood.
#[derive(Clone, Debug, PartialEq)]
pub struct PackageSet {
    pub variant: Variant,
    pub d: usize,
    pub seed: u64,
    pub packages: Vec<Option<NodePackage>>,
}

#[derive(Serialize, Deserialize)]
struct PackageMeta {
    variant: Variant,
    d: usize,
    seed: u64,
    /// Neighborhood size of each node, zero when omitted.
    degs: Vec<usize>,
}

impl PackageSet {
    pub fn n_nodes(&self) -> usize {
        self.packages.len()
    }

    pub fn get(&self, i: usize) -> Option<&NodePackage> {
        self.packages.get(i).and_then(|p| p.as_ref())
    }

    pub fn omitted(&self) -> Vec<usize> {
        (0..self.packages.len()).filter(|&i| self.packages[i].is_none()).collect()
    }

    /// Returns the payload digest.
    pub fn save(&self, path: &Path) -> Result<String> {
        let degs = self.packages.iter().map(|p| p.as_ref().map_or(0, |p| p.deg())).collect();
        let mut payload = Vec::new();
        for p in self.packages.iter().flatten() {
            p.payload(&mut payload);
        }
        let meta = PackageMeta { variant: self.variant, d: self.d, seed: self.seed, degs };
        store::write(path, PACKAGE_KIND, &meta, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, data): (PackageMeta, Vec<f64>) = store::read(path, PACKAGE_KIND)?;
        let mut off = 0;
        let mut packages = Vec::with_capacity(meta.degs.len());
        for &deg in &meta.degs {
            if deg == 0 {
                packages.push(None);
                continue;
            }
            let rest = &data[off..];
            let (pkg, used) = match meta.variant {
                Variant::Matrix => {
                    let (p, u) = MatrixPackage::from_payload(2 * deg, meta.d, rest)?;
                    (NodePackage::Matrix(p), u)
                }
                Variant::Vector => {
                    let (p, u) = VectorPackage::from_payload(2 * deg, meta.d, rest)?;
                    (NodePackage::Vector(p), u)
                }
            };
            off += used;
            packages.push(Some(pkg));
        }
        if off != data.len() {
            return invalid(format!("{}: {} trailing payload values", path.display(), data.len() - off));
        }
        Ok(PackageSet { variant: meta.variant, d: meta.d, seed: meta.seed, packages })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientComm {
    pub client: usize,
    /// Nodes of the client subgraph that received a package.
    pub nodes: usize,
    pub upload: usize,
    pub download: usize,
}

/// Scalar counts of the pre-training round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub variant: Variant,
    pub d: usize,
    pub clients: Vec<ClientComm>,
    pub total_upload: usize,
    pub total_download: usize,
}

impl CommLedger {
    pub fn total(&self) -> usize {
        self.total_upload + self.total_download
    }

    /// Closed-form count from neighborhood sizes alone.
    pub fn closed_form(variant: Variant, d: usize, plan: &PartitionPlan, degs: &[usize]) -> Self {
        let counts = plan.owned_counts();
        let clients: Vec<ClientComm> = (0..plan.n_clients)
            .map(|k| {
                let nodes: Vec<usize> = plan.client_nodes[k].iter().copied().filter(|&i| degs[i] > 0).collect();
                ClientComm {
                    client: k,
                    nodes: nodes.len(),
                    upload: counts[k] * d,
                    download: nodes.iter().map(|&i| node_cost(variant, degs[i], d)).sum(),
                }
            })
            .collect();
        let total_upload = clients.iter().map(|c| c.upload).sum();
        let total_download = clients.iter().map(|c| c.download).sum();
        CommLedger { variant, d, clients, total_upload, total_download }
    }
}

/// Attention neighborhood sizes for every node.
pub fn neighborhood_sizes(nbrs: &Neighborhoods, self_loops: bool) -> Vec<usize> {
    (0..nbrs.n_nodes()).map(|i| nbrs.raw(i).len() + usize::from(self_loops)).collect()
}

/// Builds packages for every node that appears in some client subgraph and
/// meters what each client uploads and downloads. Download counts are taken
/// from the built packages, not from the formula.
pub fn pretrain_round(
    g: &Graph,
    plan: &PartitionPlan,
    nbrs: &Neighborhoods,
    self_loops: bool,
    variant: Variant,
    seed: u64,
) -> Result<(PackageSet, CommLedger)> {
    if plan.hops == 0 {
        return invalid("pre-training needs a plan expanded to its L-hop subgraphs");
    }
    if plan.owner.len() != g.n_nodes() || nbrs.n_nodes() != g.n_nodes() {
        return Err(Error::shape("pretrain_round", "plan, neighborhoods and graph disagree on node count"));
    }
    let mut needed = vec![false; g.n_nodes()];
    plan.client_nodes.iter().flatten().for_each(|&i| needed[i] = true);
    let packages: Vec<Option<NodePackage>> = (0..g.n_nodes())
        .into_par_iter()
        .map(|i| {
            let nb = nbrs.of(i, self_loops);
            if !needed[i] || nb.is_empty() {
                return Ok(None);
            }
            build_node_package(g, i, &nb, variant, seed).map(Some)
        })
        .collect::<Result<_>>()?;
    let counts = plan.owned_counts();
    let d = g.feature_dim();
    let clients: Vec<ClientComm> = (0..plan.n_clients)
        .map(|k| {
            let held: Vec<&NodePackage> = plan.client_nodes[k].iter().filter_map(|&i| packages[i].as_ref()).collect();
            ClientComm {
                client: k,
                nodes: held.len(),
                upload: counts[k] * d,
                download: held.iter().map(|p| p.scalar_count()).sum(),
            }
        })
        .collect();
    let total_upload = clients.iter().map(|c| c.upload).sum();
    let total_download = clients.iter().map(|c| c.download).sum();
    let ledger = CommLedger { variant, d, clients, total_upload, total_download };
    Ok((PackageSet { variant, d, seed, packages }, ledger))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{dirichlet_partition, expand_l_hop, generate_sbm, Masks, SbmParams};
    use crate::tensor::Tensor;

    fn sbm(seed: u64) -> Graph {
        generate_sbm(&SbmParams { n: 120, classes: 3, p_in: 0.08, p_out: 0.01, dim: 4, noise: 0.3, seed }).unwrap()
    }

    #[test]
    fn hand_expanded_costs() {
        assert_eq!(node_cost(Variant::Matrix, 2, 3), 3 * 2 * 16 + 4 + 4 * 3);
        assert_eq!(node_cost(Variant::Matrix, 2, 3), 112);
        assert_eq!(node_cost(Variant::Vector, 2, 3), 3 * 4 * 3 + 2 * 4);
    }

    #[test]
    fn package_sizes_match_formula() {
        let g = sbm(0);
        for variant in [Variant::Matrix, Variant::Vector] {
            for i in [0, 7, 33] {
                let nb = Neighborhoods::full(&g).of(i, true);
                let p = build_node_package(&g, i, &nb, variant, 1).unwrap();
                assert_eq!(p.scalar_count(), node_cost(variant, nb.len(), g.feature_dim()));
            }
        }
    }

    #[test]
    fn single_client_ledger_is_closed_form() {
        let g = sbm(1);
        let plan = expand_l_hop(&g, &PartitionPlan::single(&g), 2).unwrap();
        let nbrs = Neighborhoods::federated(&g, &plan);
        for variant in [Variant::Matrix, Variant::Vector] {
            let (_, ledger) = pretrain_round(&g, &plan, &nbrs, true, variant, 3).unwrap();
            let expected: usize = (0..g.n_nodes()).map(|i| node_cost(variant, g.degree(i) + 1, g.feature_dim())).sum();
            assert_eq!(ledger.total_download, expected);
            assert_eq!(ledger.total_upload, g.n_nodes() * g.feature_dim());
        }
    }

    #[test]
    fn multi_client_ledger_is_closed_form() {
        let g = sbm(2);
        let plan = expand_l_hop(&g, &dirichlet_partition(&g, 5, 1.0, 4).unwrap(), 2).unwrap();
        let nbrs = Neighborhoods::federated(&g, &plan);
        let degs = neighborhood_sizes(&nbrs, true);
        for variant in [Variant::Matrix, Variant::Vector] {
            let (_, ledger) = pretrain_round(&g, &plan, &nbrs, true, variant, 9).unwrap();
            assert_eq!(ledger, CommLedger::closed_form(variant, g.feature_dim(), &plan, &degs));
        }
    }

    #[test]
    fn unexpanded_plan_is_rejected() {
        let g = sbm(0);
        let plan = PartitionPlan::single(&g);
        assert!(pretrain_round(&g, &plan, &Neighborhoods::full(&g), true, Variant::Matrix, 0).is_err());
    }

    #[test]
    fn empty_neighborhood_is_omitted() {
        let feats = Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.1, 0.0, 0.5]).unwrap();
        let g = Graph::new(feats, vec![0, 1, 0], 2, vec![(0, 1)], Masks { train: vec![0], val: vec![1], test: vec![2] }).unwrap();
        let plan = expand_l_hop(&g, &PartitionPlan::single(&g), 1).unwrap();
        let (set, ledger) = pretrain_round(&g, &plan, &Neighborhoods::full(&g), false, Variant::Vector, 0).unwrap();
        assert_eq!(set.omitted(), vec![2]);
        assert_eq!(ledger.clients[0].nodes, 2);
    }

    #[test]
    fn identical_reruns_and_order_independence() {
        let g = sbm(5);
        let plan = expand_l_hop(&g, &dirichlet_partition(&g, 3, 1.0, 0).unwrap(), 2).unwrap();
        let nbrs = Neighborhoods::federated(&g, &plan);
        let (a, _) = pretrain_round(&g, &plan, &nbrs, true, Variant::Matrix, 11).unwrap();
        let (b, _) = pretrain_round(&g, &plan, &nbrs, true, Variant::Matrix, 11).unwrap();
        assert_eq!(a, b);
        let single = build_node_package(&g, 17, &nbrs.of(17, true), Variant::Matrix, 11).unwrap();
        assert_eq!(a.get(17), Some(&single));
    }

    #[test]
    fn save_load_round_trip_and_stable_digest() {
        let g = sbm(6);
        let plan = expand_l_hop(&g, &PartitionPlan::single(&g), 1).unwrap();
        let nbrs = Neighborhoods::full(&g);
        let dir = tempfile::tempdir().unwrap();
        for variant in [Variant::Matrix, Variant::Vector] {
            let (set, _) = pretrain_round(&g, &plan, &nbrs, true, variant, 2).unwrap();
            let p1 = dir.path().join(format!("{variant}-1.json"));
            let p2 = dir.path().join(format!("{variant}-2.json"));
            let h1 = set.save(&p1).unwrap();
            let (again, _) = pretrain_round(&g, &plan, &nbrs, true, variant, 2).unwrap();
            assert_eq!(h1, again.save(&p2).unwrap());
            assert_eq!(PackageSet::load(&p1).unwrap(), set);
        }
    }

    #[test]
    fn variants_agree_on_moments() {
        let g = sbm(7);
        let nbrs = Neighborhoods::full(&g);
        let d = g.feature_dim();
        let b: Vec<f64> = (0..2 * d).map(|k| 0.3 * ((k as f64) * 1.7).sin()).collect();
        for i in 0..20 {
            let nb = nbrs.of(i, true);
            let pm = build_node_package(&g, i, &nb, Variant::Matrix, 0).unwrap();
            let pv = build_node_package(&g, i, &nb, Variant::Vector, 0).unwrap();
            let (em, fm) = pm.moments(&b, 24);
            let (ev, fv) = pv.moments(&b, 24);
            for n in 0..=24 {
                let scale = fm[0].max(1.0);
                assert!((fm[n] - fv[n]).abs() <= 1e-8 * scale, "node {i} n {n}");
                for s in 0..d {
                    assert!((em[n][s] - ev[n][s]).abs() <= 1e-8 * scale);
                }
            }
        }
    }
}
