use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{invalid, Error, Result};

const MAX_PARTITION_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossEdge {
    pub u: usize,
    pub v: usize,
    pub owner_u: usize,
    pub owner_v: usize,
}

/// Assignment of nodes to clients, and once expanded, each client's L-hop
/// subgraph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub n_clients: usize,
    pub owner: Vec<usize>,
    /// Hop depth of `client_nodes`; zero when the plan has not been expanded.
    pub hops: usize,
    /// Sorted node set of each client subgraph.
    pub client_nodes: Vec<Vec<usize>>,
    pub cross_edges: Vec<CrossEdge>,
    /// When set, a node whose neighborhood contains exactly one foreign node
    /// does not attend to that node.
    pub drop_single_cross: bool,
}

impl PartitionPlan {
    pub fn from_owner(g: &Graph, owner: Vec<usize>, n_clients: usize) -> Result<Self> {
        if owner.len() != g.n_nodes() {
            return invalid(format!("owner map covers {} of {} nodes", owner.len(), g.n_nodes()));
        }
        if n_clients == 0 {
            return invalid("need at least one client");
        }
        if let Some(&k) = owner.iter().find(|&&k| k >= n_clients) {
            return invalid(format!("owner {k} outside 0..{n_clients}"));
        }
        let cross_edges = g
            .edges()
            .iter()
            .filter(|&&(u, v)| owner[u] != owner[v])
            .map(|&(u, v)| CrossEdge { u, v, owner_u: owner[u], owner_v: owner[v] })
            .collect();
        Ok(PartitionPlan { n_clients, owner, hops: 0, client_nodes: Vec::new(), cross_edges, drop_single_cross: true })
    }

    /// Everything on client 0.
    pub fn single(g: &Graph) -> Self {
        PartitionPlan::from_owner(g, vec![0; g.n_nodes()], 1).expect("valid single-client plan")
    }

    pub fn owned(&self, k: usize) -> Vec<usize> {
        (0..self.owner.len()).filter(|&i| self.owner[i] == k).collect()
    }

    pub fn owned_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_clients];
        for &k in &self.owner {
            c[k] += 1;
        }
        c
    }

    /// Size of each client's L-hop subgraph.
    pub fn subgraph_sizes(&self) -> Vec<usize> {
        self.client_nodes.iter().map(Vec::len).collect()
    }

    /// Largest client subgraph (the `B_L` statistic).
    pub fn b_l(&self) -> usize {
        self.client_nodes.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn is_cross(&self, u: usize, v: usize) -> bool {
        self.owner[u] != self.owner[v]
    }

    /// Attention neighborhood of `i` with the single-foreign-neighbor rule
    /// applied.
    pub fn attention_neighbors(&self, g: &Graph, i: usize, self_loops: bool) -> Vec<usize> {
        let mut nb = g.attention_neighbors(i, self_loops);
        if self.drop_single_cross {
            let foreign: Vec<usize> = nb.iter().copied().filter(|&j| self.is_cross(i, j)).collect();
            if foreign.len() == 1 {
                nb.retain(|&j| j != foreign[0]);
            }
        }
        nb
    }

    /// Directed `(i, j)` pairs removed by the single-foreign-neighbor rule.
    pub fn dropped_pairs(&self, g: &Graph) -> Vec<(usize, usize)> {
        if !self.drop_single_cross {
            return Vec::new();
        }
        (0..g.n_nodes())
            .filter_map(|i| {
                let foreign: Vec<usize> = g.neighbors(i).iter().copied().filter(|&j| self.is_cross(i, j)).collect();
                (foreign.len() == 1).then(|| (i, foreign[0]))
            })
            .collect()
    }

    /// Total-variation distance between each client's label histogram and
    /// the global one.
    pub fn label_tv(&self, g: &Graph) -> Vec<f64> {
        let global = g.class_histogram(0..g.n_nodes());
        let n = g.n_nodes() as f64;
        (0..self.n_clients)
            .map(|k| {
                let owned = self.owned(k);
                let local = g.class_histogram(owned.iter().copied());
                let m = owned.len().max(1) as f64;
                0.5 * local.iter().zip(&global).map(|(&a, &b)| (a as f64 / m - b as f64 / n).abs()).sum::<f64>()
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Non-iid ownership: client `k` draws class proportions `q_k ~ Dir(beta)`,
/// and a node of class `c` joins client `k` with probability proportional to
/// `q_k[c]`. Redraws when some client ends up empty.
pub fn dirichlet_partition(g: &Graph, n_clients: usize, beta: f64, seed: u64) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return invalid("need at least one client");
    }
    if !(beta.is_finite() && beta > 0.0) {
        return invalid(format!("beta must be finite and positive, got {beta}"));
    }
    let classes = g.n_classes();
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_PARTITION_RETRIES {
        // q[k][c]
        let q: Vec<Vec<f64>> = (0..n_clients)
            .map(|_| {
                let mut draw: Vec<f64> = (0..classes).map(|_| gamma.sample(&mut rng)).collect();
                let s: f64 = draw.iter().sum();
                if s > 0.0 && s.is_finite() {
                    draw.iter_mut().for_each(|v| *v /= s);
                } else {
                    draw.iter_mut().for_each(|v| *v = 1.0 / classes as f64);
                }
                draw
            })
            .collect();
        let mut owner = vec![0; g.n_nodes()];
        for (i, &c) in g.labels().iter().enumerate() {
            let col: Vec<f64> = q.iter().map(|qk| qk[c]).collect();
            let total: f64 = col.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = n_clients - 1;
            if total > 0.0 {
                for (k, &w) in col.iter().enumerate() {
                    if u < w {
                        pick = k;
                        break;
                    }
                    u -= w;
                }
            } else {
                pick = rng.random_range(0..n_clients);
            }
            owner[i] = pick;
        }
        let mut counts = vec![0usize; n_clients];
        owner.iter().for_each(|&k| counts[k] += 1);
        if counts.iter().all(|&c| c > 0) {
            return PartitionPlan::from_owner(g, owner, n_clients);
        }
    }
    Err(Error::Invalid(format!(
        "could not give each of {n_clients} clients a node after {MAX_PARTITION_RETRIES} draws ({} nodes)",
        g.n_nodes()
    )))
}

/// Populates each client subgraph with the union of the `hops`-hop balls of
/// its owned nodes.
pub fn expand_l_hop(g: &Graph, plan: &PartitionPlan, hops: usize) -> Result<PartitionPlan> {
    if hops == 0 {
        return invalid("hop depth must be at least 1");
    }
    let n = g.n_nodes();
    let mut client_nodes = Vec::with_capacity(plan.n_clients);
    let mut dist = vec![usize::MAX; n];
    for k in 0..plan.n_clients {
        let mut queue = VecDeque::new();
        let mut touched = Vec::new();
        for i in plan.owned(k) {
            dist[i] = 0;
            queue.push_back(i);
            touched.push(i);
        }
        while let Some(u) = queue.pop_front() {
            if dist[u] == hops {
                continue;
            }
            for &v in g.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                    touched.push(v);
                }
            }
        }
        touched.sort_unstable();
        for &i in &touched {
            dist[i] = usize::MAX;
        }
        client_nodes.push(touched);
    }
    Ok(PartitionPlan { hops, client_nodes, ..plan.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, Masks, SbmParams};
    use crate::tensor::Tensor;

    fn path3() -> Graph {
        Graph::new(Tensor::zeros(3, 1), vec![0; 3], 1, [(0, 1), (1, 2)], Masks::default()).unwrap()
    }

    fn sbm(seed: u64) -> Graph {
        generate_sbm(&SbmParams { n: 300, classes: 4, p_in: 0.05, p_out: 0.005, dim: 8, noise: 0.2, seed }).unwrap()
    }

    #[test]
    fn path_graph_hops() {
        let g = path3();
        let plan = PartitionPlan::from_owner(&g, vec![0, 1, 1], 2).unwrap();
        assert_eq!(expand_l_hop(&g, &plan, 1).unwrap().client_nodes[0], vec![0, 1]);
        assert_eq!(expand_l_hop(&g, &plan, 2).unwrap().client_nodes[0], vec![0, 1, 2]);
        assert!(expand_l_hop(&g, &plan, 0).is_err());
    }

    /// Per-node BFS from scratch, unioned.
    fn bfs_oracle(g: &Graph, sources: &[usize], hops: usize) -> Vec<usize> {
        let mut all = std::collections::BTreeSet::new();
        for &s in sources {
            let mut frontier = vec![s];
            all.insert(s);
            for _ in 0..hops {
                let mut next = Vec::new();
                for u in frontier {
                    for &v in g.neighbors(u) {
                        next.push(v);
                        all.insert(v);
                    }
                }
                frontier = next;
            }
        }
        all.into_iter().collect()
    }

    #[test]
    fn expansion_matches_bfs_oracle() {
        let g = sbm(5);
        let plan = dirichlet_partition(&g, 6, 1.0, 9).unwrap();
        for hops in 1..=3 {
            let ex = expand_l_hop(&g, &plan, hops).unwrap();
            for k in 0..plan.n_clients {
                assert_eq!(ex.client_nodes[k], bfs_oracle(&g, &plan.owned(k), hops));
            }
        }
    }

    #[test]
    fn single_client_owns_everything() {
        let g = sbm(1);
        let plan = dirichlet_partition(&g, 1, 0.5, 3).unwrap();
        assert!(plan.owner.iter().all(|&k| k == 0));
        assert!(plan.cross_edges.is_empty());
    }

    #[test]
    fn ownership_total_and_edges_split() {
        let g = sbm(2);
        let plan = dirichlet_partition(&g, 7, 1.0, 4).unwrap();
        assert_eq!(plan.owned_counts().iter().sum::<usize>(), g.n_nodes());
        let intra = g.edges().iter().filter(|&&(u, v)| plan.owner[u] == plan.owner[v]).count();
        assert_eq!(intra + plan.cross_edges.len(), g.n_edges());
        for e in &plan.cross_edges {
            assert_ne!(e.owner_u, e.owner_v);
            assert_eq!((plan.owner[e.u], plan.owner[e.v]), (e.owner_u, e.owner_v));
        }
    }

    #[test]
    fn large_beta_is_near_iid() {
        let n = 20_000;
        let labels = (0..n).map(|i| i % 4).collect();
        let g = Graph::new(Tensor::zeros(n, 1), labels, 4, [], Masks::default()).unwrap();
        let plan = dirichlet_partition(&g, 10, 10000.0, 1).unwrap();
        for tv in plan.label_tv(&g) {
            assert!(tv < 0.05, "tv {tv}");
        }
    }

    #[test]
    fn small_beta_is_more_skewed_on_every_seed() {
        let g = sbm(3);
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        for seed in 0..20 {
            let skewed = mean(dirichlet_partition(&g, 10, 1.0, seed).unwrap().label_tv(&g));
            let flat = mean(dirichlet_partition(&g, 10, 10000.0, seed).unwrap().label_tv(&g));
            assert!(skewed > flat, "seed {seed}: {skewed} vs {flat}");
        }
    }

    #[test]
    fn too_many_clients_is_an_error() {
        let g = path3();
        assert!(dirichlet_partition(&g, 50, 1.0, 0).is_err());
    }

    #[test]
    fn deterministic_and_serializable() {
        let g = sbm(4);
        let a = expand_l_hop(&g, &dirichlet_partition(&g, 5, 1.0, 8).unwrap(), 2).unwrap();
        let b = expand_l_hop(&g, &dirichlet_partition(&g, 5, 1.0, 8).unwrap(), 2).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plan.json");
        a.save(&p).unwrap();
        assert_eq!(PartitionPlan::load(&p).unwrap(), a);
    }

    #[test]
    fn single_foreign_neighbor_is_dropped() {
        // star: 0 is the hub; 1 is remote, 2 and 3 local to 0
        let g = Graph::new(Tensor::zeros(4, 1), vec![0; 4], 1, [(0, 1), (0, 2), (0, 3)], Masks::default()).unwrap();
        let plan = PartitionPlan::from_owner(&g, vec![0, 1, 0, 0], 2).unwrap();
        assert_eq!(plan.attention_neighbors(&g, 0, true), vec![0, 2, 3]);
        // node 1 has one neighbor, which is foreign: only its self loop remains
        assert_eq!(plan.attention_neighbors(&g, 1, true), vec![1]);
        assert_eq!(plan.dropped_pairs(&g), vec![(0, 1), (1, 0)]);
        let keep = PartitionPlan { drop_single_cross: false, ..plan };
        assert_eq!(keep.attention_neighbors(&g, 0, true), vec![0, 1, 2, 3]);
    }

    #[test]
    fn cross_edges_grow_with_clients() {
        let mut totals = Vec::new();
        for k in [2, 5, 10] {
            let mut sum = 0usize;
            for seed in 0..20 {
                let g = sbm(seed);
                sum += dirichlet_partition(&g, k, 10000.0, seed).unwrap().cross_edges.len();
            }
            totals.push(sum);
        }
        assert!(totals.windows(2).all(|w| w[0] <= w[1]), "{totals:?}");
    }
}
