use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Locally updated parameters returned by one client.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: Vec<f64>,
    pub train_nodes: usize,
}

/// Server-side combination rule.
pub trait Aggregator: Send + Sync {
    fn name(&self) -> &'static str;

    fn aggregate(&self, global: &[f64], updates: &[ClientUpdate]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Plain mean over participating clients.
    #[default]
    Uniform,
    /// Mean weighted by training-node count.
    Data,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FedAvg {
    pub weighting: Weighting,
}

impl Aggregator for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn aggregate(&self, _global: &[f64], updates: &[ClientUpdate]) -> Result<Vec<f64>> {
        match self.weighting {
            Weighting::Uniform => fedavg_aggregate(updates),
            Weighting::Data => weighted_aggregate(updates),
        }
    }
}

/// Proximal-term aggregation; the interface exists, the rule does not.
#[derive(Clone, Copy, Debug)]
pub struct FedProx {
    pub mu: f64,
}

impl Aggregator for FedProx {
    fn name(&self) -> &'static str {
        "fedprox"
    }

    fn aggregate(&self, _global: &[f64], _updates: &[ClientUpdate]) -> Result<Vec<f64>> {
        invalid("fedprox aggregation is not implemented")
    }
}

/// Consensus ADMM; the interface exists, the rule does not.
#[derive(Clone, Copy, Debug)]
pub struct Admm {
    pub rho: f64,
}

impl Aggregator for Admm {
    fn name(&self) -> &'static str {
        "admm"
    }

    fn aggregate(&self, _global: &[f64], _updates: &[ClientUpdate]) -> Result<Vec<f64>> {
        invalid("admm aggregation is not implemented")
    }
}

fn sorted(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    if updates.is_empty() {
        return invalid("no client contributed to the round");
    }
    let n = updates[0].params.len();
    if updates.iter().any(|u| u.params.len() != n) {
        return Err(Error::shape("fedavg", "clients returned parameter vectors of different lengths"));
    }
    let mut v: Vec<&ClientUpdate> = updates.iter().collect();
    v.sort_by_key(|u| u.client);
    Ok(v)
}

/// Unweighted coordinate-wise mean, summed in client-id order.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let v = sorted(updates)?;
    let mut out = vec![0.0; v[0].params.len()];
    for u in &v {
        out.iter_mut().zip(&u.params).for_each(|(a, b)| *a += b);
    }
    let k = v.len() as f64;
    out.iter_mut().for_each(|a| *a /= k);
    Ok(out)
}

fn weighted_aggregate(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let v = sorted(updates)?;
    let total: usize = v.iter().map(|u| u.train_nodes).sum();
    if total == 0 {
        return invalid("data-weighted averaging with no training nodes");
    }
    let mut out = vec![0.0; v[0].params.len()];
    for u in &v {
        let w = u.train_nodes as f64 / total as f64;
        out.iter_mut().zip(&u.params).for_each(|(a, b)| *a += w * b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn upd(client: usize, params: Vec<f64>) -> ClientUpdate {
        ClientUpdate { client, params, train_nodes: 1 + client }
    }

    #[test]
    fn identical_sets_are_fixed() {
        let p = vec![0.1, -0.3, 2.5];
        let out = fedavg_aggregate(&[upd(0, p.clone()), upd(1, p.clone()), upd(2, p.clone())]).unwrap();
        for (a, b) in out.iter().zip(&p) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn opposite_parameters_cancel() {
        let out = fedavg_aggregate(&[upd(0, vec![1.5, -2.0]), upd(1, vec![-1.5, 2.0])]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn empty_round_is_an_error() {
        assert!(fedavg_aggregate(&[]).is_err());
        assert!(FedProx { mu: 0.1 }.aggregate(&[], &[upd(0, vec![1.0])]).is_err());
        assert!(Admm { rho: 1.0 }.aggregate(&[], &[upd(0, vec![1.0])]).is_err());
    }

    #[test]
    fn data_weighting() {
        let agg = FedAvg { weighting: Weighting::Data };
        let out = agg.aggregate(&[], &[upd(0, vec![0.0]), upd(2, vec![4.0])]).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn permutation_invariant(values in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..8), seed in 0u64..1000) {
            let updates: Vec<ClientUpdate> = values.iter().enumerate().map(|(k, p)| upd(k, p.clone())).collect();
            let mut shuffled = updates.clone();
            let n = shuffled.len();
            for i in 0..n {
                shuffled.swap(i, (seed as usize + 7 * i) % n);
            }
            prop_assert_eq!(fedavg_aggregate(&updates).unwrap(), fedavg_aggregate(&shuffled).unwrap());
        }
    }
}
