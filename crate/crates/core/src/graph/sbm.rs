use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{stratified_masks, Graph};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Stochastic block model with balanced classes (`label(i) = i mod C`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmParams {
    pub n: usize,
    pub classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub dim: usize,
    /// Standard deviation of the Gaussian noise added to the class centroid.
    pub noise: f64,
    pub seed: u64,
}

/// Features are the one-hot centroid `e_{c mod d}` plus Gaussian noise, then
/// scaled into the unit ball.
pub fn generate_sbm(p: &SbmParams) -> Result<Graph> {
    if p.classes == 0 || p.n < p.classes {
        return invalid(format!("need n >= classes >= 1, got n={} classes={}", p.n, p.classes));
    }
    if !(0.0 <= p.p_out && p.p_out <= p.p_in && p.p_in <= 1.0) {
        return invalid(format!("need 0 <= p_out <= p_in <= 1, got p_in={} p_out={}", p.p_in, p.p_out));
    }
    if p.dim == 0 || !(p.noise.is_finite() && p.noise >= 0.0) {
        return invalid("feature dimension must be positive and noise finite and non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let labels: Vec<usize> = (0..p.n).map(|i| i % p.classes).collect();
    let mut features = Tensor::zeros(p.n, p.dim);
    for (i, &y) in labels.iter().enumerate() {
        for s in 0..p.dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            let centroid = if s == y % p.dim { 1.0 } else { 0.0 };
            features.set(i, s, centroid + p.noise * z);
        }
    }
    let mut edges = Vec::new();
    for u in 0..p.n {
        for v in u + 1..p.n {
            let prob = if labels[u] == labels[v] { p.p_in } else { p.p_out };
            if rng.random_bool(prob) {
                edges.push((u, v));
            }
        }
    }
    let masks = stratified_masks(&labels, p.classes, p.seed);
    Graph::new(features, labels, p.classes, edges, masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, classes: usize, p_in: f64, p_out: f64) -> SbmParams {
        SbmParams { n, classes, p_in, p_out, dim: 8, noise: 0.3, seed: 11 }
    }

    #[test]
    fn two_cliques() {
        let g = generate_sbm(&params(10, 2, 1.0, 0.0)).unwrap();
        assert_eq!(g.n_edges(), 2 * (5 * 4 / 2));
        for i in 0..10 {
            assert_eq!(g.degree(i), 4);
        }
    }

    #[test]
    fn no_cross_class_edges_without_p_out() {
        let g = generate_sbm(&params(120, 3, 0.2, 0.0)).unwrap();
        assert!(g.n_edges() > 0);
        for &(u, v) in g.edges() {
            assert_eq!(g.labels()[u], g.labels()[v]);
        }
    }

    #[test]
    fn densities_within_three_sigma() {
        let (n, c, p_in, p_out) = (200, 4, 0.1, 0.01);
        let g = generate_sbm(&params(n, c, p_in, p_out)).unwrap();
        let per_class = n / c;
        let same_pairs = (c * per_class * (per_class - 1) / 2) as f64;
        let cross_pairs = (n * (n - 1) / 2) as f64 - same_pairs;
        let same = g.edges().iter().filter(|&&(u, v)| g.labels()[u] == g.labels()[v]).count() as f64;
        let cross = g.n_edges() as f64 - same;
        for (count, pairs, p) in [(same, same_pairs, p_in), (cross, cross_pairs, p_out)] {
            let sigma = (pairs * p * (1.0 - p)).sqrt();
            assert!((count - pairs * p).abs() <= 3.0 * sigma, "{count} vs {}", pairs * p);
        }
    }

    #[test]
    fn deterministic_and_unit_ball() {
        let a = generate_sbm(&params(60, 3, 0.3, 0.05)).unwrap();
        let b = generate_sbm(&params(60, 3, 0.3, 0.05)).unwrap();
        assert_eq!(a.edges(), b.edges());
        assert_eq!(a.features(), b.features());
        for i in 0..a.n_nodes() {
            assert!(a.feature(i).iter().map(|v| v * v).sum::<f64>().sqrt() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_sbm(&params(3, 4, 0.5, 0.1)).is_err());
        assert!(generate_sbm(&params(30, 2, 0.1, 0.5)).is_err());
    }
}
