//! Reference multi-head graph attention network.
//!
//! The score of edge `(i, j)` for one head is `e_ij = exp(ψ(a1ᵀW h_i + a2ᵀW h_j))`,
//! the coefficients are `α_ij = e_ij / Σ_k e_ik` over the neighborhood of `i`,
//! and the update is `h'_i = φ(Σ_j α_ij W h_j)`.

mod layer;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{invalid, Result};
use crate::store;
use crate::tensor::Tensor;

pub use layer::{
    attention_coeffs, attention_logit, attention_score, dist_gat_forward, forward, forward_layers, gat_layer_traced,
    LocalEdges, Neighborhoods,
};
pub(crate) use layer::merge_heads;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMerge {
    Concat,
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub heads: usize,
    /// Width of each head.
    pub out_dim: usize,
    /// Aggregation nonlinearity.
    pub phi: Activation,
    /// Score nonlinearity.
    pub psi: Activation,
    pub merge: HeadMerge,
    pub self_loops: bool,
}

impl LayerConfig {
    pub fn output_dim(&self) -> usize {
        match self.merge {
            HeadMerge::Concat => self.heads * self.out_dim,
            HeadMerge::Average => self.out_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub layers: Vec<LayerConfig>,
}

impl ModelConfig {
    /// Two layers: `heads` concatenated elu heads of width `hidden`, then one
    /// averaged identity head producing `classes` logits. Scores use
    /// leaky-relu with slope 0.2.
    pub fn standard(in_dim: usize, hidden: usize, heads: usize, classes: usize) -> Self {
        ModelConfig {
            in_dim,
            layers: vec![
                LayerConfig {
                    heads,
                    out_dim: hidden,
                    phi: Activation::elu(1.0),
                    psi: Activation::leaky_relu(0.2),
                    merge: HeadMerge::Concat,
                    self_loops: true,
                },
                LayerConfig {
                    heads: 1,
                    out_dim: classes,
                    phi: Activation::Identity,
                    psi: Activation::leaky_relu(0.2),
                    merge: HeadMerge::Average,
                    self_loops: true,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.layers.is_empty() {
            return invalid("model needs a positive input width and at least one layer");
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads == 0 || layer.out_dim == 0 {
                return invalid(format!("layer {l}: heads and width must be positive"));
            }
            for act in [layer.phi, layer.psi] {
                act.validate()?;
                if act.lipschitz().is_none() || !act.is_monotone() {
                    return invalid(format!("layer {l}: {act:?} is not Lipschitz and monotone"));
                }
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_in_dim(&self, l: usize) -> usize {
        if l == 0 {
            self.in_dim
        } else {
            self.layers[l - 1].output_dim()
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(self.in_dim, LayerConfig::output_dim)
    }
}

/// Parameters of one attention head. `a1` and `a2` are columns.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w: Tensor,
    pub a1: Tensor,
    pub a2: Tensor,
}

impl HeadParams {
    /// `(b1, b2) = (Wᵀa1, Wᵀa2)` as columns; the score logit is
    /// `b1ᵀh_i + b2ᵀh_j`.
    pub fn projection(&self) -> (Tensor, Tensor) {
        let wt = self.w.transpose();
        (wt.matmul(&self.a1).expect("head shapes"), wt.matmul(&self.a2).expect("head shapes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralMethod {
    /// Power iteration with the given number of steps.
    Power(usize),
    /// Largest singular value from a full SVD.
    Exact,
}

const PROJECTION_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Vec<HeadParams>>,
}

/// Tape handles for every parameter of a model.
#[derive(Clone, Debug)]
pub struct HeadVars {
    pub w: Var,
    pub a1: Var,
    pub a2: Var,
}

#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<Vec<HeadVars>>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan: usize) -> Tensor {
    let limit = (6.0 / fan as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect())
        .expect("sized buffer")
}

pub fn exact_spectral_norm(t: &Tensor) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

impl ModelParams {
    /// Glorot-uniform initialization, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = cfg
            .layers
            .iter()
            .enumerate()
            .map(|(l, lc)| {
                let d_in = cfg.layer_in_dim(l);
                (0..lc.heads)
                    .map(|_| HeadParams {
                        w: glorot(&mut rng, lc.out_dim, d_in, lc.out_dim + d_in),
                        a1: glorot(&mut rng, lc.out_dim, 1, 2 * lc.out_dim + 1),
                        a2: glorot(&mut rng, lc.out_dim, 1, 2 * lc.out_dim + 1),
                    })
                    .collect()
            })
            .collect();
        ModelParams { layers }
    }

    pub fn heads(&self) -> impl Iterator<Item = &HeadParams> {
        self.layers.iter().flatten()
    }

    pub fn n_params(&self) -> usize {
        self.heads().map(|h| h.w.numel() + h.a1.numel() + h.a2.numel()).sum()
    }

    /// Layer-major, head-major; within a head `W` (row-major), then `a1`, `a2`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for h in self.heads() {
            out.extend_from_slice(h.w.data());
            out.extend_from_slice(h.a1.data());
            out.extend_from_slice(h.a2.data());
        }
        out
    }

    pub fn from_flat(cfg: &ModelConfig, flat: &[f64]) -> Result<Self> {
        let mut template = ModelParams::init(cfg, 0);
        if template.n_params() != flat.len() {
            return invalid(format!("model has {} parameters, got {}", template.n_params(), flat.len()));
        }
        template.assign_flat(flat);
        Ok(template)
    }

    /// Overwrites all values in flattening order. `flat` must have exactly
    /// `n_params` entries.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let mut off = 0;
        for h in self.layers.iter_mut().flatten() {
            for t in [&mut h.w, &mut h.a1, &mut h.a2] {
                let n = t.numel();
                t.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
    }

    pub fn record(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|heads| {
                    heads
                        .iter()
                        .map(|h| HeadVars {
                            w: tape.param(h.w.clone()),
                            a1: tape.param(h.a1.clone()),
                            a2: tape.param(h.a2.clone()),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// Flattened gradient in the same order as [`flatten`](Self::flatten).
    pub fn flat_gradient(&self, vars: &ParamVars, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (h, v) in self.heads().zip(vars.layers.iter().flatten()) {
            for (t, var) in [(&h.w, v.w), (&h.a1, v.a1), (&h.a2, v.a2)] {
                match grads.wrt(var) {
                    Some(g) => out.extend_from_slice(g.data()),
                    None => out.extend(std::iter::repeat_n(0.0, t.numel())),
                }
            }
        }
        out
    }

    /// Scales each `W` to spectral norm at most one and clips each `a` vector
    /// to the unit ball.
    pub fn project(&mut self, method: SpectralMethod) {
        for h in self.layers.iter_mut().flatten() {
            let sigma = match method {
                SpectralMethod::Power(k) => h.w.spectral_norm(k),
                SpectralMethod::Exact => exact_spectral_norm(&h.w),
            };
            // the slack keeps projection idempotent under rounding
            if sigma > 1.0 + PROJECTION_SLACK {
                h.w = h.w.scale(1.0 / sigma);
            }
            for a in [&mut h.a1, &mut h.a2] {
                let n = a.norm();
                if n > 1.0 + PROJECTION_SLACK {
                    *a = a.scale(1.0 / n);
                }
            }
        }
    }

    pub fn save(&self, cfg: &ModelConfig, path: &Path) -> Result<String> {
        store::write(path, "checkpoint", cfg, &self.flatten())
    }

    pub fn load(path: &Path) -> Result<(ModelConfig, ModelParams)> {
        let (cfg, flat): (ModelConfig, Vec<f64>) = store::read(path, "checkpoint")?;
        cfg.validate()?;
        let params = ModelParams::from_flat(&cfg, &flat)?;
        Ok((cfg, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trip() {
        let cfg = ModelConfig::standard(5, 4, 3, 2);
        let p = ModelParams::init(&cfg, 1);
        assert_eq!(p.n_params(), 3 * (4 * 5 + 8) + (2 * 12 + 4));
        let q = ModelParams::from_flat(&cfg, &p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(ModelParams::from_flat(&cfg, &[0.0; 3]).is_err());
    }

    #[test]
    fn projection_enforces_norms() {
        let cfg = ModelConfig::standard(6, 4, 2, 3);
        let mut p = ModelParams::init(&cfg, 2);
        for h in p.layers.iter_mut().flatten() {
            h.w = h.w.scale(10.0);
            h.a1 = h.a1.scale(10.0);
        }
        p.project(SpectralMethod::Exact);
        for h in p.heads() {
            assert!(exact_spectral_norm(&h.w) <= 1.0 + 1e-12);
            assert!(h.a1.norm() <= 1.0 + 1e-12 && h.a2.norm() <= 1.0 + 1e-12);
        }
        let mut p = ModelParams::init(&cfg, 2);
        p.layers[0][0].w = p.layers[0][0].w.scale(10.0);
        p.project(SpectralMethod::Power(20));
        assert!(exact_spectral_norm(&p.layers[0][0].w) <= 1.0 + 1e-6);
    }

    #[test]
    fn power_iteration_agrees_with_svd() {
        let cfg = ModelConfig::standard(7, 5, 1, 2);
        let p = ModelParams::init(&cfg, 3);
        let w = &p.layers[0][0].w;
        assert!((w.spectral_norm(200) - exact_spectral_norm(w)).abs() < 1e-8);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig::standard(3, 2, 2, 2);
        let p = ModelParams::init(&cfg, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        p.save(&cfg, &path).unwrap();
        let (c2, p2) = ModelParams::load(&path).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2, p);
    }

    #[test]
    fn rejects_exp_activation() {
        let mut cfg = ModelConfig::standard(3, 2, 2, 2);
        cfg.layers[0].psi = Activation::Exp;
        assert!(cfg.validate().is_err());
    }
}
