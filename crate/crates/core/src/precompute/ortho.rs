use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

const MAX_QR_RETRIES: usize = 8;

/// Two orthonormal vectors per neighbor inside `R^{2·deg}`, plus the mixing
/// scalar `r`. Together the `2·deg` vectors form an orthonormal basis.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoSet {
    pub u1: Vec<Vec<f64>>,
    pub u2: Vec<Vec<f64>>,
    pub r: f64,
}

impl OrthoSet {
    /// Orthonormalizes a Gaussian `2deg × 2deg` matrix and draws
    /// `r ~ U[0.5, 2]`.
    pub fn generate(deg: usize, rng: &mut impl Rng) -> Result<Self> {
        if deg == 0 {
            return invalid("orthonormal set needs at least one neighbor");
        }
        let m = 2 * deg;
        for _ in 0..MAX_QR_RETRIES {
            let data: Vec<f64> = (0..m * m).map(|_| StandardNormal.sample(rng)).collect();
            let a = nalgebra::DMatrix::from_row_slice(m, m, &data);
            let qr = a.qr();
            let r = qr.r();
            if (0..m).any(|k| r[(k, k)].abs() < 1e-10) {
                continue;
            }
            let q = qr.q();
            let col = |c: usize| (0..m).map(|row| q[(row, c)]).collect::<Vec<f64>>();
            let u1 = (0..deg).map(|j| col(2 * j)).collect();
            let u2 = (0..deg).map(|j| col(2 * j + 1)).collect();
            let r = rng.random_range(0.5..=2.0);
            return Ok(OrthoSet { u1, u2, r });
        }
        Err(Error::Numeric(format!("orthonormalization of a {m}x{m} Gaussian matrix failed repeatedly")))
    }

    pub fn deg(&self) -> usize {
        self.u1.len()
    }

    pub fn dim(&self) -> usize {
        2 * self.deg()
    }

    /// All `2·deg` vectors as columns `u1_1, u2_1, u1_2, ...`.
    pub fn stacked(&self) -> Tensor {
        let m = self.dim();
        let mut t = Tensor::zeros(m, m);
        for j in 0..self.deg() {
            for row in 0..m {
                t.set(row, 2 * j, self.u1[j][row]);
                t.set(row, 2 * j + 1, self.u2[j][row]);
            }
        }
        t
    }

    pub fn projector(&self, j: usize) -> Result<Tensor> {
        build_u(&self.u1[j], &self.u2[j], self.r)
    }
}

/// `½(u1u1ᵀ + u2u2ᵀ + r·u1u2ᵀ + r⁻¹·u2u1ᵀ)`: idempotent with trace one, and
/// annihilated by the projectors of the other neighbors.
pub fn build_u(u1: &[f64], u2: &[f64], r: f64) -> Result<Tensor> {
    if r == 0.0 || !r.is_finite() {
        return invalid(format!("projector scalar r must be finite and nonzero, got {r}"));
    }
    if u1.len() != u2.len() {
        return Err(Error::shape("build_u", "u1 and u2 differ in length"));
    }
    let m = u1.len();
    let mut t = Tensor::zeros(m, m);
    for a in 0..m {
        for b in 0..m {
            let v = u1[a] * u1[b] + u2[a] * u2[b] + r * u1[a] * u2[b] + u2[a] * u1[b] / r;
            t.set(a, b, 0.5 * v);
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn gram_error(set: &OrthoSet) -> f64 {
        let s = set.stacked();
        s.transpose().matmul(&s).unwrap().max_abs_diff(&Tensor::eye(set.dim()))
    }

    #[test]
    fn gram_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for deg in [1, 4] {
            let set = OrthoSet::generate(deg, &mut rng).unwrap();
            assert!(gram_error(&set) < 1e-12);
            assert!((0.5..=2.0).contains(&set.r));
        }
        assert!(OrthoSet::generate(0, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_set() {
        let a = OrthoSet::generate(3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = OrthoSet::generate(3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projector_algebra_on_many_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..1000 {
            let deg = 1 + trial % 5;
            let set = OrthoSet::generate(deg, &mut rng).unwrap();
            let us: Vec<Tensor> = (0..deg).map(|j| set.projector(j).unwrap()).collect();
            for (j, uj) in us.iter().enumerate() {
                assert!(uj.matmul(uj).unwrap().max_abs_diff(uj) < 1e-12);
                let trace: f64 = (0..set.dim()).map(|a| uj.get(a, a)).sum();
                assert!((trace - 1.0).abs() < 1e-12);
                for (k, uk) in us.iter().enumerate() {
                    if k != j {
                        assert!(uj.matmul(uk).unwrap().max_abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_r_is_rejected() {
        assert!(build_u(&[1.0, 0.0], &[0.0, 1.0], 0.0).is_err());
    }
}
