use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-node package of the masked-vector construction, in `R^m` with
/// `m = 2·deg`. Each neighbor `j` owns a one-hot `u_j`; their supports form
/// the set `S` marked by `mask4`.
///
/// * `M1 = mask1 + h_i (Σ_j u_j)ᵀ`, `M2 = mask2 + Σ_j h_j u_jᵀ` (`d × m`),
///   stored stacked in `mstack` (`2d × m`);
/// * `K1 = mask3 + Σ_j u_j h_jᵀ` (`m × d`), `K2 = mask4`,
///   `K3 = mask5 + Σ_j u_j`.
///
/// `mask1`, `mask2` and `mask3` are Gaussian off `S` and zero on it, and
/// `mask5` is a unit Gaussian vector supported off `S`. Then
/// `R = (b1ᵀM1 + b2ᵀM2) ⊙ mask4 = Σ_j x_ij u_jᵀ`, and elementwise powers give
/// `RⁿK1 = Σ_j x_ijⁿ h_jᵀ` and `Rⁿ·mask4 = Σ_j x_ijⁿ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorPackage {
    pub m: usize,
    pub d: usize,
    /// `2d × m`, row-major.
    pub mstack: Vec<f64>,
    /// `m × d`, row-major.
    pub k1: Vec<f64>,
    pub mask4: Vec<f64>,
    pub k3: Vec<f64>,
}

/// Server-side record of where each neighbor's one-hot sits.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorWitness {
    pub support: Vec<usize>,
}

impl VectorPackage {
    pub fn build(features: &Tensor, i: usize, nbrs: &[usize], rng: &mut impl Rng) -> Result<(Self, VectorWitness)> {
        let deg = nbrs.len();
        if deg == 0 {
            return Err(Error::Invalid("vector package needs a nonempty neighborhood".into()));
        }
        let (m, d) = (2 * deg, features.cols());
        let mut positions: Vec<usize> = (0..m).collect();
        positions.shuffle(rng);
        let support = positions[..deg].to_vec();
        let mut on_s = vec![false; m];
        support.iter().for_each(|&p| on_s[p] = true);
        let gauss = |rng: &mut dyn rand::RngCore| -> f64 { StandardNormal.sample(rng) };

        let hi = features.row_slice(i);
        let mut mstack = vec![0.0; 2 * d * m];
        for r in 0..2 * d {
            for c in 0..m {
                if !on_s[c] {
                    mstack[r * m + c] = gauss(rng);
                }
            }
        }
        for &c in &support {
            for s in 0..d {
                mstack[s * m + c] = hi[s];
            }
        }
        let mut k1 = vec![0.0; m * d];
        for r in 0..m {
            if !on_s[r] {
                for s in 0..d {
                    k1[r * d + s] = gauss(rng);
                }
            }
        }
        for (&c, &j) in support.iter().zip(nbrs) {
            let hj = features.row_slice(j);
            for s in 0..d {
                mstack[(d + s) * m + c] = hj[s];
                k1[c * d + s] = hj[s];
            }
        }
        let mask4: Vec<f64> = on_s.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let mut mask5: Vec<f64> = on_s.iter().map(|&b| if b { 0.0 } else { gauss(rng) }).collect();
        let norm = mask5.iter().map(|v| v * v).sum::<f64>().sqrt();
        mask5.iter_mut().for_each(|v| *v /= norm);
        let k3 = mask5.iter().zip(&mask4).map(|(a, b)| a + b).collect();
        Ok((VectorPackage { m, d, mstack, k1, mask4, k3 }, VectorWitness { support }))
    }

    pub fn deg(&self) -> usize {
        self.m / 2
    }

    pub fn scalar_count(&self) -> usize {
        self.mstack.len() + self.k1.len() + self.mask4.len() + self.k3.len()
    }

    pub fn m1(&self) -> Tensor {
        Tensor::matrix(self.d, self.m, self.mstack[..self.d * self.m].to_vec()).expect("d x m")
    }

    pub fn m2(&self) -> Tensor {
        Tensor::matrix(self.d, self.m, self.mstack[self.d * self.m..].to_vec()).expect("d x m")
    }

    pub fn k1_tensor(&self) -> Tensor {
        Tensor::matrix(self.m, self.d, self.k1.clone()).expect("m x d")
    }

    /// `R = (bᵀ mstack) ⊙ mask4`.
    pub fn assemble_r(&self, b: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut r = vec![0.0; m];
        for (row, &br) in b.iter().enumerate() {
            if br == 0.0 {
                continue;
            }
            r.iter_mut().zip(&self.mstack[row * m..(row + 1) * m]).for_each(|(a, &v)| *a += br * v);
        }
        r.iter_mut().zip(&self.mask4).for_each(|(a, &k)| *a *= k);
        r
    }

    fn times_k1(&self, w: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; d];
        for (a, &wa) in w.iter().enumerate() {
            if wa == 0.0 {
                continue;
            }
            out.iter_mut().zip(&self.k1[a * d..(a + 1) * d]).for_each(|(o, &v)| *o += wa * v);
        }
        out
    }

    fn dot_mask(&self, w: &[f64]) -> f64 {
        w.iter().zip(&self.mask4).map(|(a, b)| a * b).sum()
    }

    /// `(E^(n), F^(n))` for `n = 0..=p`, with `R⁰ = mask4`.
    pub fn moments(&self, b: &[f64], p: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let r = self.assemble_r(b);
        let mut power = self.mask4.clone();
        let mut e = Vec::with_capacity(p + 1);
        let mut f = Vec::with_capacity(p + 1);
        for n in 0..=p {
            if n > 0 {
                power.iter_mut().zip(&r).for_each(|(a, &x)| *a *= x);
            }
            e.push(self.times_k1(&power));
            f.push(if n == 0 { self.deg() as f64 } else { self.dot_mask(&power) });
        }
        (e, f)
    }

    /// Elementwise `Σ_n q_n Rⁿ` on the support.
    fn series(&self, r: &[f64], q: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(&self.mask4)
            .map(|(&x, &k)| if k == 0.0 { 0.0 } else { q.iter().rev().fold(0.0, |acc, &qn| acc * x + qn) })
            .collect()
    }

    pub fn aggregate(&self, b: &[f64], q: &[f64]) -> (Vec<f64>, f64) {
        let z = self.series(&self.assemble_r(b), q);
        (self.times_k1(&z), self.dot_mask(&z))
    }

    pub fn aggregate_backward(&self, b: &[f64], q: &[f64], gnum: &[f64], gden: f64, gb: &mut [f64]) {
        let (m, d) = (self.m, self.d);
        let r = self.assemble_r(b);
        let mut gr = vec![0.0; m];
        for a in 0..m {
            if self.mask4[a] == 0.0 {
                continue;
            }
            let gz = self.k1[a * d..(a + 1) * d].iter().zip(gnum).map(|(x, y)| x * y).sum::<f64>() + gden * self.mask4[a];
            // d/dx Σ q_n xⁿ
            let slope = q.iter().enumerate().skip(1).rev().fold(0.0, |acc, (n, &qn)| acc * r[a] + n as f64 * qn);
            gr[a] = gz * slope * self.mask4[a];
        }
        for (row, g) in gb.iter_mut().enumerate() {
            *g += self.mstack[row * m..(row + 1) * m].iter().zip(&gr).map(|(x, y)| x * y).sum::<f64>();
        }
    }

    pub fn payload(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.mstack);
        out.extend_from_slice(&self.k1);
        out.extend_from_slice(&self.mask4);
        out.extend_from_slice(&self.k3);
    }

    pub fn from_payload(m: usize, d: usize, data: &[f64]) -> Result<(Self, usize)> {
        let sizes = [2 * d * m, m * d, m, m];
        let total: usize = sizes.iter().sum();
        if data.len() < total {
            return Err(Error::Invalid("truncated package payload".into()));
        }
        let mut off = 0;
        let mut take = |n: usize| {
            let s = data[off..off + n].to_vec();
            off += n;
            s
        };
        let pkg = VectorPackage { m, d, mstack: take(sizes[0]), k1: take(sizes[1]), mask4: take(sizes[2]), k3: take(sizes[3]) };
        Ok((pkg, total))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    struct Instance {
        features: Tensor,
        nbrs: Vec<usize>,
        pkg: VectorPackage,
        witness: VectorWitness,
        b: Vec<f64>,
    }

    fn instance(seed: u64, deg: usize, d: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Tensor::zeros(deg, d);
        for v in features.data_mut() {
            *v = rng.random_range(-1.0..1.0) / (d as f64).sqrt();
        }
        let nbrs: Vec<usize> = (0..deg).collect();
        let (pkg, witness) = VectorPackage::build(&features, 0, &nbrs, &mut rng).unwrap();
        let b = (0..2 * d).map(|_| rng.random_range(-1.0..1.0) / (2.0 * d as f64).sqrt()).collect();
        Instance { features, nbrs, pkg, witness, b }
    }

    fn logits(inst: &Instance) -> Vec<f64> {
        let d = inst.features.cols();
        let hi = inst.features.row_slice(0);
        inst.nbrs
            .iter()
            .map(|&j| (0..d).map(|s| inst.b[s] * hi[s] + inst.b[d + s] * inst.features.get(j, s)).sum())
            .collect()
    }

    #[test]
    fn mask_constraints_hold() {
        for seed in 0..50 {
            let inst = instance(seed, 1 + seed as usize % 9, 3);
            let (m, d) = (inst.pkg.m, inst.pkg.d);
            let mut seen = vec![false; m];
            for &p in &inst.witness.support {
                assert!(!seen[p], "supports overlap");
                seen[p] = true;
                assert_eq!(inst.pkg.mask4[p], 1.0);
            }
            assert_eq!(inst.pkg.mask4.iter().sum::<f64>(), inst.nbrs.len() as f64);
            let masked = |row: usize, c: usize| inst.pkg.mstack[row * m + c];
            for c in 0..m {
                if inst.pkg.mask4[c] == 0.0 {
                    continue;
                }
                for row in 0..2 * d {
                    let h = if row < d { inst.features.get(0, row) } else { 0.0 };
                    // on S the first block is exactly h_i and carries no mask
                    if row < d {
                        assert_eq!(masked(row, c), h);
                    }
                }
            }
            // u_jᵀ mask3 = 0: rows of K1 on S are exactly the neighbor features
            for (&p, &j) in inst.witness.support.iter().zip(&inst.nbrs) {
                for s in 0..d {
                    assert_eq!(inst.pkg.k1[p * d + s], inst.features.get(j, s));
                }
            }
            let mask5_norm: f64 = inst
                .pkg
                .k3
                .iter()
                .zip(&inst.pkg.mask4)
                .map(|(k, m4)| (k - m4) * (k - m4))
                .sum::<f64>()
                .sqrt();
            assert!((mask5_norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn r_is_sum_of_logits_on_supports() {
        for seed in 0..50 {
            let inst = instance(seed, 2 + seed as usize % 7, 4);
            let r = inst.pkg.assemble_r(&inst.b);
            let mut oracle = vec![0.0; inst.pkg.m];
            for (&p, x) in inst.witness.support.iter().zip(logits(&inst)) {
                oracle[p] = x;
            }
            for (a, b) in r.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn moments_match_brute_force() {
        for seed in 0..200 {
            let deg = 1 + seed as usize % 16;
            let inst = instance(seed, deg, 3);
            let x = logits(&inst);
            let (e, f) = inst.pkg.moments(&inst.b, 24);
            for n in 0..=24 {
                let scale: f64 = x.iter().map(|v| v.abs().powi(n as i32)).sum();
                let bf: f64 = x.iter().map(|v| v.powi(n as i32)).sum();
                assert!((f[n] - bf).abs() <= 1e-9 * scale, "seed {seed} n {n}");
                for s in 0..3 {
                    let be: f64 = inst.nbrs.iter().zip(&x).map(|(&j, v)| v.powi(n as i32) * inst.features.get(j, s)).sum();
                    assert!((e[n][s] - be).abs() <= 1e-9 * scale.max(1e-300));
                }
            }
        }
    }

    #[test]
    fn backward_matches_differences() {
        let inst = instance(4, 5, 3);
        let q: Vec<f64> = (0..7).map(|n| 0.8f64.powi(n) * if n % 2 == 0 { 1.0 } else { -0.5 }).collect();
        let gnum = [0.3, -1.1, 0.7];
        let gden = 0.4;
        let objective = |b: &[f64]| {
            let (num, den) = inst.pkg.aggregate(b, &q);
            num.iter().zip(&gnum).map(|(a, g)| a * g).sum::<f64>() + gden * den
        };
        let mut gb = vec![0.0; 6];
        inst.pkg.aggregate_backward(&inst.b, &q, &gnum, gden, &mut gb);
        for r in 0..6 {
            let mut up = inst.b.clone();
            let mut down = inst.b.clone();
            up[r] += 1e-6;
            down[r] -= 1e-6;
            let fd = (objective(&up) - objective(&down)) / 2e-6;
            assert!((fd - gb[r]).abs() < 1e-7 * fd.abs().max(1.0), "{r}: {fd} vs {}", gb[r]);
        }
    }

    #[test]
    fn payload_round_trip() {
        let inst = instance(1, 3, 2);
        let mut buf = Vec::new();
        inst.pkg.payload(&mut buf);
        assert_eq!(buf.len(), inst.pkg.scalar_count());
        let (back, used) = VectorPackage::from_payload(6, 2, &buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back, inst.pkg);
    }
}
