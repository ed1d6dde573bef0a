use serde::{Deserialize, Serialize};

use super::ortho::OrthoSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-node package of the projector construction. With
/// `𝒰_j` the projector of neighbor `j`:
///
/// * `M1(s) = h_i(s) Σ_j 𝒰_j` and `M2(s) = Σ_j h_j(s) 𝒰_j`, stored as the
///   rows of `mstack` (`2d × m²`, `M1(1..d)` then `M2(1..d)`);
/// * `K1 = √2 Σ_j u1_j` and `K2 = √2 Σ_j u1_j h_jᵀ`.
///
/// For attention vectors `b = [b1, b2]`, `D = Σ_s b1(s)M1(s) + b2(s)M2(s)`
/// equals `Σ_j x_ij 𝒰_j`, so `K1ᵀDⁿK1 = Σ_j x_ijⁿ` and
/// `K1ᵀDⁿK2 = Σ_j x_ijⁿ h_jᵀ` for `n ≥ 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixPackage {
    pub m: usize,
    pub d: usize,
    pub mstack: Vec<f64>,
    pub k1: Vec<f64>,
    /// `m × d`, row-major.
    pub k2: Vec<f64>,
}

impl MatrixPackage {
    pub fn build(features: &Tensor, i: usize, nbrs: &[usize], set: &OrthoSet) -> Result<Self> {
        let (m, d) = (set.dim(), features.cols());
        if nbrs.len() != set.deg() {
            return Err(Error::shape("MatrixPackage::build", format!("{} neighbors, {} vector pairs", nbrs.len(), set.deg())));
        }
        let projectors: Vec<Tensor> = (0..set.deg()).map(|j| set.projector(j)).collect::<Result<_>>()?;
        let mut sum_u = vec![0.0; m * m];
        for p in &projectors {
            sum_u.iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
        }
        let hi = features.row_slice(i);
        let mut mstack = vec![0.0; 2 * d * m * m];
        for s in 0..d {
            let row = &mut mstack[s * m * m..(s + 1) * m * m];
            row.iter_mut().zip(&sum_u).for_each(|(a, &u)| *a = hi[s] * u);
        }
        for (p, &j) in projectors.iter().zip(nbrs) {
            let hj = features.row_slice(j);
            for s in 0..d {
                if hj[s] == 0.0 {
                    continue;
                }
                let row = &mut mstack[(d + s) * m * m..(d + s + 1) * m * m];
                row.iter_mut().zip(p.data()).for_each(|(a, &u)| *a += hj[s] * u);
            }
        }
        let sqrt2 = std::f64::consts::SQRT_2;
        let mut k1 = vec![0.0; m];
        let mut k2 = vec![0.0; m * d];
        for (u1, &j) in set.u1.iter().zip(nbrs) {
            let hj = features.row_slice(j);
            for a in 0..m {
                k1[a] += sqrt2 * u1[a];
                for s in 0..d {
                    k2[a * d + s] += sqrt2 * u1[a] * hj[s];
                }
            }
        }
        Ok(MatrixPackage { m, d, mstack, k1, k2 })
    }

    /// Neighborhood size, recovered from the package width.
    pub fn deg(&self) -> usize {
        self.m / 2
    }

    pub fn scalar_count(&self) -> usize {
        self.mstack.len() + self.k1.len() + self.k2.len()
    }

    pub fn m1(&self, s: usize) -> Tensor {
        self.slab(s)
    }

    pub fn m2(&self, s: usize) -> Tensor {
        self.slab(self.d + s)
    }

    fn slab(&self, r: usize) -> Tensor {
        let mm = self.m * self.m;
        Tensor::matrix(self.m, self.m, self.mstack[r * mm..(r + 1) * mm].to_vec()).expect("square slab")
    }

    pub fn k1_tensor(&self) -> Tensor {
        Tensor::column(self.k1.clone())
    }

    pub fn k2_tensor(&self) -> Tensor {
        Tensor::matrix(self.m, self.d, self.k2.clone()).expect("m x d")
    }

    /// `D = Σ_r b[r]·mstack[r]`, row-major `m × m`.
    pub fn assemble_d(&self, b: &[f64]) -> Vec<f64> {
        let mm = self.m * self.m;
        let mut dmat = vec![0.0; mm];
        for (r, &br) in b.iter().enumerate() {
            if br == 0.0 {
                continue;
            }
            let slab = &self.mstack[r * mm..(r + 1) * mm];
            dmat.iter_mut().zip(slab).for_each(|(a, &v)| *a += br * v);
        }
        dmat
    }

    fn row_times(&self, w: &[f64], dmat: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; m];
        for (a, &wa) in w.iter().enumerate() {
            if wa == 0.0 {
                continue;
            }
            let row = &dmat[a * m..(a + 1) * m];
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += wa * v);
        }
        out
    }

    fn times_k2(&self, w: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; d];
        for (a, &wa) in w.iter().enumerate() {
            let row = &self.k2[a * d..(a + 1) * d];
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += wa * v);
        }
        out
    }

    fn dot_k1(&self, w: &[f64]) -> f64 {
        w.iter().zip(&self.k1).map(|(a, b)| a * b).sum()
    }

    /// `(E^(n), F^(n))` for `n = 0..=p`. The zeroth moments are `Σ_j h_j`
    /// from `K1ᵀK2 / 2` and the neighborhood size.
    pub fn moments(&self, b: &[f64], p: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let dmat = self.assemble_d(b);
        let mut e = vec![self.times_k2(&self.k1).iter().map(|v| 0.5 * v).collect()];
        let mut f = vec![self.deg() as f64];
        let mut w = self.k1.clone();
        for _ in 1..=p {
            w = self.row_times(&w, &dmat);
            e.push(self.times_k2(&w));
            f.push(self.dot_k1(&w));
        }
        (e, f)
    }

    /// `(Σ_n q_n E^(n), Σ_n q_n F^(n))`.
    pub fn aggregate(&self, b: &[f64], q: &[f64]) -> (Vec<f64>, f64) {
        let dmat = self.assemble_d(b);
        let q0 = q.first().copied().unwrap_or(0.0);
        let mut z = vec![0.0; self.m];
        let mut w = self.k1.clone();
        for &qn in q.iter().skip(1) {
            w = self.row_times(&w, &dmat);
            z.iter_mut().zip(&w).for_each(|(a, &v)| *a += qn * v);
        }
        let mut num = self.times_k2(&z);
        let e0 = self.times_k2(&self.k1);
        num.iter_mut().zip(&e0).for_each(|(a, &v)| *a += 0.5 * q0 * v);
        let den = self.dot_k1(&z) + q0 * self.deg() as f64;
        (num, den)
    }

    /// Adds `∂/∂b ⟨gnum, num⟩ + gden·den` to `gb`.
    pub fn aggregate_backward(&self, b: &[f64], q: &[f64], gnum: &[f64], gden: f64, gb: &mut [f64]) {
        let p = q.len().saturating_sub(1);
        if p == 0 {
            return;
        }
        let m = self.m;
        let d = self.d;
        let dmat = self.assemble_d(b);
        let mut ws = Vec::with_capacity(p + 1);
        ws.push(self.k1.clone());
        for n in 1..=p {
            let next = self.row_times(&ws[n - 1], &dmat);
            ws.push(next);
        }
        // gradient of z = Σ_{n≥1} q_n w_n
        let mut gz = vec![0.0; m];
        for a in 0..m {
            let row = &self.k2[a * d..(a + 1) * d];
            gz[a] = row.iter().zip(gnum).map(|(x, y)| x * y).sum::<f64>() + gden * self.k1[a];
        }
        let mut gd = vec![0.0; m * m];
        let mut gw: Vec<f64> = gz.iter().map(|v| q[p] * v).collect();
        for n in (1..=p).rev() {
            // w_n = w_{n-1} D
            let prev = &ws[n - 1];
            for (a, &pa) in prev.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                gd[a * m..(a + 1) * m].iter_mut().zip(&gw).for_each(|(g, &v)| *g += pa * v);
            }
            if n > 1 {
                // gw_{n-1} = q_{n-1} gz + gw_n Dᵀ
                let mut next: Vec<f64> = gz.iter().map(|v| q[n - 1] * v).collect();
                for (a, nx) in next.iter_mut().enumerate() {
                    let row = &dmat[a * m..(a + 1) * m];
                    *nx += row.iter().zip(&gw).map(|(x, y)| x * y).sum::<f64>();
                }
                gw = next;
            }
        }
        let mm = m * m;
        for (r, g) in gb.iter_mut().enumerate() {
            let slab = &self.mstack[r * mm..(r + 1) * mm];
            *g += slab.iter().zip(&gd).map(|(x, y)| x * y).sum::<f64>();
        }
    }

    pub fn payload(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.mstack);
        out.extend_from_slice(&self.k1);
        out.extend_from_slice(&self.k2);
    }

    pub fn from_payload(m: usize, d: usize, data: &[f64]) -> Result<(Self, usize)> {
        let (a, b, c) = (2 * d * m * m, m, m * d);
        if data.len() < a + b + c {
            return Err(Error::Invalid("truncated package payload".into()));
        }
        let pkg = MatrixPackage {
            m,
            d,
            mstack: data[..a].to_vec(),
            k1: data[a..a + b].to_vec(),
            k2: data[a + b..a + b + c].to_vec(),
        };
        Ok((pkg, a + b + c))
    }
}
