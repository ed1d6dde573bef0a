//! Chebyshev fits of the score function and their monomial form.
//!
//! The approximate layer needs `f(x) ≈ Σ q_n xⁿ` in the raw logit variable,
//! because it recovers `Σ_j x_ijⁿ` through repeated products. The fit is done
//! in the Chebyshev basis and converted afterwards.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{invalid, Error, Result};

/// Largest degree accepted by [`ChebSeries::to_power_series`].
pub const MAX_MONOMIAL_DEGREE: usize = 64;

pub const DEFAULT_OVERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChebSeries {
    pub lo: f64,
    pub hi: f64,
    pub coeffs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSeries {
    pub lo: f64,
    pub hi: f64,
    /// `q_0..q_p` in the raw variable.
    pub coeffs: Vec<f64>,
}

fn check_interval(lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return invalid(format!("interval [{lo}, {hi}] is degenerate"));
    }
    Ok(())
}

impl ChebSeries {
    /// Gauss–Chebyshev quadrature at `oversample · (p + 1)` nodes.
    pub fn fit(f: impl Fn(f64) -> f64, lo: f64, hi: f64, degree: usize, oversample: usize) -> Result<Self> {
        check_interval(lo, hi)?;
        if oversample == 0 {
            return invalid("oversampling factor must be positive");
        }
        let nodes = oversample * (degree + 1);
        let mut samples = Vec::with_capacity(nodes);
        for k in 0..nodes {
            let theta = PI * (k as f64 + 0.5) / nodes as f64;
            let x = 0.5 * (hi - lo) * theta.cos() + 0.5 * (hi + lo);
            let y = f(x);
            if !y.is_finite() {
                return Err(Error::Numeric(format!("function is {y} at x = {x}")));
            }
            samples.push((theta, y));
        }
        let coeffs = (0..=degree)
            .map(|n| {
                let s: f64 = samples.iter().map(|&(theta, y)| y * (n as f64 * theta).cos()).sum();
                let c = 2.0 * s / nodes as f64;
                if n == 0 {
                    c / 2.0
                } else {
                    c
                }
            })
            .collect();
        Ok(ChebSeries { lo, hi, coeffs })
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    fn rescale(&self, x: f64) -> f64 {
        (2.0 * x - (self.lo + self.hi)) / (self.hi - self.lo)
    }

    /// Clenshaw evaluation.
    pub fn eval(&self, x: f64) -> f64 {
        let t = self.rescale(x);
        let (mut b1, mut b2) = (0.0, 0.0);
        for &c in self.coeffs.iter().skip(1).rev() {
            let b0 = 2.0 * t * b1 - b2 + c;
            b2 = b1;
            b1 = b0;
        }
        t * b1 - b2 + self.coeffs.first().copied().unwrap_or(0.0)
    }

    /// Expands `Σ c_n T_n(αx + β)` into monomials of `x`, running the
    /// recurrence `T_{n+1} = 2(αx + β)T_n − T_{n−1}` on coefficient vectors.
    pub fn to_power_series(&self) -> Result<PowerSeries> {
        let p = self.degree();
        if p > MAX_MONOMIAL_DEGREE {
            return invalid(format!("degree {p} exceeds the monomial conversion limit {MAX_MONOMIAL_DEGREE}"));
        }
        check_interval(self.lo, self.hi)?;
        let alpha = 2.0 / (self.hi - self.lo);
        let beta = -(self.hi + self.lo) / (self.hi - self.lo);
        let mut q = vec![0.0; p + 1];
        let mut prev = vec![0.0; p + 1];
        let mut cur = vec![0.0; p + 1];
        prev[0] = 1.0;
        if p >= 1 {
            cur[0] = beta;
            cur[1] = alpha;
        }
        for (n, &c) in self.coeffs.iter().enumerate() {
            let t = match n {
                0 => &prev,
                _ => &cur,
            };
            for (qk, tk) in q.iter_mut().zip(t) {
                *qk += c * tk;
            }
            if n >= 1 && n < p {
                let mut next = vec![0.0; p + 1];
                for k in 0..=n {
                    next[k + 1] += 2.0 * alpha * cur[k];
                    next[k] += 2.0 * beta * cur[k] - prev[k];
                }
                prev = std::mem::replace(&mut cur, next);
            }
        }
        Ok(PowerSeries { lo: self.lo, hi: self.hi, coeffs: q })
    }
}

impl PowerSeries {
    /// Fits `exp(ψ(·))` on `[-radius, radius]` and checks that the result is
    /// positive everywhere on the interval.
    pub fn for_scores(psi: Activation, radius: f64, degree: usize) -> Result<Self> {
        psi.validate()?;
        let cs = ChebSeries::fit(|x| psi.apply(x).exp(), -radius, radius, degree, DEFAULT_OVERSAMPLE)?;
        let ps = cs.to_power_series()?;
        let margin = ps.positivity_margin(1000);
        if margin <= 0.0 {
            return Err(Error::Numeric(format!(
                "degree-{degree} fit on [-{radius}, {radius}] reaches {margin}; approximate scores would not be positive"
            )));
        }
        Ok(ps)
    }

    /// Series with the constant term only.
    pub fn constant(value: f64, lo: f64, hi: f64) -> Self {
        PowerSeries { lo, hi, coeffs: vec![value] }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    /// Horner evaluation; no clamping.
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &q| acc * x + q)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    /// Uniform grid of `n ≥ 2` points over the interval.
    pub fn grid(&self, n: usize) -> impl Iterator<Item = f64> + '_ {
        let n = n.max(2);
        (0..n).map(move |k| self.lo + (self.hi - self.lo) * k as f64 / (n - 1) as f64)
    }

    /// Smallest value on an `n`-point grid.
    pub fn positivity_margin(&self, n: usize) -> f64 {
        self.grid(n).map(|x| self.eval(x)).fold(f64::INFINITY, f64::min)
    }
}

/// `2V / (π k (p − k)^k)`.
pub fn chebyshev_bound(variation: f64, k: usize, p: usize) -> Result<f64> {
    if k == 0 || p <= k {
        return invalid(format!("need p > k >= 1, got p={p} k={k}"));
    }
    if !(variation >= 0.0) {
        return invalid(format!("variation must be non-negative, got {variation}"));
    }
    Ok(2.0 * variation / (PI * k as f64 * ((p - k) as f64).powi(k as i32)))
}

/// `max |f(x) − ps(x)|` over a uniform grid on the series interval.
pub fn empirical_max_error(f: impl Fn(f64) -> f64, ps: &PowerSeries, grid_size: usize) -> Result<f64> {
    if grid_size < 2 {
        return invalid("grid needs at least two points");
    }
    Ok(ps.grid(grid_size).map(|x| (f(x) - ps.eval(x)).abs()).fold(0.0, f64::max))
}

/// Total variation of the `k`-th derivative of `t ↦ f(x(t))`, where `x(t)`
/// maps `[-1, 1]` onto `[lo, hi]`. Derivatives are central differences, so
/// a jump in `f^(k)` shows up as variation that grows under grid refinement.
pub fn derivative_variation(f: impl Fn(f64) -> f64, lo: f64, hi: f64, k: usize, grid: usize) -> Result<f64> {
    check_interval(lo, hi)?;
    if grid < 2 {
        return invalid("grid needs at least two points");
    }
    let g = |t: f64| f(0.5 * (hi - lo) * t + 0.5 * (hi + lo));
    let h = 1e-4;
    let deriv = |t: f64| -> f64 {
        // k-th central difference
        let mut s = 0.0;
        let mut binom = 1.0;
        for i in 0..=k {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            s += sign * binom * g(t + (k as f64 / 2.0 - i as f64) * h);
            binom = binom * (k - i) as f64 / (i + 1) as f64;
        }
        s / h.powi(k as i32)
    };
    let span = 1.0 - k as f64 * h;
    let mut total = 0.0;
    let mut prev = deriv(-span);
    for m in 1..grid {
        let t = -span + 2.0 * span * m as f64 / (grid - 1) as f64;
        let cur = deriv(t);
        total += (cur - prev).abs();
        prev = cur;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_fit() {
        let cs = ChebSeries::fit(|_| 1.0, -1.0, 1.0, 6, 4).unwrap();
        assert!((cs.coeffs[0] - 1.0).abs() < 1e-14);
        assert!(cs.coeffs[1..].iter().all(|c| c.abs() < 1e-14));
    }

    #[test]
    fn identity_fit() {
        let cs = ChebSeries::fit(|x| x, -1.0, 1.0, 5, 4).unwrap();
        for (n, c) in cs.coeffs.iter().enumerate() {
            let expected = if n == 1 { 1.0 } else { 0.0 };
            assert!((c - expected).abs() < 1e-14, "c_{n} = {c}");
        }
    }

    #[test]
    fn exp_fit_degree_ten() {
        let cs = ChebSeries::fit(f64::exp, -1.0, 1.0, 10, 4).unwrap();
        let err = (0..10_000)
            .map(|k| -1.0 + 2.0 * k as f64 / 9999.0)
            .map(|x| (x.exp() - cs.eval(x)).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_non_finite_samples() {
        assert!(ChebSeries::fit(|x: f64| x.ln(), -1.0, 1.0, 3, 4).is_err());
        assert!(ChebSeries::fit(f64::exp, 1.0, 1.0, 3, 4).is_err());
    }

    #[test]
    fn conversion_small_cases() {
        let t1 = ChebSeries { lo: -1.0, hi: 1.0, coeffs: vec![0.0, 1.0] };
        assert_eq!(t1.to_power_series().unwrap().coeffs, vec![0.0, 1.0]);
        let t2 = ChebSeries { lo: -1.0, hi: 1.0, coeffs: vec![0.0, 0.0, 1.0] };
        assert_eq!(t2.to_power_series().unwrap().coeffs, vec![-1.0, 0.0, 2.0]);
        let too_big = ChebSeries { lo: -1.0, hi: 1.0, coeffs: vec![0.0; 66] };
        assert!(too_big.to_power_series().is_err());
    }

    #[test]
    fn conversion_on_shifted_interval() {
        // T_1 on [0, 4] is (x − 2)/2
        let cs = ChebSeries { lo: 0.0, hi: 4.0, coeffs: vec![0.0, 1.0] };
        assert_eq!(cs.to_power_series().unwrap().coeffs, vec![-1.0, 0.5]);
    }

    #[test]
    fn power_series_matches_chebyshev_series() {
        let psi = Activation::leaky_relu(0.2);
        for p in [4, 8, 12, 16, 20, 24] {
            let cs = ChebSeries::fit(|x| psi.apply(x).exp(), -2.0, 2.0, p, 4).unwrap();
            let ps = cs.to_power_series().unwrap();
            for x in ps.grid(1000).collect::<Vec<_>>() {
                assert!((cs.eval(x) - ps.eval(x)).abs() < 1e-9, "p={p} x={x}");
            }
        }
        let cs = ChebSeries::fit(f64::exp, -2.0, 2.0, 16, 4).unwrap();
        let ps = cs.to_power_series().unwrap();
        let gap = ps.grid(1000).map(|x| (cs.eval(x) - ps.eval(x)).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-9);
    }

    #[test]
    fn bound_values() {
        assert_eq!(chebyshev_bound(0.0, 1, 5).unwrap(), 0.0);
        assert!((chebyshev_bound(PI, 1, 2).unwrap() - 2.0).abs() < 1e-15);
        assert!(chebyshev_bound(1.0, 2, 2).is_err());
        assert!(chebyshev_bound(1.0, 0, 2).is_err());
    }

    #[test]
    fn exact_polynomial_has_no_error() {
        let f = |x: f64| 0.5 - x + 0.25 * x * x * x;
        let ps = ChebSeries::fit(f, -2.0, 2.0, 3, 4).unwrap().to_power_series().unwrap();
        assert!(empirical_max_error(f, &ps, 1000).unwrap() < 1e-12);
        assert!(empirical_max_error(f, &ps, 1).is_err());
    }

    fn score(x: f64) -> f64 {
        Activation::leaky_relu(0.2).apply(x).exp()
    }

    #[test]
    fn error_decays_with_degree() {
        let errs: Vec<f64> = [4, 8, 12, 16, 20, 24]
            .iter()
            .map(|&p| {
                let ps = ChebSeries::fit(score, -2.0, 2.0, p, 4).unwrap().to_power_series().unwrap();
                empirical_max_error(score, &ps, 4001).unwrap()
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
        assert!(errs[1] > errs[3] && errs[3] > errs[5]);
    }

    #[test]
    fn grid_refinement_is_stable() {
        let ps = ChebSeries::fit(score, -2.0, 2.0, 16, 4).unwrap().to_power_series().unwrap();
        let coarse = empirical_max_error(score, &ps, 2001).unwrap();
        let fine = empirical_max_error(score, &ps, 4001).unwrap();
        assert!((fine - coarse).abs() < 0.1 * coarse);
    }

    #[test]
    fn bound_dominates_measured_error() {
        let v1 = derivative_variation(score, -2.0, 2.0, 1, 20_001).unwrap();
        // analytic: 2·(e^2 − 0.2·e^{−0.4}) with the 1.6 jump at the kink
        let analytic = 2.0 * (2f64.exp() - 1.0) + 1.6 + 0.4 * (1.0 - (-0.4f64).exp());
        assert!((v1 - analytic).abs() < 1e-2, "{v1} vs {analytic}");
        let ps = ChebSeries::fit(score, -2.0, 2.0, 16, 4).unwrap().to_power_series().unwrap();
        let err = empirical_max_error(score, &ps, 4001).unwrap();
        assert!(err <= chebyshev_bound(v1, 1, 16).unwrap());
    }

    #[test]
    fn kink_makes_second_derivative_variation_diverge() {
        let coarse = derivative_variation(score, -2.0, 2.0, 2, 2_001).unwrap();
        let smooth = derivative_variation(f64::exp, -2.0, 2.0, 2, 2_001).unwrap();
        let smooth_fine = derivative_variation(f64::exp, -2.0, 2.0, 2, 8_001).unwrap();
        assert!((smooth - smooth_fine).abs() < 1e-3 * smooth);
        assert!(coarse > 100.0 * smooth);
    }

    #[test]
    fn default_fit_is_positive() {
        let ps = PowerSeries::for_scores(Activation::leaky_relu(0.2), 2.0, 16).unwrap();
        assert!(ps.positivity_margin(1000) > 0.0);
        assert_eq!(ps.degree(), 16);
    }
}
