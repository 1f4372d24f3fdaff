//! Binary-Poisson measurement likelihood.
//!
//! A jot with threshold `q` under exposure `λ` fires with probability
//! `p = P(Poisson(λ) ≥ q)`. Over all jots `j` and frames `k` the negative
//! log-likelihood (additive constant dropped) is
//!
//! ```text
//! ℓ(λ; B) = Σ_jk −b_jk log p(q_j, λ_j) − (1 − b_jk) log(1 − p(q_j, λ_j))
//! ```
//!
//! Since `dp/dλ = f(q−1; λ)`, the Poisson pmf at `q − 1`, each measurement
//! contributes `−f/p` (on) or `f/(1−p)` (off) to `∂ℓ/∂λ`, and the second
//! derivative follows from `df/dλ = f·((q−1)/λ − 1)`. Both branches are
//! non-negative, so `ℓ` is convex in `λ`.
//!
//! `p` and `1 − p` are never formed by subtraction from 1 when small: below
//! the threshold (`λ < q`) the upper tail is summed directly, above it the
//! lower tail is, and the other one is obtained through `ln_1p`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::sensor::BinaryFrameStack;

/// Floor applied to `λ` before any likelihood evaluation.
pub const EPS_LAMBDA: f64 = 1e-6;

const EXACT_FACTORIALS: usize = 171;

fn ln_factorial_table() -> &'static [f64; EXACT_FACTORIALS] {
    static TABLE: OnceLock<[f64; EXACT_FACTORIALS]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; EXACT_FACTORIALS];
        let mut fact = 1.0f64;
        for (n, slot) in t.iter_mut().enumerate().skip(1) {
            fact *= n as f64;
            *slot = fact.ln();
        }
        t
    })
}

/// `ln n!`; exact products up to 170, Stirling series beyond.
pub fn ln_factorial(n: u64) -> f64 {
    if (n as usize) < EXACT_FACTORIALS {
        return ln_factorial_table()[n as usize];
    }
    let x = n as f64;
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    x * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI * x).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)))
}

/// `ln P(Poisson(λ) = n)`.
pub fn log_pmf(n: u64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    -lambda + n as f64 * lambda.ln() - ln_factorial(n)
}

pub fn pmf(n: u64, lambda: f64) -> f64 {
    log_pmf(n, lambda).exp()
}

/// Neumaier-compensated sum of a decaying positive series `1 + r₁ + r₁r₂ + …`.
fn series_sum(mut ratio: impl FnMut(u64) -> Option<f64>) -> f64 {
    let mut sum = 1.0f64;
    let mut comp = 0.0f64;
    let mut term = 1.0f64;
    let mut i = 1u64;
    while let Some(r) = ratio(i) {
        term *= r;
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
        if term < 1e-18 * sum || i > 100_000 {
            break;
        }
        i += 1;
    }
    sum + comp
}

/// Per-`(q, λ)` quantities shared by value, gradient and curvature.
#[derive(Debug, Clone, Copy)]
pub struct BitTerms {
    /// `ln p`, `p = P(N ≥ q)`.
    pub log_p: f64,
    /// `ln(1 − p)`.
    pub log_c: f64,
    /// `f(q−1; λ) / p`.
    pub on_rate: f64,
    /// `f(q−1; λ) / (1 − p)`.
    pub off_rate: f64,
    /// `(df/dλ) / f = (q−1)/λ − 1`.
    pub slope: f64,
}

impl BitTerms {
    pub fn new(q: u32, lambda: f64) -> Self {
        debug_assert!(q >= 1 && lambda > 0.0);
        if q == 1 {
            // ln(1 − e^{−λ}), accurate at both ends
            let log_p = if lambda < std::f64::consts::LN_2 {
                (-(-lambda).exp_m1()).ln()
            } else {
                (-(-lambda).exp()).ln_1p()
            };
            return Self {
                log_p,
                log_c: -lambda,
                on_rate: 1.0 / lambda.exp_m1(),
                off_rate: 1.0,
                slope: -1.0,
            };
        }
        let qf = q as f64;
        let log_f = log_pmf(q as u64 - 1, lambda);
        let slope = (qf - 1.0) / lambda - 1.0;
        if lambda < qf {
            let s = series_sum(|i| Some(lambda / (qf + i as f64)));
            let log_p = log_f + (lambda / qf).ln() + s.ln();
            let log_c = (-log_p.exp()).ln_1p();
            Self {
                log_p,
                log_c,
                on_rate: qf / (lambda * s),
                off_rate: (log_f - log_c).exp(),
                slope,
            }
        } else {
            let s = series_sum(|i| {
                let n = q as u64 - i;
                (i < q as u64).then(|| n as f64 / lambda)
            });
            let log_c = log_f + s.ln();
            let log_p = (-log_c.exp()).ln_1p();
            Self {
                log_p,
                log_c,
                on_rate: (log_f - log_p).exp(),
                off_rate: 1.0 / s,
                slope,
            }
        }
    }

    pub fn nll(&self, ones: f64, zeros: f64) -> f64 {
        let mut v = 0.0;
        if ones > 0.0 {
            v -= ones * self.log_p;
        }
        if zeros > 0.0 {
            v -= zeros * self.log_c;
        }
        v
    }

    pub fn grad(&self, ones: f64, zeros: f64) -> f64 {
        -ones * self.on_rate + zeros * self.off_rate
    }

    pub fn hess(&self, ones: f64, zeros: f64) -> f64 {
        let mut h = 0.0;
        if ones > 0.0 {
            h += ones * self.on_rate * (self.on_rate - self.slope);
        }
        if zeros > 0.0 {
            h += zeros * self.off_rate * (self.off_rate + self.slope);
        }
        h
    }
}

/// `P(Poisson(λ) ≥ q)`.
pub fn tail_prob(q: u32, lambda: f64) -> Result<f64> {
    if q < 1 {
        return Err(Error::invalid("threshold q must be >= 1"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("rate must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    if q == 1 {
        return Ok(-(-lambda).exp_m1());
    }
    Ok(BitTerms::new(q, lambda).log_p.exp())
}

#[inline]
fn clamp(lambda: f64, eps: f64) -> f64 {
    if lambda > eps {
        lambda
    } else {
        eps
    }
}

/// Negative log-likelihood of a single measurement `b` at `(q, λ)`.
pub fn nll_single(q: u32, b: bool, lambda: f64) -> f64 {
    let t = BitTerms::new(q, clamp(lambda, EPS_LAMBDA));
    if b {
        t.nll(1.0, 0.0)
    } else {
        t.nll(0.0, 1.0)
    }
}

pub fn grad_single(q: u32, b: bool, lambda: f64) -> f64 {
    let t = BitTerms::new(q, clamp(lambda, EPS_LAMBDA));
    if b {
        t.grad(1.0, 0.0)
    } else {
        t.grad(0.0, 1.0)
    }
}

pub fn hess_single(q: u32, b: bool, lambda: f64) -> f64 {
    let t = BitTerms::new(q, clamp(lambda, EPS_LAMBDA));
    if b {
        t.hess(1.0, 0.0)
    } else {
        t.hess(0.0, 1.0)
    }
}

/// Frame stack collapsed to per-jot `(q, #ones, #zeros)`: all frames share
/// `λ` and `q`, so the likelihood only depends on these counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    dims: (usize, usize),
    q: Vec<u16>,
    ones: Vec<u32>,
    zeros: Vec<u32>,
    eps: f64,
}

impl Measurements {
    pub fn from_stack(stack: &BinaryFrameStack) -> Self {
        let dims = stack.dims();
        let n = dims.0 * dims.1;
        let k = stack.num_frames() as u32;
        let mut ones = vec![0u32; n];
        for frame in stack.frames().outer_iter() {
            for (o, b) in ones.iter_mut().zip(frame.iter()) {
                *o += *b as u32;
            }
        }
        let zeros = ones.iter().map(|o| k - o).collect();
        Self {
            dims,
            q: stack.thresholds().data().iter().cloned().collect(),
            ones,
            zeros,
            eps: EPS_LAMBDA,
        }
    }

    /// Builds directly from per-jot data (row-major).
    pub fn from_counts(dims: (usize, usize), q: Vec<u16>, ones: Vec<u32>, zeros: Vec<u32>) -> Result<Self> {
        let n = dims.0 * dims.1;
        if q.len() != n || ones.len() != n || zeros.len() != n {
            return Err(Error::dims("measurement counts", n, (q.len(), ones.len(), zeros.len())));
        }
        if q.contains(&0) {
            return Err(Error::invalid("thresholds must be >= 1"));
        }
        Ok(Self {
            dims,
            q,
            ones,
            zeros,
            eps: EPS_LAMBDA,
        })
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn thresholds(&self) -> &[u16] {
        &self.q
    }

    pub fn ones(&self) -> &[u32] {
        &self.ones
    }

    pub fn zeros(&self) -> &[u32] {
        &self.zeros
    }

    /// Sub-block of jots `[top, top+rows) × [left, left+cols)`.
    pub fn window(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        if top + rows > self.dims.0 || left + cols > self.dims.1 {
            return Err(Error::dims(
                "measurement window",
                self.dims,
                (top + rows, left + cols),
            ));
        }
        let mut q = Vec::with_capacity(rows * cols);
        let mut ones = Vec::with_capacity(rows * cols);
        let mut zeros = Vec::with_capacity(rows * cols);
        for r in top..top + rows {
            let base = r * self.dims.1 + left;
            q.extend_from_slice(&self.q[base..base + cols]);
            ones.extend_from_slice(&self.ones[base..base + cols]);
            zeros.extend_from_slice(&self.zeros[base..base + cols]);
        }
        Ok(Self {
            dims: (rows, cols),
            q,
            ones,
            zeros,
            eps: self.eps,
        })
    }

    fn check(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.len() {
            return Err(Error::dims("likelihood field", self.len(), lambda.len()));
        }
        Ok(())
    }

    #[inline]
    fn terms(&self, j: usize, lambda: f64) -> BitTerms {
        BitTerms::new(self.q[j] as u32, clamp(lambda, self.eps))
    }

    pub fn nll(&self, lambda: &[f64]) -> Result<f64> {
        self.check(lambda)?;
        Ok(lambda
            .iter()
            .enumerate()
            .map(|(j, l)| self.terms(j, *l).nll(self.ones[j] as f64, self.zeros[j] as f64))
            .sum())
    }

    /// Writes `∂ℓ/∂λ` into `grad` and returns `ℓ`.
    pub fn nll_and_grad(&self, lambda: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.check(lambda)?;
        let mut total = 0.0;
        for (j, (l, g)) in lambda.iter().zip(grad.iter_mut()).enumerate() {
            let t = self.terms(j, *l);
            let (o, z) = (self.ones[j] as f64, self.zeros[j] as f64);
            total += t.nll(o, z);
            *g = t.grad(o, z);
        }
        Ok(total)
    }

    pub fn grad_into(&self, lambda: &[f64], grad: &mut [f64]) -> Result<()> {
        self.nll_and_grad(lambda, grad).map(|_| ())
    }

    /// Writes both `∂ℓ/∂λ` and the diagonal `∂²ℓ/∂λ²`.
    pub fn grad_and_hess(&self, lambda: &[f64], grad: &mut [f64], hess: &mut [f64]) -> Result<()> {
        self.check(lambda)?;
        for j in 0..lambda.len() {
            let t = self.terms(j, lambda[j]);
            let (o, z) = (self.ones[j] as f64, self.zeros[j] as f64);
            grad[j] = t.grad(o, z);
            hess[j] = t.hess(o, z);
        }
        Ok(())
    }

    /// Upper bound on `∂²ℓ/∂λ²` over `[lambda_min, lambda_max]` for every jot,
    /// from a dense log-spaced grid, times a safety factor of 2. Never below
    /// `1e-12`.
    pub fn lipschitz_bound(&self, lambda_min: f64, lambda_max: f64) -> f64 {
        let lo = lambda_min.max(self.eps);
        let hi = lambda_max.max(lo);
        const GRID: usize = 2048;
        let grid: Vec<f64> = (0..GRID)
            .map(|i| {
                let t = i as f64 / (GRID - 1) as f64;
                (lo.ln() + t * (hi.ln() - lo.ln())).exp()
            })
            .collect();
        let mut per_q: BTreeMap<u16, (f64, f64)> = BTreeMap::new();
        let mut best = 0.0f64;
        for j in 0..self.len() {
            let (h_on, h_off) = *per_q.entry(self.q[j]).or_insert_with(|| {
                grid.iter().fold((0.0f64, 0.0f64), |(a, b), l| {
                    let t = BitTerms::new(self.q[j] as u32, *l);
                    (a.max(t.hess(1.0, 0.0)), b.max(t.hess(0.0, 1.0)))
                })
            });
            best = best.max(self.ones[j] as f64 * h_on + self.zeros[j] as f64 * h_off);
        }
        (2.0 * best).max(1e-12)
    }
}

fn field_slice<'a>(lambda: &'a ArrayView2<'a, f64>, meas: &Measurements) -> Result<std::borrow::Cow<'a, [f64]>> {
    if lambda.dim() != meas.dims() {
        return Err(Error::dims("likelihood field", meas.dims(), lambda.dim()));
    }
    Ok(match lambda.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(lambda.iter().cloned().collect()),
    })
}

/// `ℓ(λ; B)` with `λ` clamped to [`EPS_LAMBDA`].
pub fn neg_log_likelihood(lambda: ArrayView2<f64>, stack: &BinaryFrameStack) -> Result<f64> {
    let meas = Measurements::from_stack(stack);
    let l = field_slice(&lambda, &meas)?;
    meas.nll(&l)
}

/// `∂ℓ/∂λ` summed over frames.
pub fn grad_lambda(lambda: ArrayView2<f64>, stack: &BinaryFrameStack) -> Result<Array2<f64>> {
    let meas = Measurements::from_stack(stack);
    let l = field_slice(&lambda, &meas)?;
    let mut g = vec![0.0; meas.len()];
    meas.grad_into(&l, &mut g)?;
    Ok(Array2::from_shape_vec(meas.dims(), g).expect("shape"))
}

/// Diagonal `∂²ℓ/∂λ²`.
pub fn hess_lambda(lambda: ArrayView2<f64>, stack: &BinaryFrameStack) -> Result<Array2<f64>> {
    let meas = Measurements::from_stack(stack);
    let l = field_slice(&lambda, &meas)?;
    let mut g = vec![0.0; meas.len()];
    let mut h = vec![0.0; meas.len()];
    meas.grad_and_hess(&l, &mut g, &mut h)?;
    Ok(Array2::from_shape_vec(meas.dims(), h).expect("shape"))
}

/// See [`Measurements::lipschitz_bound`]; the lower end of the range is [`EPS_LAMBDA`].
pub fn lipschitz_bound(stack: &BinaryFrameStack, lambda_max: f64) -> f64 {
    Measurements::from_stack(stack).lipschitz_bound(EPS_LAMBDA, lambda_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::ThresholdMap;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{E, LN_2};

    fn single(q: u16, bits: &[u8]) -> BinaryFrameStack {
        let frames = Array3::from_shape_vec((bits.len(), 1, 1), bits.to_vec()).unwrap();
        BinaryFrameStack::new(frames, ThresholdMap::constant((1, 1), q).unwrap()).unwrap()
    }

    /// Cancellation-free reference in the small-λ regime: the upper tail summed
    /// term by term from the pmf.
    fn tail_by_pmf_sum(q: u32, lambda: f64) -> f64 {
        (q as u64..q as u64 + 400).map(|n| pmf(n, lambda)).sum()
    }

    #[test]
    fn ln_factorial_matches_products() {
        let mut f = 0.0f64;
        for n in 1..=200u64 {
            f += (n as f64).ln();
            assert!((ln_factorial(n) - f).abs() < 1e-10 * f.max(1.0), "n={n}");
        }
        assert!((ln_factorial(171) - ln_factorial(170) - 171f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_on_bit_keeps_relative_accuracy() {
        // −ln(1 − e^{−λ}) = e^{−λ}(1 + e^{−λ}/2 + …)
        for lam in [20.0f64, 30.8, 40.0, 60.0] {
            let expected = (-lam).exp() * (1.0 + 0.5 * (-lam).exp());
            let v = nll_single(1, true, lam);
            assert!((v - expected).abs() <= 1e-14 * expected, "lambda={lam}: {v} vs {expected}");
            let g = -1.0 / lam.exp_m1();
            assert!((grad_single(1, true, lam) - g).abs() <= 1e-14 * g.abs());
        }
    }

    #[test]
    fn tail_examples() {
        assert_eq!(tail_prob(1, 0.0).unwrap(), 0.0);
        assert!((tail_prob(1, LN_2).unwrap() - 0.5).abs() < 1e-16);
        assert!((tail_prob(2, 1.0).unwrap() - (1.0 - 2.0 / E)).abs() < 1e-15);
        assert!(tail_prob(0, 1.0).is_err());
    }

    #[test]
    fn tail_q1_is_exact() {
        for lam in [1e-12, 1e-6, 0.3, 1.0, 7.0, 40.0, 800.0] {
            assert_eq!(tail_prob(1, lam).unwrap(), -(-lam).exp_m1());
        }
    }

    #[test]
    fn tail_small_probabilities_are_accurate() {
        for q in [2u32, 5, 10, 30] {
            for lam in [1e-4, 0.01, 0.5, 1.5] {
                let a = tail_prob(q, lam).unwrap();
                let b = tail_by_pmf_sum(q, lam);
                assert!((a - b).abs() <= 1e-13 * b, "q={q} lam={lam}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn tail_plus_cdf_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let q = rng.random_range(1..=10u32);
            let lam = rng.random_range(0.0..60.0);
            let cdf: f64 = (0..q as u64).map(|n| pmf(n, lam)).sum();
            let p = tail_prob(q, lam).unwrap();
            assert!((p + cdf - 1.0).abs() <= 1e-13, "q={q} lam={lam}");
        }
    }

    #[test]
    fn tail_monotone() {
        for q in 1..=10u32 {
            let mut prev = 0.0;
            for i in 1..400 {
                let p = tail_prob(q, i as f64 * 0.1).unwrap();
                assert!(p >= prev);
                prev = p;
            }
        }
        for i in 1..100 {
            let lam = i as f64 * 0.3;
            let mut prev = 1.0;
            for q in 1..=20u32 {
                let p = tail_prob(q, lam).unwrap();
                assert!(p <= prev);
                prev = p;
            }
        }
    }

    #[test]
    fn large_threshold_and_rate() {
        let p = tail_prob(1000, 1000.0).unwrap();
        assert!(p > 0.49 && p < 0.52, "{p}");
        let p = tail_prob(10, 1e5).unwrap();
        assert_eq!(p, 1.0);
        let t = BitTerms::new(10, 1e5);
        assert!(t.log_c.is_finite() && t.log_c < -9e4);
        assert!(t.off_rate.is_finite());
    }

    #[test]
    fn nll_examples() {
        let b = single(1, &[1]);
        let l = array![[LN_2]];
        assert!((neg_log_likelihood(l.view(), &b).unwrap() - LN_2).abs() < 1e-15);
        let b = single(1, &[1, 0]);
        assert!((neg_log_likelihood(l.view(), &b).unwrap() - 2.0 * LN_2).abs() < 1e-15);
        let b = single(2, &[1]);
        let want = -(1.0 - 2.0 / E).ln();
        let got = neg_log_likelihood(array![[1.0]].view(), &b).unwrap();
        assert!((got - want).abs() < 1e-14);
        assert!((got - 1.330893).abs() < 1e-6);
    }

    #[test]
    fn nll_dimension_mismatch() {
        let b = single(1, &[1]);
        assert!(neg_log_likelihood(array![[1.0, 2.0]].view(), &b).is_err());
        assert!(grad_lambda(array![[1.0], [2.0]].view(), &b).is_err());
    }

    #[test]
    fn grad_examples() {
        assert!((grad_single(1, true, LN_2) + 1.0).abs() < 1e-15);
        for lam in [1e-3, 0.5, 3.0, 70.0] {
            assert_eq!(grad_single(1, false, lam), 1.0);
        }
        let want = -(1.0 / E) / (1.0 - 2.0 / E);
        assert!((grad_single(2, true, 1.0) - want).abs() < 1e-14);
        assert!((want + 1.39221).abs() < 1e-5);
        // central difference at h = 1e-6
        let h = 1e-6;
        let fd = (nll_single(2, true, 1.0 + h) - nll_single(2, true, 1.0 - h)) / (2.0 * h);
        assert!((fd - want).abs() < 1e-8);
    }

    #[test]
    fn hess_examples() {
        for lam in [0.1, 1.0, 9.0] {
            assert_eq!(hess_single(1, false, lam), 0.0);
        }
        assert!((hess_single(1, true, LN_2) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn hessian_nonnegative_sweep() {
        for q in 1..=10u32 {
            for i in 0..2000 {
                let lam = 10f64.powf(-3.0 + 5.0 * i as f64 / 1999.0);
                assert!(hess_single(q, true, lam) >= -1e-8, "q={q} lam={lam}");
                assert!(hess_single(q, false, lam) >= -1e-8, "q={q} lam={lam}");
            }
        }
    }

    #[test]
    fn monotone_in_lambda() {
        for q in 1..=10u32 {
            let mut prev_on = f64::INFINITY;
            let mut prev_off = f64::NEG_INFINITY;
            for i in 1..300 {
                let lam = i as f64 * 0.1;
                let on = nll_single(q, true, lam);
                let off = nll_single(q, false, lam);
                assert!(on <= prev_on + 1e-12);
                assert!(off >= prev_off - 1e-12);
                prev_on = on;
                prev_off = off;
            }
        }
    }

    #[test]
    fn clamping_keeps_objective_finite() {
        let b = single(3, &[1, 1]);
        let v = neg_log_likelihood(array![[0.0]].view(), &b).unwrap();
        assert!(v.is_finite());
        let g = grad_lambda(array![[0.0]].view(), &b).unwrap();
        assert!(g[[0, 0]].is_finite() && g[[0, 0]] < 0.0);
    }

    #[test]
    fn lipschitz_examples() {
        let zeros = single(1, &[0, 0, 0]);
        let m = Measurements::from_stack(&zeros);
        assert_eq!(m.lipschitz_bound(0.01, 10.0), 1e-12);

        let on = single(1, &[1]);
        let m = Measurements::from_stack(&on);
        let hmax = (-0.01f64).exp() / (-(-0.01f64).exp_m1()).powi(2);
        assert!((hmax - 1.0e4).abs() / 1.0e4 < 1e-3);
        let bound = m.lipschitz_bound(0.01, 10.0);
        assert!((bound - 2.0 * hmax).abs() / bound < 1e-12);

        let on2 = single(1, &[1, 1]);
        let bound2 = Measurements::from_stack(&on2).lipschitz_bound(0.01, 10.0);
        assert!((bound2 - 2.0 * bound).abs() / bound2 < 1e-12);
    }

    #[test]
    fn window_extracts_block() {
        let frames = Array3::from_shape_fn((2, 4, 4), |(k, i, j)| ((k + i + j) % 2) as u8);
        let q = ThresholdMap::new(Array2::from_shape_fn((4, 4), |(i, j)| (1 + i * 4 + j) as u16)).unwrap();
        let m = Measurements::from_stack(&BinaryFrameStack::new(frames, q).unwrap());
        let w = m.window(1, 2, 2, 2).unwrap();
        assert_eq!(w.thresholds(), &[7, 8, 11, 12]);
        assert_eq!(w.ones(), &[1, 1, 1, 1]);
        assert!(m.window(3, 3, 2, 2).is_err());
    }
}
