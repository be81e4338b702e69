//! Birth-death-chain orthogonal polynomials: the primal/dual systems built
//! from the three-term recurrence, their spectral measures, and the dual
//! relations that power the coherent-measure and kernel formulas.
//!
//! Polynomial *values* always come from the recurrence (numerically stable on
//! and near the support); the monomial coefficient tables are kept for the
//! operations that genuinely need Taylor data at the origin (confluent
//! determinants, contour residues) and carry an exactness watermark.

use num_complex::Complex64;

use crate::chain::RateSpec;
use crate::error::{Error, Result};
use crate::families::FamilyParams;
use crate::quadrature::{gauss_jacobi_normalized, GaussRule};

/// Orthogonality measure of the chain's polynomials, with quadrature attached.
#[derive(Debug, Clone)]
pub enum SpectralMeasure {
    Continuous {
        support: (f64, f64),
        rule: GaussRule,
    },
    Discrete {
        /// `(location, mass)`, truncated once the tail is below 1e-14.
        atoms: Vec<(f64, f64)>,
    },
}

impl SpectralMeasure {
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        match self {
            SpectralMeasure::Continuous { rule, .. } => rule.integrate(f),
            SpectralMeasure::Discrete { atoms } => {
                let mut sum = 0.0;
                let mut carry = 0.0;
                for &(x, w) in atoms {
                    let term = w * f(x) - carry;
                    let next = sum + term;
                    carry = (next - sum) - term;
                    sum = next;
                }
                sum
            }
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.integrate(|_| 1.0)
    }

    /// Upper endpoint of the support.
    pub fn sup(&self) -> f64 {
        match self {
            SpectralMeasure::Continuous { support, .. } => support.1,
            SpectralMeasure::Discrete { atoms } => atoms.last().map(|&(x, _)| x).unwrap_or(0.0),
        }
    }

    pub fn inf(&self) -> f64 {
        match self {
            SpectralMeasure::Continuous { support, .. } => support.0,
            SpectralMeasure::Discrete { atoms } => atoms.first().map(|&(x, _)| x).unwrap_or(0.0),
        }
    }

    /// Compact support is required by every kernel-side formula.
    pub fn is_compact(&self) -> bool {
        matches!(self, SpectralMeasure::Continuous { .. })
    }
}

/// Which of the two polynomial systems an operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Primal,
    Dual,
}

/// The primal and dual polynomial systems of one chain, with spectral data.
pub struct OrthoSystem {
    rates: RateSpec,
    dual_rates: RateSpec,
    pi: Vec<f64>,
    pi_hat: Vec<f64>,
    coeffs: Vec<Vec<f64>>,
    coeffs_hat: Vec<Vec<f64>>,
    /// Largest degree whose coefficients stay below 2^53 in magnitude; the
    /// confluent/residue paths refuse to go past it.
    exact_degree: usize,
    measure: Option<SpectralMeasure>,
    measure_hat: Option<SpectralMeasure>,
    degree_cap: usize,
}

pub const DEFAULT_DEGREE_CAP: usize = 64;

fn recurrence_coeffs(rates: &RateSpec, cap: usize) -> Vec<Vec<f64>> {
    // lam(n) Q_{n+1} = (lam(n)+mu(n) - x) Q_n - mu(n) Q_{n-1}; on the dual
    // side mu(0) = killing rate enters the n = 0 diagonal the same way.
    let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(cap + 1);
    coeffs.push(vec![1.0]);
    if cap == 0 {
        return coeffs;
    }
    let (l0, m0) = (rates.birth(0), rates.death(0));
    coeffs.push(vec![(l0 + m0) / l0, -1.0 / l0]);
    for n in 1..cap {
        let (l, m) = (rates.birth(n as i64), rates.death(n as i64));
        let qn = &coeffs[n];
        let qm = &coeffs[n - 1];
        let mut next = vec![0.0; n + 2];
        for (k, &c) in qn.iter().enumerate() {
            next[k] += (l + m) * c;
            next[k + 1] -= c;
        }
        for (k, &c) in qm.iter().enumerate() {
            next[k] -= m * c;
        }
        for c in &mut next {
            *c /= l;
        }
        coeffs.push(next);
    }
    coeffs
}

impl OrthoSystem {
    /// Builds both polynomial systems from the rates; no spectral measure is
    /// attached, so only recurrence/coefficient operations are available.
    pub fn from_rates(rates: RateSpec, degree_cap: usize) -> Result<Self> {
        if degree_cap < 1 {
            return Err(Error::Domain("degree cap must be at least 1".into()));
        }
        let dual_rates = rates.siegmund_dual();
        let pi = rates.symmetrizing_measure(degree_cap as i64 + 2)?;
        let pi_hat = dual_rates.symmetrizing_measure(degree_cap as i64 + 2)?;
        let coeffs = recurrence_coeffs(&rates, degree_cap);
        let coeffs_hat = recurrence_coeffs(&dual_rates, degree_cap);
        let finite = |tables: &[Vec<f64>]| {
            tables
                .iter()
                .take_while(|t| t.iter().all(|c| c.is_finite()))
                .count()
                .saturating_sub(1)
        };
        let safe_cap = finite(&coeffs).min(finite(&coeffs_hat));
        if safe_cap < degree_cap {
            return Err(Error::Precision {
                message: format!("coefficient overflow at requested degree cap {degree_cap}"),
                safe_cap,
            });
        }
        let exact = |tables: &[Vec<f64>]| {
            tables
                .iter()
                .take_while(|t| t.iter().all(|c| c.abs() <= 9.0e15))
                .count()
                .saturating_sub(1)
        };
        let exact_degree = exact(&coeffs).min(exact(&coeffs_hat));
        Ok(OrthoSystem {
            rates,
            dual_rates,
            pi,
            pi_hat,
            coeffs,
            coeffs_hat,
            exact_degree,
            measure: None,
            measure_hat: None,
            degree_cap,
        })
    }

    /// Builds the system for a named family, attaching the closed-form
    /// spectral measure where one exists (Jacobi-type on `[0, 2]`, Charlier
    /// atoms). Families without a closed-form measure still support the
    /// simulation-side operations; kernel work fails fast on them.
    pub fn for_family(family: &FamilyParams, degree_cap: usize) -> Result<Self> {
        let rates = family.rates()?;
        let mut sys = OrthoSystem::from_rates(rates, degree_cap)?;
        match *family {
            FamilyParams::Chebyshev => {
                sys.attach_jacobi_measure(-0.5, -0.5)?;
            }
            FamilyParams::Jacobi { alpha, beta } => {
                sys.attach_jacobi_measure(alpha, beta)?;
            }
            FamilyParams::Charlier { lam, mu } => {
                sys.attach_charlier_measure(lam, mu);
            }
            _ => {}
        }
        Ok(sys)
    }

    /// Spectral weight `Z x^alpha (2-x)^beta` on `[0, 2]`, `Z` from unit mass;
    /// the dual measure follows the key relation `dw_hat = x dw / lam_0`.
    ///
    /// The Chebyshev case gets the closed-form Gauss-Chebyshev rule (nodes
    /// `1 - cos`, flat weights), which is machine-exact; the positivity
    /// contracts near 1e-12 need that headroom. General parameters go through
    /// Golub-Welsch, with the dual getting its own matched rule.
    fn attach_jacobi_measure(&mut self, alpha: f64, beta: f64) -> Result<()> {
        let n = 40 + 4 * self.degree_cap;
        let lam0 = self.rates.birth(0);
        let (rule, dual_rule) = if alpha == -0.5 && beta == -0.5 {
            let mut nodes = Vec::with_capacity(n);
            let w = 1.0 / n as f64;
            for k in 1..=n {
                let theta = (2 * k - 1) as f64 * std::f64::consts::PI / (2 * n) as f64;
                nodes.push(1.0 - theta.cos());
            }
            let primal = GaussRule {
                nodes: nodes.clone(),
                weights: vec![w; n],
            };
            // same nodes, weights x/lam0: exact to degree 2n-2 for the dual
            let dual = GaussRule {
                weights: nodes.iter().map(|&x| w * x / lam0).collect(),
                nodes,
            };
            (primal, dual)
        } else {
            let rule = gauss_jacobi_normalized(n, alpha, beta, 0.0, 2.0)?;
            let dual_rule = gauss_jacobi_normalized(n, alpha + 1.0, beta, 0.0, 2.0)?;
            // mass of x dw / lam0 is the first moment of w over lam0
            let m1 = rule.integrate(|x| x);
            let scale = m1 / lam0;
            let dual_rule = GaussRule {
                nodes: dual_rule.nodes,
                weights: dual_rule.weights.iter().map(|w| w * scale).collect(),
            };
            (rule, dual_rule)
        };
        self.measure = Some(SpectralMeasure::Continuous {
            support: (0.0, 2.0),
            rule,
        });
        self.measure_hat = Some(SpectralMeasure::Continuous {
            support: (0.0, 2.0),
            rule: dual_rule,
        });
        Ok(())
    }

    /// Poisson atoms `a^n e^{-a}/n!` at `x = mu n`, `a = lam/mu`. The list is
    /// extended past the mass-tail cutoff until weights beat the polynomial
    /// growth of every integrand of degree up to `2 cap + 6`.
    fn attach_charlier_measure(&mut self, lam: f64, mu: f64) {
        let a = lam / mu;
        let deg = (2 * self.degree_cap + 6) as i32;
        let mut atoms = Vec::new();
        let mut w = (-a).exp();
        let mut cum = 0.0;
        let mut n = 0usize;
        loop {
            let x = mu * n as f64;
            atoms.push((x, w));
            cum += w;
            let mass_done = cum >= 1.0 - 1e-14;
            // compare in logs: w x^deg can overflow f64 long before it decays
            let growth_done = w.ln() + deg as f64 * x.max(1.0).ln() < -46.0;
            if (mass_done && growth_done && n >= 4) || n > 20_000 || w == 0.0 {
                break;
            }
            n += 1;
            w *= a / n as f64;
        }
        let lam0 = self.rates.birth(0);
        let dual_atoms: Vec<(f64, f64)> = atoms
            .iter()
            .map(|&(x, w)| (x, x * w / lam0))
            .filter(|&(_, w)| w > 0.0)
            .collect();
        self.measure = Some(SpectralMeasure::Discrete { atoms });
        self.measure_hat = Some(SpectralMeasure::Discrete { atoms: dual_atoms });
    }

    /// Attaches a user-supplied measure pair directly.
    pub fn attach_measures(&mut self, primal: SpectralMeasure, dual: SpectralMeasure) {
        self.measure = Some(primal);
        self.measure_hat = Some(dual);
    }

    pub fn rates(&self) -> &RateSpec {
        &self.rates
    }

    pub fn dual_rates(&self) -> &RateSpec {
        &self.dual_rates
    }

    pub fn degree_cap(&self) -> usize {
        self.degree_cap
    }

    pub fn exact_degree(&self) -> usize {
        self.exact_degree
    }

    pub fn lam0(&self) -> f64 {
        self.rates.birth(0)
    }

    pub fn pi(&self, k: usize) -> f64 {
        self.pi[k]
    }

    pub fn pi_hat(&self, k: usize) -> f64 {
        self.pi_hat[k]
    }

    pub fn measure(&self, side: Side) -> Result<&SpectralMeasure> {
        let m = match side {
            Side::Primal => self.measure.as_ref(),
            Side::Dual => self.measure_hat.as_ref(),
        };
        m.ok_or_else(|| {
            Error::Unsupported(
                "this rate family has no attached spectral measure; kernel-side \
                 operations need one (use a jacobi/chebyshev/charlier family or \
                 attach a measure explicitly)"
                    .into(),
            )
        })
    }

    /// Requires a compact support; every formula from the coherent-measure
    /// and kernel layers goes through this gate.
    pub fn compact_measure(&self, side: Side) -> Result<&SpectralMeasure> {
        let m = self.measure(side)?;
        if !m.is_compact() {
            return Err(Error::Unsupported(
                "kernel-side formulas require a compact spectral support".into(),
            ));
        }
        Ok(m)
    }

    /// `Q_i(x)` (or the dual polynomial) by the three-term recurrence.
    pub fn eval(&self, side: Side, i: usize, x: f64) -> f64 {
        let r = match side {
            Side::Primal => &self.rates,
            Side::Dual => &self.dual_rates,
        };
        let mut q0 = 1.0;
        if i == 0 {
            return q0;
        }
        let (l0, m0) = (r.birth(0), r.death(0));
        let mut q1 = (l0 + m0 - x) / l0;
        for n in 1..i {
            let (l, m) = (r.birth(n as i64), r.death(n as i64));
            let q2 = ((l + m - x) * q1 - m * q0) / l;
            q0 = q1;
            q1 = q2;
        }
        q1
    }

    /// Recurrence evaluation at a complex argument (contour integrands).
    pub fn eval_c(&self, side: Side, i: usize, x: Complex64) -> Complex64 {
        let r = match side {
            Side::Primal => &self.rates,
            Side::Dual => &self.dual_rates,
        };
        let mut q0 = Complex64::new(1.0, 0.0);
        if i == 0 {
            return q0;
        }
        let (l0, m0) = (r.birth(0), r.death(0));
        let mut q1 = (Complex64::new(l0 + m0, 0.0) - x) / l0;
        for n in 1..i {
            let (l, m) = (r.birth(n as i64), r.death(n as i64));
            let q2 = ((Complex64::new(l + m, 0.0) - x) * q1 - m * q0) / l;
            q0 = q1;
            q1 = q2;
        }
        q1
    }

    /// Monomial coefficients of `Q_i` (ascending powers). Fine for Taylor-type
    /// use at any stored degree; cancellation-prone consumers (confluent
    /// determinants) must additionally respect [`OrthoSystem::exact_degree`].
    pub fn coefficients(&self, side: Side, i: usize) -> Result<&[f64]> {
        if i > self.degree_cap {
            return Err(Error::Precision {
                message: format!("monomial coefficients of degree {i} requested"),
                safe_cap: self.degree_cap,
            });
        }
        let table = match side {
            Side::Primal => &self.coeffs,
            Side::Dual => &self.coeffs_hat,
        };
        Ok(&table[i])
    }

    /// Normalization weight of the side: `pi` or `pi_hat`.
    pub fn weight(&self, side: Side, k: usize) -> f64 {
        match side {
            Side::Primal => self.pi[k],
            Side::Dual => self.pi_hat[k],
        }
    }

    /// `<f, g>` against the side's spectral measure.
    pub fn inner_product(
        &self,
        side: Side,
        f: impl Fn(f64) -> f64,
        g: impl Fn(f64) -> f64,
    ) -> Result<f64> {
        let m = self.measure(side)?;
        let v = m.integrate(|x| f(x) * g(x));
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite integrand in inner product".into()));
        }
        Ok(v)
    }

    /// Spectral transition density `pi(j) int e^{-tx} Q_i Q_j dw` (or the dual
    /// version), an independent route to the matrix-exponential density.
    pub fn transition_spectral(&self, side: Side, t: f64, i: usize, j: usize) -> Result<f64> {
        if t < 0.0 {
            return Err(Error::Domain("time must be nonnegative".into()));
        }
        let m = self.measure(side)?;
        let w = self.weight(side, j);
        Ok(w * m.integrate(|x| (-t * x).exp() * self.eval(side, i, x) * self.eval(side, j, x)))
    }

    /// Expansion coefficients `<Q_k, f> pi(k)` for `k <= cap`, with a decay
    /// check: the trailing coefficients must fall below 1e-12.
    pub fn expansion_coeffs(&self, f: impl Fn(f64) -> f64, cap: usize) -> Result<Vec<f64>> {
        let m = self.measure(Side::Primal)?;
        let coeffs: Vec<f64> = (0..=cap)
            .map(|k| self.pi[k] * m.integrate(|x| self.eval(Side::Primal, k, x) * f(x)))
            .collect();
        let tail = coeffs.iter().rev().take(3).fold(0.0_f64, |a, c| a.max(c.abs()));
        if tail > 1e-12 {
            return Err(Error::TruncationInsufficient { cap, last: tail });
        }
        Ok(coeffs)
    }
}

/// Residuals of the four dual-polynomial identities, each taken as a maximum
/// over 20 sample points in the support (the tail identities use
/// `f(x) = e^{-tx}` at the supplied times).
#[derive(Debug, Clone, serde::Serialize)]
pub struct IdentityReport {
    pub partial_sum_primal: f64,
    pub partial_sum_dual: f64,
    pub tail_identity: f64,
    pub dual_tail_identity: f64,
}

impl IdentityReport {
    pub fn max_residual(&self) -> f64 {
        self.partial_sum_primal
            .max(self.partial_sum_dual)
            .max(self.tail_identity)
            .max(self.dual_tail_identity)
    }
}

/// Numerically verifies, for the given order `n`:
/// 1. `sum_{i<=n} pi_i Q_i(x) = Qhat_n(x)`;
/// 2. `sum_{k<n} pihat_k Qhat_k(x) = lam_0 (1 - Q_n(x)) / x`;
/// 3. `<Qhat_n, f(0) - f>_w = sum_{k>n} <pi_k Q_k, f>_w`;
/// 4. `sum_{k>=n} <pihat_k Qhat_k, f>_what = <Q_n, f>_w`.
pub fn identity_suite(sys: &OrthoSystem, n: usize, ts: &[f64]) -> Result<IdentityReport> {
    let m = sys.measure(Side::Primal)?;
    let mh = sys.measure(Side::Dual)?;
    let (lo, hi) = (m.inf(), m.sup());
    let points: Vec<f64> = (1..=20)
        .map(|k| lo.max(1e-3) + (hi - lo.max(1e-3)) * k as f64 / 21.0)
        .collect();

    let mut r1 = 0.0_f64;
    let mut r2 = 0.0_f64;
    for &x in &points {
        let sum1: f64 = (0..=n).map(|i| sys.pi(i) * sys.eval(Side::Primal, i, x)).sum();
        r1 = r1.max((sum1 - sys.eval(Side::Dual, n, x)).abs());
        let sum2: f64 = (0..n).map(|k| sys.pi_hat(k) * sys.eval(Side::Dual, k, x)).sum();
        let rhs = sys.lam0() * (1.0 - sys.eval(Side::Primal, n, x)) / x;
        r2 = r2.max((sum2 - rhs).abs());
    }

    let mut r3 = 0.0_f64;
    let mut r4 = 0.0_f64;
    let kmax = sys.degree_cap;
    for &t in ts {
        let f = |x: f64| (-t * x).exp();
        let lhs3 = m.integrate(|x| sys.eval(Side::Dual, n, x) * (f(0.0) - f(x)));
        let mut rhs3 = 0.0;
        for k in (n + 1)..=kmax {
            let term = sys.pi(k) * m.integrate(|x| sys.eval(Side::Primal, k, x) * f(x));
            rhs3 += term;
            if term.abs() < 1e-16 && k > n + 5 {
                break;
            }
        }
        r3 = r3.max((lhs3 - rhs3).abs());

        let mut lhs4 = 0.0;
        for k in n..=kmax {
            let term = sys.pi_hat(k) * mh.integrate(|x| sys.eval(Side::Dual, k, x) * f(x));
            lhs4 += term;
            if term.abs() < 1e-16 && k > n + 5 {
                break;
            }
        }
        let rhs4 = m.integrate(|x| sys.eval(Side::Primal, n, x) * f(x));
        r4 = r4.max((lhs4 - rhs4).abs());
    }
    Ok(IdentityReport {
        partial_sum_primal: r1,
        partial_sum_dual: r2,
        tail_identity: r3,
        dual_tail_identity: r4,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ChainModel;
    use crate::families;
    use approx::assert_abs_diff_eq;

    fn chebyshev_system() -> OrthoSystem {
        OrthoSystem::for_family(&FamilyParams::Chebyshev, DEFAULT_DEGREE_CAP).unwrap()
    }

    #[test]
    fn first_polynomials() {
        let sys = chebyshev_system();
        // Q_1(x) = 1 - x
        assert_eq!(sys.coefficients(Side::Primal, 1).unwrap(), &[1.0, -1.0]);
        // dual recurrence with killing on the diagonal: Qhat_1(x) = 3 - 2x
        assert_eq!(sys.coefficients(Side::Dual, 1).unwrap(), &[3.0, -2.0]);
        assert_abs_diff_eq!(sys.eval(Side::Primal, 1, 0.25), 0.75);
        assert_abs_diff_eq!(sys.eval(Side::Dual, 1, 0.25), 2.5);
    }

    #[test]
    fn q_at_zero_is_one() {
        let sys = chebyshev_system();
        for i in 0..=20 {
            assert_abs_diff_eq!(sys.eval(Side::Primal, i, 0.0), 1.0, epsilon = 1e-12);
            let c = sys.coefficients(Side::Primal, i).unwrap();
            assert_abs_diff_eq!(c[0], 1.0, epsilon = 1e-12);
            // Qhat_i(0) = sum_{k<=i} pi_k (identity 1 at x = 0)
            let expect: f64 = (0..=i).map(|k| sys.pi(k)).sum();
            assert_abs_diff_eq!(sys.eval(Side::Dual, i, 0.0), expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn chebyshev_matches_hypergeometric_sum() {
        // Q_n(x) = sum_k (-n)_k (n)_k / ((1/2)_k k!) (x/2)^k
        let sys = chebyshev_system();
        let poch = |a: f64, k: usize| -> f64 { (0..k).map(|i| a + i as f64).product() };
        for (n, x) in [(2usize, 1.0), (3, 0.6), (5, 1.7)] {
            let mut sum = 0.0;
            let mut fact = 1.0;
            for k in 0..=n {
                if k > 0 {
                    fact *= k as f64;
                }
                sum += poch(-(n as f64), k) * poch(n as f64, k) / poch(0.5, k)
                    * (x / 2.0_f64).powi(k as i32)
                    / fact;
            }
            assert_abs_diff_eq!(sys.eval(Side::Primal, n, x), sum, epsilon = 1e-10);
        }
    }

    #[test]
    fn chebyshev_spectral_weight_is_arcsine() {
        // dw = (1/pi) x^{-1/2} (2-x)^{-1/2} dx on [0, 2]
        let sys = chebyshev_system();
        let m = sys.measure(Side::Primal).unwrap();
        assert_abs_diff_eq!(m.total_mass(), 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(m.integrate(|x| x), 1.0, epsilon = 1e-12);
        assert_eq!(m.sup(), 2.0);
        // dual measure also has unit mass (pihat(0) = 1)
        let mh = sys.measure(Side::Dual).unwrap();
        assert_abs_diff_eq!(mh.total_mass(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn orthogonality_is_diagonal_both_sides() {
        let sys = chebyshev_system();
        for i in 0..=12usize {
            for j in 0..=12usize {
                let v = sys
                    .inner_product(
                        Side::Primal,
                        |x| sys.eval(Side::Primal, i, x),
                        |x| sys.eval(Side::Primal, j, x),
                    )
                    .unwrap();
                let target = if i == j { 1.0 / sys.pi(j) } else { 0.0 };
                assert!((v - target).abs() < 1e-10, "primal ({i},{j}): {v}");
                let vh = sys
                    .inner_product(
                        Side::Dual,
                        |x| sys.eval(Side::Dual, i, x),
                        |x| sys.eval(Side::Dual, j, x),
                    )
                    .unwrap();
                let target = if i == j { 1.0 / sys.pi_hat(j) } else { 0.0 };
                assert!((vh - target).abs() < 1e-10, "dual ({i},{j}): {vh}");
            }
        }
    }

    #[test]
    fn chebyshev_inner_products() {
        let sys = chebyshev_system();
        let one = sys.inner_product(Side::Primal, |_| 1.0, |_| 1.0).unwrap();
        assert_abs_diff_eq!(one, 1.0, epsilon = 1e-13);
        let q1q1 = sys
            .inner_product(
                Side::Primal,
                |x| sys.eval(Side::Primal, 1, x),
                |x| sys.eval(Side::Primal, 1, x),
            )
            .unwrap();
        assert_abs_diff_eq!(q1q1, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn charlier_discrete_orthogonality() {
        let sys =
            OrthoSystem::for_family(&FamilyParams::Charlier { lam: 1.0, mu: 1.0 }, 40).unwrap();
        let m = sys.measure(Side::Primal).unwrap();
        assert_abs_diff_eq!(m.total_mass(), 1.0, epsilon = 1e-13);
        assert!(!m.is_compact());
        assert!(sys.compact_measure(Side::Primal).is_err());
        for i in 0..=10usize {
            for j in 0..=10usize {
                let v = sys
                    .inner_product(
                        Side::Primal,
                        |x| sys.eval(Side::Primal, i, x),
                        |x| sys.eval(Side::Primal, j, x),
                    )
                    .unwrap();
                let target = if i == j { 1.0 / sys.pi(j) } else { 0.0 };
                // 1/pi(j) = j! here, so the tolerance must scale with the entry
                let tol = 1e-10 * target.abs().max(1.0);
                assert!((v - target).abs() < tol, "({i},{j}): {v} vs {target}");
            }
        }
        // Q_1(0) = 1 for the M/M/infinity polynomials
        assert_abs_diff_eq!(sys.eval(Side::Primal, 1, 0.0), 1.0);
    }

    #[test]
    fn spectral_matches_matrix_exponential() {
        let sys = chebyshev_system();
        let chain = ChainModel::new(families::chebyshev_rates(), 80).unwrap();
        let dual = ChainModel::new(families::chebyshev_rates().siegmund_dual(), 80).unwrap();
        for t in [0.3, 1.0, 2.0] {
            let p = chain.transition_matrix(t).unwrap();
            let ph = dual.transition_matrix(t).unwrap();
            for i in 0..=10usize {
                for j in 0..=10usize {
                    let s = sys.transition_spectral(Side::Primal, t, i, j).unwrap();
                    assert!(
                        (s - p[(i, j)]).abs() < 1e-9,
                        "({i},{j},{t}): {s} vs {}",
                        p[(i, j)]
                    );
                    let sh = sys.transition_spectral(Side::Dual, t, i, j).unwrap();
                    assert!((sh - ph[(i, j)]).abs() < 1e-9);
                }
            }
        }
        // t = 0 gives the identity
        assert_abs_diff_eq!(
            sys.transition_spectral(Side::Primal, 0.0, 4, 4).unwrap(),
            1.0,
            epsilon = 1e-11
        );
        assert!(sys
            .transition_spectral(Side::Primal, 0.0, 4, 6)
            .unwrap()
            .abs()
            < 1e-11);
    }

    #[test]
    fn spectral_density_detailed_balance() {
        let sys = chebyshev_system();
        for (i, j) in [(0usize, 3usize), (2, 5), (1, 7)] {
            let a = sys.pi(i) * sys.transition_spectral(Side::Primal, 0.9, i, j).unwrap();
            let b = sys.pi(j) * sys.transition_spectral(Side::Primal, 0.9, j, i).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn charlier_spectral_matches_matrix_exponential() {
        let (rates, _) = families::charlier_rates(1.0, 1.0).unwrap();
        let sys =
            OrthoSystem::for_family(&FamilyParams::Charlier { lam: 1.0, mu: 1.0 }, 40).unwrap();
        let chain = ChainModel::new(rates, 80).unwrap();
        let p = chain.transition_matrix(0.7).unwrap();
        for i in 0..=6usize {
            for j in 0..=6usize {
                let s = sys.transition_spectral(Side::Primal, 0.7, i, j).unwrap();
                assert!((s - p[(i, j)]).abs() < 1e-9, "({i},{j})");
            }
        }
    }

    #[test]
    fn identity_suite_residuals() {
        let sys = chebyshev_system();
        for n in [1usize, 3, 6] {
            let rep = identity_suite(&sys, n, &[0.3, 1.0]).unwrap();
            assert!(rep.max_residual() < 1e-9, "n={n}: {rep:?}");
        }
    }

    #[test]
    fn identity_one_explicit_at_n1() {
        // 1 + 2(1-x) = 3 - 2x
        let sys = chebyshev_system();
        let x = 0.37;
        let lhs =
            sys.pi(0) * sys.eval(Side::Primal, 0, x) + sys.pi(1) * sys.eval(Side::Primal, 1, x);
        assert_abs_diff_eq!(lhs, 3.0 - 2.0 * x, epsilon = 1e-14);
    }

    #[test]
    fn expansion_of_polynomial_is_unit_vector() {
        let sys = chebyshev_system();
        let coeffs = sys
            .expansion_coeffs(|x| sys.eval(Side::Primal, 3, x), 10)
            .unwrap();
        for (k, c) in coeffs.iter().enumerate() {
            let target = if k == 3 { 1.0 } else { 0.0 };
            assert!((c - target).abs() < 1e-12, "k={k}: {c}");
        }
    }

    #[test]
    fn expansion_of_exponential_matches_transition_row() {
        let sys = chebyshev_system();
        let t = 0.8;
        let chain = ChainModel::new(families::chebyshev_rates(), 80).unwrap();
        let p = chain.transition_matrix(t).unwrap();
        let coeffs = sys.expansion_coeffs(|x| (-t * x).exp(), 30).unwrap();
        for k in 0..12 {
            assert!((coeffs[k] - p[(0, k)]).abs() < 1e-10);
        }
        // pointwise convergence at zero: f(0) = sum of coefficients
        let total: f64 = coeffs.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn expansion_flags_insufficient_cap() {
        let sys = chebyshev_system();
        // at t = 50 the transition row 0 -> k is still spread wide at k = 5
        let err = sys.expansion_coeffs(|x| (-50.0 * x).exp(), 5);
        assert!(matches!(err, Err(Error::TruncationInsufficient { .. })));
    }

    #[test]
    fn coefficient_watermark_tracks_integer_precision() {
        let sys = chebyshev_system();
        // Chebyshev-on-[0,2] coefficients grow like 4^n and pass 2^53 either
        // side of degree 26.
        assert!(sys.exact_degree() >= 20 && sys.exact_degree() <= 40);
        assert!(sys.coefficients(Side::Primal, sys.degree_cap()).is_ok());
        assert!(sys.coefficients(Side::Primal, sys.degree_cap() + 1).is_err());
    }
}
