//! Gaussian quadrature rules (Golub-Welsch) and contour quadrature.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// A fixed quadrature rule on a real interval.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    /// Compensated (Kahan) summation: several downstream contracts sit near
    /// 1e-12 under heavy cancellation and need the summation error pinned to
    /// one ulp of the largest term.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        let mut sum = 0.0;
        let mut carry = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            let term = w * f(x) - carry;
            let next = sum + term;
            carry = (next - sum) - term;
            sum = next;
        }
        sum
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Nodes and weights from the symmetric tridiagonal Jacobi matrix of a
/// three-term recurrence (Golub-Welsch). `alpha` are the diagonal recurrence
/// coefficients, `beta` the squared off-diagonal ones with `beta[0]` the total
/// mass of the weight.
fn golub_welsch(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = alpha.len();
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        j[(k, k)] = alpha[k];
        if k + 1 < n {
            let b = beta[k + 1].sqrt();
            j[(k, k + 1)] = b;
            j[(k + 1, k)] = b;
        }
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], beta[0] * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Gauss rule for the normalized weight `Z (x-lo)^a (hi-x)^b` on `[lo, hi]`
/// with `Z` fixed by total mass one.
pub fn gauss_jacobi_normalized(n: usize, a: f64, b: f64, lo: f64, hi: f64) -> Result<GaussRule> {
    if a <= -1.0 || b <= -1.0 {
        return Err(Error::InvalidParameters(format!(
            "jacobi weight exponents must exceed -1, got ({a}, {b})"
        )));
    }
    // Weight (1-s)^b (1+s)^a on [-1,1] maps to (x-lo)^a (hi-x)^b under
    // x = lo + (hi-lo)(1+s)/2. Monic Jacobi recurrence with (alpha, beta)
    // exponents swapped accordingly.
    let (p, q) = (b, a); // (1-s)^p (1+s)^q
    let s = p + q;
    let mut al = vec![0.0; n];
    let mut be = vec![0.0; n];
    al[0] = (q - p) / (s + 2.0);
    be[0] = 1.0; // mass normalized away below
    for k in 1..n {
        let kf = k as f64;
        let d = 2.0 * kf + s;
        al[k] = (q * q - p * p) / (d * (d + 2.0));
        be[k] = if k == 1 {
            4.0 * (1.0 + p) * (1.0 + q) / ((s + 2.0) * (s + 2.0) * (s + 3.0))
        } else {
            4.0 * kf * (kf + p) * (kf + q) * (kf + s) / (d * d * (d + 1.0) * (d - 1.0))
        };
    }
    let (nodes_s, mut weights) = golub_welsch(&al, &be);
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let nodes = nodes_s
        .into_iter()
        .map(|sv| lo + (hi - lo) * (1.0 + sv) / 2.0)
        .collect();
    Ok(GaussRule { nodes, weights })
}

/// Plain Gauss-Legendre on `[lo, hi]` (weight `dx`).
pub fn gauss_legendre(n: usize, lo: f64, hi: f64) -> GaussRule {
    let al = vec![0.0; n];
    let mut be = vec![0.0; n];
    be[0] = 2.0;
    for k in 1..n {
        let kf = k as f64;
        be[k] = kf * kf / (4.0 * kf * kf - 1.0);
    }
    let (nodes_s, weights_s) = golub_welsch(&al, &be);
    let half = (hi - lo) / 2.0;
    GaussRule {
        nodes: nodes_s.into_iter().map(|s| lo + half * (1.0 + s)).collect(),
        weights: weights_s.into_iter().map(|w| w * half).collect(),
    }
}

/// Adaptive integration of `f` against a density `w` on `[lo, hi]` using the
/// substitution `x = lo + (hi-lo) sin^2(theta)`, which absorbs inverse
/// square-root endpoint singularities. Node count doubles until two successive
/// values differ by less than `tol`.
pub fn adaptive_endpoint_integrate(
    w: impl Fn(f64) -> f64,
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<f64> {
    let span = hi - lo;
    let eval = |n: usize| -> f64 {
        let rule = gauss_legendre(n, 0.0, std::f64::consts::FRAC_PI_2);
        rule.integrate(|theta| {
            let s = theta.sin();
            let c = theta.cos();
            let x = lo + span * s * s;
            w(x) * f(x) * span * 2.0 * s * c
        })
    };
    let mut n = 64;
    let mut prev = eval(n);
    for _ in 0..6 {
        n *= 2;
        let cur = eval(n);
        if (cur - prev).abs() <= tol * (1.0 + cur.abs()) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::Numeric(format!(
        "endpoint-adapted quadrature did not settle below {tol:e} by {n} nodes"
    )))
}

/// Positively oriented circle used for all contour integrals.
#[derive(Debug, Clone, Copy)]
pub struct Contour {
    pub center: f64,
    pub radius: f64,
}

impl Contour {
    pub fn point(&self, theta: f64) -> Complex64 {
        Complex64::new(self.center, 0.0) + self.radius * Complex64::new(0.0, theta).exp()
    }

    /// `(1/2 pi i) \oint f(u) du` by the periodic trapezoid rule with `m` nodes.
    pub fn integrate_m(&self, f: &dyn Fn(Complex64) -> Complex64, m: usize) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..m {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
            let e = Complex64::new(0.0, theta).exp();
            let u = Complex64::new(self.center, 0.0) + self.radius * e;
            acc += f(u) * e;
        }
        acc * self.radius / m as f64
    }

    /// Trapezoid rule with node doubling from 128 until the relative change of
    /// two successive levels drops below `tol`.
    pub fn integrate(&self, f: &dyn Fn(Complex64) -> Complex64, tol: f64) -> Result<Complex64> {
        let mut m = 128;
        let mut prev = self.integrate_m(f, m);
        for _ in 0..6 {
            m *= 2;
            let cur = self.integrate_m(f, m);
            if (cur - prev).norm() <= tol * (1.0 + cur.norm()) {
                return Ok(cur);
            }
            prev = cur;
        }
        Err(Error::Contour(format!(
            "trapezoid rule did not settle below {tol:e} by {m} nodes"
        )))
    }
}
