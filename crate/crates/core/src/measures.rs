//! Coherent measures, their evolution operators, positivity thresholds, and
//! the determinantal correlation kernel with its scaling limit.
//!
//! The kernel has two independent evaluation routes: the contour-quadrature
//! form exactly as displayed (default), and a residue form that collapses the
//! `u`-integral into Taylor data of `P_j / psi` at the origin. The second
//! route stays accurate at large times, where the contour integrand spans
//! hundreds of orders of magnitude; the two are cross-checked in tests.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::chain::RateSpec;
use crate::error::{Error, Result};
use crate::interlacing::{
    interlacing_below, ChamberPoint, HarmonicTable, InterlaceKind, LevelLabel,
};
use crate::orthopoly::{OrthoSystem, Side};
use crate::quadrature::Contour;

/// The index function `psi(x) = prod_i (1 - alpha_i x) e^{-tx}` of a coherent
/// measure. `alphas` must be nonincreasing and nonnegative; `psi(0) = 1`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PsiSpec {
    pub t: f64,
    pub alphas: Vec<f64>,
}

impl PsiSpec {
    pub fn exponential(t: f64) -> Result<Self> {
        PsiSpec::new(t, vec![])
    }

    pub fn new(t: f64, alphas: Vec<f64>) -> Result<Self> {
        if t < 0.0 {
            return Err(Error::Domain("psi needs t >= 0".into()));
        }
        if alphas.iter().any(|&a| a < 0.0) {
            return Err(Error::Domain("alpha factors must be nonnegative".into()));
        }
        if alphas.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Domain("alpha factors must be nonincreasing".into()));
        }
        Ok(PsiSpec { t, alphas })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut v = (-self.t * x).exp();
        for &a in &self.alphas {
            v *= 1.0 - a * x;
        }
        v
    }

    pub fn eval_c(&self, u: Complex64) -> Complex64 {
        let mut v = (-self.t * u).exp();
        for &a in &self.alphas {
            v *= Complex64::new(1.0, 0.0) - a * u;
        }
        v
    }

    /// Pointwise product `psi1 psi2` (times add, alpha lists merge).
    pub fn product(&self, other: &PsiSpec) -> PsiSpec {
        let mut alphas = self.alphas.clone();
        alphas.extend_from_slice(&other.alphas);
        alphas.sort_by(|a, b| b.partial_cmp(a).unwrap());
        PsiSpec {
            t: self.t + other.t,
            alphas,
        }
    }

    /// Taylor coefficients of `psi` at the origin, computed symbolically from
    /// the factorization (never by numeric differentiation).
    pub fn taylor(&self, terms: usize) -> Vec<f64> {
        let mut poly = vec![0.0; terms.max(1)];
        poly[0] = 1.0;
        for &a in &self.alphas {
            let prev = poly.clone();
            for k in (1..poly.len()).rev() {
                poly[k] = prev[k] - a * prev[k - 1];
            }
        }
        let mut exp = vec![0.0; terms.max(1)];
        let mut c = 1.0;
        for (k, e) in exp.iter_mut().enumerate() {
            if k > 0 {
                c *= -self.t / k as f64;
            }
            *e = c;
        }
        convolve(&poly, &exp, terms)
    }

    /// Taylor coefficients of `1/psi` at the origin:
    /// `e^{tu} prod (1 - alpha_i u)^{-1}` as a convolution of elementary series.
    pub fn inv_taylor(&self, terms: usize) -> Vec<f64> {
        let mut acc = vec![0.0; terms.max(1)];
        acc[0] = 1.0;
        for &a in &self.alphas {
            let geo: Vec<f64> = (0..terms).scan(1.0, |s, _| {
                let v = *s;
                *s *= a;
                Some(v)
            })
            .collect();
            acc = convolve(&acc, &geo, terms);
        }
        let mut exp = vec![0.0; terms.max(1)];
        let mut c = 1.0;
        for (k, e) in exp.iter_mut().enumerate() {
            if k > 0 {
                c *= self.t / k as f64;
            }
            *e = c;
        }
        convolve(&acc, &exp, terms)
    }

    /// Taylor remainder `R_m(x) = psi(x) - sum_{k<m} c_k x^k`; for `m <= 0`
    /// the remainder is `psi` itself.
    pub fn taylor_remainder(&self, m: i64, x: f64) -> f64 {
        if m <= 0 {
            return self.eval(x);
        }
        let coeffs = self.taylor(m as usize);
        let mut partial = 0.0;
        for &c in coeffs.iter().rev() {
            partial = partial * x + c;
        }
        self.eval(x) - partial
    }
}

fn convolve(a: &[f64], b: &[f64], terms: usize) -> Vec<f64> {
    let n = terms.max(1);
    let mut out = vec![0.0; n];
    for k in 0..n {
        let mut s = 0.0;
        for j in 0..=k.min(a.len() - 1) {
            if k - j < b.len() {
                s += a[j] * b[k - j];
            }
        }
        out[k] = s;
    }
    out
}

/// Positivity thresholds of the evolution operators: `C = sup(birth+death)`,
/// `C_hat` the dual version, and the largest certified alpha
/// `a_max = 1 / (2 max(C, C_hat))`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PositivityThresholds {
    pub c: f64,
    pub c_hat: f64,
    pub a_max: f64,
    /// Set when the rate sums keep growing near the probe end, in which case
    /// the supremum (and a_max = 0 in the limit) is untrustworthy.
    pub unbounded_warning: bool,
}

pub fn positivity_threshold(rates: &RateSpec) -> PositivityThresholds {
    let dual = rates.siegmund_dual();
    let probe = 1000i64;
    let mut c = 0.0_f64;
    let mut c_hat = 0.0_f64;
    let mut arg_c = 0i64;
    let mut arg_ch = 0i64;
    for x in 0..=probe {
        let v = rates.birth(x) + rates.death(x);
        if v > c {
            c = v;
            arg_c = x;
        }
        let vh = dual.birth(x) + dual.death(x);
        if vh > c_hat {
            c_hat = vh;
            arg_ch = x;
        }
    }
    let unbounded_warning = arg_c > probe - 10 || arg_ch > probe - 10;
    PositivityThresholds {
        c,
        c_hat,
        a_max: 0.5 / c.max(c_hat),
        unbounded_warning,
    }
}

/// Checks that the alphas of `psi` are positivity-certified for the rates.
pub fn certify_psi(rates: &RateSpec, psi: &PsiSpec) -> Result<PositivityThresholds> {
    let th = positivity_threshold(rates);
    if let Some(&a1) = psi.alphas.first() {
        if th.unbounded_warning {
            return Err(Error::Domain(
                "rates look unbounded; no alpha factor can be positivity-certified".into(),
            ));
        }
        if a1 > th.a_max + 1e-15 {
            return Err(Error::Domain(format!(
                "alpha {a1} exceeds the certified threshold a_max = {}",
                th.a_max
            )));
        }
    }
    Ok(th)
}

/// A coherent measure on one level, tabulated over a truncated support.
#[derive(Debug, Clone)]
pub struct CoherentMeasure {
    pub level: LevelLabel,
    pub entries: Vec<(ChamberPoint, f64)>,
}

impl CoherentMeasure {
    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v).sum()
    }

    pub fn min_entry(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(_, v)| v)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn value_of(&self, nu: &ChamberPoint) -> f64 {
        self.entries
            .iter()
            .find(|(p, _)| p == nu)
            .map(|&(_, v)| v)
            .unwrap_or(0.0)
    }
}

fn binom2(k: usize) -> i32 {
    (k * k.saturating_sub(1) / 2) as i32
}

/// Coefficients of `f (1 - a x)` in the `pi_m Q_m` basis given those of `f`,
/// using the three-term recurrence and detailed balance:
/// `pi_j Q_j (1-ax) = pi_j Q_j + a [lam_{j-1} pi_{j-1} Q_{j-1}
///   - (lam_j + mu_j) pi_j Q_j + mu_{j+1} pi_{j+1} Q_{j+1}]`.
/// All update weights are nonnegative once `a` is below the positivity
/// threshold, so positivity survives in exact arithmetic and in floats.
fn alpha_band_apply(rates: &RateSpec, a: f64, c: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c.len() + 1];
    for (j, &cj) in c.iter().enumerate() {
        if cj == 0.0 {
            continue;
        }
        let (l, m) = (rates.birth(j as i64), rates.death(j as i64));
        if j > 0 {
            out[j - 1] += a * rates.birth(j as i64 - 1) * cj;
        }
        out[j] += (1.0 - a * (l + m)) * cj;
        out[j + 1] += a * rates.death(j as i64 + 1) * cj;
    }
    out
}

/// Coefficients of `x f` in the `pi_m Q_m` basis (signed band).
fn x_band_apply(rates: &RateSpec, c: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c.len() + 1];
    for (j, &cj) in c.iter().enumerate() {
        if cj == 0.0 {
            continue;
        }
        let (l, m) = (rates.birth(j as i64), rates.death(j as i64));
        if j > 0 {
            out[j - 1] -= rates.birth(j as i64 - 1) * cj;
        }
        out[j] += (l + m) * cj;
        out[j + 1] -= rates.death(j as i64 + 1) * cj;
    }
    out
}

fn side_rates(sys: &OrthoSystem, side: Side) -> RateSpec {
    match side {
        Side::Primal => sys.rates().clone(),
        Side::Dual => sys.dual_rates().clone(),
    }
}

/// `<P_i, x^p prod(1 - alpha x)>`: exact banded evaluation used when `t = 0`,
/// where quadrature noise amplified by `h` would swamp the positivity
/// contracts near 1e-12.
fn pure_alpha_power_moment(
    sys: &OrthoSystem,
    side: Side,
    alphas: &[f64],
    i: usize,
    p: usize,
) -> f64 {
    let rates = side_rates(sys, side);
    let mut c = vec![0.0; i + 1];
    c[i] = 1.0;
    for &a in alphas {
        c = alpha_band_apply(&rates, a, &c);
    }
    for _ in 0..p {
        c = x_band_apply(&rates, &c);
    }
    c[0]
}

/// Cached inner products `<P_i, x^p psi>` for all `i <= cap`, `p <= maxpow`.
fn moment_table(
    sys: &OrthoSystem,
    side: Side,
    psi: &PsiSpec,
    cap: usize,
    maxpow: usize,
) -> Result<Vec<Vec<f64>>> {
    if psi.t == 0.0 {
        let mut table = vec![vec![0.0; cap + 1]; maxpow + 1];
        for (p, row) in table.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = pure_alpha_power_moment(sys, side, &psi.alphas, i, p);
            }
        }
        return Ok(table);
    }
    let m = sys.compact_measure(side)?;
    let mut table = vec![vec![0.0; cap + 1]; maxpow + 1];
    for (p, row) in table.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            *v = sys.weight(side, i)
                * m.integrate(|x| sys.eval(side, i, x) * x.powi(p as i32) * psi.eval(x));
        }
    }
    Ok(table)
}

/// The coherent measure `M^psi` of a level over configurations with
/// coordinates `<= support_cap`:
///
/// `M(nu) = lam0^{-C(k,2)} det( <P_{nu_i}, x^{k-j} psi> ) h(nu)`
///
/// with `k` the particle count, primal data on `(n, n+1)` levels and dual
/// data on `(n, n)` levels. Errors if the tabulated mass misses `psi(0)^k`
/// by more than `mass_tol`, the sign the support cap was too small.
pub fn coherent_measure(
    h: &mut HarmonicTable,
    psi: &PsiSpec,
    level: LevelLabel,
    support_cap: i64,
    mass_tol: f64,
) -> Result<CoherentMeasure> {
    let sys = h.system();
    let side = level.side();
    let k = level.particles();
    let moments = moment_table(sys, side, psi, support_cap as usize, k - 1)?;
    let lam0 = sys.lam0();
    let norm = lam0.powi(-binom2(k));
    let mut entries = Vec::new();
    let mut chambers = Vec::new();
    enumerate_chambers_upto(k, support_cap, &mut Vec::new(), &mut chambers);
    for nu in chambers {
        let mut m = DMatrix::<f64>::zeros(k, k);
        for (i, &nui) in nu.iter().enumerate() {
            for j in 0..k {
                m[(i, j)] = moments[k - 1 - j][nui as usize];
            }
        }
        let point = ChamberPoint::new(nu)?;
        let value = norm * m.determinant() * h.value(level, &point)?;
        entries.push((point, value));
    }
    let measure = CoherentMeasure { level, entries };
    let expected = psi.eval(0.0).powi(k as i32);
    if (measure.mass() - expected).abs() > mass_tol {
        return Err(Error::Truncation(format!(
            "coherent measure mass {} misses {expected} at support cap {support_cap}",
            measure.mass()
        )));
    }
    Ok(measure)
}

fn enumerate_chambers_upto(n: usize, cap: i64, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
    if cur.len() == n {
        out.push(cur.clone());
        return;
    }
    let lo = cur.last().map(|&v| v + 1).unwrap_or(0);
    for v in lo..=cap {
        cur.push(v);
        enumerate_chambers_upto(n, cap, cur, out);
        cur.pop();
    }
}

/// Max entrywise residuals of the two coherency relations at order `n`:
/// `M_{n,n} = M_{n,n+1} Lambda` and `M_{n-1,n} = M_{n,n} Lambda`.
pub fn coherency_check(
    h: &mut HarmonicTable,
    psi: &PsiSpec,
    n: u32,
    support_cap: i64,
) -> Result<(f64, f64)> {
    let upper = LevelLabel::new(n, n + 1)?;
    let mid = LevelLabel::new(n, n)?;
    let m_upper = coherent_measure(h, psi, upper, support_cap, 1e-9)?;
    let m_mid = coherent_measure(h, psi, mid, support_cap, 1e-9)?;
    let mut pushed: std::collections::HashMap<ChamberPoint, f64> = Default::default();
    for (nu, v) in &m_upper.entries {
        if v.abs() < 1e-18 {
            continue;
        }
        for (kpt, p) in crate::interlacing::link_kernel_row(h, upper, nu)? {
            *pushed.entry(kpt).or_insert(0.0) += v * p;
        }
    }
    let mut r1 = 0.0_f64;
    for (kpt, v) in &m_mid.entries {
        if kpt.max() <= support_cap - 2 {
            r1 = r1.max((pushed.get(kpt).copied().unwrap_or(0.0) - v).abs());
        }
    }
    let lower = LevelLabel::from_rank(mid.rank() - 1);
    let m_lower = coherent_measure(h, psi, lower, support_cap, 1e-9)?;
    let mut pushed2: std::collections::HashMap<ChamberPoint, f64> = Default::default();
    for (nu, v) in &m_mid.entries {
        if v.abs() < 1e-18 {
            continue;
        }
        for (kpt, p) in crate::interlacing::link_kernel_row(h, mid, nu)? {
            *pushed2.entry(kpt).or_insert(0.0) += v * p;
        }
    }
    let mut r2 = 0.0_f64;
    for (kpt, v) in &m_lower.entries {
        if kpt.max() <= support_cap - 2 {
            r2 = r2.max((pushed2.get(kpt).copied().unwrap_or(0.0) - v).abs());
        }
    }
    Ok((r1, r2))
}

/// One entry of the evolution operator
/// `P^psi(k, nu) = (h(nu)/h(k)) det(<P_{k_i}, w_{nu_j} P_{nu_j} psi>)`.
pub fn evolution_operator(
    h: &mut HarmonicTable,
    psi: &PsiSpec,
    level: LevelLabel,
    from: &ChamberPoint,
    to: &ChamberPoint,
) -> Result<f64> {
    let sys = h.system();
    let side = level.side();
    let k = level.particles();
    if from.len() != k || to.len() != k {
        return Err(Error::Domain("configuration sizes must match the level".into()));
    }
    let mut mat = DMatrix::<f64>::zeros(k, k);
    if psi.t == 0.0 {
        // exact banded entries <Q_{k_i}, pi_{nu_j} Q_{nu_j} prod(1-ax)>
        let rates = side_rates(sys, side);
        for j in 0..k {
            let nj = to.coords()[j] as usize;
            let mut c = vec![0.0; nj + 1];
            c[nj] = 1.0;
            for &a in &psi.alphas {
                c = alpha_band_apply(&rates, a, &c);
            }
            for i in 0..k {
                let ki = from.coords()[i] as usize;
                mat[(i, j)] = c.get(ki).copied().unwrap_or(0.0);
            }
        }
    } else {
        let m = sys.compact_measure(side)?;
        for i in 0..k {
            for j in 0..k {
                let (ki, nj) = (from.coords()[i] as usize, to.coords()[j] as usize);
                mat[(i, j)] = sys.weight(side, nj)
                    * m.integrate(|x| sys.eval(side, ki, x) * sys.eval(side, nj, x) * psi.eval(x));
            }
        }
    }
    Ok(h.value(level, to)? / h.value(level, from)? * mat.determinant())
}

/// Max residual of `M^{psi1} P^{psi2} = M^{psi1 psi2}` on the level.
pub fn evolution_check(
    h: &mut HarmonicTable,
    psi1: &PsiSpec,
    psi2: &PsiSpec,
    level: LevelLabel,
    support_cap: i64,
) -> Result<f64> {
    let m1 = coherent_measure(h, psi1, level, support_cap, 1e-9)?;
    let m12 = coherent_measure(h, &psi1.product(psi2), level, support_cap, 1e-9)?;
    let mut worst = 0.0_f64;
    for (nu, target) in &m12.entries {
        if nu.max() > support_cap - 4 {
            continue;
        }
        let mut acc = 0.0;
        for (kpt, v) in &m1.entries {
            if v.abs() < 1e-16 {
                continue;
            }
            acc += v * evolution_operator(h, psi2, level, kpt, nu)?;
        }
        worst = worst.max((acc - target).abs());
    }
    Ok(worst)
}

/// The `(P_bar, P_tilde, m)` table of the kernel: row data from the row
/// level's parity, column polynomials from the column level's parity.
fn row_side(level: LevelLabel) -> Side {
    level.side()
}

/// `Psi^{(n1,n2)}_m(i) = <P_i, (-x)^m R^psi_{-m}>` over the row measure; for
/// `m >= 0` the remainder index is nonpositive and the factor is just `psi`.
pub fn psi_function(
    sys: &OrthoSystem,
    psi: &PsiSpec,
    level: LevelLabel,
    m: i64,
    i: usize,
) -> Result<f64> {
    let side = row_side(level);
    let meas = sys.compact_measure(side)?;
    let w = sys.weight(side, i);
    if m >= 0 {
        return Ok(w * meas.integrate(|x| {
            sys.eval(side, i, x) * (-x).powi(m as i32) * psi.eval(x)
        }));
    }
    // negative power: (-x)^m R_{-m}(x) is regular at the origin
    let order = (-m) as usize;
    let coeffs = psi.taylor(order);
    Ok(w * meas.integrate(|x| {
        let rem = psi_remainder_stable(psi, &coeffs, order, x);
        sys.eval(side, i, x) * (-x).powi(m as i32) * rem
    }))
}

/// `psi(x) - Taylor_{order}(x)` with a series fallback near the origin where
/// the subtraction cancels.
fn psi_remainder_stable(psi: &PsiSpec, coeffs: &[f64], order: usize, x: f64) -> f64 {
    if x.abs() > 0.5 {
        let mut partial = 0.0;
        for &c in coeffs.iter().rev() {
            partial = partial * x + c;
        }
        return psi.eval(x) - partial;
    }
    // tail of the entire series, converges fast for |x| <= 1/2
    let budget = order + 80;
    let full = psi.taylor(budget);
    let mut acc = 0.0;
    for k in (order..budget).rev() {
        acc = acc * x + full[k];
    }
    acc * x.powi(order as i32)
}

/// `E^{(n1,n2)}_m(j)`: minus the contour average of
/// `P_j(u) / (psi(u) (-u)^{m+1})`, evaluated by the trapezoid rule on the
/// standard contour.
pub fn e_function(
    sys: &OrthoSystem,
    psi: &PsiSpec,
    level: LevelLabel,
    m: i64,
    j: usize,
) -> Result<f64> {
    // columns carry the bare polynomials of the level's parity
    let side = level.side();
    let contour = standard_contour(sys, psi)?;
    let attempt = contour.integrate(
        &|u| {
            let denom = psi.eval_c(u) * (-u).powi(m as i32 + 1);
            sys.eval_c(side, j, u) / denom
        },
        1e-10,
    );
    match attempt {
        Ok(v) => Ok(-v.re),
        // at high degree the contour integrand spans too many orders of
        // magnitude for the doubling criterion; the residue at the origin is
        // the same number computed exactly
        Err(Error::Contour(_)) => e_function_residue(sys, psi, level, m, j),
        Err(e) => Err(e),
    }
}

/// The same residue at the origin computed from Taylor data: coefficient of
/// `u^m` in `P_j(u)/psi(u)` (only the pole at zero contributes for `m >= 0`).
pub fn e_function_residue(
    sys: &OrthoSystem,
    psi: &PsiSpec,
    level: LevelLabel,
    m: i64,
    j: usize,
) -> Result<f64> {
    if m < 0 {
        return Ok(0.0); // integrand analytic at the origin
    }
    let side = level.side();
    let g = poly_over_psi_taylor(sys, side, j, psi, m as usize + 1)?;
    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
    Ok(sign * g[m as usize])
}

/// Taylor coefficients of `P_j(u)/psi(u)` at the origin up to `terms`.
fn poly_over_psi_taylor(
    sys: &OrthoSystem,
    side: Side,
    j: usize,
    psi: &PsiSpec,
    terms: usize,
) -> Result<Vec<f64>> {
    let coeffs = sys.coefficients(side, j)?;
    let inv = psi.inv_taylor(terms);
    Ok(convolve(coeffs, &inv, terms))
}

/// Biorthogonality `sum_i Psi_{n2-k}(i) E_{n2-l}(i)` with the i-sum truncated
/// once terms fall below 1e-14 five times in a row; returns the sum and the
/// cap used.
pub fn biorthogonality_sum(
    sys: &OrthoSystem,
    psi: &PsiSpec,
    level: LevelLabel,
    k: u32,
    l: u32,
) -> Result<(f64, usize)> {
    let n2 = level.hi as i64;
    let mut acc = 0.0;
    let mut small = 0;
    let mut cap = 0;
    for i in 0..=sys.degree_cap() {
        let a = psi_function(sys, psi, level, n2 - k as i64, i)?;
        let b = e_function(sys, psi, level, n2 - l as i64, i)?;
        let term = a * b;
        acc += term;
        cap = i;
        if term.abs() < 1e-14 {
            small += 1;
            if small >= 5 {
                break;
            }
        } else {
            small = 0;
        }
    }
    Ok((acc, cap))
}

/// A point of the extended determinantal process.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelPoint {
    pub level: LevelLabel,
    pub position: i64,
}

impl KernelPoint {
    pub fn new(level: LevelLabel, position: i64) -> Result<Self> {
        if position < 0 {
            return Err(Error::Domain("positions live on the half line".into()));
        }
        Ok(KernelPoint { level, position })
    }
}

/// How to evaluate the double term of the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelRoute {
    /// The displayed double integral: trapezoid contour rule outside, real
    /// quadrature inside.
    Contour,
    /// Exact residue calculus in `u` (poles at the origin and `u = x` only),
    /// leaving one real integral of a Taylor remainder. Stable at large `t`.
    Residue,
}

/// The standard contour: circle centred at `I^+/2` with radius
/// `I^+/2 + margin`, the margin keeping clear of both the support and every
/// zero `1/alpha_i` of `psi`.
pub fn standard_contour(sys: &OrthoSystem, psi: &PsiSpec) -> Result<Contour> {
    let sup = sys.compact_measure(Side::Primal)?.sup();
    let mut margin = 0.25 * sup.max(1.0);
    if let Some(&a1) = psi.alphas.first() {
        if a1 > 0.0 {
            let zero = 1.0 / a1;
            if zero <= sup {
                return Err(Error::Contour(format!(
                    "psi vanishes at {zero} inside the support [0, {sup}]"
                )));
            }
            margin = margin.min(0.5 * (zero - sup));
        }
    }
    if margin <= 0.0 {
        return Err(Error::Contour("no room between the support and psi zeros".into()));
    }
    Ok(Contour {
        center: sup / 2.0,
        radius: sup / 2.0 + margin,
    })
}

/// One entry of the correlation kernel `K^psi(row, col)`.
pub fn correlation_kernel(
    sys: &OrthoSystem,
    psi: &PsiSpec,
    row: KernelPoint,
    col: KernelPoint,
    route: KernelRoute,
) -> Result<f64> {
    certify_psi(sys.rates(), psi)?;
    let rside = row.level.side();
    let cside = col.level.side();
    let meas = sys.compact_measure(rside)?;
    let i = row.position as usize;
    let j = col.position as usize;
    let n2 = row.level.hi as i64;
    let m2 = col.level.hi as i64;
    let ordered = row.level.rank() >= col.level.rank();

    let gram = if ordered {
        meas.integrate(|x| {
            sys.weight(rside, i)
                * sys.eval(rside, i, x)
                * x.powi((n2 - m2) as i32)
                * sys.eval(cside, j, x)
        })
    } else {
        0.0
    };

    let double = match route {
        KernelRoute::Contour => contour_double_term(sys, psi, row, col)?,
        KernelRoute::Residue => residue_double_term(sys, psi, row, col)?,
    };
    Ok(double + gram)
}

fn contour_double_term(
    sys: &OrthoSystem,
    psi: &PsiSpec,
    row: KernelPoint,
    col: KernelPoint,
) -> Result<f64> {
    let rside = row.level.side();
    let cside = col.level.side();
    let meas = sys.compact_measure(rside)?;
    let crate::orthopoly::SpectralMeasure::Continuous { rule, .. } = meas else {
        unreachable!("compact gate admits continuous measures only");
    };
    let i = row.position as usize;
    let j = col.position as usize;
    let n2 = row.level.hi as i32;
    let m2 = col.level.hi as i32;
    let contour = standard_contour(sys, psi)?;
    let wrow = sys.weight(rside, i);
    // the real part of the inner integrand is independent of u: cache it
    let weighted: Vec<(f64, f64)> = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&x, &w)| (x, w * sys.eval(rside, i, x) * x.powi(n2) * psi.eval(x)))
        .collect();
    let f = |u: Complex64| -> Complex64 {
        let mut inner = Complex64::new(0.0, 0.0);
        for &(x, g) in &weighted {
            inner += g / (Complex64::new(x, 0.0) - u);
        }
        sys.eval_c(cside, j, u) * inner / (u.powi(m2) * psi.eval_c(u))
    };
    let v = contour.integrate(&f, 1e-10)?;
    Ok(wrow * v.re)
}

fn residue_double_term(
    sys: &OrthoSystem,
    psi: &PsiSpec,
    row: KernelPoint,
    col: KernelPoint,
) -> Result<f64> {
    let rside = row.level.side();
    let cside = col.level.side();
    let meas = sys.compact_measure(rside)?;
    let i = row.position as usize;
    let j = col.position as usize;
    let n2 = row.level.hi as i32;
    let m2 = col.level.hi as usize;
    let g = poly_over_psi_taylor(sys, cside, j, psi, m2)?;
    let wrow = sys.weight(rside, i);
    Ok(-wrow
        * meas.integrate(|x| {
            // R^{P_j/psi}_{m2}(x) * psi(x), assembled as P_j - psi * partial sum
            let mut partial = 0.0;
            for &c in g.iter().rev() {
                partial = partial * x + c;
            }
            let rem_psi = sys.eval(cside, j, x) - psi.eval(x) * partial;
            sys.eval(rside, i, x) * x.powi(n2 - m2 as i32) * rem_psi
        }))
}

/// `rho_k` of a point list: determinant of the kernel matrix.
pub fn correlation_function(
    sys: &OrthoSystem,
    psi: &PsiSpec,
    points: &[KernelPoint],
    route: KernelRoute,
) -> Result<f64> {
    let k = points.len();
    if k == 0 {
        return Ok(1.0);
    }
    for a in 0..k {
        for b in (a + 1)..k {
            if points[a] == points[b] {
                return Ok(0.0); // repeated points: determinant has equal rows
            }
        }
    }
    let mut m = DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            m[(a, b)] = correlation_kernel(sys, psi, points[a], points[b], route)?;
        }
    }
    Ok(m.determinant())
}

/// Diagonal kernel sum over a level until five consecutive terms drop below
/// 1e-14: the trace, which must equal the particle count.
pub fn kernel_trace(
    sys: &OrthoSystem,
    psi: &PsiSpec,
    level: LevelLabel,
    route: KernelRoute,
) -> Result<f64> {
    let mut acc = 0.0;
    let mut small = 0;
    for i in 0..=sys.degree_cap() {
        let point = KernelPoint::new(level, i as i64)?;
        let v = correlation_kernel(sys, psi, point, point, route)?;
        acc += v;
        if v.abs() < 1e-14 {
            small += 1;
            if small >= 5 {
                break;
            }
        } else {
            small = 0;
        }
    }
    Ok(acc)
}

/// The scaling limit `K_alpha`: levels drift to infinity with fixed offsets,
/// positions stay put, `alpha = eta / tau`.
pub fn scaling_limit_kernel(
    sys: &OrthoSystem,
    row: KernelPoint,
    col: KernelPoint,
    alpha: f64,
) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::Domain("alpha must be positive".into()));
    }
    let rside = row.level.side();
    let cside = col.level.side();
    let meas = sys.compact_measure(rside)?;
    let i = row.position as usize;
    let j = col.position as usize;
    let diff = row.level.hi as i32 - col.level.hi as i32;
    let ordered = row.level.rank() >= col.level.rank();
    Ok(meas.integrate(|x| {
        let indicator = if x >= alpha { -1.0 } else { 0.0 } + if ordered { 1.0 } else { 0.0 };
        indicator
            * sys.weight(rside, i)
            * sys.eval(rside, i, x)
            * x.powi(diff)
            * sys.eval(cside, j, x)
    }))
}

/// Gram matrix entry of the discrete ensemble on `[alpha, I^+]`, the
/// single-level hole complement of the scaling limit.
pub fn discrete_ensemble_gram(
    sys: &OrthoSystem,
    level: LevelLabel,
    i: usize,
    j: usize,
    alpha: f64,
) -> Result<f64> {
    let side = level.side();
    let meas = sys.compact_measure(side)?;
    Ok(meas.integrate(|x| {
        if x >= alpha {
            sys.weight(side, i) * sys.eval(side, i, x) * sys.eval(side, j, x)
        } else {
            0.0
        }
    }))
}

/// Kernel evaluated at scaled arguments: time `N tau`, levels shifted by
/// `floor(N eta)`, positions fixed. Uses the residue route, the only one
/// numerically viable once `t` is large.
pub fn scaled_kernel(
    sys: &OrthoSystem,
    n_scale: u32,
    tau: f64,
    eta: f64,
    row: KernelPoint,
    col: KernelPoint,
) -> Result<f64> {
    let shift = (n_scale as f64 * eta).floor() as u32;
    let psi = PsiSpec::exponential(n_scale as f64 * tau)?;
    let scale = |p: KernelPoint| -> Result<KernelPoint> {
        KernelPoint::new(
            LevelLabel::new(p.level.lo + shift, p.level.hi + shift)?,
            p.position,
        )
    };
    correlation_kernel(sys, &psi, scale(row)?, scale(col)?, KernelRoute::Residue)
}
