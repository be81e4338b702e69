//! Named rate families with closed-form data, plus the identity checks
//! special to each family.

use serde::{Deserialize, Serialize};

use crate::chain::RateSpec;
use crate::error::{Error, Result};

/// Family tag plus parameters, as they appear verbatim in run configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum FamilyParams {
    Chebyshev,
    Jacobi { alpha: f64, beta: f64 },
    Charlier { lam: f64, mu: f64 },
    Quadratic { a: f64, b: f64, c: f64, b_bar: f64, c_bar: f64 },
    BcType { u: f64, u_prime: f64, a: f64, b: f64 },
    Piecewise { r: f64, n_star: i64 },
    Periodic { r: f64 },
    Table { birth: Vec<f64>, death: Vec<f64> },
}

impl FamilyParams {
    pub fn rates(&self) -> Result<RateSpec> {
        match *self {
            FamilyParams::Chebyshev => Ok(chebyshev_rates()),
            FamilyParams::Jacobi { alpha, beta } => jacobi_rates(alpha, beta),
            FamilyParams::Charlier { lam, mu } => charlier_rates(lam, mu).map(|(r, _)| r),
            FamilyParams::Quadratic { a, b, c, b_bar, c_bar } => {
                quadratic_rates(a, b, c, b_bar, c_bar)
            }
            FamilyParams::BcType { u, u_prime, a, b } => bc_rates(u, u_prime, a, b).map(|(r, _)| r),
            FamilyParams::Piecewise { r, n_star } => piecewise_rates(r, n_star),
            FamilyParams::Periodic { r } => periodic_rates(r),
            FamilyParams::Table { ref birth, ref death } => table_rates(birth, death),
        }
    }
}

/// The Borodin-Kuan rates: `birth(0) = 1`, all other rates `1/2`. Equal to
/// `jacobi_rates(-1/2, -1/2)`; the associated polynomials are Chebyshev.
pub fn chebyshev_rates() -> RateSpec {
    RateSpec::half_line(
        |n| if n == 0 { 1.0 } else { 0.5 },
        |n| if n == 0 { 0.0 } else { 0.5 },
    )
    .expect("chebyshev rates are valid")
}

/// Jacobi rates with parameters `alpha, beta > -1`.
///
/// The leading fraction is `(n+alpha+beta+1)/(2n+alpha+beta+1)`, which at
/// `n = 0` degenerates to `0/0` when `alpha+beta = -1`; it is taken as `1`
/// there, the common limit from every direction. The death rate carries a
/// factor `n` and vanishes at the wall.
pub fn jacobi_rates(alpha: f64, beta: f64) -> Result<RateSpec> {
    if alpha <= -1.0 || beta <= -1.0 {
        return Err(Error::InvalidParameters(format!(
            "jacobi parameters must exceed -1, got ({alpha}, {beta})"
        )));
    }
    let s = alpha + beta;
    let birth = move |n: i64| {
        let nf = n as f64;
        let first = if n == 0 {
            1.0
        } else {
            (nf + s + 1.0) / (2.0 * nf + s + 1.0)
        };
        first * 2.0 * (nf + alpha + 1.0) / (2.0 * nf + s + 2.0)
    };
    let death = move |n: i64| {
        if n == 0 {
            return 0.0;
        }
        let nf = n as f64;
        (nf + beta) / (2.0 * nf + s) * 2.0 * nf / (2.0 * nf + s + 1.0)
    };
    for n in 0..1000 {
        if birth(n) <= 0.0 || (n > 0 && death(n) <= 0.0) {
            return Err(Error::InvalidParameters(format!(
                "jacobi rates not positive at n = {n} for ({alpha}, {beta})"
            )));
        }
    }
    RateSpec::half_line(birth, death)
}

/// M/M/infinity queue rates `birth = lam`, `death(n) = mu n`, together with
/// the atoms of its spectral measure: mass `a^n e^{-a} / n!` at `x = mu n`
/// with `a = lam/mu`, truncated when the cumulative tail drops below 1e-14.
pub fn charlier_rates(lam: f64, mu: f64) -> Result<(RateSpec, Vec<(f64, f64)>)> {
    if lam <= 0.0 || mu <= 0.0 {
        return Err(Error::InvalidParameters(format!(
            "charlier parameters must be positive, got ({lam}, {mu})"
        )));
    }
    let rates = RateSpec::half_line(move |_| lam, move |n| mu * n as f64)?;
    let a = lam / mu;
    let mut atoms = Vec::new();
    let mut w = (-a).exp();
    let mut cum = 0.0;
    let mut n = 0usize;
    while cum < 1.0 - 1e-14 || n < 4 {
        atoms.push((mu * n as f64, w));
        cum += w;
        n += 1;
        w *= a / n as f64;
        if n > 4000 {
            break;
        }
    }
    Ok((rates, atoms))
}

/// Quadratic rates `birth(x) = a x^2 + b x + c`, `death(x) = a x^2 + b_bar x + c_bar`
/// on the half line (requires `c_bar = 0`) or the full line.
pub fn quadratic_rates(a: f64, b: f64, c: f64, b_bar: f64, c_bar: f64) -> Result<RateSpec> {
    let birth = move |x: i64| {
        let xf = x as f64;
        a * xf * xf + b * xf + c
    };
    let death = move |x: i64| {
        let xf = x as f64;
        a * xf * xf + b_bar * xf + c_bar
    };
    let half_line = c_bar == 0.0;
    let probe: Vec<i64> = if half_line {
        (0..=1000).collect()
    } else {
        (-1000..=1000).collect()
    };
    for &x in &probe {
        if birth(x) <= 0.0 || (death(x) <= 0.0 && !(half_line && x == 0)) {
            return Err(Error::InvalidParameters(format!(
                "quadratic rates change sign at x = {x}"
            )));
        }
    }
    if half_line {
        RateSpec::half_line(birth, death)
    } else {
        RateSpec::full_line(birth, death)
    }
}

/// True iff `birth(x+1)+death(x)-death(x+1)-birth(x)` and
/// `birth(x+2)+death(x)-death(x+1)-birth(x+1)` are constant over the probe
/// range, the condition under which Vandermonde links intertwine push-block
/// levels. The probe starts at `x = 1`: the wall modifies the `x = 0` row, so
/// shifted families such as the Chebyshev rates still qualify.
pub fn quadratic_characterization_check(rates: &RateSpec, probe: i64) -> bool {
    let combo1 = |x: i64| rates.birth(x + 1) + rates.death(x) - rates.death(x + 1) - rates.birth(x);
    let combo2 =
        |x: i64| rates.birth(x + 2) + rates.death(x) - rates.death(x + 1) - rates.birth(x + 1);
    let (c1, c2) = (combo1(1), combo2(1));
    (1..=probe).all(|x| (combo1(x) - c1).abs() < 1e-9 && (combo2(x) - c2).abs() < 1e-9)
}

/// Applies each coordinate's quadratic generator to the Vandermonde
/// determinant and returns the residual against the closed-form eigenvalue
/// `a n(n-1)(n-2)/3 + (b - b_bar) n(n-1)/2`.
pub fn vandermonde_eigen_residual(
    a: f64,
    b: f64,
    c: f64,
    b_bar: f64,
    c_bar: f64,
    x: &[f64],
) -> f64 {
    let n = x.len();
    let vand = |v: &[f64]| -> f64 {
        let mut p = 1.0;
        for i in 0..v.len() {
            for j in (i + 1)..v.len() {
                p *= v[j] - v[i];
            }
        }
        p
    };
    let mut total = 0.0;
    for i in 0..n {
        let birth = a * x[i] * x[i] + b * x[i] + c;
        let death = a * x[i] * x[i] + b_bar * x[i] + c_bar;
        let mut up = x.to_vec();
        up[i] += 1.0;
        let mut down = x.to_vec();
        down[i] -= 1.0;
        total += birth * (vand(&up) - vand(x)) + death * (vand(&down) - vand(x));
    }
    let nf = n as f64;
    let eig = a * nf * (nf - 1.0) * (nf - 2.0) / 3.0 + (b - b_bar) * nf * (nf - 1.0) / 2.0;
    (total - eig * vand(x)).abs()
}

/// Closed-form helper functions attached to the BC-type rates.
#[derive(Debug, Clone)]
pub struct BcHelpers {
    pub a: f64,
    pub b: f64,
    pub u: f64,
    pub u_prime: f64,
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos (g = 7, n = 9), |error| < 1e-13 on the positive axis.
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

impl BcHelpers {
    /// `f(x) = (2x+a+b+2) x! Gamma(x+b+1) / (Gamma(x+a+b+2) Gamma(x+a+2))`.
    pub fn f(&self, x: i64) -> f64 {
        let xf = x as f64;
        (2.0 * xf + self.a + self.b + 2.0)
            * (ln_gamma(xf + 1.0) + ln_gamma(xf + self.b + 1.0)
                - ln_gamma(xf + self.a + self.b + 2.0)
                - ln_gamma(xf + self.a + 2.0))
            .exp()
    }

    /// `g(y) = (2y+a+b+1) Gamma(y+a+b+1) Gamma(y+a+1) / (y! Gamma(y+b+1))`.
    pub fn g(&self, y: i64) -> f64 {
        let yf = y as f64;
        (2.0 * yf + self.a + self.b + 1.0)
            * (ln_gamma(yf + self.a + self.b + 1.0) + ln_gamma(yf + self.a + 1.0)
                - ln_gamma(yf + 1.0)
                - ln_gamma(yf + self.b + 1.0))
            .exp()
    }

    /// `F_n(x) = prod_{i<j} ((x_j + (a+b+1)/2)^2 - (x_i + (a+b+1)/2)^2)`.
    pub fn f_n(&self, x: &[i64]) -> f64 {
        let shift = (self.a + self.b + 1.0) / 2.0;
        let mut p = 1.0;
        for i in 0..x.len() {
            for j in (i + 1)..x.len() {
                let xi = x[i] as f64 + shift;
                let xj = x[j] as f64 + shift;
                p *= xj * xj - xi * xi;
            }
        }
        p
    }

    pub fn birth(&self, x: i64) -> f64 {
        bc_birth(self.u, self.u_prime, self.a, self.b, x)
    }

    pub fn death(&self, x: i64) -> f64 {
        bc_death(self.u, self.u_prime, self.a, self.b, x)
    }

    /// `f(x+1)/f(x)` in closed form.
    pub fn f_ratio(&self, x: i64) -> f64 {
        let (xf, a, b) = (x as f64, self.a, self.b);
        (2.0 * xf + a + b + 4.0) * (xf + 1.0) * (xf + b + 1.0)
            / ((2.0 * xf + a + b + 2.0) * (xf + a + b + 2.0) * (xf + a + 2.0))
    }

    /// `g(x+1)/g(x)` in closed form, from the Gamma-function definition.
    pub fn g_ratio(&self, x: i64) -> f64 {
        let (xf, a, b) = (x as f64, self.a, self.b);
        (2.0 * xf + a + b + 3.0) * (xf + a + b + 1.0) * (xf + a + 1.0)
            / ((2.0 * xf + a + b + 1.0) * (xf + 1.0) * (xf + b + 1.0))
    }

    /// Residuals (relative) of the two compatibility relations between the
    /// `(u, u')` and `(u+1, u'+1)` chains over `x <= upto`:
    /// `birth_{u+1,u'+1}(x+1) f(x+1)/f(x) = birth_{u,u'}(x) g(x)/g(x+1)` and
    /// `death_{u+1,u'+1}(x) f(x-1)/f(x) = death_{u,u'}(x+1) g(x+1)/g(x)`.
    pub fn compatibility_residual(&self, upto: i64) -> (f64, f64) {
        let (u, up, a, b) = (self.u, self.u_prime, self.a, self.b);
        let mut worst_birth = 0.0_f64;
        let mut worst_death = 0.0_f64;
        for x in 0..=upto {
            let lhs = bc_birth(u + 1.0, up + 1.0, a, b, x + 1) * self.f(x + 1) / self.f(x);
            let rhs = self.birth(x) * self.g(x) / self.g(x + 1);
            worst_birth = worst_birth.max((lhs - rhs).abs() / rhs.abs().max(1.0));
            if x >= 1 {
                let lhs = bc_death(u + 1.0, up + 1.0, a, b, x) * self.f(x - 1) / self.f(x);
                let rhs = self.death(x + 1) * self.g(x + 1) / self.g(x);
                worst_death = worst_death.max((lhs - rhs).abs() / rhs.abs().max(1.0));
            }
        }
        (worst_birth, worst_death)
    }
}

fn bc_birth(u: f64, up: f64, a: f64, b: f64, x: i64) -> f64 {
    let xf = x as f64;
    (xf + a + b + 1.0) * (xf + a + 1.0) * (xf - u) * (xf - up)
        / ((2.0 * xf + a + b + 1.0) * (2.0 * xf + a + b + 2.0))
}

fn bc_death(u: f64, up: f64, a: f64, b: f64, x: i64) -> f64 {
    let xf = x as f64;
    xf * (xf + b) * (xf + u + a + b + 1.0) * (xf + up + a + b + 1.0)
        / ((2.0 * xf + a + b + 1.0) * (2.0 * xf + a + b))
}

/// BC-type rates depending on `(u, u', a, b)`. Admissibility is checked by
/// direct positivity probing up to `x = 1000` rather than by re-deriving the
/// inequality set the construction cites.
pub fn bc_rates(u: f64, u_prime: f64, a: f64, b: f64) -> Result<(RateSpec, BcHelpers)> {
    for x in 0..=1000i64 {
        if bc_birth(u, u_prime, a, b, x) <= 0.0 {
            return Err(Error::InvalidParameters(format!(
                "bc birth rate not positive at x = {x}"
            )));
        }
        if x >= 1 && bc_death(u, u_prime, a, b, x) <= 0.0 {
            return Err(Error::InvalidParameters(format!(
                "bc death rate not positive at x = {x}"
            )));
        }
    }
    let rates = RateSpec::half_line(
        move |x| bc_birth(u, u_prime, a, b, x),
        move |x| if x == 0 { 0.0 } else { bc_death(u, u_prime, a, b, x) },
    )?;
    Ok((rates, BcHelpers { a, b, u, u_prime }))
}

/// Two-speed region: `death = 1`, `birth(n) = r` for `n <= n_star`, `1` beyond.
pub fn piecewise_rates(r: f64, n_star: i64) -> Result<RateSpec> {
    if r <= 0.0 {
        return Err(Error::InvalidParameters("segment rate must be positive".into()));
    }
    RateSpec::half_line(
        move |n| if n <= n_star { r } else { 1.0 },
        |n| if n == 0 { 0.0 } else { 1.0 },
    )
}

/// Periodic rates: `death = 1`, `birth` alternates `1` (even sites) and `r`.
pub fn periodic_rates(r: f64) -> Result<RateSpec> {
    if r <= 0.0 {
        return Err(Error::InvalidParameters("periodic rate must be positive".into()));
    }
    RateSpec::half_line(
        move |n| if n % 2 == 0 { 1.0 } else { r },
        |n| if n == 0 { 0.0 } else { 1.0 },
    )
}

/// Explicit rate tables; positions past the table end reuse the last entry.
pub fn table_rates(birth: &[f64], death: &[f64]) -> Result<RateSpec> {
    if birth.is_empty() || death.is_empty() {
        return Err(Error::InvalidParameters("rate tables must be nonempty".into()));
    }
    if death[0] != 0.0 {
        return Err(Error::InvalidParameters(
            "death table must start with 0 at the wall".into(),
        ));
    }
    let b: Vec<f64> = birth.to_vec();
    let d: Vec<f64> = death.to_vec();
    RateSpec::half_line(
        move |n| b[(n as usize).min(b.len() - 1)],
        move |n| if n == 0 { 0.0 } else { d[(n as usize).min(d.len() - 1)] },
    )
}
