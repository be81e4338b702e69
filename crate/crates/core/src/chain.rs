//! One-dimensional birth-death (and bilateral) chains: rates, symmetrizing
//! measures, Siegmund duals, truncated generators and their matrix
//! exponentials, path sampling and the distribution-function duality check.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};

/// Underlying lattice of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lattice {
    /// `{0, 1, 2, ...}` with a wall at the origin.
    HalfLine,
    /// All integers.
    FullLine,
}

/// Behaviour at the wall for half-line chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WallBehavior {
    /// `mu(0) = 0`: the origin reflects.
    Reflecting,
    /// `mu(0) > 0` is a killing rate: the chain is absorbed below the wall.
    /// This is how the Siegmund dual of a reflecting chain behaves.
    AbsorbedBelow,
}

type RateFn = Arc<dyn Fn(i64) -> f64 + Send + Sync>;

/// Birth and death rate functions on the lattice, the model's primitive input.
#[derive(Clone)]
pub struct RateSpec {
    lattice: Lattice,
    wall: WallBehavior,
    birth: RateFn,
    death: RateFn,
}

impl std::fmt::Debug for RateSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RateSpec")
            .field("lattice", &self.lattice)
            .field("wall", &self.wall)
            .finish_non_exhaustive()
    }
}

impl RateSpec {
    /// Chain on the half line reflecting at the origin. Requires
    /// `birth(x) > 0` for `x >= 0`, `death(x) > 0` for `x >= 1` and
    /// `death(0) = 0`; rates are probed on an initial window.
    pub fn half_line(
        birth: impl Fn(i64) -> f64 + Send + Sync + 'static,
        death: impl Fn(i64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if death(0) != 0.0 {
            return Err(Error::InvalidRates(format!(
                "death rate at the wall must vanish, got {}",
                death(0)
            )));
        }
        let spec = RateSpec {
            lattice: Lattice::HalfLine,
            wall: WallBehavior::Reflecting,
            birth: Arc::new(birth),
            death: Arc::new(death),
        };
        spec.probe_positivity(256)?;
        Ok(spec)
    }

    /// Bilateral chain on all of `Z`; both rates must be strictly positive.
    pub fn full_line(
        birth: impl Fn(i64) -> f64 + Send + Sync + 'static,
        death: impl Fn(i64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let spec = RateSpec {
            lattice: Lattice::FullLine,
            wall: WallBehavior::Reflecting,
            birth: Arc::new(birth),
            death: Arc::new(death),
        };
        spec.probe_positivity(256)?;
        Ok(spec)
    }

    fn probe_positivity(&self, bound: i64) -> Result<()> {
        let lo = match self.lattice {
            Lattice::HalfLine => 0,
            Lattice::FullLine => -bound,
        };
        for x in lo..=bound {
            let l = self.birth(x);
            let m = self.death(x);
            if !(l.is_finite() && m.is_finite()) {
                return Err(Error::InvalidRates(format!("non-finite rate at x = {x}")));
            }
            if l <= 0.0 {
                return Err(Error::InvalidRates(format!(
                    "birth rate must be positive, got {l} at x = {x}"
                )));
            }
            let death_may_vanish = self.lattice == Lattice::HalfLine && x == 0;
            if m < 0.0 || (m == 0.0 && !death_may_vanish) {
                return Err(Error::InvalidRates(format!(
                    "death rate must be positive away from the wall, got {m} at x = {x}"
                )));
            }
        }
        Ok(())
    }

    pub fn birth(&self, x: i64) -> f64 {
        (self.birth)(x)
    }

    pub fn death(&self, x: i64) -> f64 {
        (self.death)(x)
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn wall(&self) -> WallBehavior {
        self.wall
    }

    /// The Siegmund dual: `birth_dual(x) = death(x+1)`, `death_dual(x) = birth(x)`.
    /// On the half line the dual is absorbed below the wall; its `death(0)` is
    /// the killing rate there.
    pub fn siegmund_dual(&self) -> RateSpec {
        let birth = self.birth.clone();
        let death = self.death.clone();
        RateSpec {
            lattice: self.lattice,
            wall: match self.lattice {
                Lattice::HalfLine => WallBehavior::AbsorbedBelow,
                Lattice::FullLine => WallBehavior::Reflecting,
            },
            birth: Arc::new(move |x| death(x + 1)),
            death: Arc::new(move |x| birth(x)),
        }
    }

    /// The symmetrizing measure on `[lo(lattice), upto]`, normalized by
    /// `pi(0) = 1`. Returned as a vector indexed from the lattice floor.
    pub fn symmetrizing_measure(&self, upto: i64) -> Result<Vec<f64>> {
        match self.lattice {
            Lattice::HalfLine => {
                let mut pi = Vec::with_capacity(upto as usize + 1);
                pi.push(1.0);
                for x in 1..=upto {
                    let d = self.death(x);
                    if d == 0.0 {
                        return Err(Error::InvalidRates(format!(
                            "zero death rate at interior point {x}"
                        )));
                    }
                    let prev = *pi.last().unwrap();
                    pi.push(prev * self.birth(x - 1) / d);
                }
                Ok(pi)
            }
            Lattice::FullLine => {
                // window [-upto, upto], pi(0) = 1 at the centre
                let n = upto as usize;
                let mut pi = vec![0.0; 2 * n + 1];
                pi[n] = 1.0;
                for x in 1..=upto {
                    let d = self.death(x);
                    if d == 0.0 {
                        return Err(Error::InvalidRates(format!(
                            "zero death rate at interior point {x}"
                        )));
                    }
                    pi[n + x as usize] = pi[n + x as usize - 1] * self.birth(x - 1) / d;
                }
                for x in 1..=upto {
                    // pi(-x) = pi(-x+1) * mu(-x+1) / lambda(-x)
                    pi[n - x as usize] =
                        pi[n - x as usize + 1] * self.death(-x + 1) / self.birth(-x);
                }
                Ok(pi)
            }
        }
    }
}

/// Divergence diagnostics for the series conditions that make the chain
/// uniquely determined by its rates. The tool only reports partial sums and a
/// heuristic flag; it cannot prove divergence.
#[derive(Debug, Clone, serde::Serialize)]
pub struct WellposednessReport {
    pub condition_sums: Vec<ConditionSum>,
    pub dual_determinacy_sum: ConditionSum,
    pub all_divergent: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ConditionSum {
    pub name: String,
    pub partial_sum: f64,
    pub half_horizon_sum: f64,
    pub flagged_divergent: bool,
}

/// Compares the truncated functional at the full and half horizon. A series
/// that keeps growing when the horizon doubles is flagged divergent; stalling
/// growth is reported as a determinacy risk. Heuristic only: very slowly
/// divergent series can come out as risks.
fn condition_sum(name: &str, eval: impl Fn(usize) -> f64, horizon: usize) -> ConditionSum {
    const SATURATED: f64 = 1e30;
    let clamp = |v: f64| if v.is_finite() { v.min(SATURATED) } else { SATURATED };
    let full = clamp(eval(horizon));
    let half = clamp(eval(horizon / 2));
    let flagged_divergent = full >= SATURATED || full > 1.1 * half.max(1e-300);
    ConditionSum {
        name: name.to_string(),
        partial_sum: full,
        half_horizon_sum: half,
        flagged_divergent,
    }
}

/// Evaluates the partial sums of the divergence conditions up to `horizon`
/// together with the dual-determinacy sum `sum 1/birth(n)`.
pub fn check_wellposedness(rates: &RateSpec, horizon: usize) -> Result<WellposednessReport> {
    if horizon < 10 {
        return Err(Error::Domain("horizon must be at least 10".into()));
    }
    let h = horizon as i64;
    let mut sums = Vec::new();
    match rates.lattice {
        Lattice::HalfLine => {
            let pi = rates.symmetrizing_measure(h + 1)?;
            let mut cum = vec![0.0; pi.len() + 1];
            for (i, p) in pi.iter().enumerate() {
                cum[i + 1] = cum[i] + p;
            }
            sums.push(condition_sum(
                "halfline inner mass",
                |hz| {
                    (0..hz)
                        .map(|j| cum[j + 1] / (rates.birth(j as i64) * pi[j]))
                        .sum()
                },
                horizon,
            ));
            sums.push(condition_sum(
                "halfline outer mass",
                |hz| {
                    (0..hz)
                        .map(|j| (cum[hz + 1] - cum[j + 1]) / (rates.birth(j as i64) * pi[j]))
                        .sum()
                },
                horizon,
            ));
        }
        Lattice::FullLine => {
            let pi = rates.symmetrizing_measure(h + 1)?;
            let n0 = (h + 1) as usize; // index of the origin
            let piv = |x: i64| pi[(n0 as i64 + x) as usize];
            sums.push(condition_sum(
                "bilateral +inf first",
                |hz| {
                    let mut cum = 0.0;
                    (1..hz)
                        .map(|j| {
                            cum += piv(j as i64);
                            cum / (rates.birth(j as i64) * piv(j as i64))
                        })
                        .sum()
                },
                horizon,
            ));
            sums.push(condition_sum(
                "bilateral +inf second",
                |hz| {
                    let mut recip = 0.0;
                    (1..hz)
                        .map(|j| {
                            let term = piv(j as i64) * recip;
                            recip += 1.0 / (rates.birth(j as i64) * piv(j as i64));
                            term
                        })
                        .sum()
                },
                horizon,
            ));
            sums.push(condition_sum(
                "bilateral -inf first",
                |hz| {
                    let mut cum = 0.0;
                    (1..hz)
                        .map(|j| {
                            cum += piv(-(j as i64));
                            let jj = -(j as i64 + 1);
                            cum / (rates.birth(jj) * piv(jj))
                        })
                        .sum()
                },
                horizon,
            ));
            sums.push(condition_sum(
                "bilateral -inf second",
                |hz| {
                    let mut recip = 0.0;
                    (1..hz)
                        .map(|j| {
                            let jj = -(j as i64);
                            recip += 1.0 / (rates.birth(jj) * piv(jj));
                            piv(jj) * recip
                        })
                        .sum()
                },
                horizon,
            ));
        }
    }
    let dual = condition_sum(
        "dual determinacy sum 1/birth",
        |hz| (1..=hz).map(|n| 1.0 / rates.birth(n as i64)).sum(),
        horizon,
    );
    let all = sums.iter().all(|c| c.flagged_divergent) && dual.flagged_divergent;
    Ok(WellposednessReport {
        condition_sums: sums,
        dual_determinacy_sum: dual,
        all_divergent: all,
    })
}

/// A chain together with its truncation window and symmetrizing measure.
///
/// Half-line chains live on `[0, L]`; bilateral ones on `[-L, L]`. Mass
/// leaving the window is absorbed, so all truncated objects are sub-Markov
/// and truncation errors are bounded by escape probabilities.
#[derive(Debug, Clone)]
pub struct ChainModel {
    rates: RateSpec,
    truncation: i64,
    pi: Vec<f64>,
}

impl ChainModel {
    pub fn new(rates: RateSpec, truncation: i64) -> Result<Self> {
        if truncation < 1 {
            return Err(Error::Domain("truncation must be positive".into()));
        }
        let pi = rates.symmetrizing_measure(truncation)?;
        Ok(ChainModel {
            rates,
            truncation,
            pi,
        })
    }

    /// Grows the truncation (doubling) until the row-mass deficiency of
    /// `exp(t D)` at every state with `|x| <= queried` is below `tol`.
    pub fn with_auto_truncation(rates: RateSpec, t: f64, queried: i64, tol: f64) -> Result<Self> {
        let mut trunc = (2 * queried.max(1)).max(32);
        loop {
            let model = ChainModel::new(rates.clone(), trunc)?;
            let p = model.transition_matrix(t)?;
            let deficiency = (0..=model.index_of(queried))
                .map(|i| 1.0 - p.row(i).sum())
                .fold(0.0_f64, f64::max);
            if deficiency < tol {
                return Ok(model);
            }
            if trunc > 1 << 14 {
                return Err(Error::Truncation(format!(
                    "row deficiency {deficiency:e} still above {tol:e} at L = {trunc}"
                )));
            }
            trunc *= 2;
        }
    }

    pub fn rates(&self) -> &RateSpec {
        &self.rates
    }

    pub fn truncation(&self) -> i64 {
        self.truncation
    }

    /// Lowest lattice point of the window.
    pub fn floor(&self) -> i64 {
        match self.rates.lattice {
            Lattice::HalfLine => 0,
            Lattice::FullLine => -self.truncation,
        }
    }

    /// Matrix index of a lattice position.
    pub fn index_of(&self, x: i64) -> usize {
        (x - self.floor()) as usize
    }

    pub fn dim(&self) -> usize {
        match self.rates.lattice {
            Lattice::HalfLine => self.truncation as usize + 1,
            Lattice::FullLine => 2 * self.truncation as usize + 1,
        }
    }

    /// Symmetrizing weight at `x` (with `pi(0) = 1`).
    pub fn pi(&self, x: i64) -> f64 {
        self.pi[self.index_of(x)]
    }

    /// The truncated generator as a dense matrix. Off-diagonal entries are
    /// nonnegative and row sums are `<= 0`: jumps leaving the window (and the
    /// killing jump of an absorbed-below dual) stay on the diagonal only.
    pub fn generator(&self) -> DMatrix<f64> {
        let n = self.dim();
        let floor = self.floor();
        let mut g = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let x = floor + i as i64;
            let l = self.rates.birth(x);
            let m = if x == 0 && self.rates.lattice == Lattice::HalfLine {
                match self.rates.wall {
                    WallBehavior::Reflecting => 0.0,
                    WallBehavior::AbsorbedBelow => self.rates.death(0),
                }
            } else {
                self.rates.death(x)
            };
            g[(i, i)] = -(l + m);
            if i + 1 < n {
                g[(i, i + 1)] = l;
            }
            if i > 0 {
                g[(i, i - 1)] = m;
            }
        }
        g
    }

    /// `p_t = exp(t D)` on the truncated window.
    pub fn transition_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        if t < 0.0 {
            return Err(Error::Domain(format!("time must be nonnegative, got {t}")));
        }
        Ok(expm(&(self.generator() * t)))
    }

    /// `exp(t D)` by uniformization: a series of nonnegative terms, so tiny
    /// far-off-diagonal entries keep their *relative* accuracy, which the
    /// Pade route cannot do (its error is absolute, about 1e-16 ||p||).
    pub fn uniformized_transition(&self, t: f64) -> Result<DMatrix<f64>> {
        if t < 0.0 {
            return Err(Error::Domain(format!("time must be nonnegative, got {t}")));
        }
        let n = self.dim();
        let g = self.generator();
        let theta = g
            .diagonal()
            .iter()
            .map(|d| -d)
            .fold(0.0_f64, f64::max)
            + 0.1;
        // row-substochastic jump matrix P = I + G/theta, entries >= 0
        let mut jump = g / theta;
        for i in 0..n {
            jump[(i, i)] += 1.0;
        }
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut out = DMatrix::<f64>::zeros(n, n);
        let mut poisson = (-theta * t).exp();
        let mut acc = poisson;
        out.axpy(poisson, &term, 1.0);
        let mut k = 0u32;
        while acc < 1.0 - 1e-16 && k < 100_000 {
            k += 1;
            term = &term * &jump;
            poisson *= theta * t / k as f64;
            acc += poisson;
            out.axpy(poisson, &term, 1.0);
        }
        Ok(out)
    }

    /// `P_t 1_{[floor, y]}(x)` from a precomputed transition matrix.
    pub fn cdf(&self, p: &DMatrix<f64>, x: i64, y: i64) -> f64 {
        let row = self.index_of(x);
        let hi = self.index_of(y);
        (0..=hi).map(|j| p[(row, j)]).sum()
    }

    /// `P_t 1_{[y, top]}(x)`.
    pub fn tail(&self, p: &DMatrix<f64>, x: i64, y: i64) -> f64 {
        let row = self.index_of(x);
        (self.index_of(y)..self.dim()).map(|j| p[(row, j)]).sum()
    }
}

/// Scaling-and-squaring matrix exponential with the order-13 Pade approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    const THETA_13: f64 = 5.371920351148152;
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let n = a.nrows();
    let norm = a
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil() as i32
    } else {
        0
    };
    let a = a / 2f64.powi(s);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let id = DMatrix::<f64>::identity(n, n);
    let u_inner = &a6 * (B[13] * &a6 + B[11] * &a4 + B[9] * &a2)
        + B[7] * &a6
        + B[5] * &a4
        + B[3] * &a2
        + B[1] * &id;
    let u = &a * u_inner;
    let v = &a6 * (B[12] * &a6 + B[10] * &a4 + B[8] * &a2)
        + B[6] * &a6
        + B[4] * &a4
        + B[2] * &a2
        + B[0] * &id;
    let mut r = (&v - &u)
        .lu()
        .solve(&(&v + &u))
        .expect("Pade denominator is invertible");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// One sampled trajectory: piecewise constant, right continuous.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Jump times, strictly increasing.
    pub times: Vec<f64>,
    /// States; `states[0]` is the initial state, `states[k]` holds on
    /// `[times[k-1], times[k])`.
    pub states: Vec<i64>,
}

impl Trajectory {
    pub fn at(&self, t: f64) -> i64 {
        match self.times.iter().position(|&s| s > t) {
            Some(k) => self.states[k],
            None => *self.states.last().unwrap(),
        }
    }
}

const EXPLOSION_GUARD: u64 = 10_000_000;

/// Samples a chain path on `[0, horizon]` by competing exponential clocks.
pub fn simulate_path(
    rates: &RateSpec,
    x0: i64,
    horizon: f64,
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    if rates.lattice == Lattice::HalfLine && x0 < 0 {
        return Err(Error::Domain(format!("start {x0} below the wall")));
    }
    let mut times = Vec::new();
    let mut states = vec![x0];
    let mut t = 0.0;
    let mut x = x0;
    let mut events = 0u64;
    loop {
        let l = rates.birth(x);
        let m = if x == 0 && rates.lattice == Lattice::HalfLine {
            match rates.wall {
                WallBehavior::Reflecting => 0.0,
                WallBehavior::AbsorbedBelow => rates.death(0),
            }
        } else {
            rates.death(x)
        };
        let total = l + m;
        if total <= 0.0 {
            break;
        }
        t += Exp::new(total).unwrap().sample(rng);
        if t >= horizon {
            break;
        }
        events += 1;
        if events > EXPLOSION_GUARD {
            return Err(Error::Explosion { events, t });
        }
        x += if rng.random::<f64>() * total < l { 1 } else { -1 };
        times.push(t);
        states.push(x);
    }
    Ok(Trajectory { times, states })
}

/// `|P_t 1_{[l,y]}(x) - P^dual_t 1_{[x,top]}(y)|` computed from the matrix
/// exponentials of the chain and of its Siegmund dual on the same window.
pub fn verify_duality(chain: &ChainModel, t: f64, x: i64, y: i64) -> Result<f64> {
    let dual = ChainModel::new(chain.rates.siegmund_dual(), chain.truncation)?;
    let p = chain.transition_matrix(t)?;
    let ph = dual.transition_matrix(t)?;
    Ok((chain.cdf(&p, x, y) - dual.tail(&ph, y, x)).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chebyshev_symmetrizing_measure() {
        let rates = families::chebyshev_rates();
        let pi = rates.symmetrizing_measure(10).unwrap();
        assert_eq!(pi[0], 1.0);
        for x in 1..=10 {
            assert_eq!(pi[x], 2.0);
        }
    }

    #[test]
    fn constant_rates_give_flat_measure() {
        let rates = RateSpec::full_line(|_| 0.7, |_| 0.7).unwrap();
        let pi = rates.symmetrizing_measure(6).unwrap();
        for p in pi {
            assert_abs_diff_eq!(p, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn mm_infty_measure_is_poissonian() {
        let (rates, _) = families::charlier_rates(1.5, 0.5).unwrap();
        let pi = rates.symmetrizing_measure(8).unwrap();
        let mut fact = 1.0;
        for (n, p) in pi.iter().enumerate() {
            if n > 0 {
                fact *= n as f64;
            }
            assert_abs_diff_eq!(*p, 3.0_f64.powi(n as i32) / fact, epsilon = 1e-12);
        }
    }

    #[test]
    fn dual_of_chebyshev() {
        let rates = families::chebyshev_rates();
        let dual = rates.siegmund_dual();
        for n in 0..6 {
            assert_eq!(dual.birth(n), 0.5);
            assert_eq!(dual.death(n), if n == 0 { 1.0 } else { 0.5 });
        }
        assert_eq!(dual.wall(), WallBehavior::AbsorbedBelow);
        // the dual's symmetrizing measure is flat
        let pih = dual.symmetrizing_measure(8).unwrap();
        for p in pih {
            assert_abs_diff_eq!(p, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn constant_rates_dual_is_killed_copy() {
        let rates = RateSpec::half_line(|_| 0.4, |x| if x == 0 { 0.0 } else { 0.4 }).unwrap();
        let dual = rates.siegmund_dual();
        assert_eq!(dual.birth(0), 0.4);
        assert_eq!(dual.death(0), 0.4); // killing rate at the wall
        assert_eq!(dual.wall(), WallBehavior::AbsorbedBelow);
    }

    #[test]
    fn wellposedness_flags() {
        let report = check_wellposedness(&families::chebyshev_rates(), 10_000).unwrap();
        assert!(report.all_divergent);
        for c in &report.condition_sums {
            assert!(c.partial_sum > 1e3, "{c:?}");
        }

        let fast = RateSpec::half_line(
            |x| 2f64.powi(x.min(500) as i32),
            |x| if x == 0 { 0.0 } else { 1.0 },
        )
        .unwrap();
        let report = check_wellposedness(&fast, 1000).unwrap();
        assert!(!report.dual_determinacy_sum.flagged_divergent);
        assert!(report.dual_determinacy_sum.partial_sum < 2.0);

        let (mmq, _) = families::charlier_rates(1.0, 1.0).unwrap();
        let report = check_wellposedness(&mmq, 1000).unwrap();
        assert!(report.dual_determinacy_sum.flagged_divergent);
    }

    #[test]
    fn transition_matrix_basics() {
        let chain = ChainModel::new(families::chebyshev_rates(), 60).unwrap();
        let p0 = chain.transition_matrix(0.0).unwrap();
        assert!((&p0 - DMatrix::<f64>::identity(61, 61)).abs().max() < 1e-13);
        let p = chain.transition_matrix(1.0).unwrap();
        for x in 0..=20 {
            let row_sum: f64 = p.row(x as usize).sum();
            assert!(row_sum <= 1.0 + 1e-12);
            assert!(row_sum >= 1.0 - 1e-12, "escape mass visible at x={x}");
        }
        assert!(p.iter().all(|&v| v > -1e-15));
        assert!(chain.transition_matrix(-0.5).is_err());
    }

    #[test]
    fn detailed_balance_and_chapman_kolmogorov() {
        let chain = ChainModel::new(families::chebyshev_rates(), 40).unwrap();
        let (s, t) = (0.4, 0.9);
        let ps = chain.transition_matrix(s).unwrap();
        let pt = chain.transition_matrix(t).unwrap();
        let pst = chain.transition_matrix(s + t).unwrap();
        let prod = &ps * &pt;
        assert!((&prod - &pst).abs().max() < 1e-9);
        for x in 0..30 {
            for y in 0..30 {
                let lhs = chain.pi(x) * pt[(chain.index_of(x), chain.index_of(y))];
                let rhs = chain.pi(y) * pt[(chain.index_of(y), chain.index_of(x))];
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn duality_residuals() {
        let chain = ChainModel::new(families::chebyshev_rates(), 60).unwrap();
        assert_eq!(verify_duality(&chain, 0.0, 3, 5).unwrap(), 0.0);
        assert!(verify_duality(&chain, 1.0, 3, 5).unwrap() < 1e-8);
        let (rates, _) = families::charlier_rates(1.0, 1.0).unwrap();
        let chain = ChainModel::new(rates, 80).unwrap();
        assert!(verify_duality(&chain, 0.5, 2, 2).unwrap() < 1e-8);
    }

    #[test]
    fn stochastic_monotonicity_in_start_point() {
        let chain = ChainModel::new(families::chebyshev_rates(), 50).unwrap();
        let p = chain.transition_matrix(0.8).unwrap();
        for y in 0..12 {
            let mut prev = f64::INFINITY;
            for x in 0..12 {
                let v = chain.cdf(&p, x, y);
                assert!(v <= prev + 1e-12);
                prev = v;
            }
        }
    }

    #[test]
    fn bilateral_window_duality() {
        let rates = RateSpec::full_line(|x| 1.0 + 0.2 * ((x % 2) as f64).abs(), |_| 0.8).unwrap();
        let chain = ChainModel::new(rates, 40).unwrap();
        assert!(verify_duality(&chain, 0.7, -2, 3).unwrap() < 1e-8);
    }

    #[test]
    fn simulated_paths_match_matrix_exponential() {
        let rates = families::chebyshev_rates();
        let chain = ChainModel::new(rates.clone(), 30).unwrap();
        let p = chain.transition_matrix(1.0).unwrap();
        let reps = 40_000;
        let mut counts = vec![0u32; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..reps {
            let path = simulate_path(&rates, 0, 1.0, &mut rng).unwrap();
            let v = path.at(1.0);
            if (v as usize) < counts.len() {
                counts[v as usize] += 1;
            }
        }
        for y in 0..8 {
            let q = p[(0, y)];
            let est = counts[y] as f64 / reps as f64;
            let se = (q * (1.0 - q) / reps as f64).sqrt();
            assert!(
                (est - q).abs() <= 3.0 * se + 1e-12,
                "y={y} est={est} q={q} se={se}"
            );
        }
    }

    #[test]
    fn fixed_seed_reproduces_trajectory() {
        let rates = families::chebyshev_rates();
        let mut a = ChaCha8Rng::seed_from_u64(99);
        let mut b = ChaCha8Rng::seed_from_u64(99);
        let p1 = simulate_path(&rates, 2, 5.0, &mut a).unwrap();
        let p2 = simulate_path(&rates, 2, 5.0, &mut b).unwrap();
        assert_eq!(p1.states, p2.states);
        assert_eq!(p1.times, p2.times);
    }

    #[test]
    fn auto_truncation_grows_until_tight() {
        let chain =
            ChainModel::with_auto_truncation(families::chebyshev_rates(), 1.0, 20, 1e-10).unwrap();
        let p = chain.transition_matrix(1.0).unwrap();
        for x in 0..=20 {
            assert!(1.0 - p.row(chain.index_of(x)).sum() < 1e-10);
        }
    }
}
