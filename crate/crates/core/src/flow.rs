//! Graphical construction of the coalescing flow of birth-death chains, its
//! pathwise dual, and the determinant formula for the flow's finite
//! dimensional distributions.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::chain::{ChainModel, Lattice, RateSpec};
use crate::error::{Error, Result};

/// Per-site Poisson arrow arrivals inside a time window and a spatial span.
///
/// An up arrow at site `x` moves a walker to `x + 1` (rate `birth(x)`), a down
/// arrow to `x - 1` (rate `death(x)`).
#[derive(Debug, Clone)]
pub struct ArrowField {
    lattice: Lattice,
    window: (f64, f64),
    lo: i64,
    hi: i64,
    up: Vec<Vec<f64>>,
    down: Vec<Vec<f64>>,
}

/// Independent Poisson arrivals with the site-dependent rates, strictly
/// increasing per site and type.
pub fn sample_arrows(
    rates: &RateSpec,
    window: (f64, f64),
    span: (i64, i64),
    rng: &mut impl Rng,
) -> Result<ArrowField> {
    let (s, t) = window;
    let (lo, hi) = span;
    if !(t >= s) || lo > hi {
        return Err(Error::Domain("empty window or span".into()));
    }
    let lo = match rates.lattice() {
        Lattice::HalfLine => lo.max(0),
        Lattice::FullLine => lo,
    };
    let mut up = Vec::with_capacity((hi - lo + 1) as usize);
    let mut down = Vec::with_capacity((hi - lo + 1) as usize);
    for x in lo..=hi {
        up.push(sample_poisson_times(rates.birth(x), s, t, rng));
        let death = if x == 0 && rates.lattice() == Lattice::HalfLine {
            0.0 // wall: no down arrows regardless of dual killing rates
        } else {
            rates.death(x)
        };
        down.push(sample_poisson_times(death, s, t, rng));
    }
    Ok(ArrowField {
        lattice: rates.lattice(),
        window,
        lo,
        hi,
        up,
        down,
    })
}

fn sample_poisson_times(rate: f64, s: f64, t: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut times = Vec::new();
    if rate <= 0.0 {
        return times;
    }
    let exp = Exp::new(rate).unwrap();
    let mut clock = s;
    loop {
        clock += exp.sample(rng);
        if clock > t {
            return times;
        }
        times.push(clock);
    }
}

impl ArrowField {
    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    pub fn span(&self) -> (i64, i64) {
        (self.lo, self.hi)
    }

    pub fn up_count(&self, x: i64) -> usize {
        self.up[(x - self.lo) as usize].len()
    }

    pub fn down_count(&self, x: i64) -> usize {
        self.down[(x - self.lo) as usize].len()
    }

    fn arrows_at(&self, x: i64, kind: ArrowKind) -> &[f64] {
        let idx = (x - self.lo) as usize;
        match kind {
            ArrowKind::Up => &self.up[idx],
            ArrowKind::Down => &self.down[idx],
        }
    }

    /// First arrival strictly after `after` from a sorted list.
    fn next_after(list: &[f64], after: f64) -> Option<f64> {
        let idx = list.partition_point(|&v| v <= after);
        list.get(idx).copied()
    }

    /// Last arrival `<= before` from a sorted list.
    fn last_at_or_before(list: &[f64], before: f64) -> Option<f64> {
        let idx = list.partition_point(|&v| v <= before);
        if idx == 0 {
            None
        } else {
            Some(list[idx - 1])
        }
    }
}

#[derive(Clone, Copy)]
enum ArrowKind {
    Up,
    Down,
}

/// Follows arrows from `(s, x)` up to time `t`; right continuous in time, so
/// arrows arriving exactly at `t` are taken and arrows at `s` are not.
pub fn flow_eval(field: &ArrowField, s: f64, t: f64, x: i64) -> Result<i64> {
    let (ws, wt) = field.window;
    if !(ws <= s && s <= t && t <= wt) {
        return Err(Error::Domain(format!("times ({s}, {t}) outside window")));
    }
    if x < field.lo || x > field.hi {
        return Err(Error::SpanExceeded {
            lo: field.lo,
            hi: field.hi,
        });
    }
    let mut pos = x;
    let mut clock = s;
    loop {
        let up = ArrowField::next_after(field.arrows_at(pos, ArrowKind::Up), clock);
        let down = ArrowField::next_after(field.arrows_at(pos, ArrowKind::Down), clock);
        let (when, step) = match (up, down) {
            (None, None) => break,
            (Some(u), None) => (u, 1),
            (None, Some(d)) => (d, -1),
            // simultaneous arrivals at one site have probability zero; ties
            // resolve up first for a stable order
            (Some(u), Some(d)) => {
                if u <= d {
                    (u, 1)
                } else {
                    (d, -1)
                }
            }
        };
        if when > t {
            break;
        }
        clock = when;
        pos += step;
        if pos < field.lo || pos > field.hi {
            return Err(Error::SpanExceeded {
                lo: field.lo,
                hi: field.hi,
            });
        }
    }
    Ok(pos)
}

/// Evaluates the dual flow by walking the transformed arrows backwards from
/// `(t, y)` to time `s`:
///
/// * a black up arrow at site `x` acts as a red down arrow at `x`;
/// * a black down arrow into `x` (from `x + 1`) acts as a red up arrow at `x`.
///
/// The result equals `sup{w : Phi_{-t,-s}(w) <= y}` path by path.
pub fn dual_flow_eval(field: &ArrowField, s: f64, t: f64, y: i64) -> Result<i64> {
    let (ws, wt) = field.window;
    if !(ws <= s && s <= t && t <= wt) {
        return Err(Error::Domain(format!("times ({s}, {t}) outside window")));
    }
    if y < field.lo || y > field.hi {
        return Err(Error::SpanExceeded {
            lo: field.lo,
            hi: field.hi,
        });
    }
    let mut pos = y;
    let mut clock = t;
    loop {
        // red down at pos <=> black up at pos; red up at pos <=> black down at pos+1
        let red_down = ArrowField::last_at_or_before(field.arrows_at(pos, ArrowKind::Up), clock);
        let red_up = if pos + 1 <= field.hi {
            ArrowField::last_at_or_before(field.arrows_at(pos + 1, ArrowKind::Down), clock)
        } else {
            None
        };
        let (when, step) = match (red_down, red_up) {
            (None, None) => break,
            (Some(d), None) => (d, -1),
            (None, Some(u)) => (u, 1),
            (Some(d), Some(u)) => {
                if d >= u {
                    (d, -1)
                } else {
                    (u, 1)
                }
            }
        };
        if when <= s {
            break;
        }
        // strictly before: the same arrow must not fire twice
        clock = next_down(when);
        pos += step;
        if field.lattice == Lattice::HalfLine && pos < 0 {
            // the dual walk is absorbed below the wall
            return Ok(-1);
        }
        if pos < field.lo || pos > field.hi {
            return Err(Error::SpanExceeded {
                lo: field.lo,
                hi: field.hi,
            });
        }
    }
    Ok(pos)
}

fn next_down(v: f64) -> f64 {
    // largest float strictly below v
    f64::from_bits(v.to_bits() - 1)
}

/// Brute-force inverse `sup{w : flow(s,t,w) <= y}` used as the oracle for the
/// pathwise duality proposition. Walkers leaving the span through the top are
/// counted as landing above `y`; by monotonicity the scan can then stop.
pub fn flow_inverse_by_scan(field: &ArrowField, s: f64, t: f64, y: i64) -> Result<i64> {
    let mut best: Option<i64> = None;
    for w in field.lo..=field.hi {
        match flow_eval(field, s, t, w) {
            Ok(v) if v <= y => best = Some(w),
            Ok(_) | Err(Error::SpanExceeded { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    match best {
        Some(w) => Ok(w),
        // empty set: on the half line the dual is absorbed below the wall
        None if field.lattice == Lattice::HalfLine => Ok(-1),
        None => Err(Error::Domain("no start point maps below the target".into())),
    }
}

/// `P(flow(0,t,z_i) <= z'_i for all i) = det(P_t 1_{[l, z'_j]}(z_i) - 1(i<j))`.
pub fn fdd_determinant(chain: &ChainModel, t: f64, z: &[i64], zp: &[i64]) -> Result<f64> {
    let n = z.len();
    if zp.len() != n || n == 0 {
        return Err(Error::Domain("index vectors must have equal nonzero length".into()));
    }
    if z.windows(2).any(|w| w[0] >= w[1]) || zp.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("index vectors must be strictly increasing".into()));
    }
    let p = chain.transition_matrix(t)?;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = chain.cdf(&p, z[i], zp[j]) - if i < j { 1.0 } else { 0.0 };
        }
    }
    Ok(m.determinant())
}

/// Spatial span padding for sampled fields: exponential tail bound on the
/// range of a rate-`r` walk over a window of length `len`.
pub fn span_padding(max_rate: f64, len: f64) -> i64 {
    (4.0 * (max_rate * len).sqrt()).ceil() as i64 + 16
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(seed: u64) -> ArrowField {
        let rates = families::chebyshev_rates();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_arrows(&rates, (0.0, 2.0), (0, 24), &mut rng).unwrap()
    }

    #[test]
    fn zero_rate_gives_empty_lists() {
        let rates = families::chebyshev_rates();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = sample_arrows(&rates, (0.0, 3.0), (0, 10), &mut rng).unwrap();
        assert_eq!(f.down_count(0), 0, "wall has no down arrows");
        assert!(f.up_count(0) > 0);
    }

    #[test]
    fn empirical_arrival_mean_matches_rate() {
        let rates = families::chebyshev_rates();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut total = 0usize;
        let fields = 4000;
        for _ in 0..fields {
            let f = sample_arrows(&rates, (0.0, 2.0), (3, 3), &mut rng).unwrap();
            total += f.up_count(3);
        }
        // mean = rate * window = 0.5 * 2 = 1, sd of the mean ~ 1/sqrt(fields)
        let mean = total as f64 / fields as f64;
        assert!((mean - 1.0).abs() < 3.0 / (fields as f64).sqrt());
    }

    #[test]
    fn fixed_seed_reproduces_field() {
        let a = field(5);
        let b = field(5);
        for x in 0..=24 {
            assert_eq!(a.arrows_at(x, ArrowKind::Up), b.arrows_at(x, ArrowKind::Up));
            assert_eq!(a.arrows_at(x, ArrowKind::Down), b.arrows_at(x, ArrowKind::Down));
        }
    }

    #[test]
    fn no_arrows_means_identity() {
        let rates = families::chebyshev_rates();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // vanishing window: no arrivals
        let f = sample_arrows(&rates, (0.0, 0.0), (0, 10), &mut rng).unwrap();
        for x in 0..=10 {
            assert_eq!(flow_eval(&f, 0.0, 0.0, x).unwrap(), x);
        }
    }

    #[test]
    fn coalescence_and_monotonicity() {
        for seed in 0..60 {
            let f = field(seed);
            let mut prev = i64::MIN;
            for x in 0..=12 {
                let v = flow_eval(&f, 0.0, 2.0, x).unwrap();
                assert!(v >= prev, "order broken at {x}");
                prev = v;
            }
            // two walkers from the same site stay together at all later times
            for frac in [0.5, 1.0, 2.0] {
                let a = flow_eval(&f, 0.0, frac, 4).unwrap();
                let b = flow_eval(&f, 0.0, frac, 4).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn composition_identity_on_random_fields() {
        for seed in 0..1000 {
            let f = field(seed);
            for x in [0, 3, 7] {
                let mid = flow_eval(&f, 0.0, 0.9, x).unwrap();
                let lhs = flow_eval(&f, 0.9, 2.0, mid).unwrap();
                let rhs = flow_eval(&f, 0.0, 2.0, x).unwrap();
                assert_eq!(lhs, rhs, "seed {seed} x {x}");
            }
        }
    }

    #[test]
    fn pathwise_duality_exact() {
        // sup{w: flow(w) <= y} computed by scan equals the red-arrow walk
        let mut failures = 0;
        for seed in 0..1000 {
            let f = field(seed);
            for (s, t, y) in [(0.0, 2.0, 5i64), (0.3, 1.7, 8), (1.0, 2.0, 3)] {
                let scan = flow_inverse_by_scan(&f, s, t, y).unwrap();
                let dual = dual_flow_eval(&f, s, t, y).unwrap();
                if scan != dual {
                    failures += 1;
                }
            }
        }
        assert_eq!(failures, 0);
    }

    #[test]
    fn dual_flow_identity_on_empty_field() {
        let rates = families::chebyshev_rates();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = sample_arrows(&rates, (0.0, 0.0), (0, 8), &mut rng).unwrap();
        for y in 0..=8 {
            assert_eq!(dual_flow_eval(&f, 0.0, 0.0, y).unwrap(), y);
        }
    }

    #[test]
    fn red_arrow_intensity_is_dual_rate() {
        // red up arrows at x arrive at rate death(x+1) = dual birth rate
        let rates = families::chebyshev_rates();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut count = 0usize;
        let fields = 4000;
        for _ in 0..fields {
            let f = sample_arrows(&rates, (0.0, 2.0), (0, 6), &mut rng).unwrap();
            count += f.down_count(3); // red up at 2
        }
        let mean = count as f64 / fields as f64;
        let expect = rates.siegmund_dual().birth(2) * 2.0;
        assert!((mean - expect).abs() < 3.0 / (fields as f64).sqrt() + 0.02);
    }

    #[test]
    fn fdd_single_point_is_cdf() {
        let chain = ChainModel::new(families::chebyshev_rates(), 50).unwrap();
        let p = chain.transition_matrix(0.7).unwrap();
        let det = fdd_determinant(&chain, 0.7, &[2], &[4]).unwrap();
        assert!((det - chain.cdf(&p, 2, 4)).abs() < 1e-14);
    }

    #[test]
    fn fdd_at_time_zero_is_one() {
        let chain = ChainModel::new(families::chebyshev_rates(), 50).unwrap();
        let det = fdd_determinant(&chain, 0.0, &[0, 3], &[0, 3]).unwrap();
        assert!((det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fdd_marginalizes_consistently() {
        // pushing z'_2 to the window top reduces n = 2 to n = 1
        let chain = ChainModel::new(families::chebyshev_rates(), 60).unwrap();
        let top = 59;
        let two = fdd_determinant(&chain, 0.5, &[0, 3], &[1, top]).unwrap();
        let one = fdd_determinant(&chain, 0.5, &[0], &[1]).unwrap();
        assert!((two - one).abs() < 1e-10, "{two} vs {one}");
    }

    #[test]
    fn fdd_matches_monte_carlo() {
        let rates = families::chebyshev_rates();
        let chain = ChainModel::new(rates.clone(), 60).unwrap();
        let t = 0.5;
        let target = fdd_determinant(&chain, t, &[0, 3], &[1, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let reps = 20_000;
        let mut hits = 0usize;
        for _ in 0..reps {
            let f = sample_arrows(&rates, (0.0, t), (0, 20), &mut rng).unwrap();
            let a = flow_eval(&f, 0.0, t, 0).unwrap();
            let b = flow_eval(&f, 0.0, t, 3).unwrap();
            if a <= 1 && b <= 4 {
                hits += 1;
            }
        }
        let est = hits as f64 / reps as f64;
        let se = (target * (1.0 - target) / reps as f64).sqrt();
        assert!((est - target).abs() < 3.0 * se, "est {est} target {target}");
    }
}
