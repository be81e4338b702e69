//! Push-block dynamics: the two-level block-determinant kernels and their
//! rate tables, the event-driven multilevel simulator of the alternating
//! construction, and the brute-force generator/uniformization oracle.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::chain::{ChainModel, RateSpec};
use crate::error::{Error, Result};
use crate::interlacing::{
    interlace, ChamberPoint, InterlaceKind, InterlacingPattern, LevelLabel,
};

/// A two-level configuration `(x, y)` with `y` the autonomous lower level.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TwoLevelState {
    pub kind: InterlaceKind,
    pub x: Vec<i64>,
    pub y: Vec<i64>,
}

impl TwoLevelState {
    pub fn new(kind: InterlaceKind, x: Vec<i64>, y: Vec<i64>) -> Result<Self> {
        if !interlace(kind, &x, &y)? {
            return Err(Error::Domain(format!("({x:?}, {y:?}) do not interlace")));
        }
        Ok(TwoLevelState { kind, x, y })
    }
}

/// Outcome of a single two-level transition.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TwoLevelTarget {
    To(TwoLevelState),
    /// The cemetery: a `y` move broke the `y`-level chamber.
    Killed,
}

/// All off-diagonal transitions of the raw (killed) push-block generator from
/// `state`, with their rates, straight from the rate tables: free `x` jumps
/// when admissible, `y` jumps with simultaneous pushes, killing moves to the
/// cemetery. Blocked moves simply do not appear (rate zero).
pub fn two_level_transitions(
    rates: &RateSpec,
    state: &TwoLevelState,
) -> Result<Vec<(TwoLevelTarget, f64)>> {
    let dual = rates.siegmund_dual();
    // x-level rates: primal on W^{n,n+1}, dual on W^{n,n}; y-level the other way
    let (x_rates, y_rates) = match state.kind {
        InterlaceKind::NNPlusOne => (rates.clone(), dual),
        InterlaceKind::NN => (dual, rates.clone()),
    };
    let (xb, xd) = (|z| x_rates.birth(z), |z| x_rates.death(z));
    let (yb, yd) = (|z| y_rates.birth(z), |z| y_rates.death(z));
    let mut out = Vec::new();
    let (x, y) = (&state.x, &state.y);
    let n = y.len();

    // free x moves, suppressed when blocked by y
    for i in 0..x.len() {
        let up_blocked = match state.kind {
            InterlaceKind::NNPlusOne => i < n && x[i] == y[i],
            InterlaceKind::NN => i + 1 < n && x[i] + 1 == y[i + 1],
        };
        let down_blocked = match state.kind {
            InterlaceKind::NNPlusOne => i >= 1 && x[i] == y[i - 1] + 1,
            InterlaceKind::NN => x[i] == y[i],
        };
        let rb = xb(x[i]);
        if rb > 0.0 && !up_blocked {
            let mut nx = x.clone();
            nx[i] += 1;
            out.push((
                TwoLevelTarget::To(TwoLevelState {
                    kind: state.kind,
                    x: nx,
                    y: y.clone(),
                }),
                rb,
            ));
        }
        let rd = if x[i] == 0 && state.kind == InterlaceKind::NNPlusOne {
            0.0 // primal x-level reflects at the wall
        } else {
            xd(x[i])
        };
        if rd > 0.0 && !down_blocked {
            let mut nx = x.clone();
            nx[i] -= 1;
            out.push((
                TwoLevelTarget::To(TwoLevelState {
                    kind: state.kind,
                    x: nx,
                    y: y.clone(),
                }),
                rd,
            ));
        }
    }

    // y moves: free, pushing, or killing
    for i in 0..n {
        // up
        let rb = yb(y[i]);
        if rb > 0.0 {
            if i + 1 < n && y[i] + 1 == y[i + 1] {
                out.push((TwoLevelTarget::Killed, rb));
            } else {
                let mut ny = y.clone();
                ny[i] += 1;
                let mut nx = x.clone();
                match state.kind {
                    InterlaceKind::NNPlusOne => {
                        if nx[i + 1] == y[i] + 1 {
                            nx[i + 1] += 1;
                        }
                    }
                    InterlaceKind::NN => {
                        if nx[i] == y[i] {
                            nx[i] += 1;
                        }
                    }
                }
                out.push((
                    TwoLevelTarget::To(TwoLevelState {
                        kind: state.kind,
                        x: nx,
                        y: ny,
                    }),
                    rb,
                ));
            }
        }
        // down
        let rd = if y[i] == 0 && state.kind == InterlaceKind::NN {
            0.0 // primal y-level reflects at the wall
        } else {
            yd(y[i])
        };
        if rd > 0.0 {
            let kills = (i >= 1 && y[i] == y[i - 1] + 1)
                || (i == 0 && y[0] == 0 && state.kind == InterlaceKind::NNPlusOne);
            if kills {
                out.push((TwoLevelTarget::Killed, rd));
            } else {
                let mut ny = y.clone();
                ny[i] -= 1;
                let mut nx = x.clone();
                match state.kind {
                    InterlaceKind::NNPlusOne => {
                        if nx[i] == y[i] {
                            nx[i] -= 1;
                        }
                    }
                    InterlaceKind::NN => {
                        if i >= 1 && nx[i - 1] == y[i] - 1 {
                            nx[i - 1] -= 1;
                        }
                    }
                }
                out.push((
                    TwoLevelTarget::To(TwoLevelState {
                        kind: state.kind,
                        x: nx,
                        y: ny,
                    }),
                    rd,
                ));
            }
        }
    }
    Ok(out)
}

/// Rate of one specific transition (zero when not a legal single event).
pub fn pushblock_rate(
    rates: &RateSpec,
    state: &TwoLevelState,
    target: &TwoLevelTarget,
) -> Result<f64> {
    Ok(two_level_transitions(rates, state)?
        .into_iter()
        .filter(|(t, _)| t == target)
        .map(|(_, r)| r)
        .sum())
}

/// Total exit rate (minus the diagonal entry of the generator).
pub fn total_exit_rate(rates: &RateSpec, state: &TwoLevelState) -> Result<f64> {
    Ok(two_level_transitions(rates, state)?
        .into_iter()
        .map(|(_, r)| r)
        .sum())
}

/// Killing rate into the cemetery from `state`.
pub fn killing_rate(rates: &RateSpec, state: &TwoLevelState) -> Result<f64> {
    Ok(two_level_transitions(rates, state)?
        .into_iter()
        .filter(|(t, _)| *t == TwoLevelTarget::Killed)
        .map(|(_, r)| r)
        .sum())
}

/// Precomputed matrix exponentials backing the block-determinant kernel for a
/// fixed time.
pub struct TwoLevelEngine {
    chain: ChainModel,
    dual: ChainModel,
    p: DMatrix<f64>,
    ph: DMatrix<f64>,
}

impl TwoLevelEngine {
    pub fn new(rates: &RateSpec, t: f64, truncation: i64) -> Result<Self> {
        let chain = ChainModel::new(rates.clone(), truncation)?;
        let dual = ChainModel::new(rates.siegmund_dual(), truncation)?;
        let p = chain.transition_matrix(t)?;
        let ph = dual.transition_matrix(t)?;
        Ok(TwoLevelEngine { chain, dual, p, ph })
    }

    pub fn truncation(&self) -> i64 {
        self.chain.truncation()
    }

    fn p_at(&self, a: i64, b: i64) -> f64 {
        if a < 0 || b < 0 || a > self.chain.truncation() || b > self.chain.truncation() {
            return 0.0;
        }
        self.p[(self.chain.index_of(a), self.chain.index_of(b))]
    }

    fn ph_at(&self, a: i64, b: i64) -> f64 {
        // the dual killed below the wall never returns from -1
        if a < 0 || b < 0 || a > self.dual.truncation() || b > self.dual.truncation() {
            return 0.0;
        }
        self.ph[(self.dual.index_of(a), self.dual.index_of(b))]
    }

    fn cdf(&self, a: i64, b: i64) -> f64 {
        self.chain.cdf(&self.p, a, b)
    }

    fn dual_tail(&self, a: i64, b: i64) -> f64 {
        self.dual.tail(&self.ph, a, b)
    }

    fn pi(&self, z: i64) -> f64 {
        self.chain.pi(z)
    }

    fn pi_hat(&self, z: i64) -> f64 {
        self.dual.pi(z)
    }

    /// The time-dependent block determinant `q_t(from, to)`.
    pub fn kernel(&self, from: &TwoLevelState, to: &TwoLevelState) -> Result<f64> {
        if from.kind != to.kind || from.x.len() != to.x.len() {
            return Err(Error::Domain("mismatched two-level states".into()));
        }
        let top = self.chain.truncation();
        let near = 8;
        for &v in from.x.iter().chain(&to.x).chain(&from.y).chain(&to.y) {
            if v > top - near {
                return Err(Error::Truncation(format!(
                    "coordinate {v} too close to the truncation {top}"
                )));
            }
        }
        let nx = from.x.len();
        let n = from.y.len();
        let dim = nx + n;
        let mut m = DMatrix::<f64>::zeros(dim, dim);
        match from.kind {
            InterlaceKind::NNPlusOne => {
                for i in 0..nx {
                    for j in 0..nx {
                        m[(i, j)] = self.p_at(from.x[i], to.x[j]);
                    }
                    for j in 0..n {
                        let ind = if j >= i { 1.0 } else { 0.0 };
                        m[(i, nx + j)] = self.pi_hat(to.y[j]) * (self.cdf(from.x[i], to.y[j]) - ind);
                    }
                }
                for i in 0..n {
                    for j in 0..nx {
                        m[(nx + i, j)] = (self.p_at(from.y[i], to.x[j])
                            - self.p_at(from.y[i] + 1, to.x[j]))
                            / self.pi_hat(from.y[i]);
                    }
                    for j in 0..n {
                        m[(nx + i, nx + j)] = self.ph_at(from.y[i], to.y[j]);
                    }
                }
            }
            InterlaceKind::NN => {
                for i in 0..nx {
                    for j in 0..nx {
                        m[(i, j)] = self.ph_at(from.x[i], to.x[j]);
                    }
                    for j in 0..n {
                        let ind = if j <= i { 1.0 } else { 0.0 };
                        m[(i, nx + j)] =
                            self.pi(to.y[j]) * (self.dual_tail(from.x[i], to.y[j]) - ind);
                    }
                }
                for i in 0..n {
                    for j in 0..nx {
                        m[(nx + i, j)] = (self.ph_at(from.y[i], to.x[j])
                            - self.ph_at(from.y[i] - 1, to.x[j]))
                            / self.pi(from.y[i]);
                    }
                    for j in 0..n {
                        m[(nx + i, nx + j)] = self.p_at(from.y[i], to.y[j]);
                    }
                }
            }
        }
        Ok(m.determinant())
    }
}

/// Central-difference residual of the backwards equation
/// `d/dt q_t = (D q_t)` at `(from, to)`.
pub fn backwards_residual(
    rates: &RateSpec,
    from: &TwoLevelState,
    to: &TwoLevelState,
    t: f64,
    dt: f64,
    truncation: i64,
) -> Result<f64> {
    if !(dt > 0.0 && dt <= 1e-3 && t >= dt) {
        return Err(Error::Domain("need 0 < dt <= 1e-3 and t >= dt".into()));
    }
    let plus = TwoLevelEngine::new(rates, t + dt, truncation)?;
    let minus = TwoLevelEngine::new(rates, t - dt, truncation)?;
    let mid = TwoLevelEngine::new(rates, t, truncation)?;
    let derivative = (plus.kernel(from, to)? - minus.kernel(from, to)?) / (2.0 * dt);
    let mut apply = 0.0;
    let mut exit = 0.0;
    for (target, rate) in two_level_transitions(rates, from)? {
        exit += rate;
        if let TwoLevelTarget::To(state) = target {
            apply += rate * mid.kernel(&state, to)?;
        }
    }
    apply -= exit * mid.kernel(from, to)?;
    Ok((derivative - apply).abs())
}

/// All two-level states of a kind with coordinates `<= cap`.
pub fn enumerate_two_level_states(
    kind: InterlaceKind,
    n: usize,
    cap: i64,
) -> Vec<TwoLevelState> {
    let nx = match kind {
        InterlaceKind::NNPlusOne => n + 1,
        InterlaceKind::NN => n,
    };
    let mut xs = Vec::new();
    enumerate_chambers(nx, cap, &mut Vec::new(), &mut xs);
    let mut out = Vec::new();
    for x in xs {
        for y in crate::interlacing::interlacing_below(kind, &x) {
            out.push(TwoLevelState {
                kind,
                x: x.clone(),
                y,
            });
        }
    }
    out
}

fn enumerate_chambers(n: usize, cap: i64, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
    if cur.len() == n {
        out.push(cur.clone());
        return;
    }
    let lo = cur.last().map(|&v| v + 1).unwrap_or(0);
    for v in lo..=cap {
        cur.push(v);
        enumerate_chambers(n, cap, cur, out);
        cur.pop();
    }
}

/// One logged event of the multilevel simulation: the initiating jump plus
/// every push it cascaded into, applied atomically at one timestamp.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Event {
    pub time: f64,
    pub level: u32,
    pub index: u32,
    pub dir: i8,
    pub cascade: Vec<(u32, u32, i8)>,
}

/// Replayable record of one multilevel trajectory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EventLog {
    pub depth: usize,
    pub horizon: f64,
    pub events: Vec<Event>,
}

impl EventLog {
    /// Reconstructs the pattern at `time` from the fully packed start.
    pub fn replay(&self, time: f64) -> Result<InterlacingPattern> {
        self.replay_from(&InterlacingPattern::fully_packed(self.depth), time)
    }

    pub fn replay_from(&self, init: &InterlacingPattern, time: f64) -> Result<InterlacingPattern> {
        if time < 0.0 || time > self.horizon {
            return Err(Error::Domain(format!(
                "time {time} outside the logged range [0, {}]",
                self.horizon
            )));
        }
        let mut pat = init.clone();
        for ev in &self.events {
            if ev.time > time {
                break;
            }
            for &(lvl, idx, dir) in std::iter::once(&(ev.level, ev.index, ev.dir)).chain(&ev.cascade)
            {
                pat.coords_mut(lvl as usize)[idx as usize] += dir as i64;
            }
        }
        pat.check_valid()?;
        Ok(pat)
    }

    /// Line-delimited JSON serialization, one event per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{}\n",
            serde_json::json!({"depth": self.depth, "horizon": self.horizon})
        ));
        for ev in &self.events {
            s.push_str(&serde_json::to_string(ev).expect("event serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: serde_json::Value = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Config("empty event log".into()))?,
        )
        .map_err(|e| Error::Config(format!("bad event log header: {e}")))?;
        let mut log = EventLog {
            depth: header["depth"].as_u64().unwrap_or(0) as usize,
            horizon: header["horizon"].as_f64().unwrap_or(0.0),
            events: Vec::new(),
        };
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            log.events.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::Config(format!("bad event record: {e}")))?,
            );
        }
        Ok(log)
    }
}

/// Initial condition of the multilevel run.
#[derive(Debug, Clone)]
pub enum InitialCondition {
    FullyPacked,
    Explicit(InterlacingPattern),
}

/// A legal self-move of the multilevel process, with its rate.
#[derive(Debug, Clone, Copy)]
struct SelfMove {
    level: usize,
    index: usize,
    dir: i8,
    rate: f64,
}

fn level_rates<'a>(rates: &'a RateSpec, dual: &'a RateSpec, rank: usize) -> &'a RateSpec {
    if rank % 2 == 0 {
        rates
    } else {
        dual
    }
}

fn enumerate_self_moves(
    pattern: &InterlacingPattern,
    rates: &RateSpec,
    dual: &RateSpec,
) -> Vec<SelfMove> {
    let mut moves = Vec::new();
    for r in 0..pattern.depth() {
        let level_rate = level_rates(rates, dual, r);
        let x = pattern.level(r).coords();
        let below = if r > 0 {
            Some(pattern.level(r - 1).coords())
        } else {
            None
        };
        let kind = LevelLabel::from_rank(r as u32).kind_below();
        for i in 0..x.len() {
            for dir in [1i8, -1] {
                let mut rate = if dir == 1 {
                    level_rate.birth(x[i])
                } else if x[i] == 0 && r % 2 == 0 {
                    0.0 // primal levels reflect at the wall
                } else {
                    level_rate.death(x[i])
                };
                if rate <= 0.0 {
                    continue;
                }
                if let Some(y) = below {
                    let blocked = match (kind, dir) {
                        (InterlaceKind::NNPlusOne, 1) => i < y.len() && x[i] == y[i],
                        (InterlaceKind::NNPlusOne, -1) => i >= 1 && x[i] == y[i - 1] + 1,
                        (InterlaceKind::NN, 1) => i + 1 < y.len() + 1 && i + 1 <= y.len() - 1 && x[i] + 1 == y[i + 1],
                        (InterlaceKind::NN, -1) => x[i] == y[i],
                        _ => unreachable!(),
                    };
                    if blocked {
                        rate = 0.0;
                    }
                }
                if rate > 0.0 {
                    moves.push(SelfMove {
                        level: r,
                        index: i,
                        dir,
                        rate,
                    });
                }
            }
        }
    }
    moves
}

/// Applies a move and propagates pushes upward; returns the cascade
/// (excluding the initiating move itself).
fn apply_with_cascade(
    pattern: &mut InterlacingPattern,
    level: usize,
    index: usize,
    dir: i8,
) -> Vec<(u32, u32, i8)> {
    let mut cascade = Vec::new();
    let mut r = level;
    let mut k = index;
    loop {
        let pre = pattern.level(r).coords()[k];
        pattern.coords_mut(r)[k] += dir as i64;
        if r != level {
            cascade.push((r as u32, k as u32, dir));
        }
        if r + 1 >= pattern.depth() {
            break;
        }
        let kind = LevelLabel::from_rank(r as u32 + 1).kind_below();
        let upper = pattern.level(r + 1).coords();
        let next = match (kind, dir) {
            (InterlaceKind::NNPlusOne, 1) if upper[k + 1] == pre + 1 => Some(k + 1),
            (InterlaceKind::NNPlusOne, -1) if upper[k] == pre => Some(k),
            (InterlaceKind::NN, 1) if upper[k] == pre => Some(k),
            (InterlaceKind::NN, -1) if k >= 1 && upper[k - 1] == pre - 1 => Some(k - 1),
            _ => None,
        };
        match next {
            Some(nk) => {
                r += 1;
                k = nk;
            }
            None => break,
        }
    }
    cascade
}

const EXPLOSION_GUARD: u64 = 10_000_000;

/// Event-driven simulation of the alternating construction: primal rates on
/// the `(k, k+1)` levels, dual rates on the `(k, k)` levels, pushes applied
/// atomically. The total active rate is recomputed after every event
/// (position-dependent rates invalidate per-particle clocks; memorylessness
/// makes the recomputation exact).
pub fn simulate_multilevel(
    rates: &RateSpec,
    depth: usize,
    horizon: f64,
    init: InitialCondition,
    rng: &mut impl Rng,
) -> Result<(InterlacingPattern, EventLog)> {
    if depth == 0 {
        return Err(Error::Domain("depth must be positive".into()));
    }
    let mut pattern = match init {
        InitialCondition::FullyPacked => InterlacingPattern::fully_packed(depth),
        InitialCondition::Explicit(p) => {
            if p.depth() != depth {
                return Err(Error::Domain("initial pattern depth mismatch".into()));
            }
            p.check_valid()?;
            p
        }
    };
    let dual = rates.siegmund_dual();
    let mut log = EventLog {
        depth,
        horizon,
        events: Vec::new(),
    };
    let mut t = 0.0;
    let mut events = 0u64;
    loop {
        let moves = enumerate_self_moves(&pattern, rates, &dual);
        let total: f64 = moves.iter().map(|m| m.rate).sum();
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
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = moves[moves.len() - 1];
        for m in &moves {
            pick -= m.rate;
            if pick < 0.0 {
                chosen = *m;
                break;
            }
        }
        let cascade = apply_with_cascade(&mut pattern, chosen.level, chosen.index, chosen.dir);
        debug_assert!(pattern.check_valid().is_ok(), "event broke interlacing");
        log.events.push(Event {
            time: t,
            level: chosen.level as u32,
            index: chosen.index as u32,
            dir: chosen.dir,
            cascade,
        });
    }
    Ok((pattern, log))
}

const ORACLE_STATE_LIMIT: usize = 200_000;

/// Exact time-`horizon` distribution of the multilevel process on patterns
/// with all coordinates `<= cap` (jumps past the cap suppressed), computed by
/// uniformization of the full sparse generator.
pub struct PatternDistribution {
    pub states: Vec<InterlacingPattern>,
    pub probabilities: Vec<f64>,
    index: HashMap<Vec<Vec<i64>>, usize>,
}

impl PatternDistribution {
    pub fn probability_of(&self, pattern: &InterlacingPattern) -> f64 {
        let key: Vec<Vec<i64>> = pattern.levels().iter().map(|l| l.coords().to_vec()).collect();
        self.index.get(&key).map(|&i| self.probabilities[i]).unwrap_or(0.0)
    }

    /// One-point correlation: probability that position `pos` on `level` is
    /// occupied.
    pub fn rho1(&self, level: LevelLabel, pos: i64) -> f64 {
        let rank = level.rank() as usize;
        self.states
            .iter()
            .zip(&self.probabilities)
            .filter(|(s, _)| rank < s.depth() && s.level(rank).coords().contains(&pos))
            .map(|(_, p)| p)
            .sum()
    }

    /// Two-point correlation across arbitrary levels.
    pub fn rho2(&self, a: (LevelLabel, i64), b: (LevelLabel, i64)) -> f64 {
        let (ra, rb) = (a.0.rank() as usize, b.0.rank() as usize);
        self.states
            .iter()
            .zip(&self.probabilities)
            .filter(|(s, _)| {
                s.level(ra).coords().contains(&a.1) && s.level(rb).coords().contains(&b.1)
            })
            .map(|(_, p)| p)
            .sum()
    }

    /// Marginal distribution of one level.
    pub fn marginal(&self, level: LevelLabel) -> HashMap<ChamberPoint, f64> {
        let rank = level.rank() as usize;
        let mut out: HashMap<ChamberPoint, f64> = HashMap::new();
        for (s, &p) in self.states.iter().zip(&self.probabilities) {
            *out.entry(s.level(rank).clone()).or_insert(0.0) += p;
        }
        out
    }
}

fn enumerate_patterns(depth: usize, cap: i64) -> Result<Vec<InterlacingPattern>> {
    // enumerate the top level, then all interlacing towers below it
    let top_label = LevelLabel::from_rank(depth as u32 - 1);
    let mut tops = Vec::new();
    enumerate_chambers(top_label.particles(), cap, &mut Vec::new(), &mut tops);
    let mut out = Vec::new();
    for top in tops {
        let mut stack = vec![vec![top]];
        while let Some(levels_rev) = stack.pop() {
            if levels_rev.len() == depth {
                let mut levels = levels_rev.clone();
                levels.reverse();
                let levels = levels
                    .into_iter()
                    .map(ChamberPoint::new)
                    .collect::<Result<Vec<_>>>()?;
                out.push(InterlacingPattern::new(levels)?);
                if out.len() > ORACLE_STATE_LIMIT {
                    return Err(Error::OracleTooLarge {
                        states: out.len(),
                        limit: ORACLE_STATE_LIMIT,
                    });
                }
                continue;
            }
            let rank = depth - levels_rev.len();
            let kind = LevelLabel::from_rank(rank as u32).kind_below();
            let cur = levels_rev.last().unwrap();
            for y in crate::interlacing::interlacing_below(kind, cur) {
                let mut next = levels_rev.clone();
                next.push(y);
                stack.push(next);
            }
        }
    }
    Ok(out)
}

/// Builds the full truncated generator and returns the exact distribution at
/// `horizon` started from `init`.
pub fn exact_distribution(
    rates: &RateSpec,
    depth: usize,
    horizon: f64,
    cap: i64,
    init: &InterlacingPattern,
) -> Result<PatternDistribution> {
    let states = enumerate_patterns(depth, cap)?;
    let mut index = HashMap::with_capacity(states.len());
    for (i, s) in states.iter().enumerate() {
        let key: Vec<Vec<i64>> = s.levels().iter().map(|l| l.coords().to_vec()).collect();
        index.insert(key, i);
    }
    let dual = rates.siegmund_dual();
    // sparse rows of the conservative truncated generator
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); states.len()];
    let mut max_exit = 0.0_f64;
    for (si, state) in states.iter().enumerate() {
        let mut exit = 0.0;
        for m in enumerate_self_moves(state, rates, &dual) {
            let mut target = state.clone();
            apply_with_cascade(&mut target, m.level, m.index, m.dir);
            let key: Vec<Vec<i64>> = target.levels().iter().map(|l| l.coords().to_vec()).collect();
            if let Some(&ti) = index.get(&key) {
                rows[si].push((ti, m.rate));
                exit += m.rate;
            }
            // moves leaving the cap are suppressed (reflected), keeping the
            // generator conservative; the escape mass is the caller's bound
        }
        max_exit = max_exit.max(exit);
    }
    let start = {
        let key: Vec<Vec<i64>> = init.levels().iter().map(|l| l.coords().to_vec()).collect();
        *index
            .get(&key)
            .ok_or_else(|| Error::Domain("initial pattern outside the truncated space".into()))?
    };
    // uniformization
    let theta = max_exit + 0.1;
    let mut p = vec![0.0; states.len()];
    p[start] = 1.0;
    let mut out = vec![0.0; states.len()];
    let mut poisson = (-theta * horizon).exp();
    let mut acc = poisson;
    for (o, v) in out.iter_mut().zip(&p) {
        *o += poisson * v;
    }
    let mut k = 0u32;
    while acc < 1.0 - 1e-14 && k < 100_000 {
        k += 1;
        let mut q = vec![0.0; states.len()];
        for (si, row) in rows.iter().enumerate() {
            if p[si] == 0.0 {
                continue;
            }
            let exit: f64 = row.iter().map(|&(_, r)| r).sum();
            q[si] += p[si] * (1.0 - exit / theta);
            for &(ti, r) in row {
                q[ti] += p[si] * r / theta;
            }
        }
        p = q;
        poisson *= theta * horizon / k as f64;
        acc += poisson;
        for (o, v) in out.iter_mut().zip(&p) {
            *o += poisson * v;
        }
    }
    Ok(PatternDistribution {
        states,
        probabilities: out,
        index,
    })
}

/// Simulates the raw two-level process (with killing) and returns the state
/// at `horizon`, or `None` when the trajectory was absorbed at the cemetery.
pub fn simulate_two_level(
    rates: &RateSpec,
    start: &TwoLevelState,
    horizon: f64,
    rng: &mut impl Rng,
) -> Result<Option<TwoLevelState>> {
    let mut state = start.clone();
    let mut t = 0.0;
    let mut events = 0u64;
    loop {
        let transitions = two_level_transitions(rates, &state)?;
        let total: f64 = transitions.iter().map(|&(_, r)| r).sum();
        if total <= 0.0 {
            return Ok(Some(state));
        }
        t += Exp::new(total).unwrap().sample(rng);
        if t >= horizon {
            return Ok(Some(state));
        }
        events += 1;
        if events > EXPLOSION_GUARD {
            return Err(Error::Explosion { events, t });
        }
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = &transitions[transitions.len() - 1].0;
        for (target, r) in &transitions {
            pick -= r;
            if pick < 0.0 {
                chosen = target;
                break;
            }
        }
        match chosen {
            TwoLevelTarget::Killed => return Ok(None),
            TwoLevelTarget::To(s) => state = s.clone(),
        }
    }
}
