//! Independent ground truth for the synthesis engine and the periodic
//! constructions.
//!
//! [`exact_enumerate`] solves the bounded-horizon problem on whole traces,
//! with no counter abstraction: every prefix of every length is expanded and
//! the statistic is recomputed from the trace at each leaf. It shares only
//! the definitions in [`crate::model`] with the main engine. The remaining
//! functions are closed forms and constructive checks used by the property
//! suites.

use serde::Serialize;
use thiserror::Error;

use crate::distribution::InputDistribution;
use crate::model::{
    bias, statistic, welfare, within, CounterVector, Decision, FairnessSpec, Group, Property, StepRecord,
};
use crate::periodic::{min_balance, WelfareBounds};
use crate::synthesis::TerminalRule;

pub const MAX_EXACT_HORIZON: u32 = 8;
pub const MAX_EXACT_INPUTS: usize = 8;
/// Leaves beyond this are refused even inside the horizon/input guards.
pub const MAX_EXACT_LEAVES: u128 = 1 << 27;

/// Branch values closer than this are treated as ties when comparing
/// policies.
pub const DECISION_MARGIN: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("exact enumeration limited to T <= {MAX_EXACT_HORIZON}, |X| <= {MAX_EXACT_INPUTS} and {MAX_EXACT_LEAVES} leaves; got T={horizon}, |X|={inputs}")]
    TooLarge { horizon: u32, inputs: usize },
    #[error("equal opportunity enumeration needs ground-truth probabilities")]
    MissingGroundTruth,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("feasible sequence broke at n = {n}: x_n = {x}")]
    SequenceBroken { n: u64, x: u64 },
}

/// One step of an enumerated trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactStep {
    pub input: usize,
    pub decision: Decision,
    pub ground_truth: Option<bool>,
}

/// Outcome of [`exact_enumerate`].
#[derive(Debug, Clone)]
pub struct ExactResult {
    /// `+inf` when infeasible.
    pub optimal_cost: f64,
    pub leaves: u64,
    horizon: u32,
    n_inputs: usize,
    symbols: usize,
    eqopp: bool,
    /// Per (prefix, input): bit 0 = decision, bit 1 = branch values differ
    /// by more than [`DECISION_MARGIN`].
    records: Vec<u8>,
    level_offsets: Vec<usize>,
}

impl ExactResult {
    pub fn is_feasible(&self) -> bool {
        self.optimal_cost.is_finite()
    }

    fn decode(&self, len: usize, mut code: usize) -> Vec<ExactStep> {
        let mut steps = Vec::with_capacity(len);
        for _ in 0..len {
            let sym = code % self.symbols;
            code /= self.symbols;
            steps.push(self.symbol_step(sym));
        }
        steps
    }

    fn symbol_step(&self, sym: usize) -> ExactStep {
        if self.eqopp {
            ExactStep {
                input: sym / 4,
                decision: Decision::from_bit(((sym / 2) % 2) as u8),
                ground_truth: Some(sym % 2 == 1),
            }
        } else {
            ExactStep {
                input: sym / 2,
                decision: Decision::from_bit((sym % 2) as u8),
                ground_truth: None,
            }
        }
    }

    /// Calls `f(prefix, input, decision, decisive)` for every prefix shorter
    /// than the horizon and every input.
    pub fn visit(&self, mut f: impl FnMut(&[ExactStep], usize, Decision, bool)) {
        for len in 0..self.horizon as usize {
            let count = self.symbols.pow(len as u32);
            for code in 0..count {
                let prefix = self.decode(len, code);
                let base = (self.level_offsets[len] + code) * self.n_inputs;
                for x in 0..self.n_inputs {
                    let rec = self.records[base + x];
                    f(&prefix, x, Decision::from_bit(rec & 1), rec & 2 != 0);
                }
            }
        }
    }
}

struct Enumerator<'a> {
    theta: &'a InputDistribution,
    property: Property,
    terminal: &'a TerminalRule,
    horizon: usize,
    symbols: usize,
    level_offsets: Vec<usize>,
    records: Vec<u8>,
    leaves: u64,
    trace: Vec<StepRecord>,
    code_stack: Vec<usize>,
}

/// Leaf cost straight from the definitions in [`crate::model`].
fn leaf_value(terminal: &TerminalRule, c: &CounterVector) -> f64 {
    let ok = match *terminal {
        TerminalRule::Fair { kappa } => within(bias(c), kappa),
        TerminalRule::BoundedWelfare { l, u, n } => {
            let unbalanced = c.n_a < n || c.n_b < n;
            let bounded = [Group::A, Group::B].iter().all(|&g| match welfare(g, c) {
                None => true,
                Some(w) => within(l, w) && within(w, u),
            });
            unbalanced || bounded
        }
        TerminalRule::Buffered { accumulated, kappa } => {
            let whole = CounterVector {
                n_a: c.n_a + accumulated[0],
                n_a1: c.n_a1 + accumulated[1],
                n_b: c.n_b + accumulated[2],
                n_b1: c.n_b1 + accumulated[3],
                stage: c.stage,
            };
            within(bias(&whole), kappa)
        }
    };
    if ok {
        0.0
    } else {
        f64::INFINITY
    }
}

impl Enumerator<'_> {
    fn code(&self) -> usize {
        // little-endian base-`symbols` number of the current prefix
        self.code_stack
            .iter()
            .rev()
            .fold(0usize, |acc, &s| acc * self.symbols + s)
    }

    fn value(&mut self) -> f64 {
        let depth = self.trace.len();
        if depth == self.horizon {
            self.leaves += 1;
            let counters = statistic(self.property, &self.trace).expect("enumerated traces carry labels");
            return leaf_value(self.terminal, &counters);
        }
        let n_inputs = self.theta.n_inputs();
        let base = (self.level_offsets[depth] + self.code()) * n_inputs;
        let eqopp = self.property == Property::EqualOpportunity;
        let mut total = 0.0;
        for xi in 0..n_inputs {
            let x = self.theta.input(xi);
            let mut branch = [0.0f64; 2];
            for y in [Decision::Reject, Decision::Accept] {
                let mut v = 0.0;
                if eqopp {
                    let q = self.theta.p_positive(x.group, x.recommendation).unwrap_or(0.0);
                    for z in [false, true] {
                        let w = if z { q } else { 1.0 - q };
                        let sym = xi * 4 + y.bit() as usize * 2 + z as usize;
                        let child = self.descend(x, y, Some(z), sym);
                        if w > 0.0 {
                            v += w * child;
                        }
                    }
                } else {
                    let sym = xi * 2 + y.bit() as usize;
                    v = self.descend(x, y, None, sym);
                }
                if y != x.recommendation {
                    v += x.cost;
                }
                branch[y.bit() as usize] = v;
            }
            let agree = branch[x.recommendation.bit() as usize];
            let flip = branch[x.recommendation.flipped().bit() as usize];
            let (best, decision) = if flip < agree {
                (flip, x.recommendation.flipped())
            } else {
                (agree, x.recommendation)
            };
            let decisive = match (agree.is_finite(), flip.is_finite()) {
                (true, true) => (agree - flip).abs() > DECISION_MARGIN,
                (false, false) => false,
                _ => true,
            };
            self.records[base + xi] = decision.bit() | ((decisive as u8) << 1);
            let p = self.theta.probabilities()[xi];
            if p > 0.0 {
                total += p * best;
            }
        }
        total
    }

    fn descend(&mut self, x: crate::model::InputEvent, y: Decision, z: Option<bool>, sym: usize) -> f64 {
        self.trace.push(StepRecord {
            input: x,
            final_decision: y,
            ground_truth: z,
        });
        self.code_stack.push(sym);
        let v = self.value();
        self.code_stack.pop();
        self.trace.pop();
        v
    }
}

/// Solves the bounded-horizon shield problem by expanding every trace.
pub fn exact_enumerate(
    theta: &InputDistribution,
    spec: &FairnessSpec,
    terminal: &TerminalRule,
) -> Result<ExactResult, OracleError> {
    let n_inputs = theta.n_inputs();
    let eqopp = spec.property == Property::EqualOpportunity;
    if eqopp && theta.ground_truth().is_none() {
        return Err(OracleError::MissingGroundTruth);
    }
    let symbols = n_inputs * if eqopp { 4 } else { 2 };
    let leaves = (symbols as u128).checked_pow(spec.horizon).unwrap_or(u128::MAX);
    if spec.horizon > MAX_EXACT_HORIZON || n_inputs > MAX_EXACT_INPUTS || leaves > MAX_EXACT_LEAVES {
        return Err(OracleError::TooLarge {
            horizon: spec.horizon,
            inputs: n_inputs,
        });
    }
    let horizon = spec.horizon as usize;
    let mut level_offsets = Vec::with_capacity(horizon + 1);
    let mut acc = 0usize;
    for len in 0..=horizon {
        level_offsets.push(acc);
        acc += symbols.pow(len as u32);
    }
    let prefixes = level_offsets[horizon];
    let mut e = Enumerator {
        theta,
        property: spec.property,
        terminal,
        horizon,
        symbols,
        level_offsets: level_offsets.clone(),
        records: vec![0u8; prefixes * n_inputs],
        leaves: 0,
        trace: Vec::with_capacity(horizon),
        code_stack: Vec::with_capacity(horizon),
    };
    let optimal_cost = e.value();
    Ok(ExactResult {
        optimal_cost,
        leaves: e.leaves,
        horizon: spec.horizon,
        n_inputs,
        symbols,
        eqopp,
        records: e.records,
        level_offsets,
    })
}

/// Number of `(stage, counters)` states for stages `0..=T`, from the
/// binomial closed forms: `C(T+4, 4)` for demographic parity and
/// `C(T+5, 5)` for equal opportunity.
pub fn lattice_states_closed_form(property: Property, horizon: u32) -> u128 {
    let t = horizon as u128;
    match property {
        Property::DemographicParity => (t + 1) * (t + 2) * (t + 3) * (t + 4) / 24,
        Property::EqualOpportunity => (t + 1) * (t + 2) * (t + 3) * (t + 4) * (t + 5) / 120,
    }
}

/// Two period statistics whose concatenation can be less fair than each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CounterexamplePair {
    pub first: [u32; 4],
    pub second: [u32; 4],
    pub first_bias: f64,
    pub second_bias: f64,
    pub combined_bias: f64,
    /// The concatenation is strictly more biased than both halves.
    pub combination_worse: bool,
}

impl CounterexamplePair {
    fn new(first: [u32; 4], second: [u32; 4], b1: f64, b2: f64, combined: f64) -> Self {
        Self {
            first,
            second,
            first_bias: b1,
            second_bias: b2,
            combined_bias: combined,
            combination_worse: combined > b1.max(b2),
        }
    }
}

/// The degenerate pair `(1,0,T-1,0)`, `(T-1,T-1,1,1)`: both unbiased, the
/// concatenation at `1 - 2/T`. Counters are `(n_a, n_a1, n_b, n_b1)`.
pub fn counterexample_static_fair(horizon: u32) -> Result<CounterexamplePair, OracleError> {
    if horizon < 2 {
        return Err(OracleError::Argument("T must be at least 2".into()));
    }
    let t = horizon;
    Ok(CounterexamplePair::new(
        [1, 0, t - 1, 0],
        [t - 1, t - 1, 1, 1],
        0.0,
        0.0,
        1.0 - 2.0 / t as f64,
    ))
}

/// The `(T, K)` family: one acceptance per group, then all-but-one.
/// Per-period bias `(T-2K)/((T-K)K)`, combined `(T-2K)/T`.
pub fn counterexample_family(horizon: u32, k: u32) -> Result<CounterexamplePair, OracleError> {
    if k == 0 || 2 * k >= horizon {
        return Err(OracleError::Argument(format!("need 0 < K < T/2, got T={horizon}, K={k}")));
    }
    let (t, kf) = (horizon as f64, k as f64);
    let per = (t - 2.0 * kf) / ((t - kf) * kf);
    Ok(CounterexamplePair::new(
        [k, 1, horizon - k, 1],
        [horizon - k, horizon - k - 1, k, k - 1],
        per,
        per,
        (t - 2.0 * kf) / t,
    ))
}

/// Tightness family for period length `2h + 1` (`h` even): both periods
/// `h`-balanced with bias `1/(2(h+1))`, concatenation `1/(2h+1)`.
pub fn tightness_family_odd(half: u32) -> Result<CounterexamplePair, OracleError> {
    if half < 2 || !half.is_multiple_of(2) {
        return Err(OracleError::Argument("half-length must be even and >= 2".into()));
    }
    let h = half;
    let hf = h as f64;
    Ok(CounterexamplePair::new(
        [h + 1, h / 2 + 1, h, h / 2],
        [h, h / 2, h + 1, h / 2],
        1.0 / (2.0 * (hf + 1.0)),
        1.0 / (2.0 * (hf + 1.0)),
        1.0 / (2.0 * hf + 1.0),
    ))
}

/// Tightness family for period length `2h`: `(h+1,2,h-1,1)` then
/// `(h-1,1,h+1,1)`, biases `|h-3|/(h²-1)` and `2/(h²-1)`, concatenation
/// `1/(2h)`.
pub fn tightness_family_even(half: u32) -> Result<CounterexamplePair, OracleError> {
    if half < 2 {
        return Err(OracleError::Argument("half-length must be >= 2".into()));
    }
    let h = half;
    let hf = h as f64;
    let denom = hf * hf - 1.0;
    Ok(CounterexamplePair::new(
        [h + 1, 2, h - 1, 1],
        [h - 1, 1, h + 1, 1],
        (hf - 3.0).abs() / denom,
        2.0 / denom,
        1.0 / (2.0 * hf),
    ))
}

/// Half-lengths bracketing `kappa` for the odd tightness family, with the
/// thresholds `1/(2(h+1))` they realize.
pub fn tightness_bracket(kappa: f64) -> Result<[(u32, f64); 2], OracleError> {
    if !(kappa > 0.0 && kappa < 0.5) {
        return Err(OracleError::Argument("kappa must lie in (0, 1/2)".into()));
    }
    let x = (1.0 - 2.0 * kappa) / (2.0 * kappa);
    let at = |h: f64| (h as u32, 1.0 / (2.0 * (h + 1.0)));
    Ok([at(x.floor()), at(x.ceil())])
}

/// `min a_i/b_i <= sum a / sum b <= max a_i/b_i`.
pub fn mediant_check(numerators: &[f64], denominators: &[f64]) -> Result<bool, OracleError> {
    if numerators.is_empty() || numerators.len() != denominators.len() {
        return Err(OracleError::Argument("need equal, non-zero lengths".into()));
    }
    if numerators.iter().chain(denominators).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(OracleError::Argument("entries must be positive".into()));
    }
    let ratios = numerators.iter().zip(denominators).map(|(a, b)| a / b);
    let lo = ratios.clone().fold(f64::INFINITY, f64::min);
    let hi = ratios.fold(f64::NEG_INFINITY, f64::max);
    let mediant = numerators.iter().sum::<f64>() / denominators.iter().sum::<f64>();
    // relative slack for summation rounding
    let slack = 1e-12 * hi.abs().max(1.0);
    Ok(lo - slack <= mediant && mediant <= hi + slack)
}

fn ceil_snapped(v: f64) -> u64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r as u64
    } else {
        v.ceil() as u64
    }
}

/// `x_n = ceil(l * n)` for `n = N..=n_max`, checking `l <= x_n/n <= u` and
/// unit increments.
pub fn feasible_sequence(bounds: &WelfareBounds, n_max: u64) -> Result<Vec<u64>, OracleError> {
    let n_min = min_balance(bounds) as u64;
    if n_max < n_min {
        return Err(OracleError::Argument(format!("n_max {n_max} < N {n_min}")));
    }
    let mut out = Vec::with_capacity((n_max - n_min + 1) as usize);
    for n in n_min..=n_max {
        let x = ceil_snapped(bounds.lower() * n as f64);
        let ratio = x as f64 / n as f64;
        if !bounds.contains(ratio) {
            return Err(OracleError::SequenceBroken { n, x });
        }
        if let Some(&prev) = out.last() {
            if x < prev || x - prev > 1 {
                return Err(OracleError::SequenceBroken { n, x });
            }
        }
        out.push(x);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalancedProbability {
    pub probability: f64,
    pub diagnostic: Option<String>,
}

/// `P(N <= Bin(T, p) <= T - N)`.
///
/// Probabilities are built relative to the mode by the ratio
/// `P(k+1)/P(k) = (T-k)/(k+1) * p/(1-p)`, so no term overflows and far tails
/// underflow to zero harmlessly. The smaller of the inside mass and the tail
/// mass is divided by the total.
pub fn balanced_probability(horizon: u32, n: u32, p: f64) -> Result<BalancedProbability, OracleError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(OracleError::Argument(format!("p = {p} must lie in (0,1)")));
    }
    if 2 * n as u64 > horizon as u64 {
        return Ok(BalancedProbability {
            probability: 0.0,
            diagnostic: Some(format!("N = {n} exceeds T/2 = {}; no trace is balanced", horizon as f64 / 2.0)),
        });
    }
    if n == 0 {
        return Ok(BalancedProbability {
            probability: 1.0,
            diagnostic: None,
        });
    }
    let t = horizon as usize;
    let odds = p / (1.0 - p);
    let mode = (((t + 1) as f64 * p).floor() as usize).min(t);
    let mut w = vec![0.0f64; t + 1];
    w[mode] = 1.0;
    for k in mode..t {
        w[k + 1] = w[k] * (t - k) as f64 / (k + 1) as f64 * odds;
    }
    for k in (1..=mode).rev() {
        w[k - 1] = w[k] * k as f64 / (t - k + 1) as f64 / odds;
    }
    let (lo, hi) = (n as usize, t - n as usize);
    let inside: f64 = w[lo..=hi].iter().sum();
    let tails: f64 = w[..lo].iter().chain(&w[hi + 1..]).sum();
    let total = inside + tails;
    let probability = if tails < inside {
        1.0 - tails / total
    } else {
        inside / total
    };
    Ok(BalancedProbability {
        probability: probability.clamp(0.0, 1.0),
        diagnostic: None,
    })
}

/// Expected signed demographic parity after `T` i.i.d. arrivals:
/// `(p_1|a - p_1|b) * (1 - p_a^T - (1 - p_a)^T)`.
pub fn sdp_expectation(p_a: f64, p1_a: f64, p1_b: f64, horizon: u32) -> Result<f64, OracleError> {
    for (name, v) in [("p_a", p_a), ("p_1|a", p1_a), ("p_1|b", p1_b)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(OracleError::Argument(format!("{name} = {v} must lie in (0,1)")));
        }
    }
    if horizon == 0 {
        return Err(OracleError::Argument("T must be at least 1".into()));
    }
    let both_seen = 1.0 - p_a.powi(horizon as i32) - (1.0 - p_a).powi(horizon as i32);
    Ok((p1_a - p1_b) * both_seen)
}
