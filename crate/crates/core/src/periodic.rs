//! Periodic shields: fairness at every multiple of the period `T`.
//!
//! Static-Fair and Static-BW reuse one synthesized table in every period
//! (counters restart at each boundary). Dynamic resynthesizes at each
//! boundary with the history folded into the terminal rule, and falls back
//! to passing recommendations through for one period when no shield can
//! guarantee fairness against every continuation.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::distribution::InputDistribution;
use crate::model::{
    bias, update_counters, welfare, within, CounterVector, Decision, FairnessSpec, Group, InputEvent, ModelError,
};
use crate::synthesis::{synthesize, LookupError, ShieldTable, SynthesisError, TerminalRule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PeriodicError {
    #[error("period of length {horizon} is complete; call period_boundary first")]
    MissedBoundary { horizon: u32 },
    #[error("period boundary after {steps} of {horizon} steps")]
    IncompletePeriod { steps: u32, horizon: u32 },
    #[error("welfare bounds need 0 <= l < u <= 1, got l={l}, u={u}")]
    Bounds { l: f64, u: f64 },
    #[error("a buffered terminal rule cannot seed a periodic shield")]
    UnsupportedTerminal,
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

/// Welfare bounds `0 <= l < u <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WelfareBounds {
    l: f64,
    u: f64,
}

impl WelfareBounds {
    pub fn new(l: f64, u: f64) -> Result<Self, PeriodicError> {
        if l.is_finite() && u.is_finite() && 0.0 <= l && l < u && u <= 1.0 {
            Ok(Self { l, u })
        } else {
            Err(PeriodicError::Bounds { l, u })
        }
    }

    pub fn lower(&self) -> f64 {
        self.l
    }

    pub fn upper(&self) -> f64 {
        self.u
    }

    pub fn width(&self) -> f64 {
        self.u - self.l
    }

    pub fn contains(&self, w: f64) -> bool {
        within(self.l, w) && within(w, self.u)
    }
}

/// `ceil(1 / (u - l))`, the smallest balance level at which a bounded-welfare
/// shield is guaranteed to exist.
///
/// The reciprocal is snapped to the nearest integer when within 1e-9 of it,
/// so e.g. `(0.1, 0.3)` gives 5 despite `0.3 - 0.1 < 0.2` in binary.
pub fn min_balance(bounds: &WelfareBounds) -> u32 {
    let x = 1.0 / bounds.width();
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as u32
    } else {
        x.ceil() as u32
    }
}

/// Both group denominators reach `n`.
pub fn check_balanced(period: &CounterVector, n: u32) -> bool {
    period.n_a >= n && period.n_b >= n
}

/// `1/den_a + 1/den_b <= kappa + bias(accumulated)`, with denominators taken
/// from the totals at the end of the period. False on a zero denominator.
pub fn check_dynamic_assumption(accumulated: &CounterVector, period_end: &CounterVector, kappa: f64) -> bool {
    if period_end.n_a == 0 || period_end.n_b == 0 {
        return false;
    }
    let lhs = 1.0 / period_end.n_a as f64 + 1.0 / period_end.n_b as f64;
    within(lhs, kappa + bias(accumulated))
}

/// Bounded-horizon table whose stage-`T` rule is the bounded-welfare one.
pub fn synthesize_static_bw(
    theta: &InputDistribution,
    spec: &FairnessSpec,
    bounds: &WelfareBounds,
) -> Result<ShieldTable, SynthesisError> {
    let rule = TerminalRule::BoundedWelfare {
        l: bounds.l,
        u: bounds.u,
        n: min_balance(bounds),
    };
    synthesize(theta, spec, &rule)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeriodicKind {
    StaticFair,
    StaticBw,
    Dynamic,
    /// Never intervenes; the unshielded baseline.
    PassThrough,
}

impl PeriodicKind {
    pub fn parse(s: &str) -> Option<PeriodicKind> {
        match s {
            "static-fair" => Some(PeriodicKind::StaticFair),
            "static-bw" => Some(PeriodicKind::StaticBw),
            "dynamic" => Some(PeriodicKind::Dynamic),
            "pass-through" | "none" => Some(PeriodicKind::PassThrough),
            _ => None,
        }
    }
}

/// Summary emitted at each period boundary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryReport {
    /// 1-based period number.
    pub period: u32,
    pub period_counters: [u32; 4],
    pub cumulative_counters: [u32; 4],
    pub period_bias: f64,
    pub cumulative_bias: f64,
    pub period_welfare: [Option<f64>; 2],
    pub cumulative_welfare: [Option<f64>; 2],
    pub period_cost: f64,
    pub period_interventions: u32,
    /// Whether this period met the condition under which its construction is
    /// guaranteed fair. Static-Fair requires equal denominators and Static-BW
    /// requires N-balance. Dynamic checks the buffered inequality on the
    /// realized suffix. `None` for the pass-through baseline.
    pub assumption: Option<bool>,
    /// This period ran without a shield because resynthesis was infeasible.
    pub fallback: bool,
    /// Resynthesis for the next period was infeasible (Dynamic only).
    pub next_fallback: bool,
}

/// A sequential decision stream enforcing fairness at period boundaries.
#[derive(Debug, Clone)]
pub struct PeriodicShield {
    kind: PeriodicKind,
    spec: FairnessSpec,
    bounds: Option<WelfareBounds>,
    theta: Arc<InputDistribution>,
    base: Option<Arc<ShieldTable>>,
    current: Option<Arc<ShieldTable>>,
    period_counters: CounterVector,
    accumulated: CounterVector,
    steps: u32,
    period: u32,
    period_cost: f64,
    period_interventions: u32,
}

impl PeriodicShield {
    fn with_table(
        kind: PeriodicKind,
        spec: FairnessSpec,
        bounds: Option<WelfareBounds>,
        theta: &InputDistribution,
        table: Option<Arc<ShieldTable>>,
    ) -> Self {
        Self {
            kind,
            spec,
            bounds,
            theta: Arc::new(theta.clone()),
            current: table.clone(),
            base: table,
            period_counters: CounterVector::ZERO,
            accumulated: CounterVector::ZERO,
            steps: 0,
            period: 0,
            period_cost: 0.0,
            period_interventions: 0,
        }
    }

    pub fn static_fair(theta: &InputDistribution, spec: &FairnessSpec) -> Result<Self, PeriodicError> {
        let table = synthesize(theta, spec, &TerminalRule::Fair { kappa: spec.kappa })?;
        Ok(Self::with_table(
            PeriodicKind::StaticFair,
            *spec,
            None,
            theta,
            Some(Arc::new(table)),
        ))
    }

    pub fn static_bw(
        theta: &InputDistribution,
        spec: &FairnessSpec,
        bounds: &WelfareBounds,
    ) -> Result<Self, PeriodicError> {
        let table = synthesize_static_bw(theta, spec, bounds)?;
        Ok(Self::with_table(
            PeriodicKind::StaticBw,
            *spec,
            Some(*bounds),
            theta,
            Some(Arc::new(table)),
        ))
    }

    /// The first period uses the plain bounded-horizon shield.
    pub fn dynamic(theta: &InputDistribution, spec: &FairnessSpec) -> Result<Self, PeriodicError> {
        let table = synthesize(theta, spec, &TerminalRule::Fair { kappa: spec.kappa })?;
        Ok(Self::with_table(
            PeriodicKind::Dynamic,
            *spec,
            None,
            theta,
            Some(Arc::new(table)),
        ))
    }

    pub fn pass_through(theta: &InputDistribution, spec: &FairnessSpec) -> Self {
        Self::with_table(PeriodicKind::PassThrough, *spec, None, theta, None)
    }

    /// Wraps an existing table: a `Fair` table repeats as Static-Fair, a
    /// `BoundedWelfare` one as Static-BW.
    pub fn from_table(table: ShieldTable) -> Result<Self, PeriodicError> {
        let spec = *table.spec();
        let theta = table.theta().clone();
        let (kind, bounds) = match *table.terminal() {
            TerminalRule::Fair { .. } => (PeriodicKind::StaticFair, None),
            TerminalRule::BoundedWelfare { l, u, .. } => (PeriodicKind::StaticBw, Some(WelfareBounds::new(l, u)?)),
            TerminalRule::Buffered { .. } => return Err(PeriodicError::UnsupportedTerminal),
        };
        Ok(Self::with_table(kind, spec, bounds, &theta, Some(Arc::new(table))))
    }

    /// Same shield, history cleared.
    pub fn fresh(&self) -> Self {
        Self::with_table(self.kind, self.spec, self.bounds, &self.theta, self.base.clone())
    }

    pub fn kind(&self) -> PeriodicKind {
        self.kind
    }

    pub fn spec(&self) -> &FairnessSpec {
        &self.spec
    }

    pub fn theta(&self) -> &InputDistribution {
        &self.theta
    }

    pub fn base_table(&self) -> Option<&ShieldTable> {
        self.base.as_deref()
    }

    pub fn accumulated(&self) -> &CounterVector {
        &self.accumulated
    }

    pub fn period_counters(&self) -> &CounterVector {
        &self.period_counters
    }

    /// Decides one arrival. The ground truth is folded into the counters
    /// after the decision is made; it is required for equal opportunity.
    pub fn step(&mut self, input: &InputEvent, ground_truth: Option<bool>) -> Result<Decision, PeriodicError> {
        if self.steps == self.spec.horizon {
            return Err(PeriodicError::MissedBoundary {
                horizon: self.spec.horizon,
            });
        }
        let decision = match &self.current {
            Some(table) => table.decide(self.steps, &self.period_counters, input)?,
            None => input.recommendation,
        };
        self.period_counters = update_counters(
            self.spec.property,
            &self.period_counters,
            input,
            decision,
            ground_truth,
        )?;
        if decision != input.recommendation {
            self.period_cost += input.cost;
            self.period_interventions += 1;
        }
        self.steps += 1;
        Ok(decision)
    }

    pub fn period_boundary(&mut self) -> Result<BoundaryReport, PeriodicError> {
        if self.steps != self.spec.horizon {
            return Err(PeriodicError::IncompletePeriod {
                steps: self.steps,
                horizon: self.spec.horizon,
            });
        }
        let period = self.period_counters;
        let previous = self.accumulated;
        let total = previous.merged(&period);
        let assumption = match self.kind {
            PeriodicKind::StaticFair => Some(period.n_a == period.n_b),
            PeriodicKind::StaticBw => {
                let n = min_balance(self.bounds.as_ref().expect("static-bw carries bounds"));
                Some(check_balanced(&period, n))
            }
            PeriodicKind::Dynamic => Some(check_dynamic_assumption(&previous, &total, self.spec.kappa)),
            PeriodicKind::PassThrough => None,
        };
        let fallback = self.kind == PeriodicKind::Dynamic && self.current.is_none();

        let mut next_fallback = false;
        if self.kind == PeriodicKind::Dynamic {
            let rule = TerminalRule::buffered(&total, self.spec.kappa);
            let table = synthesize(&self.theta, &self.spec, &rule)?;
            if table.is_feasible() {
                self.current = Some(Arc::new(table));
            } else {
                self.current = None;
                next_fallback = true;
            }
        }

        self.period += 1;
        let report = BoundaryReport {
            period: self.period,
            period_counters: period.as_array(),
            cumulative_counters: total.as_array(),
            period_bias: bias(&period),
            cumulative_bias: bias(&total),
            period_welfare: [welfare(Group::A, &period), welfare(Group::B, &period)],
            cumulative_welfare: [welfare(Group::A, &total), welfare(Group::B, &total)],
            period_cost: self.period_cost,
            period_interventions: self.period_interventions,
            assumption,
            fallback,
            next_fallback,
        };
        self.accumulated = total;
        self.period_counters = CounterVector::ZERO;
        self.steps = 0;
        self.period_cost = 0.0;
        self.period_interventions = 0;
        Ok(report)
    }
}
