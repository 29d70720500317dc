//! Domain types shared by every other module: groups, decisions, inputs,
//! traces, counter statistics and the fairness properties evaluated on them.
//!
//! Both supported properties (demographic parity and equal opportunity) are
//! "difference of ratios" properties over the same four counters. They only
//! differ in *which* individuals feed the counters: every individual for
//! demographic parity, only individuals whose ground truth is positive for
//! equal opportunity.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack used when comparing a bias or a welfare against a threshold.
///
/// All biases are rationals with denominators bounded by the horizon, so two
/// distinct values differ by far more than this.
pub const THRESHOLD_EPS: f64 = 1e-12;

/// `value <= bound` up to [`THRESHOLD_EPS`].
#[inline]
pub fn within(value: f64, bound: f64) -> bool {
    value <= bound + THRESHOLD_EPS
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("equal opportunity update requires a ground-truth label")]
    MissingGroundTruth,
    #[error("bias threshold must lie in (0, 1], got {0}")]
    InvalidKappa(f64),
    #[error("horizon must be at least 1")]
    InvalidHorizon,
    #[error("counter overflow: stage {stage} would exceed horizon {horizon}")]
    HorizonExceeded { stage: u32, horizon: u32 },
}

/// Sensitive group. Exactly two exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    A,
    B,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::A, Group::B];

    pub fn index(self) -> usize {
        match self {
            Group::A => 0,
            Group::B => 1,
        }
    }

    pub fn from_index(i: usize) -> Group {
        if i == 0 {
            Group::A
        } else {
            Group::B
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Group::A => "a",
            Group::B => "b",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        match s {
            "a" | "A" => Some(Group::A),
            "b" | "B" => Some(Group::B),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Binary decision; `Accept` is "1".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Decision {
    Reject,
    Accept,
}

impl Decision {
    pub fn from_bit(bit: u8) -> Decision {
        if bit == 0 {
            Decision::Reject
        } else {
            Decision::Accept
        }
    }

    pub fn from_bool(accept: bool) -> Decision {
        if accept {
            Decision::Accept
        } else {
            Decision::Reject
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Decision::Reject => 0,
            Decision::Accept => 1,
        }
    }

    pub fn flipped(self) -> Decision {
        match self {
            Decision::Reject => Decision::Accept,
            Decision::Accept => Decision::Reject,
        }
    }

    pub fn is_accept(self) -> bool {
        self == Decision::Accept
    }
}

/// One arrival as observed by the shield: group, the classifier's
/// recommendation, and the price of overriding it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputEvent {
    pub group: Group,
    pub recommendation: Decision,
    pub cost: f64,
}

impl InputEvent {
    pub fn new(group: Group, recommendation: Decision, cost: f64) -> Self {
        Self {
            group,
            recommendation,
            cost,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub input: InputEvent,
    pub final_decision: Decision,
    pub ground_truth: Option<bool>,
}

impl StepRecord {
    pub fn intervened(&self) -> bool {
        self.final_decision != self.input.recommendation
    }

    /// Cost paid at this step.
    pub fn cost(&self) -> f64 {
        if self.intervened() {
            self.input.cost
        } else {
            0.0
        }
    }
}

pub type Trace = Vec<StepRecord>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Property {
    #[serde(rename = "dp")]
    DemographicParity,
    #[serde(rename = "eqopp")]
    EqualOpportunity,
}

impl Property {
    pub fn label(self) -> &'static str {
        match self {
            Property::DemographicParity => "dp",
            Property::EqualOpportunity => "eqopp",
        }
    }

    pub fn parse(s: &str) -> Option<Property> {
        match s.to_ascii_lowercase().as_str() {
            "dp" => Some(Property::DemographicParity),
            "eqopp" => Some(Property::EqualOpportunity),
            _ => None,
        }
    }

    pub fn needs_ground_truth(self) -> bool {
        self == Property::EqualOpportunity
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Counter statistic of a trace.
///
/// For demographic parity `n_g` / `n_g1` count appeared / accepted members of
/// group `g` and `stage == n_a + n_b`. For equal opportunity the same fields
/// hold the primed counters (restricted to ground-truth-positive
/// individuals) and `stage` counts every individual seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct CounterVector {
    pub n_a: u32,
    pub n_a1: u32,
    pub n_b: u32,
    pub n_b1: u32,
    pub stage: u32,
}

impl CounterVector {
    pub const ZERO: CounterVector = CounterVector {
        n_a: 0,
        n_a1: 0,
        n_b: 0,
        n_b1: 0,
        stage: 0,
    };

    /// Demographic-parity counters; the stage is implied.
    pub fn dp(n_a: u32, n_a1: u32, n_b: u32, n_b1: u32) -> Self {
        Self {
            n_a,
            n_a1,
            n_b,
            n_b1,
            stage: n_a + n_b,
        }
    }

    pub fn eqopp(n_a: u32, n_a1: u32, n_b: u32, n_b1: u32, stage: u32) -> Self {
        Self {
            n_a,
            n_a1,
            n_b,
            n_b1,
            stage,
        }
    }

    /// `(num, den)` for a group.
    pub fn ratio_parts(&self, g: Group) -> (u32, u32) {
        match g {
            Group::A => (self.n_a1, self.n_a),
            Group::B => (self.n_b1, self.n_b),
        }
    }

    pub fn denominator(&self, g: Group) -> u32 {
        self.ratio_parts(g).1
    }

    pub fn is_valid(&self, property: Property) -> bool {
        let ok = self.n_a1 <= self.n_a && self.n_b1 <= self.n_b;
        match property {
            Property::DemographicParity => ok && self.n_a + self.n_b == self.stage,
            Property::EqualOpportunity => ok && self.n_a + self.n_b <= self.stage,
        }
    }

    /// Adds one member of `g` with decision `d` to the ratio counters.
    /// The stage is advanced too.
    pub fn with_member(&self, g: Group, d: Decision) -> Self {
        let mut next = *self;
        let acc = d.is_accept() as u32;
        match g {
            Group::A => {
                next.n_a += 1;
                next.n_a1 += acc;
            }
            Group::B => {
                next.n_b += 1;
                next.n_b1 += acc;
            }
        }
        next.stage += 1;
        next
    }

    /// Counter-wise sum; statistics are additive under concatenation.
    pub fn merged(&self, other: &CounterVector) -> Self {
        Self {
            n_a: self.n_a + other.n_a,
            n_a1: self.n_a1 + other.n_a1,
            n_b: self.n_b + other.n_b,
            n_b1: self.n_b1 + other.n_b1,
            stage: self.stage + other.stage,
        }
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.n_a, self.n_a1, self.n_b, self.n_b1]
    }
}

/// Fairness requirement: property, bias threshold and horizon (or period).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FairnessSpec {
    pub property: Property,
    pub kappa: f64,
    pub horizon: u32,
}

impl FairnessSpec {
    pub fn new(property: Property, kappa: f64, horizon: u32) -> Result<Self, ModelError> {
        if !(kappa > 0.0 && kappa <= 1.0) {
            return Err(ModelError::InvalidKappa(kappa));
        }
        if horizon == 0 {
            return Err(ModelError::InvalidHorizon);
        }
        Ok(Self {
            property,
            kappa,
            horizon,
        })
    }
}

/// Welfare `num/den` of a group, `None` when nobody counted yet.
pub fn welfare(g: Group, counters: &CounterVector) -> Option<f64> {
    let (num, den) = counters.ratio_parts(g);
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Absolute difference of the group welfares; 0 if either is undefined.
pub fn bias(counters: &CounterVector) -> f64 {
    match (welfare(Group::A, counters), welfare(Group::B, counters)) {
        (Some(wa), Some(wb)) => (wa - wb).abs(),
        _ => 0.0,
    }
}

/// Signed difference `w_a - w_b`, 0 if either welfare is undefined.
pub fn signed_bias(counters: &CounterVector) -> f64 {
    match (welfare(Group::A, counters), welfare(Group::B, counters)) {
        (Some(wa), Some(wb)) => wa - wb,
        _ => 0.0,
    }
}

/// Disparate impact `w_a / w_b`. Reported as a metric only; `None` when a
/// welfare is undefined or `w_b` is zero.
pub fn disparate_impact(counters: &CounterVector) -> Option<f64> {
    let wa = welfare(Group::A, counters)?;
    let wb = welfare(Group::B, counters)?;
    if wb == 0.0 {
        None
    } else {
        Some((wa / wb).abs())
    }
}

/// Folds one decided step into the statistic.
pub fn update_counters(
    property: Property,
    counters: &CounterVector,
    input: &InputEvent,
    final_decision: Decision,
    ground_truth: Option<bool>,
) -> Result<CounterVector, ModelError> {
    match property {
        Property::DemographicParity => Ok(counters.with_member(input.group, final_decision)),
        Property::EqualOpportunity => match ground_truth {
            None => Err(ModelError::MissingGroundTruth),
            Some(true) => Ok(counters.with_member(input.group, final_decision)),
            Some(false) => Ok(CounterVector {
                stage: counters.stage + 1,
                ..*counters
            }),
        },
    }
}

/// Like [`update_counters`] but refuses to step past `horizon`.
pub fn update_counters_bounded(
    property: Property,
    horizon: u32,
    counters: &CounterVector,
    input: &InputEvent,
    final_decision: Decision,
    ground_truth: Option<bool>,
) -> Result<CounterVector, ModelError> {
    if counters.stage >= horizon {
        return Err(ModelError::HorizonExceeded {
            stage: counters.stage + 1,
            horizon,
        });
    }
    update_counters(property, counters, input, final_decision, ground_truth)
}

/// The statistic of a whole trace.
pub fn statistic(property: Property, trace: &[StepRecord]) -> Result<CounterVector, ModelError> {
    trace.iter().try_fold(CounterVector::ZERO, |c, step| {
        update_counters(
            property,
            &c,
            &step.input,
            step.final_decision,
            step.ground_truth,
        )
    })
}

/// Total intervention cost of the first `upto` steps (all steps if `None`).
pub fn trace_cost(trace: &[StepRecord], upto: Option<usize>) -> f64 {
    let n = upto.unwrap_or(trace.len()).min(trace.len());
    trace[..n].iter().map(StepRecord::cost).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(g: Group, r: Decision, c: f64, y: Decision) -> StepRecord {
        StepRecord {
            input: InputEvent::new(g, r, c),
            final_decision: y,
            ground_truth: None,
        }
    }

    #[test]
    fn bias_examples() {
        assert_eq!(bias(&CounterVector::dp(1, 0, 99, 0)), 0.0);
        assert_eq!(bias(&CounterVector::dp(0, 0, 7, 3)), 0.0);
        assert!((bias(&CounterVector::dp(100, 99, 100, 1)) - 0.98).abs() < 1e-12);
    }

    #[test]
    fn welfare_examples() {
        let c = CounterVector::dp(2, 1, 5, 0);
        assert_eq!(welfare(Group::A, &c), Some(0.5));
        assert_eq!(welfare(Group::B, &c), Some(0.0));
        assert_eq!(welfare(Group::A, &CounterVector::dp(0, 0, 5, 2)), None);
    }

    #[test]
    fn update_examples() {
        use Decision::*;
        let p = Property::DemographicParity;
        let c = update_counters(p, &CounterVector::ZERO, &InputEvent::new(Group::A, Accept, 1.0), Accept, None)
            .unwrap();
        assert_eq!(c, CounterVector::dp(1, 1, 0, 0));
        let c = update_counters(p, &c, &InputEvent::new(Group::B, Reject, 1.0), Reject, None).unwrap();
        assert_eq!(c, CounterVector::dp(1, 1, 1, 0));

        let e = Property::EqualOpportunity;
        let c = update_counters(e, &CounterVector::ZERO, &InputEvent::new(Group::A, Accept, 1.0), Accept, Some(false))
            .unwrap();
        assert_eq!(c, CounterVector::eqopp(0, 0, 0, 0, 1));
        assert_eq!(
            update_counters(e, &c, &InputEvent::new(Group::A, Accept, 1.0), Accept, None),
            Err(ModelError::MissingGroundTruth)
        );
    }

    #[test]
    fn bounded_update_refuses_past_horizon() {
        let c = CounterVector::dp(1, 0, 1, 0);
        let x = InputEvent::new(Group::A, Decision::Accept, 1.0);
        assert!(update_counters_bounded(Property::DemographicParity, 2, &c, &x, Decision::Accept, None).is_err());
        assert!(update_counters_bounded(Property::DemographicParity, 3, &c, &x, Decision::Accept, None).is_ok());
    }

    #[test]
    fn cost_examples() {
        use Decision::*;
        let fair = vec![step(Group::A, Accept, 1.0, Accept), step(Group::B, Reject, 1.0, Reject)];
        assert_eq!(trace_cost(&fair, None), 0.0);
        let one = vec![step(Group::A, Accept, 1.0, Reject)];
        assert_eq!(trace_cost(&one, None), 1.0);
        let three = vec![
            step(Group::A, Accept, 0.2, Reject),
            step(Group::B, Accept, 0.3, Accept),
            step(Group::B, Reject, 0.5, Accept),
        ];
        assert!((trace_cost(&three, None) - 0.7).abs() < 1e-12);
        assert!((trace_cost(&three, Some(2)) - 0.2).abs() < 1e-12);
        assert_eq!(trace_cost(&[], None), 0.0);
    }

    #[test]
    fn spec_validation() {
        assert!(FairnessSpec::new(Property::DemographicParity, 0.0, 10).is_err());
        assert!(FairnessSpec::new(Property::DemographicParity, 1.5, 10).is_err());
        assert!(FairnessSpec::new(Property::DemographicParity, 0.1, 0).is_err());
        assert!(FairnessSpec::new(Property::DemographicParity, 1.0, 1).is_ok());
    }

    #[test]
    fn disparate_impact_metric() {
        assert_eq!(disparate_impact(&CounterVector::dp(2, 1, 4, 1)), Some(2.0));
        assert_eq!(disparate_impact(&CounterVector::dp(2, 1, 4, 0)), None);
    }
}
