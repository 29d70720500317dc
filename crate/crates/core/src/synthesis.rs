//! Cost-optimal bounded-horizon shield synthesis.
//!
//! Backward induction over the counter lattice: the value of a state at
//! stage `t` is the expected cost-to-go of an optimal shield, computed from
//! the values of its children at stage `t + 1`. Stage `T` values come from a
//! [`TerminalRule`], which is the only thing the periodic constructions
//! change.
//!
//! Lattice layout. A block `s` holds every `(n_a, n_a1, n_b, n_b1)` with
//! `n_a + n_b = s`, ordered by `n_a`, then `n_a1`, then `n_b1`; it has
//! `C(s+3, 3)` members. For demographic parity stage `t` is exactly block
//! `t`. For equal opportunity stage `t` is blocks `0..=t` laid out back to
//! back, so a state keeps its index when only the stage advances (a
//! ground-truth-negative arrival).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{Diagnostic, InputDistribution, ZERO_MASS};
use crate::formats::theta_digest;
use crate::model::{bias, welfare, within, CounterVector, Decision, FairnessSpec, Group, InputEvent, Property};

/// Upper bound on decision-table entries accepted by [`synthesize`].
pub const MAX_TABLE_ENTRIES: usize = 1 << 32;

/// Optimal expected cost, or infeasibility.
///
/// Infeasibility is carried as IEEE `+inf`, which is absorbing under `+` and
/// loses every `min` against a finite value. The one unsafe operation,
/// `0 * inf`, never happens: zero-probability branches are skipped.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Value(f64);

impl Value {
    pub const ZERO: Value = Value(0.0);
    pub const INFEASIBLE: Value = Value(f64::INFINITY);

    pub fn finite(v: f64) -> Value {
        assert!(v.is_finite() && v >= 0.0, "finite value expected, got {v}");
        Value(v)
    }

    pub fn is_feasible(self) -> bool {
        self.0.is_finite()
    }

    pub fn get(self) -> Option<f64> {
        self.is_feasible().then_some(self.0)
    }

    pub fn raw(self) -> f64 {
        self.0
    }
}

/// What a stage-`T` state is worth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalRule {
    /// 0 iff `bias <= kappa`.
    Fair { kappa: f64 },
    /// 0 iff the period is not `n`-balanced, or both welfares lie in `[l, u]`.
    BoundedWelfare { l: f64, u: f64, n: u32 },
    /// 0 iff `bias(accumulated + counters) <= kappa`.
    Buffered {
        accumulated: [u32; 4],
        kappa: f64,
    },
}

impl TerminalRule {
    pub fn buffered(accumulated: &CounterVector, kappa: f64) -> TerminalRule {
        TerminalRule::Buffered {
            accumulated: accumulated.as_array(),
            kappa,
        }
    }

    pub fn evaluate(&self, counters: &CounterVector) -> Value {
        let ok = match *self {
            TerminalRule::Fair { kappa } => within(bias(counters), kappa),
            TerminalRule::BoundedWelfare { l, u, n } => {
                let balanced = counters.n_a >= n && counters.n_b >= n;
                !balanced
                    || Group::ALL.iter().all(|&g| match welfare(g, counters) {
                        Some(w) => within(l, w) && within(w, u),
                        None => true,
                    })
            }
            TerminalRule::Buffered { accumulated, kappa } => {
                let [n_a, n_a1, n_b, n_b1] = accumulated;
                let total = counters.merged(&CounterVector::eqopp(n_a, n_a1, n_b, n_b1, 0));
                within(bias(&total), kappa)
            }
        };
        if ok {
            Value::ZERO
        } else {
            Value::INFEASIBLE
        }
    }

    fn check(&self) -> Result<(), SynthesisError> {
        let bad = match *self {
            TerminalRule::Fair { kappa } | TerminalRule::Buffered { kappa, .. } => {
                !(kappa > 0.0 && kappa <= 1.0)
            }
            TerminalRule::BoundedWelfare { l, u, .. } => !(0.0 <= l && l < u && u <= 1.0),
        };
        if bad {
            Err(SynthesisError::Terminal(format!("{self:?}")))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("input distribution rejected: {0}")]
    Theta(#[from] Diagnostic),
    #[error("equal opportunity synthesis needs ground-truth probabilities in the input distribution")]
    MissingGroundTruth,
    #[error("invalid terminal rule {0}")]
    Terminal(String),
    #[error("decision table would hold {0} entries, more than supported")]
    TooLarge(u128),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LookupError {
    #[error("no decisions at stage {stage} (horizon {horizon})")]
    Stage { stage: u32, horizon: u32 },
    #[error("counters {counters:?} are not reachable at stage {stage}")]
    Unreachable { stage: u32, counters: CounterVector },
    #[error("cost {cost} is not in the distribution's cost set")]
    UnknownCost { cost: f64 },
    #[error("input index {index} out of range ({n_inputs} inputs)")]
    Input { index: usize, n_inputs: usize },
}

fn choose3(n: u64) -> u64 {
    if n < 3 {
        0
    } else {
        n * (n - 1) * (n - 2) / 6
    }
}

fn choose4(n: u64) -> u64 {
    if n < 4 {
        0
    } else {
        n * (n - 1) * (n - 2) * (n - 3) / 24
    }
}

/// The reachable counter vectors per stage, with O(1) indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    property: Property,
    horizon: u32,
    /// inner[s][n_a]: offset of the `n_a` run inside block `s`.
    inner: Vec<Vec<usize>>,
}

impl Lattice {
    pub fn new(property: Property, horizon: u32) -> Self {
        let inner = (0..=horizon as usize)
            .map(|s| {
                let mut acc = 0usize;
                (0..=s)
                    .map(|k| {
                        let off = acc;
                        acc += (k + 1) * (s - k + 1);
                        off
                    })
                    .collect()
            })
            .collect();
        Self {
            property,
            horizon,
            inner,
        }
    }

    pub fn property(&self) -> Property {
        self.property
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    fn block_len(s: u32) -> usize {
        choose3(s as u64 + 3) as usize
    }

    fn block_offset(s: u32) -> usize {
        choose4(s as u64 + 3) as usize
    }

    /// Number of states at stage `t`.
    pub fn stage_len(&self, t: u32) -> usize {
        match self.property {
            Property::DemographicParity => Self::block_len(t),
            Property::EqualOpportunity => Self::block_offset(t + 1),
        }
    }

    /// Number of `(stage, counters)` pairs for stages `0..=T`.
    pub fn total_states(&self) -> usize {
        (0..=self.horizon).map(|t| self.stage_len(t)).sum()
    }

    pub fn index(&self, t: u32, c: &CounterVector) -> Option<usize> {
        if t > self.horizon || c.stage != t || !c.is_valid(self.property) {
            return None;
        }
        let s = c.n_a + c.n_b;
        let within_block = self.inner[s as usize][c.n_a as usize]
            + (c.n_a1 * (c.n_b + 1) + c.n_b1) as usize;
        Some(match self.property {
            Property::DemographicParity => within_block,
            Property::EqualOpportunity => Self::block_offset(s) + within_block,
        })
    }

    /// States of stage `t` in index order.
    pub fn states(&self, t: u32) -> Vec<CounterVector> {
        let blocks = match self.property {
            Property::DemographicParity => t..=t,
            Property::EqualOpportunity => 0..=t,
        };
        let mut out = Vec::with_capacity(self.stage_len(t));
        for s in blocks {
            for n_a in 0..=s {
                let n_b = s - n_a;
                for n_a1 in 0..=n_a {
                    for n_b1 in 0..=n_b {
                        out.push(CounterVector::eqopp(n_a, n_a1, n_b, n_b1, t));
                    }
                }
            }
        }
        out
    }
}

/// The counter lattice of a spec; its [`Lattice::total_states`] is the count.
pub fn reachable_lattice(spec: &FairnessSpec) -> Lattice {
    Lattice::new(spec.property, spec.horizon)
}

/// Per-stage optimal values, kept only on request.
#[derive(Debug, Clone)]
pub struct ValueTable {
    lattice: Lattice,
    stages: Vec<Vec<f64>>,
}

impl ValueTable {
    pub fn value(&self, stage: u32, counters: &CounterVector) -> Option<Value> {
        let i = self.lattice.index(stage, counters)?;
        Some(Value(self.stages[stage as usize][i]))
    }

    pub fn stage_values(&self, stage: u32) -> &[f64] {
        &self.stages[stage as usize]
    }
}

/// A synthesized shield: the argmin decision for every reachable
/// `(stage, counters, input)`.
#[derive(Debug, Clone)]
pub struct ShieldTable {
    spec: FairnessSpec,
    terminal: TerminalRule,
    theta: InputDistribution,
    theta_digest: String,
    root_value: Value,
    lattice: Lattice,
    stage_offsets: Vec<usize>,
    /// Final decision bit per entry, stages `0..T` in lattice order, inputs
    /// in canonical θ order.
    decisions: Vec<u8>,
}

fn stage_offsets(lattice: &Lattice, n_inputs: usize) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(lattice.horizon as usize + 1);
    let mut acc = 0usize;
    for t in 0..lattice.horizon {
        offsets.push(acc);
        acc += lattice.stage_len(t) * n_inputs;
    }
    offsets.push(acc);
    offsets
}

impl ShieldTable {
    /// Reassembles a table from stored decisions, e.g. after loading a file.
    pub fn from_parts(
        spec: FairnessSpec,
        terminal: TerminalRule,
        theta: InputDistribution,
        root_value: Value,
        decisions: Vec<u8>,
    ) -> Result<Self, String> {
        let lattice = Lattice::new(spec.property, spec.horizon);
        let offsets = stage_offsets(&lattice, theta.n_inputs());
        let expected = *offsets.last().unwrap();
        if decisions.len() != expected {
            return Err(format!(
                "decision table has {} entries, lattice needs {expected}",
                decisions.len()
            ));
        }
        if decisions.iter().any(|&d| d > 1) {
            return Err("decision entries must be 0 or 1".into());
        }
        let theta_digest = theta_digest(&theta);
        Ok(Self {
            spec,
            terminal,
            theta,
            theta_digest,
            root_value,
            lattice,
            stage_offsets: offsets,
            decisions,
        })
    }

    pub fn spec(&self) -> &FairnessSpec {
        &self.spec
    }

    pub fn terminal(&self) -> &TerminalRule {
        &self.terminal
    }

    pub fn theta(&self) -> &InputDistribution {
        &self.theta
    }

    pub fn theta_digest(&self) -> &str {
        &self.theta_digest
    }

    pub fn root_value(&self) -> Value {
        self.root_value
    }

    pub fn is_feasible(&self) -> bool {
        self.root_value.is_feasible()
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn entry_count(&self) -> usize {
        self.decisions.len()
    }

    pub fn decisions_raw(&self) -> &[u8] {
        &self.decisions
    }

    /// Flat position of an entry.
    pub fn entry_index(
        &self,
        stage: u32,
        counters: &CounterVector,
        input_index: usize,
    ) -> Result<usize, LookupError> {
        if stage >= self.spec.horizon {
            return Err(LookupError::Stage {
                stage,
                horizon: self.spec.horizon,
            });
        }
        let n_inputs = self.theta.n_inputs();
        if input_index >= n_inputs {
            return Err(LookupError::Input {
                index: input_index,
                n_inputs,
            });
        }
        let i = self
            .lattice
            .index(stage, counters)
            .ok_or(LookupError::Unreachable {
                stage,
                counters: *counters,
            })?;
        Ok(self.stage_offsets[stage as usize] + i * n_inputs + input_index)
    }

    pub fn decide_index(
        &self,
        stage: u32,
        counters: &CounterVector,
        input_index: usize,
    ) -> Result<Decision, LookupError> {
        let e = self.entry_index(stage, counters, input_index)?;
        Ok(Decision::from_bit(self.decisions[e]))
    }

    /// The stored optimal final decision.
    pub fn decide(
        &self,
        stage: u32,
        counters: &CounterVector,
        input: &InputEvent,
    ) -> Result<Decision, LookupError> {
        let idx = self
            .theta
            .input_index(input)
            .ok_or(LookupError::UnknownCost { cost: input.cost })?;
        self.decide_index(stage, counters, idx)
    }

    /// Visits every entry in storage order.
    pub fn for_each_entry(&self, mut f: impl FnMut(u32, &CounterVector, usize, Decision)) {
        let n_inputs = self.theta.n_inputs();
        let mut pos = 0;
        for t in 0..self.spec.horizon {
            for c in self.lattice.states(t) {
                for i in 0..n_inputs {
                    f(t, &c, i, Decision::from_bit(self.decisions[pos]));
                    pos += 1;
                }
            }
        }
    }

    /// Rough resident size of the table in bytes.
    pub fn memory_estimate(&self) -> usize {
        let widest = (0..=self.spec.horizon)
            .map(|t| self.lattice.stage_len(t))
            .max()
            .unwrap_or(0);
        self.decisions.len()
            + widest * (2 * std::mem::size_of::<f64>() + std::mem::size_of::<CounterVector>())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SynthesisOptions {
    pub keep_values: bool,
}

struct PreparedInput {
    g: Group,
    r: Decision,
    cost: f64,
    p: f64,
    /// P(z = 1 | g, r); only used for equal opportunity.
    q: f64,
}

pub fn synthesize(
    theta: &InputDistribution,
    spec: &FairnessSpec,
    terminal: &TerminalRule,
) -> Result<ShieldTable, SynthesisError> {
    synthesize_with(theta, spec, terminal, SynthesisOptions::default()).map(|(t, _)| t)
}

pub fn synthesize_with(
    theta: &InputDistribution,
    spec: &FairnessSpec,
    terminal: &TerminalRule,
    options: SynthesisOptions,
) -> Result<(ShieldTable, Option<ValueTable>), SynthesisError> {
    theta.validate()?;
    terminal.check()?;
    let eqopp = spec.property == Property::EqualOpportunity;
    if eqopp && theta.ground_truth().is_none() {
        return Err(SynthesisError::MissingGroundTruth);
    }
    let lattice = Lattice::new(spec.property, spec.horizon);
    let n_inputs = theta.n_inputs();
    let entries: u128 = (0..spec.horizon)
        .map(|t| lattice.stage_len(t) as u128 * n_inputs as u128)
        .sum();
    if entries > MAX_TABLE_ENTRIES as u128 {
        return Err(SynthesisError::TooLarge(entries));
    }

    let inputs: Vec<PreparedInput> = (0..n_inputs)
        .map(|i| {
            let x = theta.input(i);
            let p = theta.probabilities()[i];
            PreparedInput {
                g: x.group,
                r: x.recommendation,
                cost: x.cost,
                p: if p < ZERO_MASS { 0.0 } else { p },
                q: theta.p_positive(x.group, x.recommendation).unwrap_or(0.0),
            }
        })
        .collect();

    let offsets = stage_offsets(&lattice, n_inputs);
    let mut decisions = vec![0u8; *offsets.last().unwrap()];
    let horizon = spec.horizon;

    let mut next: Vec<f64> = lattice
        .states(horizon)
        .par_iter()
        .map(|c| terminal.evaluate(c).raw())
        .collect();
    let mut kept: Vec<Vec<f64>> = Vec::new();
    if options.keep_values {
        kept.push(next.clone());
    }

    for t in (0..horizon).rev() {
        let states = lattice.states(t);
        let mut cur = vec![0.0f64; states.len()];
        let stage_decisions = &mut decisions[offsets[t as usize]..offsets[t as usize + 1]];
        let next_ref = &next;
        let lat = &lattice;
        let inputs = &inputs;
        states
            .par_iter()
            .zip(cur.par_iter_mut())
            .zip(stage_decisions.par_chunks_mut(n_inputs))
            .for_each(|((c, value), out)| {
                // children reached by a positive (or, for DP, any) arrival
                let mut with = [[0.0f64; 2]; 2];
                for g in Group::ALL {
                    for y in [Decision::Reject, Decision::Accept] {
                        let child = c.with_member(g, y);
                        let i = lat.index(t + 1, &child).expect("child in lattice");
                        with[g.index()][y.bit() as usize] = next_ref[i];
                    }
                }
                let unchanged = if eqopp {
                    next_ref[lat.index(t, c).expect("state in lattice")]
                } else {
                    0.0
                };
                let mut v = 0.0f64;
                for (x, slot) in inputs.iter().zip(out.iter_mut()) {
                    let branch = |y: Decision| -> f64 {
                        let pos = with[x.g.index()][y.bit() as usize];
                        if !eqopp {
                            return pos;
                        }
                        let mut e = 0.0;
                        if x.q > 0.0 {
                            e += x.q * pos;
                        }
                        if x.q < 1.0 {
                            e += (1.0 - x.q) * unchanged;
                        }
                        e
                    };
                    let agree = branch(x.r);
                    let flip = branch(x.r.flipped()) + x.cost;
                    let (best, y) = if flip < agree {
                        (flip, x.r.flipped())
                    } else {
                        (agree, x.r)
                    };
                    *slot = y.bit();
                    if x.p > 0.0 {
                        v += x.p * best;
                    }
                }
                *value = v;
            });
        if options.keep_values {
            kept.push(cur.clone());
        }
        next = cur;
    }

    let root_value = Value(next[0]);
    let values = options.keep_values.then(|| {
        kept.reverse();
        ValueTable {
            lattice: lattice.clone(),
            stages: kept,
        }
    });
    let table = ShieldTable {
        spec: *spec,
        terminal: terminal.clone(),
        theta: theta.clone(),
        theta_digest: theta_digest(theta),
        root_value,
        lattice,
        stage_offsets: offsets,
        decisions,
    };
    Ok((table, values))
}
