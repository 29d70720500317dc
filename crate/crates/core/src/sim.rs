//! Seeded Monte Carlo simulation of shielded decision streams.
//!
//! # Random stream
//!
//! Run `i` of a simulation with seed `s` draws from
//! `ChaCha8Rng::seed_from_u64(s)` with `set_stream(i)`. Every step consumes
//! exactly two `u64` words, whatever the shield does:
//!
//! 1. `w0` selects the input. With `u = (w0 >> 11) * 2^-53`, the input is
//!    the first entry of θ in canonical order (group, recommendation, cost
//!    index) whose cumulative probability exceeds `u`; entries with zero
//!    mass are never selected.
//! 2. `w1` draws the ground truth when θ carries one:
//!    `z = (w1 >> 11) * 2^-53 < P(z = 1 | g, r)`.
//!
//! Shielded and unshielded runs with the same seed therefore see the same
//! inputs and ground truths step by step.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::distribution::{InputDistribution, ZERO_MASS};
use crate::formats::theta_digest;
use crate::model::{within, Decision, InputEvent, Property, StepRecord};
use crate::periodic::{BoundaryReport, PeriodicError, PeriodicShield};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("shield was built for θ digest {shield}, simulation θ has digest {theta}")]
    ThetaMismatch { shield: String, theta: String },
    #[error("equal opportunity simulation needs ground-truth probabilities in θ")]
    MissingGroundTruth,
    #[error(transparent)]
    Periodic(#[from] PeriodicError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub runs: u32,
    /// Must equal the shield's period length.
    pub horizon: u32,
    pub periods: u32,
    pub keep_traces: bool,
    /// Also run the pass-through shield on the same random stream.
    pub baseline: bool,
}

/// Per-run outcome. Utility fields are absent when θ has no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub run: u32,
    /// Bias of each period on its own.
    pub period_bias: Vec<f64>,
    /// Bias of the whole prefix at each boundary.
    pub cumulative_bias: Vec<f64>,
    pub cost: f64,
    pub interventions: u32,
    /// Some cumulative boundary bias exceeds κ (with the shared threshold
    /// slack).
    pub violated: bool,
    pub assumption: Vec<Option<bool>>,
    pub fallback: Vec<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utility: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_utility: Option<f64>,
    /// Baseline utility minus shielded utility.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utility_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_violated: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub reports: Vec<BoundaryReport>,
    pub trace: Option<Vec<StepRecord>>,
    pub baseline: Option<Box<RunOutput>>,
}

/// Inverse-CDF sampler over the canonical entry order.
#[derive(Debug, Clone)]
struct Sampler {
    cumulative: Vec<f64>,
    index: Vec<usize>,
}

impl Sampler {
    fn new(theta: &InputDistribution) -> Self {
        let mut cumulative = Vec::new();
        let mut index = Vec::new();
        let mut acc = 0.0;
        for (i, &p) in theta.probabilities().iter().enumerate() {
            if p > ZERO_MASS {
                acc += p;
                cumulative.push(acc);
                index.push(i);
            }
        }
        Self { cumulative, index }
    }

    fn pick(&self, u: f64) -> usize {
        let pos = self.cumulative.partition_point(|&c| c <= u);
        // rounding can leave u above the last cumulative value
        self.index[pos.min(self.index.len() - 1)]
    }
}

fn unit(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One sampled step: input and, when θ has one, the ground truth.
pub fn sample_step(theta: &InputDistribution, w0: u64, w1: u64) -> (InputEvent, Option<bool>) {
    let sampler = Sampler::new(theta);
    draw(theta, &sampler, w0, w1)
}

fn draw(theta: &InputDistribution, sampler: &Sampler, w0: u64, w1: u64) -> (InputEvent, Option<bool>) {
    let x = theta.input(sampler.pick(unit(w0)));
    let z = theta
        .p_positive(x.group, x.recommendation)
        .map(|q| unit(w1) < q);
    (x, z)
}

/// The random stream of run `run`.
pub fn run_rng(seed: u64, run: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    rng
}

struct Tracker {
    shield: PeriodicShield,
    kappa: f64,
    reports: Vec<BoundaryReport>,
    trace: Option<Vec<StepRecord>>,
    correct: u64,
    steps: u64,
}

impl Tracker {
    fn new(shield: PeriodicShield, keep: bool) -> Self {
        let kappa = shield.spec().kappa;
        Self {
            shield,
            kappa,
            reports: Vec::new(),
            trace: keep.then(Vec::new),
            correct: 0,
            steps: 0,
        }
    }

    fn step(&mut self, x: &InputEvent, z: Option<bool>) -> Result<(), SimError> {
        let y = self.shield.step(x, z)?;
        if let Some(z) = z {
            self.correct += (y == Decision::from_bool(z)) as u64;
        }
        self.steps += 1;
        if let Some(trace) = &mut self.trace {
            trace.push(StepRecord {
                input: *x,
                final_decision: y,
                ground_truth: z,
            });
        }
        Ok(())
    }

    fn boundary(&mut self) -> Result<(), SimError> {
        self.reports.push(self.shield.period_boundary()?);
        Ok(())
    }

    fn finish(self, run: u32, labelled: bool) -> RunOutput {
        let reports = self.reports;
        let metrics = RunMetrics {
            run,
            period_bias: reports.iter().map(|r| r.period_bias).collect(),
            cumulative_bias: reports.iter().map(|r| r.cumulative_bias).collect(),
            cost: reports.iter().map(|r| r.period_cost).sum(),
            interventions: reports.iter().map(|r| r.period_interventions).sum(),
            violated: reports.iter().any(|r| !within(r.cumulative_bias, self.kappa)),
            assumption: reports.iter().map(|r| r.assumption).collect(),
            fallback: reports.iter().map(|r| r.fallback).collect(),
            utility: (labelled && self.steps > 0).then(|| self.correct as f64 / self.steps as f64),
            baseline_utility: None,
            utility_loss: None,
            baseline_violated: None,
        };
        RunOutput {
            metrics,
            reports,
            trace: self.trace,
            baseline: None,
        }
    }
}

/// Runs `config.runs` independent streams through fresh copies of `shield`.
/// Results are ordered by run index and do not depend on thread count.
pub fn run(
    theta: &InputDistribution,
    shield: &PeriodicShield,
    config: &SimConfig,
) -> Result<Vec<RunOutput>, SimError> {
    if config.runs == 0 || config.periods == 0 {
        return Err(SimError::Config("runs and periods must be at least 1".into()));
    }
    let spec = *shield.spec();
    if spec.horizon != config.horizon {
        return Err(SimError::Config(format!(
            "shield period length {} does not match horizon {}",
            spec.horizon, config.horizon
        )));
    }
    let (expected, actual) = (theta_digest(shield.theta()), theta_digest(theta));
    if expected != actual {
        return Err(SimError::ThetaMismatch {
            shield: expected,
            theta: actual,
        });
    }
    if spec.property == Property::EqualOpportunity && theta.ground_truth().is_none() {
        return Err(SimError::MissingGroundTruth);
    }
    let labelled = theta.ground_truth().is_some();
    let sampler = Sampler::new(theta);

    (0..config.runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = run_rng(config.seed, r);
            let mut main = Tracker::new(shield.fresh(), config.keep_traces);
            let mut base = config
                .baseline
                .then(|| Tracker::new(PeriodicShield::pass_through(theta, &spec), config.keep_traces));
            for _ in 0..config.periods {
                for _ in 0..config.horizon {
                    let (w0, w1) = (rng.next_u64(), rng.next_u64());
                    let (x, z) = draw(theta, &sampler, w0, w1);
                    main.step(&x, z)?;
                    if let Some(b) = &mut base {
                        b.step(&x, z)?;
                    }
                }
                main.boundary()?;
                if let Some(b) = &mut base {
                    b.boundary()?;
                }
            }
            let mut out = main.finish(r, labelled);
            if let Some(b) = base {
                let b = b.finish(r, labelled);
                out.metrics.baseline_utility = b.metrics.utility;
                out.metrics.utility_loss = match (b.metrics.utility, out.metrics.utility) {
                    (Some(ub), Some(us)) => Some(ub - us),
                    _ => None,
                };
                out.metrics.baseline_violated = Some(b.metrics.violated);
                out.baseline = Some(Box::new(b));
            }
            Ok(out)
        })
        .collect()
}

/// Five-number summary plus mean; quartiles interpolate linearly between
/// order statistics at position `(n - 1) p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// `p`-quantile of sorted data by linear interpolation at `(n - 1) p`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Stats {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Stats {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub runs: usize,
    pub kappa: f64,
    /// Fraction of runs with some cumulative boundary bias above κ.
    pub violation_rate: f64,
    /// Fraction of period biases above κ, over all runs and periods.
    pub period_violation_rate: f64,
    pub cost: Stats,
    pub interventions: Stats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utility: Option<Stats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utility_loss: Option<Stats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_violation_rate: Option<f64>,
    /// Per period: fraction of runs whose assumption held (`None` when no
    /// run reports one).
    pub assumption_rate: Vec<Option<f64>>,
    /// Fraction of boundaries meeting κ among those whose assumption held.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fair_given_assumption: Option<f64>,
    pub fallback_rate: f64,
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Aggregates per-run metrics. Returns `None` for an empty collection.
pub fn aggregate(metrics: &[RunMetrics], kappa: f64) -> Option<Summary> {
    if metrics.is_empty() {
        return None;
    }
    let n = metrics.len();
    let violated = metrics
        .iter()
        .filter(|m| m.cumulative_bias.iter().any(|&b| !within(b, kappa)))
        .count();
    let period_biases: Vec<f64> = metrics.iter().flat_map(|m| m.period_bias.iter().copied()).collect();
    let costs: Vec<f64> = metrics.iter().map(|m| m.cost).collect();
    let interventions: Vec<f64> = metrics.iter().map(|m| m.interventions as f64).collect();
    let utility: Vec<f64> = metrics.iter().filter_map(|m| m.utility).collect();
    let loss: Vec<f64> = metrics.iter().filter_map(|m| m.utility_loss).collect();
    let baseline: Vec<bool> = metrics.iter().filter_map(|m| m.baseline_violated).collect();

    let periods = metrics.iter().map(|m| m.assumption.len()).max().unwrap_or(0);
    let assumption_rate = (0..periods)
        .map(|p| {
            let flags: Vec<bool> = metrics.iter().filter_map(|m| m.assumption.get(p).copied().flatten()).collect();
            (!flags.is_empty()).then(|| fraction(flags.iter().filter(|&&f| f).count(), flags.len()))
        })
        .collect();

    let mut held = 0;
    let mut held_fair = 0;
    for m in metrics {
        for (flag, b) in m.assumption.iter().zip(&m.cumulative_bias) {
            if *flag == Some(true) {
                held += 1;
                held_fair += within(*b, kappa) as usize;
            }
        }
    }
    let boundaries: usize = metrics.iter().map(|m| m.fallback.len()).sum();
    let fallbacks: usize = metrics.iter().map(|m| m.fallback.iter().filter(|&&f| f).count()).sum();

    Some(Summary {
        runs: n,
        kappa,
        violation_rate: fraction(violated, n),
        period_violation_rate: fraction(period_biases.iter().filter(|&&b| !within(b, kappa)).count(), period_biases.len()),
        cost: Stats::of(&costs)?,
        interventions: Stats::of(&interventions)?,
        utility: Stats::of(&utility),
        utility_loss: Stats::of(&loss),
        baseline_violation_rate: (!baseline.is_empty())
            .then(|| fraction(baseline.iter().filter(|&&v| v).count(), baseline.len())),
        assumption_rate,
        fair_given_assumption: (held > 0).then(|| fraction(held_fair, held)),
        fallback_rate: fraction(fallbacks, boundaries),
    })
}
