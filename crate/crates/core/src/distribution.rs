//! Input distributions over `(group, recommendation, cost)`.
//!
//! Entries are stored densely in the canonical order
//! `(a,0,c_0) .. (a,0,c_k), (a,1,c_0) .. (b,1,c_k)`; sampling and synthesis
//! both iterate in this order.

use std::io::Read;

use serde::Deserialize;
use thiserror::Error;

use crate::model::{Decision, Group, InputEvent};

/// Tolerance on the total probability mass.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Masses below this are treated as exact zeros by synthesis and sampling.
pub const ZERO_MASS: f64 = 1e-15;

/// A violated constraint found by [`InputDistribution::validate`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Diagnostic {
    #[error("cost set is empty")]
    EmptyCostSet,
    #[error("cost #{index} = {value} is negative or not finite")]
    BadCost { index: usize, value: f64 },
    #[error("cost {value} appears more than once in the cost set")]
    DuplicateCost { value: f64 },
    #[error("expected {expected} entries for the cost set, found {found}")]
    EntryCount { expected: usize, found: usize },
    #[error("probability of ({g},{r},c#{c}) is {p}, outside [0,1]")]
    ProbabilityRange { g: Group, r: u8, c: usize, p: f64 },
    #[error("probabilities sum to {sum}, not 1 (tolerance {NORMALIZATION_TOL})")]
    Normalization { sum: f64 },
    #[error("ground-truth probability of ({g},{r}) is {p}, outside [0,1]")]
    GroundTruthRange { g: Group, r: u8, p: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("invalid distribution: {0}")]
    Invalid(#[from] Diagnostic),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("missing parameter `{0}` for this construction")]
    Missing(&'static str),
    #[error("group {0} has no rows in the dataset")]
    EmptyGroup(Group),
    #[error("dataset: {0}")]
    Dataset(String),
}

/// Joint distribution θ over the input space, plus optional
/// `P(z = 1 | g, r)` for properties that need ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct InputDistribution {
    cost_set: Vec<f64>,
    probs: Vec<f64>,
    ground_truth: Option<[[f64; 2]; 2]>,
}

impl InputDistribution {
    /// Builds and validates.
    pub fn new(
        cost_set: Vec<f64>,
        probs: Vec<f64>,
        ground_truth: Option<[[f64; 2]; 2]>,
    ) -> Result<Self, Diagnostic> {
        let theta = Self::new_unchecked(cost_set, probs, ground_truth);
        theta.validate()?;
        Ok(theta)
    }

    /// No checks; pair with [`InputDistribution::validate`].
    pub fn new_unchecked(
        cost_set: Vec<f64>,
        probs: Vec<f64>,
        ground_truth: Option<[[f64; 2]; 2]>,
    ) -> Self {
        Self {
            cost_set,
            probs,
            ground_truth,
        }
    }

    pub fn validate(&self) -> Result<(), Diagnostic> {
        if self.cost_set.is_empty() {
            return Err(Diagnostic::EmptyCostSet);
        }
        for (index, &value) in self.cost_set.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Diagnostic::BadCost { index, value });
            }
            if self.cost_set[..index].contains(&value) {
                return Err(Diagnostic::DuplicateCost { value });
            }
        }
        let expected = 4 * self.cost_set.len();
        if self.probs.len() != expected {
            return Err(Diagnostic::EntryCount {
                expected,
                found: self.probs.len(),
            });
        }
        for (i, &p) in self.probs.iter().enumerate() {
            if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                let x = self.input(i);
                return Err(Diagnostic::ProbabilityRange {
                    g: x.group,
                    r: x.recommendation.bit(),
                    c: i % self.cost_set.len(),
                    p,
                });
            }
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Diagnostic::Normalization { sum });
        }
        if let Some(gt) = &self.ground_truth {
            for g in Group::ALL {
                for r in 0..2u8 {
                    let p = gt[g.index()][r as usize];
                    if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                        return Err(Diagnostic::GroundTruthRange { g, r, p });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn cost_set(&self) -> &[f64] {
        &self.cost_set
    }

    pub fn n_costs(&self) -> usize {
        self.cost_set.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.probs.len()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn index_of(&self, g: Group, r: Decision, cost_index: usize) -> usize {
        (g.index() * 2 + r.bit() as usize) * self.cost_set.len() + cost_index
    }

    pub fn prob(&self, g: Group, r: Decision, cost_index: usize) -> f64 {
        self.probs[self.index_of(g, r, cost_index)]
    }

    /// Input at a canonical index.
    pub fn input(&self, i: usize) -> InputEvent {
        let k = self.cost_set.len();
        let cell = i / k;
        InputEvent::new(
            Group::from_index(cell / 2),
            Decision::from_bit((cell % 2) as u8),
            self.cost_set[i % k],
        )
    }

    pub fn cost_index(&self, cost: f64) -> Option<usize> {
        self.cost_set.iter().position(|&c| c == cost)
    }

    /// Canonical index of an input; `None` if its cost is not declared.
    pub fn input_index(&self, x: &InputEvent) -> Option<usize> {
        self.cost_index(x.cost)
            .map(|c| self.index_of(x.group, x.recommendation, c))
    }

    pub fn ground_truth(&self) -> Option<&[[f64; 2]; 2]> {
        self.ground_truth.as_ref()
    }

    /// `P(z = 1 | g, r)`.
    pub fn p_positive(&self, g: Group, r: Decision) -> Option<f64> {
        self.ground_truth
            .map(|gt| gt[g.index()][r.bit() as usize])
    }

    pub fn with_ground_truth(mut self, gt: [[f64; 2]; 2]) -> Result<Self, Diagnostic> {
        self.ground_truth = Some(gt);
        self.validate()?;
        Ok(self)
    }

    /// Marginal probability of a group.
    pub fn group_mass(&self, g: Group) -> f64 {
        let k = self.cost_set.len();
        let start = g.index() * 2 * k;
        self.probs[start..start + 2 * k].iter().sum()
    }

    /// Expected per-step cost of the policy that accepts everybody.
    pub fn accept_all_cost(&self) -> f64 {
        (0..self.n_inputs())
            .map(|i| {
                let x = self.input(i);
                if x.recommendation == Decision::Reject {
                    self.probs[i] * x.cost
                } else {
                    0.0
                }
            })
            .sum()
    }
}

/// The four closed-form approximations of θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaKind {
    /// Recommendations equally likely, single unit cost.
    Constant,
    /// Recommendations and costs equally likely over a given cost set.
    ConstantK,
    /// Known per-group acceptance rates, single unit cost.
    Hybrid,
    /// Known per-group acceptance rates, costs uniform over a given set.
    HybridK,
}

impl ThetaKind {
    pub fn parse(s: &str) -> Option<ThetaKind> {
        match s {
            "constant" => Some(ThetaKind::Constant),
            "constant_k" | "constant-k" | "constant2" | "constant-2" => Some(ThetaKind::ConstantK),
            "hybrid" => Some(ThetaKind::Hybrid),
            "hybrid_k" | "hybrid-k" | "hybrid2" | "hybrid-2" => Some(ThetaKind::HybridK),
            _ => None,
        }
    }
}

/// Acceptance probabilities `p_{g1}` of the classifier per group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceRates {
    pub a: f64,
    pub b: f64,
}

impl AcceptanceRates {
    fn get(&self, g: Group) -> f64 {
        match g {
            Group::A => self.a,
            Group::B => self.b,
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<(), DistributionError> {
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(DistributionError::Parameter(format!("{name} = {v} is outside [0,1]")))
    }
}

fn group_prob(p_a: f64, g: Group) -> f64 {
    match g {
        Group::A => p_a,
        Group::B => 1.0 - p_a,
    }
}

pub fn build_theta(
    kind: ThetaKind,
    p_a: f64,
    acceptance: Option<AcceptanceRates>,
    cost_set: Option<&[f64]>,
) -> Result<InputDistribution, DistributionError> {
    if !(p_a.is_finite() && p_a > 0.0 && p_a < 1.0) {
        return Err(DistributionError::Parameter(format!(
            "p_a = {p_a} must lie in (0,1)"
        )));
    }
    let costs: Vec<f64> = match kind {
        ThetaKind::Constant | ThetaKind::Hybrid => vec![1.0],
        ThetaKind::ConstantK | ThetaKind::HybridK => {
            let cs = cost_set.ok_or(DistributionError::Missing("cost_set"))?;
            if cs.is_empty() {
                return Err(DistributionError::Parameter("cost set is empty".into()));
            }
            cs.to_vec()
        }
    };
    let rates = match kind {
        ThetaKind::Hybrid | ThetaKind::HybridK => {
            let rates = acceptance.ok_or(DistributionError::Missing("acceptance"))?;
            check_unit("p_a1", rates.a)?;
            check_unit("p_b1", rates.b)?;
            Some(rates)
        }
        _ => None,
    };
    let k = costs.len() as f64;
    let mut probs = Vec::with_capacity(4 * costs.len());
    for g in Group::ALL {
        let pg = group_prob(p_a, g);
        for r in [Decision::Reject, Decision::Accept] {
            let p_gr = match rates {
                None => 0.5,
                Some(rates) => {
                    let p1 = rates.get(g);
                    if r.is_accept() {
                        p1
                    } else {
                        1.0 - p1
                    }
                }
            };
            for _ in 0..costs.len() {
                probs.push(pg * p_gr / k);
            }
        }
    }
    Ok(InputDistribution::new(costs, probs, None)?)
}

/// Named presets: constant θ with the group share of a benchmark dataset.
pub const PRESETS: &[(&str, f64)] = &[
    ("adult-race", 0.098),
    ("adult-gender", 0.325),
    ("bank-age", 0.0259),
    ("compas-gender", 0.1904),
    ("compas-race", 0.6593),
    ("german-gender", 0.31),
    ("german-age", 0.19),
];

pub fn preset(name: &str) -> Option<InputDistribution> {
    let &(_, p_a) = PRESETS.iter().find(|(n, _)| *n == name)?;
    build_theta(ThetaKind::Constant, p_a, None, None).ok()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredRow {
    pub group: Group,
    pub score: f64,
    pub label: Option<bool>,
}

/// Classifier scores per individual, used by [`paired_estimate`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredDataset {
    pub rows: Vec<ScoredRow>,
}

#[derive(Deserialize)]
struct CsvRow {
    group: String,
    score: f64,
    label: Option<u8>,
}

impl ScoredDataset {
    /// Reads CSV with header `group,score[,label]`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, DistributionError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut rows = Vec::new();
        for (line, rec) in rdr.deserialize::<CsvRow>().enumerate() {
            let rec = rec.map_err(|e| DistributionError::Dataset(e.to_string()))?;
            let group = Group::parse(&rec.group).ok_or_else(|| {
                DistributionError::Dataset(format!("row {}: unknown group {:?}", line + 1, rec.group))
            })?;
            let label = match rec.label {
                None => None,
                Some(0) => Some(false),
                Some(1) => Some(true),
                Some(v) => {
                    return Err(DistributionError::Dataset(format!(
                        "row {}: label must be 0 or 1, got {v}",
                        line + 1
                    )))
                }
            };
            rows.push(ScoredRow {
                group,
                score: rec.score,
                label,
            });
        }
        Ok(Self { rows })
    }
}

/// Histogram bin of a distance from the decision threshold. Bins split
/// `[0, 0.5]` uniformly and are left-closed; the last one is closed.
pub fn bin_index(distance: f64, bins: usize) -> usize {
    let i = (distance * 2.0 * bins as f64).floor();
    if i <= 0.0 {
        0
    } else {
        (i as usize).min(bins - 1)
    }
}

/// Estimates θ from classifier scores by a per-(group, recommendation)
/// histogram of the distance `|score - 0.5|`.
///
/// The result is the joint `p_g * N_gri / N_g`. If every row carries a
/// label, `P(z=1 | g, r)` is estimated by the empirical positive rate of each
/// cell (0 for empty cells, which have no mass).
pub fn paired_estimate(
    data: &ScoredDataset,
    p_a: f64,
    bins: usize,
) -> Result<InputDistribution, DistributionError> {
    if bins == 0 {
        return Err(DistributionError::Parameter("bins must be at least 1".into()));
    }
    if !(p_a.is_finite() && p_a > 0.0 && p_a < 1.0) {
        return Err(DistributionError::Parameter(format!(
            "p_a = {p_a} must lie in (0,1)"
        )));
    }
    if data.rows.is_empty() {
        return Err(DistributionError::Dataset("dataset is empty".into()));
    }
    let labelled = data.rows.iter().filter(|r| r.label.is_some()).count();
    if labelled != 0 && labelled != data.rows.len() {
        return Err(DistributionError::Dataset(
            "either every row or no row must carry a label".into(),
        ));
    }

    // counts[g][r][bin]
    let mut counts = vec![[[0usize; 2]; 2]; bins];
    let mut positives = [[0usize; 2]; 2];
    let mut per_group = [0usize; 2];
    for row in &data.rows {
        if !(row.score.is_finite() && (0.0..=1.0).contains(&row.score)) {
            return Err(DistributionError::Dataset(format!(
                "score {} is outside [0,1]",
                row.score
            )));
        }
        let r = (row.score > 0.5) as usize;
        let bin = bin_index((row.score - 0.5).abs(), bins);
        let g = row.group.index();
        counts[bin][g][r] += 1;
        per_group[g] += 1;
        if row.label == Some(true) {
            positives[g][r] += 1;
        }
    }
    for g in Group::ALL {
        if per_group[g.index()] == 0 {
            return Err(DistributionError::EmptyGroup(g));
        }
    }

    let width = 0.5 / bins as f64;
    let cost_set: Vec<f64> = (0..bins).map(|i| (i as f64 + 0.5) * width).collect();
    let mut probs = Vec::with_capacity(4 * bins);
    for g in Group::ALL {
        let n_g = per_group[g.index()] as f64;
        let pg = group_prob(p_a, g);
        for r in 0..2 {
            for bin_counts in &counts {
                probs.push(pg * bin_counts[g.index()][r] as f64 / n_g);
            }
        }
    }
    let ground_truth = (labelled != 0).then(|| {
        let mut gt = [[0.0; 2]; 2];
        for g in 0..2 {
            for r in 0..2 {
                let n_gr: usize = counts.iter().map(|b| b[g][r]).sum();
                if n_gr > 0 {
                    gt[g][r] = positives[g][r] as f64 / n_gr as f64;
                }
            }
        }
        gt
    });
    Ok(InputDistribution::new(cost_set, probs, ground_truth)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Decision::*;
    use Group::*;

    #[test]
    fn constant_half() {
        let t = build_theta(ThetaKind::Constant, 0.5, None, None).unwrap();
        assert_eq!(t.cost_set(), &[1.0]);
        for g in Group::ALL {
            for r in [Reject, Accept] {
                assert_eq!(t.prob(g, r, 0), 0.25);
            }
        }
    }

    #[test]
    fn constant_k_adult_gender() {
        let t = build_theta(ThetaKind::ConstantK, 0.325, None, Some(&[0.125, 0.375])).unwrap();
        for r in [Reject, Accept] {
            for c in 0..2 {
                assert!((t.prob(A, r, c) - 0.08125).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hybrid_deterministic_recommender() {
        let t = build_theta(
            ThetaKind::Hybrid,
            0.5,
            Some(AcceptanceRates { a: 1.0, b: 0.0 }),
            None,
        )
        .unwrap();
        assert_eq!(t.prob(A, Accept, 0), 0.5);
        assert_eq!(t.prob(A, Reject, 0), 0.0);
        assert_eq!(t.prob(B, Accept, 0), 0.0);
        assert_eq!(t.prob(B, Reject, 0), 0.5);
    }

    #[test]
    fn builder_parameter_errors() {
        assert!(build_theta(ThetaKind::Constant, 0.0, None, None).is_err());
        assert!(build_theta(ThetaKind::Constant, 1.2, None, None).is_err());
        assert_eq!(
            build_theta(ThetaKind::Hybrid, 0.5, None, None),
            Err(DistributionError::Missing("acceptance"))
        );
        assert_eq!(
            build_theta(ThetaKind::ConstantK, 0.5, None, None),
            Err(DistributionError::Missing("cost_set"))
        );
        assert!(build_theta(
            ThetaKind::HybridK,
            0.5,
            Some(AcceptanceRates { a: 1.5, b: 0.2 }),
            Some(&[1.0])
        )
        .is_err());
    }

    #[test]
    fn validate_diagnostics() {
        let ok = build_theta(ThetaKind::Constant, 0.5, None, None).unwrap();
        assert_eq!(ok.validate(), Ok(()));
        let bad = InputDistribution::new_unchecked(vec![1.0], vec![1.2, 0.0, 0.0, 0.0], None);
        assert!(matches!(bad.validate(), Err(Diagnostic::ProbabilityRange { p, .. }) if p == 1.2));
        let short = InputDistribution::new_unchecked(vec![1.0], vec![0.25, 0.25, 0.25, 0.249], None);
        assert!(matches!(short.validate(), Err(Diagnostic::Normalization { .. })));
        let gt = InputDistribution::new_unchecked(
            vec![1.0],
            vec![0.25; 4],
            Some([[0.5, 1.5], [0.5, 0.5]]),
        );
        assert!(matches!(gt.validate(), Err(Diagnostic::GroundTruthRange { .. })));
        let dup = InputDistribution::new_unchecked(vec![1.0, 1.0], vec![0.125; 8], None);
        assert!(matches!(dup.validate(), Err(Diagnostic::DuplicateCost { .. })));
    }

    fn rows(spec: &[(Group, f64)]) -> ScoredDataset {
        ScoredDataset {
            rows: spec
                .iter()
                .map(|&(group, score)| ScoredRow {
                    group,
                    score,
                    label: None,
                })
                .collect(),
        }
    }

    #[test]
    fn paired_hand_histogram() {
        let data = rows(&[(A, 0.9), (A, 0.6), (B, 0.2), (B, 0.4)]);
        let t = paired_estimate(&data, 0.5, 2).unwrap();
        assert_eq!(t.cost_set(), &[0.125, 0.375]);
        assert_eq!(t.prob(A, Accept, 0), 0.25);
        assert_eq!(t.prob(A, Accept, 1), 0.25);
        assert_eq!(t.prob(B, Reject, 1), 0.25);
        assert_eq!(t.prob(B, Reject, 0), 0.25);
        assert_eq!(t.prob(A, Reject, 0), 0.0);
    }

    #[test]
    fn paired_single_bin() {
        let data = rows(&[(A, 0.75), (A, 0.75), (B, 0.1)]);
        let t = paired_estimate(&data, 0.3, 1).unwrap();
        assert_eq!(t.cost_set(), &[0.25]);
        assert!((t.prob(A, Accept, 0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn paired_threshold_is_strict() {
        let data = rows(&[(A, 0.5), (B, 0.5)]);
        let t = paired_estimate(&data, 0.5, 4).unwrap();
        assert_eq!(t.prob(A, Reject, 0), 0.5);
        assert_eq!(t.prob(A, Accept, 0), 0.0);
    }

    #[test]
    fn paired_bins_are_left_closed() {
        // distance 0.25 sits on the interior edge of two bins
        assert_eq!(bin_index(0.25, 2), 1);
        assert_eq!(bin_index(0.5, 2), 1);
        assert_eq!(bin_index(0.0, 2), 0);
        assert_eq!(bin_index(0.1249, 4), 0);
    }

    #[test]
    fn paired_errors() {
        assert!(paired_estimate(&rows(&[(A, 0.7)]), 0.5, 2).is_err());
        assert!(paired_estimate(&ScoredDataset::default(), 0.5, 2).is_err());
        assert!(paired_estimate(&rows(&[(A, 0.7), (B, 0.2)]), 0.5, 0).is_err());
        assert!(paired_estimate(&rows(&[(A, 1.7), (B, 0.2)]), 0.5, 1).is_err());
    }

    #[test]
    fn paired_ground_truth_from_labels() {
        let csv = "group,score,label\na,0.9,1\na,0.8,0\nb,0.3,1\nb,0.1,0\nb,0.2,0\n";
        let data = ScoredDataset::from_csv(csv.as_bytes()).unwrap();
        let t = paired_estimate(&data, 0.5, 2).unwrap();
        assert_eq!(t.p_positive(A, Accept), Some(0.5));
        assert!((t.p_positive(B, Reject).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.p_positive(A, Reject), Some(0.0));
    }

    #[test]
    fn presets_expand() {
        let t = preset("adult-gender").unwrap();
        assert!((t.group_mass(A) - 0.325).abs() < 1e-15);
        assert!(preset("nope").is_none());
    }
}
