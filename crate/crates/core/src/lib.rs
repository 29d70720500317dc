//! Synthesis, validation and simulation of fairness shields.
//!
//! A fairness shield sits behind a binary classifier, observes each
//! individual's group, the classifier's recommendation and the cost of
//! overriding it, and may flip the decision so that group fairness
//! (demographic parity or equal opportunity) holds at the end of a bounded
//! horizon, or at every period boundary, at minimum expected cost.
//!
//! - [`model`]: groups, decisions, counters, bias and cost.
//! - [`distribution`]: input distributions and their estimators.
//! - [`synthesis`]: backward induction over the counter lattice.
//! - [`periodic`]: Static-Fair, Static-BW and Dynamic periodic shields.
//! - [`oracle`]: exhaustive enumeration and closed-form checks.
//! - [`sim`]: seeded simulation and metric aggregation.
//! - [`formats`]: θ and shield files.

pub mod distribution;
pub mod formats;
pub mod model;
pub mod oracle;
pub mod periodic;
pub mod sim;
pub mod synthesis;

pub use distribution::{build_theta, paired_estimate, InputDistribution, ThetaKind};
pub use model::{bias, welfare, CounterVector, Decision, FairnessSpec, Group, InputEvent, Property};
pub use synthesis::{synthesize, ShieldTable, TerminalRule, Value};
