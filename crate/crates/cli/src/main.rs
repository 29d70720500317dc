//! `fairshield`: synthesize, simulate and check fairness shields.
//!
//! Exit codes: 0 success, 2 infeasible, 3 validation error, 4 I/O error.
//! `FAIRSHIELD_THREADS` caps the worker pool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value as Json};

use fairshield::distribution::{build_theta, paired_estimate, AcceptanceRates, ScoredDataset, ThetaKind};
use fairshield::formats::{
    load_shield, load_theta, save_shield, save_theta, theta_digest, write_atomic, FormatError,
};
use fairshield::model::{FairnessSpec, Group, Property};
use fairshield::oracle::{
    balanced_probability, counterexample_family, counterexample_static_fair, exact_enumerate, feasible_sequence,
    lattice_states_closed_form, mediant_check, sdp_expectation, tightness_bracket,
};
use fairshield::periodic::{min_balance, PeriodicKind, PeriodicShield, WelfareBounds};
use fairshield::sim::{aggregate, run, RunOutput, SimConfig};
use fairshield::synthesis::{synthesize, TerminalRule};
use fairshield::InputDistribution;

const METRICS_FORMAT: &str = "fairshield-metrics/1";

/// Raised when no shield can guarantee the requested property.
#[derive(Debug)]
struct Infeasible;

impl std::fmt::Display for Infeasible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("infeasible")
    }
}

impl std::error::Error for Infeasible {}

#[derive(Parser)]
#[command(name = "fairshield", version, about = "Synthesize, simulate and check fairness shields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a bounded-horizon shield and write it to a file.
    Synth(SynthArgs),
    /// Simulate seeded runs of a shield and write metrics.
    Sim(SimArgs),
    /// Exhaustive and closed-form checks.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Build or estimate θ files.
    #[command(subcommand)]
    Theta(ThetaCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum PropertyArg {
    Dp,
    Eqopp,
}

impl From<PropertyArg> for Property {
    fn from(p: PropertyArg) -> Property {
        match p {
            PropertyArg::Dp => Property::DemographicParity,
            PropertyArg::Eqopp => Property::EqualOpportunity,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TerminalArg {
    Fair,
    Bw,
}

#[derive(Args)]
struct ProblemArgs {
    /// θ file.
    #[arg(long)]
    theta: PathBuf,
    #[arg(long, value_enum)]
    property: PropertyArg,
    /// Bias threshold κ in (0, 1].
    #[arg(long)]
    kappa: f64,
    /// Horizon (period length) T.
    #[arg(long)]
    horizon: u32,
    #[arg(long, value_enum, default_value = "fair")]
    terminal: TerminalArg,
    /// Lower welfare bound for `--terminal bw`.
    #[arg(long)]
    l: Option<f64>,
    /// Upper welfare bound for `--terminal bw`.
    #[arg(long)]
    u: Option<f64>,
}

impl ProblemArgs {
    fn spec(&self) -> Result<FairnessSpec> {
        FairnessSpec::new(self.property.into(), self.kappa, self.horizon).context("invalid fairness spec")
    }

    fn terminal(&self) -> Result<TerminalRule> {
        match self.terminal {
            TerminalArg::Fair => Ok(TerminalRule::Fair { kappa: self.kappa }),
            TerminalArg::Bw => {
                let bounds = bounds(self.l, self.u)?;
                Ok(TerminalRule::BoundedWelfare {
                    l: bounds.lower(),
                    u: bounds.upper(),
                    n: min_balance(&bounds),
                })
            }
        }
    }
}

fn bounds(l: Option<f64>, u: Option<f64>) -> Result<WelfareBounds> {
    let (Some(l), Some(u)) = (l, u) else {
        bail!("welfare bounds need both --l and --u");
    };
    WelfareBounds::new(l, u).context("invalid welfare bounds")
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Output shield file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Always write decisions to the binary companion file.
    #[arg(long)]
    binary: bool,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PeriodicArg {
    StaticFair,
    StaticBw,
    Dynamic,
    PassThrough,
}

impl From<PeriodicArg> for PeriodicKind {
    fn from(p: PeriodicArg) -> PeriodicKind {
        match p {
            PeriodicArg::StaticFair => PeriodicKind::StaticFair,
            PeriodicArg::StaticBw => PeriodicKind::StaticBw,
            PeriodicArg::Dynamic => PeriodicKind::Dynamic,
            PeriodicArg::PassThrough => PeriodicKind::PassThrough,
        }
    }
}

#[derive(Args)]
struct SimArgs {
    /// θ file the inputs are drawn from.
    #[arg(long)]
    theta: PathBuf,
    /// Shield file written by `synth`.
    #[arg(long, conflicts_with = "periodic", required_unless_present = "periodic")]
    shield: Option<PathBuf>,
    /// Build a periodic shield instead of loading one.
    #[arg(long, value_enum)]
    periodic: Option<PeriodicArg>,
    #[arg(long, value_enum, requires = "periodic")]
    property: Option<PropertyArg>,
    /// κ; for static-bw defaults to u - l.
    #[arg(long)]
    kappa: Option<f64>,
    /// Period length T.
    #[arg(long, requires = "periodic")]
    horizon: Option<u32>,
    #[arg(long)]
    l: Option<f64>,
    #[arg(long)]
    u: Option<f64>,
    #[arg(long)]
    runs: u32,
    /// Seed of the random streams (mandatory).
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    periods: u32,
    /// Pair every run with a pass-through run on the same stream.
    #[arg(long)]
    unshielded_baseline: bool,
    /// Metrics JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-run trace CSVs.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Tidy CSV (run, period, metric, value) for plotting.
    #[arg(long)]
    tidy_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Optimal cost by enumerating every trace (small instances only).
    Exact(ProblemArgs),
    /// Two fair periods whose concatenation is unfair.
    Counterexample {
        #[arg(long)]
        t: u32,
        /// Use the (T, K) family instead of the degenerate pair.
        #[arg(long)]
        k: Option<u32>,
    },
    /// Checks min a_i/b_i <= sum a / sum b <= max a_i/b_i.
    Mediant {
        #[arg(long, value_delimiter = ',', required = true)]
        a: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        b: Vec<f64>,
    },
    /// P(N <= Bin(T, p) <= T - N).
    BalanceProb {
        #[arg(long)]
        t: u32,
        #[arg(long)]
        n: u32,
        #[arg(long)]
        p: f64,
    },
    /// Expected signed demographic parity after T unshielded arrivals.
    SdpExpect {
        #[arg(long)]
        p_a: f64,
        #[arg(long)]
        p1_a: f64,
        #[arg(long)]
        p1_b: f64,
        #[arg(long)]
        t: u32,
    },
    /// Accept counts x_n with l <= x_n/n <= u for n = N..=n_max.
    FeasibleSeq {
        #[arg(long)]
        l: f64,
        #[arg(long)]
        u: f64,
        #[arg(long)]
        n_max: u64,
    },
    /// Period half-lengths whose tightness thresholds bracket κ.
    Tightness {
        #[arg(long)]
        kappa: f64,
    },
    /// Closed-form number of lattice states for stages 0..=T.
    LatticeSize {
        #[arg(long, value_enum)]
        property: PropertyArg,
        #[arg(long)]
        horizon: u32,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Constant,
    ConstantK,
    Hybrid,
    HybridK,
}

impl From<KindArg> for ThetaKind {
    fn from(k: KindArg) -> ThetaKind {
        match k {
            KindArg::Constant => ThetaKind::Constant,
            KindArg::ConstantK => ThetaKind::ConstantK,
            KindArg::Hybrid => ThetaKind::Hybrid,
            KindArg::HybridK => ThetaKind::HybridK,
        }
    }
}

#[derive(Subcommand)]
enum ThetaCommand {
    /// Closed-form θ.
    Build {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        p_a: f64,
        /// Acceptance rate of group a (hybrid kinds).
        #[arg(long)]
        p_a1: Option<f64>,
        /// Acceptance rate of group b (hybrid kinds).
        #[arg(long)]
        p_b1: Option<f64>,
        /// Cost set (the `-k` kinds).
        #[arg(long, value_delimiter = ',')]
        costs: Option<Vec<f64>>,
        /// P(z=1 | g, r) as `a0,a1,b0,b1`.
        #[arg(long, value_delimiter = ',')]
        ground_truth: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram estimate from a `group,score[,label]` CSV.
    Paired {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        p_a: f64,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json(v: &Json) {
    println!("{}", serde_json::to_string_pretty(v).expect("JSON values serialize"));
}

fn load_theta_for(path: &Path) -> Result<InputDistribution> {
    load_theta(path).with_context(|| format!("loading θ from {}", path.display()))
}

fn synth(args: SynthArgs) -> Result<()> {
    let theta = load_theta_for(&args.problem.theta)?;
    let spec = args.problem.spec()?;
    let terminal = args.problem.terminal()?;
    let start = Instant::now();
    let table = synthesize(&theta, &spec, &terminal).context("synthesis")?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut summary = json!({
        "status": if table.is_feasible() { "ok" } else { "infeasible" },
        "property": spec.property.label(),
        "kappa": spec.kappa,
        "T": spec.horizon,
        "terminal": terminal,
        "root_value": table.root_value().get(),
        "lattice_states": table.lattice().total_states(),
        "lattice_states_closed_form": lattice_states_closed_form(spec.property, spec.horizon).to_string(),
        "entries": table.entry_count(),
        "wall_time_s": elapsed,
        "memory_estimate_bytes": table.memory_estimate(),
        "theta_digest": table.theta_digest(),
    });
    if !table.is_feasible() {
        print_json(&summary);
        return Err(anyhow!(Infeasible));
    }
    let written = save_shield(&args.out, &table, args.binary)?;
    summary["out"] = json!(written.json);
    summary["binary"] = json!(written.binary);
    print_json(&summary);
    Ok(())
}

fn build_shield(args: &SimArgs, theta: &InputDistribution) -> Result<PeriodicShield> {
    if let Some(path) = &args.shield {
        let table = load_shield(path, theta).with_context(|| format!("loading shield {}", path.display()))?;
        if !table.is_feasible() {
            return Err(anyhow!(Infeasible)).context("the loaded shield is infeasible");
        }
        return PeriodicShield::from_table(table).context("shield file");
    }
    let kind: PeriodicKind = args.periodic.expect("clap requires --shield or --periodic").into();
    let property = args.property.ok_or_else(|| anyhow!("--periodic needs --property"))?;
    let horizon = args.horizon.ok_or_else(|| anyhow!("--periodic needs --horizon"))?;
    let welfare = if kind == PeriodicKind::StaticBw {
        Some(bounds(args.l, args.u)?)
    } else {
        None
    };
    let kappa = match (args.kappa, welfare) {
        (Some(k), _) => k,
        (None, Some(b)) => b.width().min(1.0),
        (None, None) => bail!("--periodic {kind:?} needs --kappa"),
    };
    let spec = FairnessSpec::new(property.into(), kappa, horizon).context("invalid fairness spec")?;
    let shield = match kind {
        PeriodicKind::StaticFair => PeriodicShield::static_fair(theta, &spec)?,
        PeriodicKind::StaticBw => PeriodicShield::static_bw(theta, &spec, &welfare.expect("checked above"))?,
        PeriodicKind::Dynamic => PeriodicShield::dynamic(theta, &spec)?,
        PeriodicKind::PassThrough => PeriodicShield::pass_through(theta, &spec),
    };
    if let Some(table) = shield.base_table() {
        if !table.is_feasible() {
            return Err(anyhow!(Infeasible)).context("the first-period shield is infeasible");
        }
    }
    Ok(shield)
}

fn trace_csv(out: &RunOutput) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "g", "r", "c", "y", "z", "cost"])?;
    for (i, s) in out.trace.as_deref().unwrap_or_default().iter().enumerate() {
        w.write_record([
            i.to_string(),
            s.input.group.label().to_string(),
            s.input.recommendation.bit().to_string(),
            s.input.cost.to_string(),
            s.final_decision.bit().to_string(),
            s.ground_truth.map(|z| (z as u8).to_string()).unwrap_or_default(),
            s.cost().to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| anyhow!("{e}"))
}

fn tidy_csv(outs: &[RunOutput]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "period", "metric", "value"])?;
    let mut row = |run: u32, period: u32, metric: &str, value: f64| {
        w.write_record([run.to_string(), period.to_string(), metric.to_string(), value.to_string()])
    };
    for o in outs {
        let m = &o.metrics;
        for r in &o.reports {
            row(m.run, r.period, "period_bias", r.period_bias)?;
            row(m.run, r.period, "cumulative_bias", r.cumulative_bias)?;
            row(m.run, r.period, "period_cost", r.period_cost)?;
            row(m.run, r.period, "period_interventions", r.period_interventions as f64)?;
            if let Some(a) = r.assumption {
                row(m.run, r.period, "assumption", a as u8 as f64)?;
            }
            row(m.run, r.period, "fallback", r.fallback as u8 as f64)?;
        }
        row(m.run, 0, "cost", m.cost)?;
        row(m.run, 0, "interventions", m.interventions as f64)?;
        for (name, v) in [
            ("utility", m.utility),
            ("baseline_utility", m.baseline_utility),
            ("utility_loss", m.utility_loss),
        ] {
            if let Some(v) = v {
                row(m.run, 0, name, v)?;
            }
        }
    }
    w.into_inner().map_err(|e| anyhow!("{e}"))
}

fn sim(args: SimArgs) -> Result<()> {
    let theta = load_theta_for(&args.theta)?;
    let shield = build_shield(&args, &theta)?;
    let spec = *shield.spec();
    if let Some(k) = args.kappa {
        if args.shield.is_some() && k != spec.kappa {
            bail!("--kappa {k} differs from the shield file's κ {}", spec.kappa);
        }
    }
    let config = SimConfig {
        seed: args.seed,
        runs: args.runs,
        horizon: spec.horizon,
        periods: args.periods,
        keep_traces: args.trace_dir.is_some(),
        baseline: args.unshielded_baseline,
    };
    let outs = run(&theta, &shield, &config).context("simulation")?;
    let metrics: Vec<_> = outs.iter().map(|o| o.metrics.clone()).collect();
    let summary = aggregate(&metrics, spec.kappa).expect("runs >= 1");
    let doc = json!({
        "format": METRICS_FORMAT,
        "version": env!("CARGO_PKG_VERSION"),
        "config": {
            "seed": args.seed,
            "runs": args.runs,
            "periods": args.periods,
            "T": spec.horizon,
            "property": spec.property.label(),
            "kappa": spec.kappa,
            "shield": shield.kind(),
            "unshielded_baseline": args.unshielded_baseline,
        },
        "theta_digest": theta_digest(&theta),
        "runs": metrics,
        "aggregate": summary,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_atomic(&args.out, text.as_bytes())?;

    if let Some(dir) = &args.trace_dir {
        std::fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
        for o in &outs {
            let path = dir.join(format!("run_{:04}.csv", o.metrics.run));
            write_atomic(&path, &trace_csv(o)?)?;
        }
    }
    if let Some(path) = &args.tidy_out {
        write_atomic(path, &tidy_csv(&outs)?)?;
    }
    print_json(&json!({
        "status": "ok",
        "out": args.out,
        "runs": args.runs,
        "violation_rate": summary.violation_rate,
        "mean_cost": summary.cost.mean,
        "mean_utility_loss": summary.utility_loss.map(|s| s.mean),
    }));
    Ok(())
}

fn oracle(cmd: OracleCommand) -> Result<()> {
    let out = match cmd {
        OracleCommand::Exact(problem) => {
            let theta = load_theta_for(&problem.theta)?;
            let spec = problem.spec()?;
            let terminal = problem.terminal()?;
            let r = exact_enumerate(&theta, &spec, &terminal)?;
            json!({
                "optimal_cost": r.is_feasible().then_some(r.optimal_cost),
                "feasible": r.is_feasible(),
                "leaves": r.leaves,
            })
        }
        OracleCommand::Counterexample { t, k } => {
            let pair = match k {
                None => counterexample_static_fair(t)?,
                Some(k) => counterexample_family(t, k)?,
            };
            serde_json::to_value(pair)?
        }
        OracleCommand::Mediant { a, b } => json!({ "holds": mediant_check(&a, &b)? }),
        OracleCommand::BalanceProb { t, n, p } => serde_json::to_value(balanced_probability(t, n, p)?)?,
        OracleCommand::SdpExpect { p_a, p1_a, p1_b, t } => {
            json!({ "expected_sdp": sdp_expectation(p_a, p1_a, p1_b, t)? })
        }
        OracleCommand::FeasibleSeq { l, u, n_max } => {
            let b = WelfareBounds::new(l, u)?;
            let n = min_balance(&b);
            json!({ "n_min": n, "sequence": feasible_sequence(&b, n_max)? })
        }
        OracleCommand::Tightness { kappa } => {
            let [(h1, k1), (h2, k2)] = tightness_bracket(kappa)?;
            json!({ "bracket": [{ "half": h1, "threshold": k1 }, { "half": h2, "threshold": k2 }] })
        }
        OracleCommand::LatticeSize { property, horizon } => {
            json!({ "states": lattice_states_closed_form(property.into(), horizon).to_string() })
        }
    };
    print_json(&out);
    Ok(())
}

fn theta(cmd: ThetaCommand) -> Result<()> {
    let (dist, out) = match cmd {
        ThetaCommand::Build {
            kind,
            p_a,
            p_a1,
            p_b1,
            costs,
            ground_truth,
            out,
        } => {
            let rates = match (p_a1, p_b1) {
                (Some(a), Some(b)) => Some(AcceptanceRates { a, b }),
                (None, None) => None,
                _ => bail!("give both --p-a1 and --p-b1"),
            };
            let mut dist = build_theta(kind.into(), p_a, rates, costs.as_deref())?;
            if let Some(gt) = ground_truth {
                let [a0, a1, b0, b1] = gt[..] else {
                    bail!("--ground-truth takes four values a0,a1,b0,b1");
                };
                dist = dist.with_ground_truth([[a0, a1], [b0, b1]])?;
            }
            (dist, out)
        }
        ThetaCommand::Paired { data, p_a, bins, out } => {
            let file = std::fs::File::open(&data).map_err(|e| FormatError::io(&data, e))?;
            let dataset = ScoredDataset::from_csv(file)?;
            (paired_estimate(&dataset, p_a, bins)?, out)
        }
    };
    save_theta(&out, &dist)?;
    print_json(&json!({
        "status": "ok",
        "out": out,
        "theta_digest": theta_digest(&dist),
        "inputs": dist.n_inputs(),
        "p_a": dist.group_mass(Group::A),
    }));
    Ok(())
}

/// Exit code for an error chain: the first recognized cause decides.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Infeasible>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<FormatError>() {
            return if matches!(e, FormatError::Io { .. }) { 4 } else { 3 };
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            if e.is_io_error() {
                return 4;
            }
        }
    }
    3
}

/// The error chain joined by `: `, skipping causes whose text the message
/// already ends with (library errors often repeat their source).
fn render(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if msg.ends_with(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("FAIRSHIELD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("FAIRSHIELD_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Sim(a) => sim(a),
        Command::Oracle(c) => oracle(c),
        Command::Theta(c) => theta(c),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
