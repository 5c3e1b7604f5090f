use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use detalloc::allocator::{self, AllocError, Method, Proposed};
use detalloc::config::{ConfigError, ScenarioConfig};
use detalloc::divergence::{self, DivergenceError};
use detalloc::montecarlo::{self, McConfig, McError, OracleObjective};
use detalloc::scenario::{dbm_to_mw, mw_to_dbm, Allocation};

mod report;

use report::{AllocationRow, Table};

#[derive(Parser)]
#[command(name = "detalloc", version, about = "Power allocation for distributed detection over a virtual MIMO channel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one scenario and print the allocation.
    Allocate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mc: bool,
    },
    /// Allocate over a range of total budgets.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Brute-force grid search over a two-sensor scenario.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = OracleKind::ApproxJ)]
        objective: OracleKind,
    },
    /// J-divergence bounds and error-probability lower bounds.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mc: bool,
    },
    /// Check a scenario file and print per-sensor flags.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "PATH.csv")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20_000)]
    mc_runs: usize,
    /// Target false alarm probability at the fusion center.
    #[arg(long, default_value_t = 0.04)]
    pf_fc: f64,
    #[arg(long, value_enum, default_value_t = Solver::Auto)]
    solver: Solver,
    /// Grid step in mW for `oracle` (default 0.02 for approx-j, 0.1 for pd-fc).
    #[arg(long)]
    grid_step: Option<f64>,
    /// Override the file's total budget.
    #[arg(long, allow_hyphen_values = true)]
    p_tot_dbm: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, allow_hyphen_values = true, required_unless_present = "budgets_dbm")]
    start_dbm: Option<f64>,
    #[arg(long, allow_hyphen_values = true, required_unless_present = "budgets_dbm")]
    stop_dbm: Option<f64>,
    #[arg(long, default_value_t = 11)]
    points: usize,
    /// Explicit budget list instead of an evenly spaced range.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with_all = ["start_dbm", "stop_dbm"])]
    budgets_dbm: Option<Vec<f64>>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "proposed,equal,equal-snr")]
    allocators: Vec<AllocatorKind>,
    /// Append Monte Carlo fusion-center detection probability columns.
    #[arg(long)]
    mc: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Solver {
    Auto,
    Waterfill,
    General,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
enum AllocatorKind {
    Equal,
    #[value(name = "equal-snr", alias = "equal_snr")]
    EqualSnr,
    Proposed,
}

impl AllocatorKind {
    fn label(self) -> &'static str {
        match self {
            AllocatorKind::Equal => "equal",
            AllocatorKind::EqualSnr => "equal_snr",
            AllocatorKind::Proposed => "proposed",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OracleKind {
    ApproxJ,
    PdFc,
}

/// Failure with its exit code: 2 config, 3 non-certified solve, 4 capability.
#[derive(Debug)]
enum Failure {
    Config(String),
    NotCertified(String),
    Capability(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::NotCertified(_) => 3,
            Failure::Capability(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::NotCertified(m) => write!(f, "solve not certified: {m}"),
            Failure::Capability(m) => write!(f, "unsupported: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<AllocError> for Failure {
    fn from(e: AllocError) -> Self {
        match e {
            AllocError::NotOrthogonal | AllocError::OutsideRegionS { .. } => Failure::Capability(e.to_string()),
            AllocError::Divergence(d) => d.into(),
        }
    }
}

impl From<DivergenceError> for Failure {
    fn from(e: DivergenceError) -> Self {
        Failure::NotCertified(e.to_string())
    }
}

impl From<McError> for Failure {
    fn from(e: McError) -> Self {
        match e {
            McError::TooManySensors { .. } | McError::GridNeedsTwoSensors { .. } => Failure::Capability(e.to_string()),
            McError::InvalidConfig(_) => Failure::Config(e.to_string()),
            McError::Divergence(d) => d.into(),
            _ => Failure::NotCertified(e.to_string()),
        }
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Allocate { common, mc } => cmd_allocate(&common, mc),
        Command::Sweep { common, sweep } => cmd_sweep(&common, &sweep),
        Command::Oracle { common, objective } => cmd_oracle(&common, objective),
        Command::Bounds { common, mc } => cmd_bounds(&common, mc),
        Command::Validate { common } => cmd_validate(&common),
    }
}

fn load(common: &Common) -> Result<ScenarioConfig, Failure> {
    let cfg = ScenarioConfig::load(&common.config)?;
    match common.p_tot_dbm {
        Some(dbm) => Ok(cfg.with_p_tot(dbm_to_mw(dbm))?),
        None => Ok(cfg),
    }
}

fn mc_config(common: &Common) -> Result<McConfig, Failure> {
    Ok(McConfig::new(common.mc_runs, common.seed, common.pf_fc)?)
}

fn solve(cfg: &ScenarioConfig, solver: Solver) -> Result<Proposed, Failure> {
    let method = match solver {
        Solver::Auto => None,
        Solver::Waterfill => Some(Method::Waterfill),
        Solver::General => Some(Method::General),
    };
    Ok(allocator::proposed_allocation(&cfg.scenario, method)?)
}

fn baseline(cfg: &ScenarioConfig, kind: AllocatorKind) -> Result<Allocation, Failure> {
    let s = &cfg.scenario;
    match kind {
        AllocatorKind::Equal => Ok(allocator::equal_allocation(s)),
        AllocatorKind::EqualSnr if !cfg.gains.is_empty() => {
            let weights: Vec<f64> = cfg.gains.iter().map(|g| 1.0 / g).collect();
            Ok(Allocation::new(allocator::capped_proportional_fill(&weights, &s.caps(), s.p_tot())))
        }
        AllocatorKind::EqualSnr => Err(Failure::Capability(
            "equal-SNR allocation needs per-sensor gains (not available for general channels)".into(),
        )),
        AllocatorKind::Proposed => unreachable!("proposed is solved, not a baseline"),
    }
}

fn recheck(cfg: &ScenarioConfig, allocation: &Allocation) -> Result<(), Failure> {
    allocation
        .check(&cfg.scenario, 1e-6)
        .map_err(|e| Failure::NotCertified(format!("emitted allocation violates its constraints: {e}")))
}

fn row_for(
    cfg: &ScenarioConfig,
    allocator: &'static str,
    solver: &'static str,
    certified: bool,
    allocation: Allocation,
    mc: Option<&McConfig>,
) -> Result<AllocationRow, Failure> {
    recheck(cfg, &allocation)?;
    let approx_j = divergence::j_approx(&cfg.scenario, &allocation)?;
    let pd_fc = match mc {
        Some(mc) => Some(montecarlo::estimate_pd_fc(&cfg.scenario, &allocation, mc)?),
        None => None,
    };
    Ok(AllocationRow {
        p_tot_mw: cfg.scenario.p_tot(),
        allocator,
        solver,
        certified,
        powers: allocation.p,
        approx_j,
        pd_fc,
    })
}

fn cmd_allocate(common: &Common, mc: bool) -> Result<(), Failure> {
    let cfg = load(common)?;
    let mc = if mc { Some(mc_config(common)?) } else { None };
    let solved = solve(&cfg, common.solver)?;
    eprintln!("solver: {}", solved.method.name());
    let row = row_for(&cfg, "proposed", solved.method.name(), solved.certified, solved.allocation, mc.as_ref())?;

    let p_tot = cfg.scenario.p_tot();
    println!("P_tot = {:.4} dBm ({:.6} mW), solver = {}", mw_to_dbm(p_tot), p_tot, solved.method.name());
    for (j, p) in row.powers.iter().enumerate() {
        println!("  sensor {:>2}: {:>12.6} mW  {:>6.2} %", j + 1, p, 100.0 * p / p_tot);
    }
    println!("approx J = {:.6} nats ({:.6} bits)", row.approx_j, row.approx_j / std::f64::consts::LN_2);
    println!(
        "KKT: lambda = {:.6e}, max stationarity = {:.3e}, complementarity = {:.3e}, certified = {}",
        solved.kkt.lambda,
        solved.kkt.max_stationarity(),
        solved.kkt.complementarity_residual,
        solved.certified
    );
    if let Some(est) = &row.pd_fc {
        println!("P_D,FC = {:.5} ± {:.5} ({} runs, seed {})", est.value, est.stderr, est.n_runs, est.seed);
    }
    let certified = row.certified;
    if let Some(out) = &common.out {
        Table::allocation(cfg.scenario.k(), mc.is_some(), vec![row]).write(out)?;
    }
    if certified {
        Ok(())
    } else {
        Err(Failure::NotCertified("KKT residuals above tolerance".into()))
    }
}

fn sweep_budgets(sweep: &SweepArgs) -> Result<Vec<f64>, Failure> {
    if let Some(list) = &sweep.budgets_dbm {
        if list.is_empty() {
            return Err(Failure::Config("--budgets-dbm is empty".into()));
        }
        let mut list = list.clone();
        list.sort_by(f64::total_cmp);
        return Ok(list);
    }
    let (start, stop) = (sweep.start_dbm.unwrap_or_default(), sweep.stop_dbm.unwrap_or_default());
    if !(start < stop) {
        return Err(Failure::Config(format!("sweep start {start} dBm must be below stop {stop} dBm")));
    }
    if sweep.points < 2 {
        return Err(Failure::Config("sweep needs at least 2 points".into()));
    }
    let step = (stop - start) / (sweep.points - 1) as f64;
    Ok((0..sweep.points).map(|i| start + step * i as f64).collect())
}

fn cmd_sweep(common: &Common, sweep: &SweepArgs) -> Result<(), Failure> {
    let base = ScenarioConfig::load(&common.config)?;
    let budgets = sweep_budgets(sweep)?;
    let mc = if sweep.mc { Some(mc_config(common)?) } else { None };
    let mut allocators = sweep.allocators.clone();
    allocators.sort();
    allocators.dedup();

    let mut rows = Vec::new();
    let mut uncertified = 0;
    for &dbm in &budgets {
        let cfg = base.with_p_tot(dbm_to_mw(dbm))?;
        for &kind in &allocators {
            let row = if kind == AllocatorKind::Proposed {
                let solved = solve(&cfg, common.solver)?;
                eprintln!("P_tot = {dbm:.4} dBm: solver {}", solved.method.name());
                if !solved.certified {
                    uncertified += 1;
                }
                row_for(&cfg, kind.label(), solved.method.name(), solved.certified, solved.allocation, mc.as_ref())?
            } else {
                row_for(&cfg, kind.label(), "closed-form", true, baseline(&cfg, kind)?, mc.as_ref())?
            };
            rows.push(row);
        }
    }
    let table = Table::allocation(base.scenario.k(), mc.is_some(), rows);
    match &common.out {
        Some(out) => table.write(out)?,
        None => table.write_stdout()?,
    }
    if uncertified > 0 {
        return Err(Failure::NotCertified(format!("{uncertified} proposed allocation(s) not certified")));
    }
    Ok(())
}

fn cmd_oracle(common: &Common, kind: OracleKind) -> Result<(), Failure> {
    let cfg = load(common)?;
    let (objective, default_step) = match kind {
        OracleKind::ApproxJ => (OracleObjective::ApproxJ, montecarlo::DEFAULT_GRID_STEP_APPROX_J),
        OracleKind::PdFc => (OracleObjective::PdFc(mc_config(common)?), montecarlo::DEFAULT_GRID_STEP_PD_FC),
    };
    let step = common.grid_step.unwrap_or(default_step);
    let oracle = montecarlo::grid_oracle(&cfg.scenario, objective, step)?;
    if let Some(out) = &common.out {
        Table::surface(&oracle.surface).write(out)?;
    }
    println!("argmax,p1_mW,p2_mW,value");
    println!("argmax,{},{},{}", oracle.best.p[0], oracle.best.p[1], oracle.best_value);
    Ok(())
}

fn cmd_bounds(common: &Common, mc: bool) -> Result<(), Failure> {
    let cfg = load(common)?;
    let (q0, q1) = (cfg.prior_h0, cfg.prior_h1);
    let s = &cfg.scenario;
    let j_u = divergence::bernoulli_j_upper_bound(s.sensors());
    let solved = solve(&cfg, common.solver)?;
    eprintln!("solver: {}", solved.method.name());
    let j_approx = divergence::j_approx(s, &solved.allocation)?;
    println!("quantity,j_nats,pe_lower_bound");
    println!("j_decisions,{j_u},{}", divergence::pe_lower_bound(j_u, q0, q1));
    println!("j_approx_proposed,{j_approx},{}", divergence::pe_lower_bound(j_approx, q0, q1));
    if mc {
        let est = montecarlo::estimate_j_mc(s, &solved.allocation, &mc_config(common)?)?;
        println!("j_mc_proposed,{},{}", est.value, divergence::pe_lower_bound(est.value, q0, q1));
        println!("j_mc_stderr,{},", est.stderr);
        let holds = est.value <= j_u + 3.0 * est.stderr;
        println!("# J(y) <= J(u): {holds}");
    }
    Ok(())
}

fn cmd_validate(common: &Common) -> Result<(), Failure> {
    let cfg = load(common)?;
    let s = &cfg.scenario;
    println!(
        "valid: K = {}, N = {}, channel = {:?}, P_tot = {:.4} dBm ({} mW)",
        s.k(),
        s.channel().n(),
        cfg.channel,
        mw_to_dbm(s.p_tot()),
        s.p_tot()
    );
    println!("sensor,p_d,p_f,p_max_mW,gain_db,in_region_s");
    for (j, sensor) in s.sensors().iter().enumerate() {
        let gain = cfg.gains.get(j).map_or(String::new(), |g| format!("{:.4}", 10.0 * g.log10()));
        println!(
            "{},{},{},{},{},{}",
            j + 1,
            sensor.p_d,
            sensor.p_f,
            sensor.p_max,
            gain,
            cfg.flags.in_region_s[j]
        );
    }
    println!("trivial_full_power,{}", cfg.flags.trivial_full_power);
    Ok(())
}
