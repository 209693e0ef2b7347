//! `tsfl`: command-line front end.
//!
//! Exit codes: 0 success, 1 infeasible (no facility can be opened, or a
//! checked solution fails), 2 input error, 3 internal error.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tsfl_core::envy::{solve_envy, Side};
use tsfl_core::generators::{
    gap_instance, hardness_instance, random_envy_instance, random_instance, CurveFamily, EnvySpec, Graph, RandomSpec,
};
use tsfl_core::io;
use tsfl_core::lp::{build_base_lp, solve_lp, RowTag, LP_TOL};
use tsfl_core::oracle::{exact_search, DEFAULT_SUBSET_CAP};
use tsfl_core::queueing::{simulate_fifo, QueueParams, QueueReport, DEFAULT_TAIL_TOL};
use tsfl_core::rounding::{consolidate_prices, verify_feasibility};
use tsfl_core::{solve, Error, Instance, MicroLpBackend, Objective, SolverConfig};

#[derive(Parser)]
#[command(name = "tsfl", version, about = "Two-sided facility location solver suite")]
struct Cli {
    /// Write the main output here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SolveArgs {
    instance: PathBuf,
    #[arg(long, default_value = "surplus")]
    objective: Objective,
    /// Multiplies the instance's distance bound before solving.
    #[arg(long, default_value_t = 1.0)]
    radius_factor: f64,
    /// Also write the solution document here.
    #[arg(long)]
    solution: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Guess sweep, rescaling and rounding; prints the run report.
    Solve {
        #[command(flatten)]
        common: SolveArgs,
        #[arg(long, default_value_t = 0.34)]
        epsilon: f64,
        /// Additive slack (default 1e-4 * W_max).
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print one line per guess after the summary.
        #[arg(long)]
        verbose: bool,
    },
    /// Exact optimum by enumerating facility subsets.
    Oracle {
        #[command(flatten)]
        common: SolveArgs,
    },
    /// Solves the base LP relaxation only.
    Lp {
        instance: PathBuf,
        #[arg(long, default_value = "surplus")]
        objective: Objective,
        #[arg(long, default_value_t = 1.0)]
        radius_factor: f64,
    },
    /// Verifies a solution document against an instance.
    Check {
        instance: PathBuf,
        solution: PathBuf,
        /// Allowed routing distance as a multiple of R.
        #[arg(long, default_value_t = 4.0)]
        radius_factor: f64,
    },
    /// Stationary abandonment analytics for one facility.
    Queue(QueueArgs),
    /// FIFO discrete-event simulation next to the exact value.
    Simulate {
        #[command(flatten)]
        queue: QueueArgs,
        #[arg(long, default_value_t = 1e4)]
        horizon: f64,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Solves the envy-free lottery LP and rounds it; prints the audit.
    EnvySolve {
        instance: PathBuf,
        /// Also write the lottery policy document here.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Draws ladders from a lottery policy.
    EnvySample {
        policy: PathBuf,
        #[arg(long)]
        node: usize,
        #[arg(long, default_value = "buyer")]
        side: Side,
        #[arg(long, default_value_t = 10)]
        draws: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Instance generators.
    #[command(subcommand)]
    Gen(Gen),
}

#[derive(Args)]
struct QueueArgs {
    #[arg(long)]
    lambda: f64,
    /// Seller arrival rate (default: lambda).
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
}

impl QueueArgs {
    fn params(&self) -> tsfl_core::Result<QueueParams> {
        QueueParams::new(self.lambda, self.mu.unwrap_or(self.lambda), self.kappa, self.gamma, self.eta)
    }
}

#[derive(Subcommand)]
enum Gen {
    /// Two far-apart nodes whose LP/IP ratio grows without bound as c -> 1.
    Gap {
        #[arg(long, default_value_t = 10.0)]
        l: f64,
        #[arg(long, default_value_t = 0.5)]
        c: f64,
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
        #[arg(long, default_value_t = 5)]
        grid_size: usize,
    },
    /// Independent-set reduction on a k-regular circulant graph, or on the
    /// d-dimensional hypercube with `--cube d`.
    Hardness {
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        cube: Option<u32>,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
    },
    /// Seeded random instance in a square.
    Random {
        #[arg(long, default_value_t = 6)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "uniform")]
        family: CurveFamily,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 1.0)]
        l: f64,
        #[arg(long, default_value_t = 0.3)]
        radius: f64,
        #[arg(long, default_value_t = 17)]
        grid_size: usize,
    },
    /// Seeded random envy-free instance.
    Envy {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        subtypes: usize,
        /// Size of the price grid and of the wage grid.
        #[arg(long, default_value_t = 4)]
        grid: usize,
        #[arg(long, default_value_t = 1.0)]
        l: f64,
        #[arg(long, default_value_t = 0.4)]
        radius: f64,
    },
}

enum Failure {
    Infeasible(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

struct Output<'a> {
    path: Option<&'a Path>,
}

impl Output<'_> {
    fn emit(&self, text: impl Display) -> tsfl_core::Result<()> {
        let mut text = text.to_string();
        if !text.ends_with('\n') {
            text.push('\n');
        }
        match self.path {
            Some(p) => write_file(p, &text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> tsfl_core::Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load(path: &Path, radius_factor: f64) -> tsfl_core::Result<Instance> {
    if !(radius_factor > 0.0 && radius_factor.is_finite()) {
        return Err(Error::Domain(format!("--radius-factor must be positive, got {radius_factor}")));
    }
    let inst = io::read_instance(path)?;
    Ok(inst.with_radius(inst.radius * radius_factor))
}

fn run(cli: Cli) -> Outcome {
    let out = Output { path: cli.out.as_deref() };
    match cli.command {
        Command::Solve { common, epsilon, delta, seed, verbose } => {
            let inst = load(&common.instance, common.radius_factor)?;
            let config = SolverConfig { epsilon, delta, objective: common.objective, jobs: cli.jobs, seed, ..SolverConfig::default() };
            let (sol, report) = solve(&inst, &config)?;
            if let Some(p) = &common.solution {
                write_file(p, &io::solution_to_string(&sol))?;
            }
            if verbose {
                out.emit(format!("{report:#}"))?;
            } else {
                out.emit(&report)?;
            }
            if sol.facilities.is_empty() {
                return Err(Failure::Infeasible("no facility can be opened".into()));
            }
        }
        Command::Oracle { common } => {
            let inst = load(&common.instance, common.radius_factor)?;
            let search = exact_search(&inst, common.objective, DEFAULT_SUBSET_CAP, &MicroLpBackend)?;
            if let Some(p) = &common.solution {
                write_file(p, &io::solution_to_string(&search.solution))?;
            }
            out.emit(format!(
                "objective: {}\nvalue: {:?}\nopen: {:?}\nsubsets_evaluated: {}\nsubsets_infeasible: {}\nsubsets_failed: {}",
                common.objective,
                search.value,
                search.solution.open_locations(),
                search.evaluated,
                search.infeasible,
                search.failed
            ))?;
            if search.solution.facilities.is_empty() {
                return Err(Failure::Infeasible("no facility can be opened".into()));
            }
        }
        Command::Lp { instance, objective, radius_factor } => {
            let inst = load(&instance, radius_factor)?;
            let model = build_base_lp(&inst, objective)?;
            let Some(sol) = solve_lp(&model, &MicroLpBackend, LP_TOL)? else {
                out.emit("status: infeasible")?;
                return Err(Failure::Infeasible("LP is infeasible".into()));
            };
            let consolidated = consolidate_prices(&sol, &inst)?;
            let mut text = format!(
                "status: optimal\nobjective: {objective}\nlp_value: {:?}\nconsolidated_value: {:?}\nvariables: {}\nrows: {}",
                sol.lp_value.unwrap_or(f64::NAN),
                consolidated.objective_value(),
                model.num_vars(),
                model.num_rows()
            );
            for tag in [RowTag::Wbb, RowTag::SinglePrice, RowTag::SingleRoute, RowTag::Open, RowTag::FlowBalance, RowTag::FlowLower] {
                text.push_str(&format!("\nrows_{}: {}", tag.to_string().replace('-', "_"), model.problem.count_rows(tag)));
            }
            for f in sol.facilities.iter().filter(|f| f.y > 0.0) {
                text.push_str(&format!("\nfacility {} location={} y={:?}", f.id, f.location, f.y));
            }
            out.emit(text)?;
        }
        Command::Check { instance, solution, radius_factor } => {
            let inst = io::read_instance(&instance)?;
            let sol = io::parse_solution(&io::read_text(&solution)?)?;
            if sol.nodes.len() != inst.len() {
                return Err(Error::Parse(format!("solution has {} nodes, instance has {}", sol.nodes.len(), inst.len())).into());
            }
            let report = verify_feasibility(&inst, &sol, radius_factor);
            out.emit(&report)?;
            if !report.passed() {
                return Err(Failure::Infeasible("solution fails verification".into()));
            }
        }
        Command::Queue(args) => {
            out.emit(QueueReport::new(&args.params()?, DEFAULT_TAIL_TOL)?)?;
        }
        Command::Simulate { queue, horizon, reps, seed } => {
            let params = queue.params()?;
            let mut report = QueueReport::new(&params, DEFAULT_TAIL_TOL)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cli.jobs)
                .build()
                .map_err(|e| Error::Domain(format!("cannot start {} worker threads: {e}", cli.jobs)))?;
            report.simulation = Some(pool.install(|| simulate_fifo(&params, horizon, reps, seed))?);
            out.emit(report)?;
        }
        Command::EnvySolve { instance, policy } => {
            let inst = io::read_envy_instance(&instance)?;
            let run = solve_envy(&inst, &MicroLpBackend)?;
            if let Some(p) = &policy {
                write_file(p, &io::policy_to_string(&run.rounding.policy))?;
            }
            out.emit(format!(
                "lp_value: {:?}\nopen: {:?}\nmerges: {}\n{}",
                run.lp_value,
                run.rounding.policy.open_locations(),
                run.rounding.trace.moves.len(),
                run.check
            ))?;
            if !run.check.passed() {
                return Err(Error::InvariantBreach("rounded policy fails its audit".into()).into());
            }
        }
        Command::EnvySample { policy, node, side, draws, seed } => {
            let policy = io::parse_policy(&io::read_text(&policy)?)?;
            if node >= policy.nodes.len() {
                return Err(Error::UnknownNode(node).into());
            }
            let mut text = String::new();
            for t in 0..draws {
                let l = policy.sample_ladder(node, side, seed, t);
                let facility = l.facility.map_or("none".to_string(), |f| policy.facilities[f].location.to_string());
                text.push_str(&format!("draw {t} facility={facility} values={:?}\n", l.values));
            }
            out.emit(text)?;
        }
        Command::Gen(g) => {
            let text = match g {
                Gen::Gap { l, c, eps, grid_size } => io::instance_to_string(&gap_instance(l, c, eps, grid_size)?),
                Gen::Hardness { k, n, cube, radius, delta } => {
                    let graph = match cube {
                        Some(d) => Graph::hypercube(d),
                        None => Graph::circulant(k, n)?,
                    };
                    io::instance_to_string(&hardness_instance(&graph, radius, delta)?)
                }
                Gen::Random { n, seed, family, scale, l, radius, grid_size } => {
                    let spec = RandomSpec { n, seed, family, scale, flow_lower_bound: l, radius, grid_size };
                    io::instance_to_string(&random_instance(&spec)?)
                }
                Gen::Envy { n, seed, subtypes, grid, l, radius } => {
                    let spec = EnvySpec { n, seed, subtypes, grid, flow_lower_bound: l, radius };
                    io::envy_instance_to_string(&random_envy_instance(&spec)?)
                }
            };
            out.emit(text)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::StructurallyInfeasible(_) => 1,
        Error::InvalidCurve(_)
        | Error::InvalidInstance(_)
        | Error::UnknownNode(_)
        | Error::Domain(_)
        | Error::Parse(_)
        | Error::Io(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Infeasible(msg)) => {
            eprintln!("tsfl: infeasible: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("tsfl: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
