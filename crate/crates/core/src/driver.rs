//! End-to-end solver: brute force over small facility sets, then a sweep of
//! strengthened relaxations over `(Wbar, S)` guesses, each rescaled and
//! rounded, keeping the best integral solution.

use std::cmp::Ordering;
use std::fmt;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::instance::{Instance, Objective};
use crate::lp::{build_base_lp, solve_lp, GuessSpec, LpBackend, LpModel, MicroLpBackend, LP_TOL};
use crate::oracle::{best_over_subsets, SubsetSearch};
use crate::rounding::{
    consolidate_prices, rescale_structural, round, structural_violations, verify_feasibility, IntegralSolution,
    RescaleLog, VerificationReport,
};

/// Relative share of `W_max` used as the default additive slack.
pub const DEFAULT_DELTA_FRACTION: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub epsilon: f64,
    /// Additive slack; `None` means `1e-4 · W_max`.
    pub delta: Option<f64>,
    pub objective: Objective,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
    /// Recorded in the report. Tie-breaking is lexicographic, so results do
    /// not depend on it.
    pub seed: u64,
    /// Largest `θ` the solver accepts.
    pub theta_cap: usize,
    /// Largest number of guesses the sweep accepts.
    pub guess_cap: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            epsilon: 0.34,
            delta: None,
            objective: Objective::Surplus,
            jobs: 0,
            seed: 0,
            theta_cap: 8,
            guess_cap: 1_000_000,
        }
    }
}

impl SolverConfig {
    pub fn theta(&self) -> usize {
        GuessSpec::theta(self.epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Domain(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Domain(format!("delta must be positive and finite, got {d}")));
            }
        }
        if self.theta() > self.theta_cap {
            return Err(Error::EnumerationCap(format!(
                "theta = {} exceeds the cap of {}; raise epsilon or the cap",
                self.theta(),
                self.theta_cap
            )));
        }
        Ok(())
    }

    /// `W_max = Σ_j d_j · p_max`.
    pub fn w_max(instance: &Instance) -> f64 {
        instance.max_surplus()
    }

    pub fn delta_for(&self, instance: &Instance) -> f64 {
        self.delta.unwrap_or(DEFAULT_DELTA_FRACTION * Self::w_max(instance))
    }
}

/// The guess grid: every `Wbar` stratum crossed with every `θ`-subset.
#[derive(Clone, Debug, PartialEq)]
pub struct GuessPlan {
    pub epsilon: f64,
    pub theta: usize,
    /// `εΔ / (2n)`.
    pub wbar_lo: f64,
    pub w_max: f64,
    /// `lo · (1+ε)^k` for `k = 0..=K`, `K = ceil(log_{1+ε}(W_max / lo))`.
    pub wbar: Vec<f64>,
    /// `θ`-subsets of the candidates, lexicographic.
    pub subsets: Vec<Vec<usize>>,
}

impl GuessPlan {
    pub fn len(&self) -> usize {
        self.wbar.len() * self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Guesses in stratum-major order.
    pub fn guesses(&self) -> impl Iterator<Item = GuessSpec> + '_ {
        self.wbar.iter().flat_map(move |&w| {
            self.subsets.iter().map(move |s| GuessSpec { s: s.clone(), wbar: w, epsilon: self.epsilon })
        })
    }
}

/// Number of `Wbar` strata for the given range: `K + 1` with
/// `K = ceil(ln(w_max / lo) / ln(1 + ε))`, or 0 when the range is empty.
pub fn wbar_strata(lo: f64, w_max: f64, epsilon: f64) -> usize {
    if !(lo > 0.0 && w_max > 0.0) {
        return 0;
    }
    if w_max <= lo {
        return 1;
    }
    ((w_max / lo).ln() / (1.0 + epsilon).ln() - 1e-12).ceil() as usize + 1
}

/// Lays out the `(Wbar, S)` grid, refusing when it exceeds the guess cap.
pub fn enumerate_guesses(instance: &Instance, config: &SolverConfig) -> Result<GuessPlan> {
    config.validate()?;
    let theta = config.theta();
    let n = instance.len().max(1) as f64;
    let w_max = SolverConfig::w_max(instance);
    let delta = config.delta_for(instance);
    let lo = config.epsilon * delta / (2.0 * n);
    let strata = wbar_strata(lo, w_max, config.epsilon);
    let m = instance.metric.candidates().len();
    let per = binomial(m, theta);
    let total = (strata as u128) * per;
    if total > config.guess_cap as u128 {
        return Err(Error::EnumerationCap(format!(
            "{strata} Wbar strata x C({m}, {theta}) = {per} subsets gives {total} guesses, above the cap of {}",
            config.guess_cap
        )));
    }
    let wbar = (0..strata).map(|k| lo * (1.0 + config.epsilon).powi(k as i32)).collect();
    let subsets = combinations(instance.metric.candidates(), theta);
    Ok(GuessPlan { epsilon: config.epsilon, theta, wbar_lo: lo, w_max, wbar, subsets })
}

pub(crate) fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// All `k`-subsets of `items`, lexicographic by position.
pub(crate) fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > items.len() {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        let Some(pos) = (0..k).rev().find(|&p| idx[p] < items.len() - k + p) else {
            return out;
        };
        idx[pos] += 1;
        for p in pos + 1..k {
            idx[p] = idx[p - 1] + 1;
        }
    }
}

/// Best fixed-facility solution over all candidate subsets of size at most `θ`.
pub fn brute_force_small(instance: &Instance, config: &SolverConfig) -> Result<SubsetSearch> {
    brute_force_with(instance, config, &MicroLpBackend)
}

fn brute_force_with(instance: &Instance, config: &SolverConfig, backend: &dyn LpBackend) -> Result<SubsetSearch> {
    let cands = instance.metric.candidates();
    let subsets = (0..=config.theta().min(cands.len())).flat_map(|k| combinations(cands, k)).collect();
    best_over_subsets(instance, config.objective, subsets, backend)
}

/// How one guess ended.
#[derive(Clone, Debug, PartialEq)]
pub enum GuessStatus {
    /// The top-surplus row cannot be met even by the neighborhood value bound.
    Pruned,
    Infeasible,
    Failed(String),
    Solved(GuessOutcome),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuessOutcome {
    pub lp_value: f64,
    /// Objective after price consolidation, the input to rescaling.
    pub pre_rescale: f64,
    pub post_rescale: f64,
    /// Non-compliant facilities left after rescaling.
    pub violations: usize,
    pub rescale: RescaleLog,
    pub rounded_value: f64,
    pub open: Vec<usize>,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuessRecord {
    pub guess: GuessSpec,
    pub status: GuessStatus,
}

impl fmt::Display for GuessRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "guess wbar={:?} s={:?} ", self.guess.wbar, self.guess.s)?;
        match &self.status {
            GuessStatus::Pruned => write!(f, "status=pruned"),
            GuessStatus::Infeasible => write!(f, "status=infeasible"),
            GuessStatus::Failed(m) => write!(f, "status=failed message={m:?}"),
            GuessStatus::Solved(o) => write!(
                f,
                "status=solved lp={:?} pre={:?} post={:?} violations={} rounded={:?} open={:?} feasible={}",
                o.lp_value, o.pre_rescale, o.post_rescale, o.violations, o.rounded_value, o.open, o.feasible
            ),
        }
    }
}

/// Which stage produced the returned solution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selected {
    BruteForce,
    Guess,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub objective: Objective,
    pub epsilon: f64,
    pub theta: usize,
    pub delta: f64,
    pub w_max: f64,
    pub wbar_lo: f64,
    pub wbar_strata: usize,
    pub subsets_per_stratum: usize,
    pub guesses_total: usize,
    pub guesses_pruned: usize,
    pub guesses_infeasible: usize,
    pub guesses_failed: usize,
    pub lps_brute_force: usize,
    pub lps_guess: usize,
    pub time_brute_force: Duration,
    pub time_sweep: Duration,
    pub time_total: Duration,
    /// Best brute-force value.
    pub w1: f64,
    /// Best relaxation value over solved guesses.
    pub w2: Option<f64>,
    pub best_rounded: Option<f64>,
    pub best_guess: Option<GuessSpec>,
    pub selected: Selected,
    pub value: f64,
    /// `max(W1, (1-ε) W2 - Δ)`.
    pub certified_lower_bound: f64,
    /// `max(W1, W2)`: bounds the optimum when its top facility carries at
    /// least the smallest `Wbar`.
    pub opt_upper_bound: f64,
    /// The certificate falls back to its additive form (`max(W1, W2) < Δ`).
    pub additive_regime: bool,
    pub no_facility_opened: bool,
    pub seed: u64,
    pub verification: VerificationReport,
    pub guesses: Vec<GuessRecord>,
}

impl RunReport {
    pub fn lps_total(&self) -> usize {
        self.lps_brute_force + self.lps_guess
    }

    /// Solved guesses in stratum-major order.
    pub fn solved(&self) -> impl Iterator<Item = (&GuessSpec, &GuessOutcome)> {
        self.guesses.iter().filter_map(|r| match &r.status {
            GuessStatus::Solved(o) => Some((&r.guess, o)),
            _ => None,
        })
    }
}

impl fmt::Display for RunReport {
    /// `key: value` lines; the alternate form appends one line per guess.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |v| format!("{v:?}"));
        writeln!(f, "objective: {}", self.objective)?;
        writeln!(f, "epsilon: {:?}", self.epsilon)?;
        writeln!(f, "theta: {}", self.theta)?;
        writeln!(f, "delta: {:?}", self.delta)?;
        writeln!(f, "w_max: {:?}", self.w_max)?;
        writeln!(f, "wbar_lo: {:?}", self.wbar_lo)?;
        writeln!(f, "wbar_strata: {}", self.wbar_strata)?;
        writeln!(f, "subsets_per_stratum: {}", self.subsets_per_stratum)?;
        writeln!(f, "guesses_total: {}", self.guesses_total)?;
        writeln!(f, "guesses_pruned: {}", self.guesses_pruned)?;
        writeln!(f, "guesses_infeasible: {}", self.guesses_infeasible)?;
        writeln!(f, "guesses_failed: {}", self.guesses_failed)?;
        writeln!(f, "lp_count_brute_force: {}", self.lps_brute_force)?;
        writeln!(f, "lp_count_guesses: {}", self.lps_guess)?;
        writeln!(f, "lp_count_total: {}", self.lps_total())?;
        writeln!(f, "time_brute_force_s: {:.6}", self.time_brute_force.as_secs_f64())?;
        writeln!(f, "time_sweep_s: {:.6}", self.time_sweep.as_secs_f64())?;
        writeln!(f, "time_total_s: {:.6}", self.time_total.as_secs_f64())?;
        writeln!(f, "w1: {:?}", self.w1)?;
        writeln!(f, "w2: {}", opt(self.w2))?;
        writeln!(f, "best_rounded: {}", opt(self.best_rounded))?;
        match &self.best_guess {
            Some(g) => writeln!(f, "best_guess: wbar={:?} s={:?}", g.wbar, g.s)?,
            None => writeln!(f, "best_guess: none")?,
        }
        let selected = match self.selected {
            Selected::BruteForce => "brute-force",
            Selected::Guess => "guess",
        };
        writeln!(f, "selected: {selected}")?;
        writeln!(f, "value: {:?}", self.value)?;
        writeln!(f, "certified_lower_bound: {:?}", self.certified_lower_bound)?;
        writeln!(f, "opt_upper_bound: {:?}", self.opt_upper_bound)?;
        writeln!(f, "additive_regime: {}", self.additive_regime)?;
        writeln!(f, "no_facility_opened: {}", self.no_facility_opened)?;
        writeln!(f, "verified_at_4r: {}", self.verification.passed())?;
        write!(f, "seed: {}", self.seed)?;
        if f.alternate() {
            for g in &self.guesses {
                write!(f, "\n{g}")?;
            }
        }
        Ok(())
    }
}

/// Runs the full pipeline with the default backend.
pub fn solve(instance: &Instance, config: &SolverConfig) -> Result<(IntegralSolution, RunReport)> {
    solve_with(instance, config, &MicroLpBackend)
}

/// Runs the full pipeline on `backend`, inside a pool of `config.jobs` threads.
pub fn solve_with(
    instance: &Instance,
    config: &SolverConfig,
    backend: &dyn LpBackend,
) -> Result<(IntegralSolution, RunReport)> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Domain(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run(instance, config, backend))
}

fn run(instance: &Instance, config: &SolverConfig, backend: &dyn LpBackend) -> Result<(IntegralSolution, RunReport)> {
    let start = Instant::now();
    let brute = brute_force_with(instance, config, backend)?;
    let time_brute_force = start.elapsed();

    let sweep_start = Instant::now();
    let (plan, records, mut candidates) = if config.objective == Objective::Profit {
        profit_pass(instance, config, backend)?
    } else {
        guess_sweep(instance, config, backend)?
    };
    let time_sweep = sweep_start.elapsed();

    let mut report = RunReport {
        objective: config.objective,
        epsilon: config.epsilon,
        theta: config.theta(),
        delta: config.delta_for(instance),
        w_max: plan.w_max,
        wbar_lo: plan.wbar_lo,
        wbar_strata: plan.wbar.len(),
        subsets_per_stratum: plan.subsets.len(),
        guesses_total: records.len(),
        guesses_pruned: 0,
        guesses_infeasible: 0,
        guesses_failed: 0,
        lps_brute_force: brute.evaluated,
        lps_guess: 0,
        time_brute_force,
        time_sweep,
        time_total: Duration::ZERO,
        w1: brute.value,
        w2: None,
        best_rounded: None,
        best_guess: None,
        selected: Selected::BruteForce,
        value: brute.value,
        certified_lower_bound: 0.0,
        opt_upper_bound: 0.0,
        additive_regime: false,
        no_facility_opened: false,
        seed: config.seed,
        verification: verify_feasibility(instance, &brute.solution, 4.0),
        guesses: Vec::new(),
    };
    for r in &records {
        match &r.status {
            GuessStatus::Pruned => report.guesses_pruned += 1,
            GuessStatus::Infeasible => report.guesses_infeasible += 1,
            GuessStatus::Failed(_) => report.guesses_failed += 1,
            GuessStatus::Solved(o) => report.w2 = Some(report.w2.map_or(o.lp_value, |w: f64| w.max(o.lp_value))),
        }
    }
    report.lps_guess = records.len() - report.guesses_pruned;
    let attempted = report.lps_guess;
    if attempted > 0 && report.guesses_failed == attempted {
        return Err(Error::Solver { status: "error".into(), message: "every guess failed".into() });
    }

    candidates.sort_by(rank);
    let mut solution = brute.solution;
    if let Some(best) = candidates.into_iter().next() {
        report.best_rounded = Some(best.value);
        report.best_guess = Some(best.guess.clone());
        let brute_key = (report.w1, solution.open_locations());
        if best.value > brute_key.0 || (best.value == brute_key.0 && best.open < brute_key.1) {
            report.selected = Selected::Guess;
            report.value = best.value;
            solution = best.solution;
        }
    }
    let scale = 1e-9 * plan.w_max.max(1.0);
    let w2 = report.w2.unwrap_or(0.0);
    report.certified_lower_bound = report.w1.max((1.0 - config.epsilon) * w2 - report.delta);
    report.opt_upper_bound = report.w1.max(w2);
    report.additive_regime = report.opt_upper_bound < report.delta;
    report.no_facility_opened = solution.facilities.is_empty();
    report.verification = verify_feasibility(instance, &solution, 4.0);
    if report.value + scale < report.certified_lower_bound {
        report.guesses = records;
        return Err(Error::InvariantBreach(format!(
            "selected value {} is below the certified bound {}\n{report:#}",
            report.value, report.certified_lower_bound
        )));
    }
    report.guesses = records;
    report.time_total = start.elapsed();
    Ok((solution, report))
}

/// A rounded solution from one guess.
struct Candidate {
    guess: GuessSpec,
    value: f64,
    open: Vec<usize>,
    solution: IntegralSolution,
}

/// Higher value first, then smaller open set, then smaller `S`, then smaller `Wbar`.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.value
        .total_cmp(&a.value)
        .then_with(|| a.open.cmp(&b.open))
        .then_with(|| a.guess.s.cmp(&b.guess.s))
        .then_with(|| a.guess.wbar.total_cmp(&b.guess.wbar))
}

type SweepResult = (GuessPlan, Vec<GuessRecord>, Vec<Candidate>);

fn guess_sweep(instance: &Instance, config: &SolverConfig, backend: &dyn LpBackend) -> Result<SweepResult> {
    let plan = enumerate_guesses(instance, config)?;
    if plan.is_empty() {
        return Ok((plan, Vec::new(), Vec::new()));
    }
    let base = build_base_lp(instance, config.objective)?;
    let bounds: Vec<f64> = instance.nodes.iter().map(|node| node_bound(node, config.objective)).collect();
    let guesses: Vec<GuessSpec> = plan.guesses().collect();
    let results: Vec<(GuessRecord, Option<Candidate>)> = guesses
        .into_par_iter()
        .map(|guess| {
            let reach = neighborhood_bound(instance, &guess.s, &bounds);
            let need = guess.wbar * guess.s.len() as f64 * (1.0 - guess.epsilon);
            if reach < need * (1.0 - 1e-9) {
                return (GuessRecord { guess, status: GuessStatus::Pruned }, None);
            }
            evaluate_guess(instance, &base, guess, backend)
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut candidates = Vec::new();
    for (record, cand) in results {
        records.push(record);
        candidates.extend(cand);
    }
    Ok((plan, records, candidates))
}

/// Most a node can add to any facility's contribution.
fn node_bound(node: &crate::instance::Node, objective: Objective) -> f64 {
    match objective {
        Objective::Throughput => node.demand_volume(),
        _ => node.demand().cumulative_at(1.0),
    }
}

/// Bound on `Σ_{i∈S} W_i`: every node within `R` of some facility of `S`
/// contributes at most its full value once.
fn neighborhood_bound(instance: &Instance, s: &[usize], bounds: &[f64]) -> f64 {
    (0..instance.len())
        .filter(|&j| s.iter().any(|&i| instance.metric.distance(i, j) <= instance.radius))
        .map(|j| bounds[j])
        .sum()
}

fn evaluate_guess(
    instance: &Instance,
    base: &LpModel,
    guess: GuessSpec,
    backend: &dyn LpBackend,
) -> (GuessRecord, Option<Candidate>) {
    let run = || -> Result<Option<(GuessOutcome, IntegralSolution)>> {
        let model = base.strengthened(&guess)?;
        let Some(sol) = solve_lp(&model, backend, LP_TOL)? else {
            return Ok(None);
        };
        Ok(Some(process_fractional(instance, &sol, Some(&guess))?))
    };
    match run() {
        Ok(None) => (GuessRecord { guess, status: GuessStatus::Infeasible }, None),
        Err(e) => (GuessRecord { guess, status: GuessStatus::Failed(e.to_string()) }, None),
        Ok(Some((outcome, solution))) => {
            let cand = outcome.feasible.then(|| Candidate {
                guess: guess.clone(),
                value: outcome.rounded_value,
                open: outcome.open.clone(),
                solution,
            });
            (GuessRecord { guess, status: GuessStatus::Solved(outcome) }, cand)
        }
    }
}

/// Consolidate, rescale, round and verify one relaxation optimum.
fn process_fractional(
    instance: &Instance,
    sol: &crate::lp::FractionalSolution,
    guess: Option<&GuessSpec>,
) -> Result<(GuessOutcome, IntegralSolution)> {
    let consolidated = consolidate_prices(sol, instance)?;
    let (rescaled, log) = rescale_structural(&consolidated, guess);
    let violations = structural_violations(&rescaled).len();
    let (integral, _) = round(&rescaled, instance)?;
    let feasible = verify_feasibility(instance, &integral, 4.0).passed();
    let outcome = GuessOutcome {
        lp_value: sol.lp_value.unwrap_or_else(|| sol.objective_value()),
        pre_rescale: consolidated.objective_value(),
        post_rescale: rescaled.objective_value(),
        violations,
        rescale: log,
        rounded_value: integral.objective_value(),
        open: integral.open_locations(),
        feasible,
    };
    Ok((outcome, integral))
}

/// Profit objective: one base relaxation (no budget row), rescaled and rounded.
fn profit_pass(instance: &Instance, config: &SolverConfig, backend: &dyn LpBackend) -> Result<SweepResult> {
    let plan = GuessPlan {
        epsilon: config.epsilon,
        theta: config.theta(),
        wbar_lo: 0.0,
        w_max: SolverConfig::w_max(instance),
        wbar: Vec::new(),
        subsets: Vec::new(),
    };
    let guess = GuessSpec { s: Vec::new(), wbar: 0.0, epsilon: config.epsilon };
    let base = build_base_lp(instance, config.objective)?;
    let status = match solve_lp(&base, backend, LP_TOL) {
        Ok(None) => GuessStatus::Infeasible,
        Err(e) => GuessStatus::Failed(e.to_string()),
        Ok(Some(sol)) => match process_fractional(instance, &sol, None) {
            Err(e) => GuessStatus::Failed(e.to_string()),
            Ok((outcome, solution)) => {
                let cand = outcome.feasible.then(|| Candidate {
                    guess: guess.clone(),
                    value: outcome.rounded_value,
                    open: outcome.open.clone(),
                    solution,
                });
                let record = GuessRecord { guess, status: GuessStatus::Solved(outcome) };
                return Ok((plan, vec![record], cand.into_iter().collect()));
            }
        },
    };
    Ok((plan, vec![GuessRecord { guess, status }], Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{Curve, Metric, Node};
    use crate::oracle::{exact_integer_opt, DEFAULT_SUBSET_CAP};

    fn node(name: &str, d: f64) -> Node {
        Node::new(
            name,
            Curve::uniform_demand(d, 2.0, 3.0, 3, 3.0).unwrap(),
            Curve::uniform_supply(d, 0.0, 1.0, 3).unwrap(),
        )
        .unwrap()
    }

    fn single(l: f64) -> Instance {
        let metric = Metric::new(vec![vec![0.0]], vec![0]).unwrap();
        Instance::new(vec![node("v", l)], metric, l, 1.0, 3.0).unwrap()
    }

    #[test]
    fn combinations_and_binomials_agree() {
        let items = [3, 5, 7, 9, 11];
        for k in 0..=6 {
            let c = combinations(&items, k);
            assert_eq!(c.len() as u128, binomial(5, k));
            assert!(c.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(binomial(4, 2), 6);
    }

    #[test]
    fn guess_grid_counts() {
        let coords: Vec<(f64, f64)> = (0..4).map(|i| (i as f64, 0.0)).collect();
        let metric = Metric::from_coordinates(&coords).unwrap();
        let nodes = (0..4).map(|i| node(&format!("n{i}"), 1.0)).collect();
        let inst = Instance::new(nodes, metric, 1.0, 1.0, 3.0).unwrap();
        let config = SolverConfig { epsilon: 0.5, ..SolverConfig::default() };
        let plan = enumerate_guesses(&inst, &config).unwrap();
        assert_eq!(plan.subsets.len(), 6);
        let lo = 0.5 * 1e-4 * 12.0 / 8.0;
        assert_eq!(plan.wbar.len(), ((12.0f64 / lo).ln() / 1.5f64.ln()).ceil() as usize + 1);
        assert_eq!(plan.len(), plan.guesses().count());

        let wide = SolverConfig { epsilon: 0.5, delta: Some(12.0), ..SolverConfig::default() };
        let plan = enumerate_guesses(&inst, &wide).unwrap();
        let expected = ((2.0 * 4.0 / 0.5f64).ln() / 1.5f64.ln()).ceil() as usize + 1;
        assert_eq!(plan.wbar.len(), expected);

        let capped = SolverConfig { guess_cap: 10, ..config };
        assert!(matches!(enumerate_guesses(&inst, &capped), Err(Error::EnumerationCap(_))));
    }

    #[test]
    fn theta_cap_guard() {
        let config = SolverConfig { epsilon: 0.05, ..SolverConfig::default() };
        assert!(matches!(config.validate(), Err(Error::EnumerationCap(_))));
    }

    #[test]
    fn single_node_surplus_two_l() {
        for eps in [0.2, 0.34, 0.5, 0.9] {
            let inst = single(2.0);
            let config = SolverConfig { epsilon: eps, ..SolverConfig::default() };
            let (sol, report) = solve(&inst, &config).unwrap();
            assert_eq!(sol.open_locations(), vec![0]);
            assert!((sol.total_surplus() - 4.0).abs() < 1e-6, "{report}");
            assert!(report.verification.passed());
        }
    }

    #[test]
    fn nothing_feasible_gives_zero() {
        let mut inst = single(1.0);
        inst.flow_lower_bound = 5.0;
        let (sol, report) = solve(&inst, &SolverConfig::default()).unwrap();
        assert!(sol.facilities.is_empty());
        assert!(report.no_facility_opened);
        assert!(report.to_string().contains("no_facility_opened: true"));
    }

    #[test]
    fn beats_oracle_bound_on_a_line() {
        let coords: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 0.0)).collect();
        let metric = Metric::from_coordinates(&coords).unwrap();
        let nodes = (0..5).map(|i| node(&format!("n{i}"), 0.5 + 0.25 * i as f64)).collect();
        let inst = Instance::new(nodes, metric, 1.2, 1.0, 3.0).unwrap();
        let config = SolverConfig::default();
        let (sol, report) = solve(&inst, &config).unwrap();
        let opt = exact_integer_opt(&inst, Objective::Surplus, DEFAULT_SUBSET_CAP).unwrap();
        assert!(report.verification.passed(), "{report}");
        assert!(sol.total_surplus() >= (1.0 - config.epsilon) * opt.total_surplus() - report.delta);
    }

    #[test]
    fn profit_objective_runs() {
        let inst = single(1.0);
        let config = SolverConfig { objective: Objective::Profit, ..SolverConfig::default() };
        let (sol, report) = solve(&inst, &config).unwrap();
        assert!(report.verification.passed());
        let opt = exact_integer_opt(&inst, Objective::Profit, DEFAULT_SUBSET_CAP).unwrap();
        assert!((sol.objective_value() - opt.objective_value()).abs() < 1e-6);
    }
}
