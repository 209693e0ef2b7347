//! Linear programs for two-sided facility location: a small modeling layer,
//! the pluggable solver interface, model builders for the base,
//! strengthened and fixed-facility relaxations, and the fractional solution
//! extracted from a solve.

use std::fmt;

use crate::error::{Error, Result};
use crate::instance::{Curve, Instance, Objective};

/// Default feasibility tolerance for post-solve residual checks.
pub const LP_TOL: f64 = 1e-7;

/// Routing mass at or below this is treated as no connection.
pub const ZERO_MASS: f64 = 1e-12;

/// Primal values this close to zero are read as zero.
const NOISE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Maximize,
    Minimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Le,
    Ge,
    Eq,
}

/// Which family a constraint row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RowTag {
    Wbb,
    SinglePrice,
    SingleRoute,
    Open,
    FlowBalance,
    FlowLower,
    CapW,
    ForceOpen,
    TopSurplus,
    /// Envy variant: facility-choice mass per node.
    Routing,
    /// Envy variant: price (wage) mass per (facility, node, subtype).
    PricePerEdge,
    /// Envy variant: stochastic dominance along a subtype edge.
    Ladder,
    /// Envy variant: weighted flow lower bound.
    WeightedLower,
}

impl fmt::Display for RowTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RowTag::Wbb => "wbb",
            RowTag::SinglePrice => "single-price",
            RowTag::SingleRoute => "single-route",
            RowTag::Open => "open",
            RowTag::FlowBalance => "flow-balance",
            RowTag::FlowLower => "flow-lower",
            RowTag::CapW => "cap-W",
            RowTag::ForceOpen => "force-open",
            RowTag::TopSurplus => "top-surplus",
            RowTag::Routing => "routing",
            RowTag::PricePerEdge => "price-per-edge",
            RowTag::Ladder => "ladder",
            RowTag::WeightedLower => "weighted-lower",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub cmp: Cmp,
    pub rhs: f64,
    pub tag: RowTag,
}

/// A plain LP: bounded variables, linear objective, tagged rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LpProblem {
    pub sense: Sense,
    pub objective: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
    pub names: Vec<String>,
    pub rows: Vec<Row>,
}

impl LpProblem {
    pub fn new(sense: Sense) -> LpProblem {
        LpProblem { sense, objective: Vec::new(), bounds: Vec::new(), names: Vec::new(), rows: Vec::new() }
    }

    pub fn add_var(&mut self, name: impl Into<String>, obj: f64, lo: f64, hi: f64) -> usize {
        self.objective.push(obj);
        self.bounds.push((lo, hi));
        self.names.push(name.into());
        self.objective.len() - 1
    }

    pub fn add_row(&mut self, tag: RowTag, coeffs: Vec<(usize, f64)>, cmp: Cmp, rhs: f64) {
        debug_assert!(coeffs.iter().all(|&(v, _)| v < self.objective.len()));
        self.rows.push(Row { coeffs, cmp, rhs, tag });
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn count_rows(&self, tag: RowTag) -> usize {
        self.rows.iter().filter(|r| r.tag == tag).count()
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest scaled violation over rows and bounds.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (v, &(lo, hi)) in x.iter().zip(&self.bounds) {
            worst = worst.max(lo - v).max(v - hi);
        }
        for row in &self.rows {
            let mut lhs = 0.0;
            let mut mag = row.rhs.abs();
            for &(v, c) in &row.coeffs {
                lhs += c * x[v];
                mag = mag.max((c * x[v]).abs());
            }
            let gap = match row.cmp {
                Cmp::Le => lhs - row.rhs,
                Cmp::Ge => row.rhs - lhs,
                Cmp::Eq => (lhs - row.rhs).abs(),
            };
            worst = worst.max(gap / (1.0 + mag));
        }
        worst
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    Error,
}

impl fmt::Display for LpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LpStatus::Optimal => "optimal",
            LpStatus::Infeasible => "infeasible",
            LpStatus::Unbounded => "unbounded",
            LpStatus::Error => "error",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpOutcome {
    pub status: LpStatus,
    pub primal: Vec<f64>,
    pub objective: f64,
    pub message: String,
}

/// A linear-programming subroutine. Implementations must be usable from
/// several threads at once; each call owns its own solver state.
pub trait LpBackend: Sync {
    fn solve(&self, problem: &LpProblem) -> LpOutcome;
}

/// Dense-simplex backend built on the `microlp` crate.
#[derive(Clone, Copy, Debug, Default)]
pub struct MicroLpBackend;

impl LpBackend for MicroLpBackend {
    fn solve(&self, problem: &LpProblem) -> LpOutcome {
        use microlp::{ComparisonOp, OptimizationDirection, Problem, SolveOutcome};
        let dir = match problem.sense {
            Sense::Maximize => OptimizationDirection::Maximize,
            Sense::Minimize => OptimizationDirection::Minimize,
        };
        let mut p = Problem::new(dir);
        let vars: Vec<_> = problem
            .objective
            .iter()
            .zip(&problem.bounds)
            .map(|(&c, &b)| p.add_var(c, b))
            .collect();
        for row in &problem.rows {
            let op = match row.cmp {
                Cmp::Le => ComparisonOp::Le,
                Cmp::Ge => ComparisonOp::Ge,
                Cmp::Eq => ComparisonOp::Eq,
            };
            let terms: Vec<_> = row.coeffs.iter().filter(|t| t.1 != 0.0).map(|&(v, c)| (vars[v], c)).collect();
            p.add_constraint(terms.as_slice(), op, row.rhs);
        }
        let failed = |status, message: String| LpOutcome { status, primal: Vec::new(), objective: f64::NAN, message };
        match p.solve() {
            Ok(SolveOutcome::Solution(s)) => LpOutcome {
                status: LpStatus::Optimal,
                primal: vars.iter().map(|&v| s.var_value_raw(v)).collect(),
                objective: s.objective(),
                message: String::new(),
            },
            Ok(SolveOutcome::Interrupted(_)) => failed(LpStatus::Error, "solve interrupted".into()),
            Err(microlp::Error::Infeasible) => failed(LpStatus::Infeasible, "infeasible".into()),
            Err(microlp::Error::Unbounded) => failed(LpStatus::Unbounded, "unbounded".into()),
            Err(e) => failed(LpStatus::Error, e.to_string()),
        }
    }
}

/// Accounting for one level of one node's curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelValue {
    pub level: f64,
    /// `d_j q` or `s_j r`.
    pub flow: f64,
    /// `V_j(q)` or `C_j(r)`.
    pub value: f64,
    /// Price collected `d_j q F^-1(q)` or wage paid `s_j r H^-1(r)`.
    pub money: f64,
}

impl LevelValue {
    pub fn on_curve(curve: &Curve, level: f64) -> LevelValue {
        LevelValue {
            level,
            flow: curve.flow_at(level),
            value: curve.cumulative_at(level),
            money: curve.revenue_at(level),
        }
    }

    /// Levels of the curve's grid, with stored grid values used verbatim.
    pub fn grid(curve: &Curve) -> Vec<LevelValue> {
        curve
            .points()
            .iter()
            .map(|p| LevelValue {
                level: p.level,
                flow: curve.volume() * p.level,
                value: p.cumulative,
                money: curve.volume() * p.level * p.marginal,
            })
            .collect()
    }
}

/// The facility-local block of LP variables: `y_i` and all routings to `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FacilityBlock {
    /// Stable identifier; candidate positions first, merged facilities after.
    pub id: usize,
    /// Node hosting the facility.
    pub location: usize,
    pub y: f64,
    /// `z_demand[j][k]`: fraction of node `j` routed here at demand level `k`.
    /// Level index 0 (the outlier level) is always zero.
    pub z_demand: Vec<Vec<f64>>,
    pub z_supply: Vec<Vec<f64>>,
}

impl FacilityBlock {
    pub fn empty(id: usize, location: usize, demand_levels: &[Vec<LevelValue>], supply_levels: &[Vec<LevelValue>]) -> FacilityBlock {
        FacilityBlock {
            id,
            location,
            y: 0.0,
            z_demand: demand_levels.iter().map(|l| vec![0.0; l.len()]).collect(),
            z_supply: supply_levels.iter().map(|l| vec![0.0; l.len()]).collect(),
        }
    }

    pub fn demand_mass(&self, j: usize) -> f64 {
        self.z_demand[j].iter().skip(1).sum()
    }

    pub fn supply_mass(&self, j: usize) -> f64 {
        self.z_supply[j].iter().skip(1).sum()
    }

    /// Nodes partially demand-connected to this facility.
    pub fn demand_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.z_demand.len()).filter(move |&j| self.demand_mass(j) > ZERO_MASS)
    }

    pub fn supply_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.z_supply.len()).filter(move |&j| self.supply_mass(j) > ZERO_MASS)
    }

    pub fn is_connected(&self, j: usize) -> bool {
        self.demand_mass(j) > ZERO_MASS || self.supply_mass(j) > ZERO_MASS
    }

    /// Multiplies every variable of the block by `factor`.
    pub fn scale(&mut self, factor: f64) {
        self.y *= factor;
        for row in self.z_demand.iter_mut().chain(self.z_supply.iter_mut()) {
            for z in row {
                *z *= factor;
            }
        }
    }

    pub fn clear(&mut self) {
        self.scale(0.0);
    }

    /// Adds `other`'s variables into this block.
    pub fn absorb(&mut self, other: &FacilityBlock) {
        self.y += other.y;
        for (a, b) in self.z_demand.iter_mut().zip(&other.z_demand) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.z_supply.iter_mut().zip(&other.z_supply) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// LP variable assignment in facility-block form. The level distributions
/// `alpha`, `beta` are implied by the routings: for positive levels
/// `alpha_jq = Σ_i z_ijq`, and the outlier level takes the remainder.
#[derive(Clone, Debug, PartialEq)]
pub struct FractionalSolution {
    pub objective: Objective,
    pub demand_levels: Vec<Vec<LevelValue>>,
    pub supply_levels: Vec<Vec<LevelValue>>,
    pub facilities: Vec<FacilityBlock>,
    /// Objective value reported by the LP solver, if this came from a solve.
    pub lp_value: Option<f64>,
}

impl FractionalSolution {
    pub fn num_nodes(&self) -> usize {
        self.demand_levels.len()
    }

    pub fn facility(&self, id: usize) -> Option<&FacilityBlock> {
        self.facilities.iter().find(|f| f.id == id)
    }

    /// `η_j`: fraction of node `j` routed at a positive demand level.
    pub fn eta(&self, j: usize) -> f64 {
        self.facilities.iter().map(|f| f.demand_mass(j)).sum()
    }

    /// `φ_j`: fraction of node `j` routed at a positive supply level.
    pub fn phi(&self, j: usize) -> f64 {
        self.facilities.iter().map(|f| f.supply_mass(j)).sum()
    }

    pub fn alpha(&self, j: usize) -> Vec<f64> {
        level_distribution(self.demand_levels[j].len(), self.facilities.iter().map(|f| &f.z_demand[j]))
    }

    pub fn beta(&self, j: usize) -> Vec<f64> {
        level_distribution(self.supply_levels[j].len(), self.facilities.iter().map(|f| &f.z_supply[j]))
    }

    pub fn demand_flow(&self, f: &FacilityBlock) -> f64 {
        weighted(&f.z_demand, &self.demand_levels, |l| l.flow)
    }

    pub fn supply_flow(&self, f: &FacilityBlock) -> f64 {
        weighted(&f.z_supply, &self.supply_levels, |l| l.flow)
    }

    /// `W_i`: buyer value minus seller cost routed to the facility.
    pub fn surplus(&self, f: &FacilityBlock) -> f64 {
        weighted(&f.z_demand, &self.demand_levels, |l| l.value) - weighted(&f.z_supply, &self.supply_levels, |l| l.value)
    }

    /// `R_i`: prices collected minus wages paid at the facility.
    pub fn profit(&self, f: &FacilityBlock) -> f64 {
        weighted(&f.z_demand, &self.demand_levels, |l| l.money) - weighted(&f.z_supply, &self.supply_levels, |l| l.money)
    }

    /// Facility's share of the configured objective.
    pub fn contribution(&self, f: &FacilityBlock) -> f64 {
        contribution(self.objective, self.surplus(f), self.profit(f), self.demand_flow(f))
    }

    pub fn total_surplus(&self) -> f64 {
        self.facilities.iter().map(|f| self.surplus(f)).sum()
    }

    pub fn total_profit(&self) -> f64 {
        self.facilities.iter().map(|f| self.profit(f)).sum()
    }

    pub fn total_throughput(&self) -> f64 {
        self.facilities.iter().map(|f| self.demand_flow(f)).sum()
    }

    pub fn objective_value(&self) -> f64 {
        self.facilities.iter().map(|f| self.contribution(f)).sum()
    }

    /// Largest violation of the facility-local constraints and per-node
    /// routing sums, for the stored `y` (routed mass at most `y` is checked only when `check_open`).
    pub fn max_local_violation(&self, flow_lower_bound: f64, check_open: bool) -> f64 {
        let mut worst = 0.0f64;
        for f in &self.facilities {
            let (d, s) = (self.demand_flow(f), self.supply_flow(f));
            worst = worst.max((d - s).abs() / (1.0 + d.abs()));
            worst = worst.max(flow_lower_bound * f.y - d);
            if check_open {
                for j in 0..self.num_nodes() {
                    worst = worst.max(f.demand_mass(j) - f.y).max(f.supply_mass(j) - f.y);
                }
            }
        }
        for j in 0..self.num_nodes() {
            worst = worst.max(self.eta(j) - 1.0).max(self.phi(j) - 1.0);
        }
        worst
    }
}

pub(crate) fn contribution(objective: Objective, surplus: f64, profit: f64, flow: f64) -> f64 {
    match objective {
        Objective::Surplus => surplus,
        Objective::Profit => profit,
        Objective::Throughput => flow,
    }
}

fn level_distribution<'a>(len: usize, rows: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for row in rows {
        for (k, z) in row.iter().enumerate().skip(1) {
            out[k] += z;
        }
    }
    let routed: f64 = out.iter().sum();
    out[0] = (1.0 - routed).max(0.0);
    out
}

fn weighted(z: &[Vec<f64>], levels: &[Vec<LevelValue>], pick: impl Fn(&LevelValue) -> f64) -> f64 {
    let mut total = 0.0;
    for (row, lv) in z.iter().zip(levels) {
        for (k, &mass) in row.iter().enumerate().skip(1) {
            if mass != 0.0 {
                total += mass * pick(&lv[k]);
            }
        }
    }
    total
}

/// Guess `(Wbar, S)` for the strengthened relaxation.
#[derive(Clone, Debug, PartialEq)]
pub struct GuessSpec {
    /// Node ids of the facilities forced open, ascending.
    pub s: Vec<usize>,
    /// Surplus cap for facilities outside `S`.
    pub wbar: f64,
    pub epsilon: f64,
}

impl GuessSpec {
    pub fn new(mut s: Vec<usize>, wbar: f64, epsilon: f64) -> Result<GuessSpec> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Domain(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        if !(wbar >= 0.0 && wbar.is_finite()) {
            return Err(Error::Domain(format!("Wbar must be finite and nonnegative, got {wbar}")));
        }
        s.sort_unstable();
        let len = s.len();
        s.dedup();
        if s.len() != len {
            return Err(Error::Domain("guessed facility set has duplicates".into()));
        }
        Ok(GuessSpec { s, wbar, epsilon })
    }

    /// `θ = ceil(1/ε)`, the nominal size of `S`.
    pub fn theta(epsilon: f64) -> usize {
        (1.0 / epsilon - 1e-9).ceil().max(1.0) as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    y: Vec<usize>,
    alpha: Vec<Vec<usize>>,
    beta: Vec<Vec<usize>>,
    /// `[candidate][node]` -> index of the variable for level 1 (levels are contiguous).
    zd: Vec<Vec<Option<usize>>>,
    zs: Vec<Vec<Option<usize>>>,
}

/// A facility-location LP together with the map back to its variables.
#[derive(Clone, Debug, PartialEq)]
pub struct LpModel {
    pub problem: LpProblem,
    pub objective: Objective,
    /// Candidate sites (node ids) in variable order.
    pub candidates: Vec<usize>,
    pub demand_levels: Vec<Vec<LevelValue>>,
    pub supply_levels: Vec<Vec<LevelValue>>,
    layout: Layout,
}

impl LpModel {
    pub fn num_vars(&self) -> usize {
        self.problem.num_vars()
    }

    pub fn num_rows(&self) -> usize {
        self.problem.num_rows()
    }

    pub fn y_var(&self, site: usize) -> Option<usize> {
        self.candidates.iter().position(|&c| c == site).map(|c| self.layout.y[c])
    }

    /// Linear form of `W_i` (or the objective-specific contribution) in the z variables.
    fn contribution_terms(&self, c: usize) -> Vec<(usize, f64)> {
        let pick = |l: &LevelValue, demand: bool| {
            let sign = if demand { 1.0 } else { -1.0 };
            match self.objective {
                Objective::Surplus => sign * l.value,
                Objective::Profit => sign * l.money,
                Objective::Throughput if demand => l.flow,
                Objective::Throughput => 0.0,
            }
        };
        let mut terms = Vec::new();
        for (j, start) in self.layout.zd[c].iter().enumerate() {
            if let Some(start) = start {
                for (k, l) in self.demand_levels[j].iter().enumerate().skip(1) {
                    terms.push((start + k - 1, pick(l, true)));
                }
            }
        }
        for (j, start) in self.layout.zs[c].iter().enumerate() {
            if let Some(start) = start {
                for (k, l) in self.supply_levels[j].iter().enumerate().skip(1) {
                    terms.push((start + k - 1, pick(l, false)));
                }
            }
        }
        terms.retain(|t| t.1 != 0.0);
        terms
    }

    /// Reads a primal vector into facility blocks.
    pub fn extract(&self, x: &[f64]) -> FractionalSolution {
        let clamp = |v: f64| if v.abs() <= NOISE { 0.0 } else { v.clamp(0.0, 1.0) };
        let facilities = self
            .candidates
            .iter()
            .enumerate()
            .map(|(c, &site)| {
                let mut block = FacilityBlock::empty(c, site, &self.demand_levels, &self.supply_levels);
                block.y = clamp(x[self.layout.y[c]]);
                for (j, start) in self.layout.zd[c].iter().enumerate() {
                    if let Some(start) = start {
                        for k in 1..self.demand_levels[j].len() {
                            block.z_demand[j][k] = clamp(x[start + k - 1]);
                        }
                    }
                }
                for (j, start) in self.layout.zs[c].iter().enumerate() {
                    if let Some(start) = start {
                        for k in 1..self.supply_levels[j].len() {
                            block.z_supply[j][k] = clamp(x[start + k - 1]);
                        }
                    }
                }
                // Routing left on a closed facility is solver noise bounded by the tolerance.
                if block.y == 0.0 {
                    block.clear();
                }
                block
            })
            .collect();
        FractionalSolution {
            objective: self.objective,
            demand_levels: self.demand_levels.clone(),
            supply_levels: self.supply_levels.clone(),
            facilities,
            lp_value: None,
        }
    }
}

/// Base relaxation: single price/wage per node, routing within `R`, open
/// facilities, flow balance, flow lower bound, and (except for the profit
/// objective) weak budget balance.
pub fn build_base_lp(instance: &Instance, objective: Objective) -> Result<LpModel> {
    let candidates = instance.metric.candidates().to_vec();
    if candidates.is_empty() {
        return Err(Error::StructurallyInfeasible("instance has no facility candidates".into()));
    }
    let n = instance.len();
    let demand_levels: Vec<Vec<LevelValue>> = instance.nodes.iter().map(|v| LevelValue::grid(v.demand())).collect();
    let supply_levels: Vec<Vec<LevelValue>> = instance.nodes.iter().map(|v| LevelValue::grid(v.supply())).collect();
    let mut p = LpProblem::new(Sense::Maximize);

    let y: Vec<usize> = candidates.iter().map(|&s| p.add_var(format!("y[{s}]"), 0.0, 0.0, 1.0)).collect();
    let obj_coeff = |l: &LevelValue, demand: bool| match (objective, demand) {
        (Objective::Surplus, true) => l.value,
        (Objective::Surplus, false) => -l.value,
        (Objective::Profit, true) => l.money,
        (Objective::Profit, false) => -l.money,
        (Objective::Throughput, true) => l.flow,
        (Objective::Throughput, false) => 0.0,
    };
    let alpha: Vec<Vec<usize>> = (0..n)
        .map(|j| {
            demand_levels[j]
                .iter()
                .enumerate()
                .map(|(k, l)| p.add_var(format!("alpha[{j},{k}]"), obj_coeff(l, true), 0.0, 1.0))
                .collect()
        })
        .collect();
    let beta: Vec<Vec<usize>> = (0..n)
        .map(|j| {
            supply_levels[j]
                .iter()
                .enumerate()
                .map(|(k, l)| p.add_var(format!("beta[{j},{k}]"), obj_coeff(l, false), 0.0, 1.0))
                .collect()
        })
        .collect();
    let mut zd = vec![vec![None; n]; candidates.len()];
    let mut zs = vec![vec![None; n]; candidates.len()];
    for (c, &site) in candidates.iter().enumerate() {
        for j in 0..n {
            if instance.metric.distance(site, j) > instance.radius {
                continue;
            }
            let mut first = None;
            for k in 1..demand_levels[j].len() {
                let v = p.add_var(format!("zd[{site},{j},{k}]"), 0.0, 0.0, 1.0);
                first.get_or_insert(v);
            }
            zd[c][j] = first;
            let mut first = None;
            for k in 1..supply_levels[j].len() {
                let v = p.add_var(format!("zs[{site},{j},{k}]"), 0.0, 0.0, 1.0);
                first.get_or_insert(v);
            }
            zs[c][j] = first;
        }
    }

    for j in 0..n {
        p.add_row(RowTag::SinglePrice, alpha[j].iter().map(|&v| (v, 1.0)).collect(), Cmp::Eq, 1.0);
        p.add_row(RowTag::SinglePrice, beta[j].iter().map(|&v| (v, 1.0)).collect(), Cmp::Eq, 1.0);
    }
    for j in 0..n {
        for k in 1..demand_levels[j].len() {
            let mut row: Vec<(usize, f64)> =
                (0..candidates.len()).filter_map(|c| zd[c][j].map(|s| (s + k - 1, 1.0))).collect();
            row.push((alpha[j][k], -1.0));
            p.add_row(RowTag::SingleRoute, row, Cmp::Eq, 0.0);
        }
        for k in 1..supply_levels[j].len() {
            let mut row: Vec<(usize, f64)> =
                (0..candidates.len()).filter_map(|c| zs[c][j].map(|s| (s + k - 1, 1.0))).collect();
            row.push((beta[j][k], -1.0));
            p.add_row(RowTag::SingleRoute, row, Cmp::Eq, 0.0);
        }
    }
    for c in 0..candidates.len() {
        for j in 0..n {
            if let Some(s) = zd[c][j] {
                let mut row: Vec<(usize, f64)> = (1..demand_levels[j].len()).map(|k| (s + k - 1, 1.0)).collect();
                row.push((y[c], -1.0));
                p.add_row(RowTag::Open, row, Cmp::Le, 0.0);
            }
            if let Some(s) = zs[c][j] {
                let mut row: Vec<(usize, f64)> = (1..supply_levels[j].len()).map(|k| (s + k - 1, 1.0)).collect();
                row.push((y[c], -1.0));
                p.add_row(RowTag::Open, row, Cmp::Le, 0.0);
            }
        }
    }
    for c in 0..candidates.len() {
        let mut balance = Vec::new();
        let mut lower = Vec::new();
        for j in 0..n {
            if let Some(s) = zd[c][j] {
                for (k, l) in demand_levels[j].iter().enumerate().skip(1) {
                    balance.push((s + k - 1, l.flow));
                    lower.push((s + k - 1, l.flow));
                }
            }
            if let Some(s) = zs[c][j] {
                for (k, l) in supply_levels[j].iter().enumerate().skip(1) {
                    balance.push((s + k - 1, -l.flow));
                }
            }
        }
        balance.retain(|t| t.1 != 0.0);
        lower.retain(|t| t.1 != 0.0);
        p.add_row(RowTag::FlowBalance, balance, Cmp::Eq, 0.0);
        lower.push((y[c], -instance.flow_lower_bound));
        p.add_row(RowTag::FlowLower, lower, Cmp::Ge, 0.0);
    }
    if objective != Objective::Profit {
        let mut row = Vec::new();
        for j in 0..n {
            for (k, l) in demand_levels[j].iter().enumerate() {
                row.push((alpha[j][k], l.money));
            }
            for (k, l) in supply_levels[j].iter().enumerate() {
                row.push((beta[j][k], -l.money));
            }
        }
        row.retain(|t| t.1 != 0.0);
        p.add_row(RowTag::Wbb, row, Cmp::Ge, 0.0);
    }

    Ok(LpModel {
        problem: p,
        objective,
        candidates,
        demand_levels,
        supply_levels,
        layout: Layout { y, alpha, beta, zd, zs },
    })
}

/// Base relaxation plus the guess constraints: contribution caps
/// `W_i <= Wbar y_i` off `S`, `y_i = 1` on `S`, and `Σ_S W_i >= Wbar |S| (1-ε)`.
pub fn build_strengthened_lp(instance: &Instance, objective: Objective, guess: &GuessSpec) -> Result<LpModel> {
    build_base_lp(instance, objective)?.strengthened(guess)
}

/// Base relaxation with `y` pinned to the indicator of `open_set` (node ids).
pub fn build_fixed_facilities_lp(instance: &Instance, open_set: &[usize], objective: Objective) -> Result<LpModel> {
    build_base_lp(instance, objective)?.with_open_set(open_set)
}

impl LpModel {
    /// Copy of a base model with `y` pinned to the indicator of `open_set`.
    pub fn with_open_set(&self, open_set: &[usize]) -> Result<LpModel> {
        let positions = site_positions(&self.candidates, open_set)?;
        let mut model = self.clone();
        for c in 0..model.candidates.len() {
            let v = if positions.contains(&c) { 1.0 } else { 0.0 };
            model.problem.bounds[model.layout.y[c]] = (v, v);
        }
        Ok(model)
    }

    /// Copy of a base model with the guess constraints added.
    pub fn strengthened(&self, guess: &GuessSpec) -> Result<LpModel> {
        let positions = site_positions(&self.candidates, &guess.s)?;
        let mut model = self.clone();
        let mut top = Vec::new();
        for c in 0..model.candidates.len() {
            let terms = model.contribution_terms(c);
            if positions.contains(&c) {
                model.problem.add_row(RowTag::ForceOpen, vec![(model.layout.y[c], 1.0)], Cmp::Eq, 1.0);
                top.extend(terms);
            } else {
                let mut row = terms;
                row.push((model.layout.y[c], -guess.wbar));
                model.problem.add_row(RowTag::CapW, row, Cmp::Le, 0.0);
            }
        }
        let theta = guess.s.len() as f64;
        model.problem.add_row(RowTag::TopSurplus, top, Cmp::Ge, guess.wbar * theta * (1.0 - guess.epsilon));
        Ok(model)
    }
}

fn site_positions(candidates: &[usize], sites: &[usize]) -> Result<Vec<usize>> {
    sites
        .iter()
        .map(|s| {
            candidates
                .iter()
                .position(|c| c == s)
                .ok_or_else(|| Error::Domain(format!("node {s} is not a facility candidate")))
        })
        .collect()
}

/// Solves `model`. `Ok(None)` means the LP is infeasible.
pub fn solve_lp(model: &LpModel, backend: &dyn LpBackend, tolerance: f64) -> Result<Option<FractionalSolution>> {
    let outcome = backend.solve(&model.problem);
    match outcome.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Ok(None),
        status => return Err(Error::Solver { status: status.to_string(), message: outcome.message }),
    }
    let violation = model.problem.max_violation(&outcome.primal);
    if violation > tolerance {
        return Err(Error::Solver {
            status: "residual".into(),
            message: format!("constraint residual {violation:e} exceeds tolerance {tolerance:e}"),
        });
    }
    let mut sol = model.extract(&outcome.primal);
    sol.lp_value = Some(outcome.objective);
    Ok(Some(sol))
}
