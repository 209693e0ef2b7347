//! From fractional LP solutions to integral openings: single-price
//! consolidation, structural rescaling, the two merge phases, and an
//! independent feasibility checker for the result.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{Instance, Metric, Objective};
use crate::lp::{contribution, FacilityBlock, FractionalSolution, GuessSpec, LevelValue, ZERO_MASS};

/// Utilization (and `y`) within this of 1 counts as 1.
pub const FULL_TOL: f64 = 1e-7;

const DIST_SLACK: f64 = 1e-9;

/// Replaces each node's price (wage) distribution by the single level
/// `q̂_j = Σ_q q α_jq`, rescaling routings so that every facility keeps
/// exactly the same demand and supply flow from every node.
pub fn consolidate_prices(sol: &FractionalSolution, instance: &Instance) -> Result<FractionalSolution> {
    let n = sol.num_nodes();
    let mut demand_levels = Vec::with_capacity(n);
    let mut supply_levels = Vec::with_capacity(n);
    let mut facilities: Vec<FacilityBlock> = sol
        .facilities
        .iter()
        .map(|f| FacilityBlock { z_demand: vec![Vec::new(); n], z_supply: vec![Vec::new(); n], ..f.clone() })
        .collect();
    for j in 0..n {
        let node = &instance.nodes[j];
        let (levels, rows) = consolidate_side(j, &sol.demand_levels[j], sol.facilities.iter().map(|f| &f.z_demand[j]), |q| {
            LevelValue::on_curve(node.demand(), q)
        })?;
        demand_levels.push(levels);
        for (f, row) in facilities.iter_mut().zip(rows) {
            f.z_demand[j] = row;
        }
        let (levels, rows) = consolidate_side(j, &sol.supply_levels[j], sol.facilities.iter().map(|f| &f.z_supply[j]), |r| {
            LevelValue::on_curve(node.supply(), r)
        })?;
        supply_levels.push(levels);
        for (f, row) in facilities.iter_mut().zip(rows) {
            f.z_supply[j] = row;
        }
    }
    Ok(FractionalSolution { objective: sol.objective, demand_levels, supply_levels, facilities, lp_value: sol.lp_value })
}

fn consolidate_side<'a>(
    j: usize,
    levels: &[LevelValue],
    rows: impl Iterator<Item = &'a Vec<f64>> + Clone,
    at: impl Fn(f64) -> LevelValue,
) -> Result<(Vec<LevelValue>, Vec<Vec<f64>>)> {
    // Σ_q q α_jq, with α_jq = Σ_i z_ijq for q > 0.
    let mut mean = 0.0;
    for row in rows.clone() {
        for (k, z) in row.iter().enumerate().skip(1) {
            mean += levels[k].level * z;
        }
    }
    let zero = LevelValue { level: 0.0, flow: 0.0, value: 0.0, money: 0.0 };
    if mean <= 0.0 {
        let stray: f64 = rows.clone().map(|r| r.iter().skip(1).sum::<f64>()).sum();
        if stray > ZERO_MASS {
            return Err(Error::InvariantBreach(format!("node {j} has routing mass {stray:e} at zero mean level")));
        }
        return Ok((vec![zero], rows.map(|_| vec![0.0]).collect()));
    }
    let mean = mean.min(1.0);
    let single = single_level(levels, rows.clone());
    let consolidated = match single {
        Some(k) if levels[k].level == mean => levels[k],
        _ => at(mean),
    };
    let out = rows
        .map(|row| {
            let mass: f64 = row.iter().enumerate().skip(1).map(|(k, z)| z * levels[k].level).sum();
            vec![0.0, mass / mean]
        })
        .collect();
    Ok((vec![zero, consolidated], out))
}

/// The only positive level carrying routing mass, if there is exactly one.
fn single_level<'a>(levels: &[LevelValue], rows: impl Iterator<Item = &'a Vec<f64>>) -> Option<usize> {
    let mut used = vec![false; levels.len()];
    for row in rows {
        for (k, &z) in row.iter().enumerate().skip(1) {
            if z > 0.0 {
                used[k] = true;
            }
        }
    }
    let mut it = used.iter().enumerate().filter(|(_, &u)| u).map(|(k, _)| k);
    match (it.next(), it.next()) {
        (Some(k), None) => Some(k),
        _ => None,
    }
}

/// What structural rescaling did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RescaleLog {
    /// Facilities closed because their contribution was not positive.
    pub closed_nonpositive: Vec<usize>,
    /// `(facility, factor)` for every uniform scale-up.
    pub scaled: Vec<(usize, f64)>,
    /// `(grown, shrunk, delta)` for every pairwise exchange.
    pub exchanges: Vec<(usize, usize, f64)>,
    /// The final violator, if one was closed: `(facility, forfeited contribution, its profit)`.
    pub closed_violator: Option<(usize, f64, f64)>,
}

impl fmt::Display for RescaleLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for id in &self.closed_nonpositive {
            writeln!(f, "close-nonpositive facility={id}")?;
        }
        for (id, factor) in &self.scaled {
            writeln!(f, "scale facility={id} factor={factor:?}")?;
        }
        for (a, b, delta) in &self.exchanges {
            writeln!(f, "exchange grow={a} shrink={b} delta={delta:?}")?;
        }
        if let Some((id, lost, profit)) = self.closed_violator {
            writeln!(f, "close-violator facility={id} forfeited={lost:?} profit={profit:?}")?;
        }
        Ok(())
    }
}

/// A facility is compliant when it is closed, fully open, or has a
/// partially connected node that is fully demand- or supply-utilized.
pub fn is_compliant(sol: &FractionalSolution, f: &FacilityBlock) -> bool {
    if f.y <= FULL_TOL || f.y >= 1.0 - FULL_TOL {
        return true;
    }
    f.demand_nodes().any(|j| sol.eta(j) >= 1.0 - FULL_TOL) || f.supply_nodes().any(|j| sol.phi(j) >= 1.0 - FULL_TOL)
}

/// Facilities with `y` strictly inside `(FULL_TOL, 1 - FULL_TOL)` and no fully
/// utilized neighbor.
pub fn structural_violations(sol: &FractionalSolution) -> Vec<usize> {
    sol.facilities.iter().filter(|f| !is_compliant(sol, f)).map(|f| f.id).collect()
}

/// Rescales facility blocks until every partially open facility but at most
/// one has a fully utilized neighbor, then closes that one. Facilities in
/// the guess's `S` are never closed.
pub fn rescale_structural(sol: &FractionalSolution, guess: Option<&GuessSpec>) -> (FractionalSolution, RescaleLog) {
    let mut sol = sol.clone();
    let mut log = RescaleLog::default();
    let protected = |f: &FacilityBlock| guess.is_some_and(|g| g.s.contains(&f.location));

    for f in &mut sol.facilities {
        if f.y >= 1.0 - FULL_TOL {
            f.y = 1.0;
        }
    }
    for idx in 0..sol.facilities.len() {
        let f = &sol.facilities[idx];
        let active = f.y > 0.0 || (0..sol.num_nodes()).any(|j| f.is_connected(j));
        if active && !protected(f) && sol.contribution(f) <= 0.0 {
            log.closed_nonpositive.push(f.id);
            sol.facilities[idx].clear();
        }
    }

    let profit_led = sol.objective == Objective::Profit;
    // Facilities whose profit is non-negative grow alone.
    for idx in 0..sol.facilities.len() {
        let f = &sol.facilities[idx];
        if is_compliant(&sol, f) || (!profit_led && sol.profit(f) < 0.0) {
            continue;
        }
        let theta = growth_limit(&sol, idx);
        if theta.is_finite() && theta > 1.0 {
            apply_growth(&mut sol, idx, theta);
            log.scaled.push((sol.facilities[idx].id, theta));
        }
    }

    // Negative-profit violators trade surplus pairwise.
    loop {
        let mut s1: Vec<usize> = (0..sol.facilities.len())
            .filter(|&i| !is_compliant(&sol, &sol.facilities[i]) && sol.profit(&sol.facilities[i]) < 0.0)
            .collect();
        if s1.len() <= 1 {
            break;
        }
        let ratio = |i: usize| {
            let f = &sol.facilities[i];
            sol.contribution(f) / sol.profit(f).abs()
        };
        s1.sort_by(|&a, &b| ratio(b).total_cmp(&ratio(a)).then(a.cmp(&b)));
        let (grow, shrink) = (s1[0], *s1.last().unwrap());
        let delta = exchange(&mut sol, grow, shrink);
        log.exchanges.push((sol.facilities[grow].id, sol.facilities[shrink].id, delta));
    }

    let leftover: Vec<usize> = (0..sol.facilities.len())
        .filter(|&i| !is_compliant(&sol, &sol.facilities[i]) && !protected(&sol.facilities[i]))
        .collect();
    for idx in leftover {
        let f = &sol.facilities[idx];
        log.closed_violator = Some((f.id, sol.contribution(f), sol.profit(f)));
        sol.facilities[idx].clear();
    }
    (sol, log)
}

/// Largest factor by which block `idx` can grow before `y` hits 1 or a
/// connected node saturates.
fn growth_limit(sol: &FractionalSolution, idx: usize) -> f64 {
    let f = &sol.facilities[idx];
    let mut theta = 1.0 / f.y;
    for j in f.demand_nodes() {
        let own = f.demand_mass(j);
        let others = sol.eta(j) - own;
        theta = theta.min((1.0 - others) / own);
    }
    for j in f.supply_nodes() {
        let own = f.supply_mass(j);
        let others = sol.phi(j) - own;
        theta = theta.min((1.0 - others) / own);
    }
    theta
}

fn apply_growth(sol: &mut FractionalSolution, idx: usize, theta: f64) {
    let hits_y = (theta * sol.facilities[idx].y - 1.0).abs() <= 1e-12;
    sol.facilities[idx].scale(theta);
    if hits_y || sol.facilities[idx].y > 1.0 {
        sol.facilities[idx].y = 1.0;
    }
}

/// Grows `grow` by `1 + δ` and shrinks `shrink` by `1 - (W_grow/W_shrink) δ`,
/// with `δ` as large as the binding limit allows. Returns `δ`.
fn exchange(sol: &mut FractionalSolution, grow: usize, shrink: usize) -> f64 {
    let (wg, ws) = (sol.contribution(&sol.facilities[grow]), sol.contribution(&sol.facilities[shrink]));
    let rate = wg / ws;
    let (g, s) = (&sol.facilities[grow], &sol.facilities[shrink]);
    let mut delta = ((1.0 - g.y) / g.y).min(1.0 / rate);
    let mut limit_node = |util: f64, own: f64, other: f64| {
        let slope = own - rate * other;
        if slope > 0.0 {
            delta = delta.min((1.0 - util) / slope);
        }
    };
    for j in g.demand_nodes() {
        limit_node(sol.eta(j), g.demand_mass(j), s.demand_mass(j));
    }
    for j in g.supply_nodes() {
        limit_node(sol.phi(j), g.supply_mass(j), s.supply_mass(j));
    }
    let delta = delta.max(0.0);
    let shrink_factor = 1.0 - rate * delta;
    sol.facilities[grow].scale(1.0 + delta);
    if (sol.facilities[grow].y - 1.0).abs() <= 1e-12 || sol.facilities[grow].y > 1.0 {
        sol.facilities[grow].y = 1.0;
    }
    if shrink_factor <= 1e-12 {
        sol.facilities[shrink].clear();
    } else {
        sol.facilities[shrink].scale(shrink_factor);
    }
    delta
}

/// Facility-block storage the merge phases operate on.
pub(crate) trait Blocks {
    fn num_nodes(&self) -> usize;
    fn num_blocks(&self) -> usize;
    fn block_id(&self, b: usize) -> usize;
    fn block_location(&self, b: usize) -> usize;
    fn block_y(&self, b: usize) -> f64;
    fn demand_mass(&self, b: usize, j: usize) -> f64;
    fn supply_mass(&self, b: usize, j: usize) -> f64;
    /// Appends an empty block and returns its index.
    fn push_block(&mut self, id: usize, location: usize) -> usize;
    /// Adds block `from` into block `into` and zeroes `from`.
    fn merge(&mut self, into: usize, from: usize);

    fn eta(&self, j: usize) -> f64 {
        (0..self.num_blocks()).map(|b| self.demand_mass(b, j)).sum()
    }
    fn phi(&self, j: usize) -> f64 {
        (0..self.num_blocks()).map(|b| self.supply_mass(b, j)).sum()
    }
    fn connected(&self, b: usize, j: usize) -> bool {
        self.demand_mass(b, j) > ZERO_MASS || self.supply_mass(b, j) > ZERO_MASS
    }
    fn index_of(&self, id: usize) -> Option<usize> {
        (0..self.num_blocks()).find(|&b| self.block_id(b) == id)
    }
    fn next_id(&self) -> usize {
        (0..self.num_blocks()).map(|b| self.block_id(b) + 1).max().unwrap_or(0)
    }
}

impl Blocks for FractionalSolution {
    fn num_nodes(&self) -> usize {
        self.demand_levels.len()
    }
    fn num_blocks(&self) -> usize {
        self.facilities.len()
    }
    fn block_id(&self, b: usize) -> usize {
        self.facilities[b].id
    }
    fn block_location(&self, b: usize) -> usize {
        self.facilities[b].location
    }
    fn block_y(&self, b: usize) -> f64 {
        self.facilities[b].y
    }
    fn demand_mass(&self, b: usize, j: usize) -> f64 {
        self.facilities[b].demand_mass(j)
    }
    fn supply_mass(&self, b: usize, j: usize) -> f64 {
        self.facilities[b].supply_mass(j)
    }
    fn push_block(&mut self, id: usize, location: usize) -> usize {
        let block = FacilityBlock::empty(id, location, &self.demand_levels, &self.supply_levels);
        self.facilities.push(block);
        self.facilities.len() - 1
    }
    fn merge(&mut self, into: usize, from: usize) {
        let source = self.facilities[from].clone();
        self.facilities[into].absorb(&source);
        self.facilities[from].clear();
    }
}

/// One facility move.
#[derive(Clone, Debug, PartialEq)]
pub struct Move {
    pub phase: u8,
    pub source: usize,
    pub target: usize,
    /// Location of the target facility.
    pub location: usize,
    /// `y` mass carried over.
    pub mass: f64,
}

/// Distance proof for one move: the farthest node re-targeted, against the
/// bound the phase guarantees.
#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub phase: u8,
    pub source: usize,
    pub target: usize,
    pub max_distance: f64,
    pub bound: f64,
}

/// Ordered log of all merge moves. Replaying it on the rounding input
/// reproduces the rounding output exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundingTrace {
    pub moves: Vec<Move>,
    pub certificates: Vec<Certificate>,
}

impl RoundingTrace {
    /// Applies the recorded moves to `sol`.
    pub fn replay(&self, sol: &FractionalSolution) -> Result<FractionalSolution> {
        let mut out = sol.clone();
        for m in &self.moves {
            let from = out
                .index_of(m.source)
                .ok_or_else(|| Error::Parse(format!("trace moves unknown facility {}", m.source)))?;
            let into = match out.index_of(m.target) {
                Some(b) => b,
                None => out.push_block(m.target, m.location),
            };
            out.merge(into, from);
        }
        Ok(out)
    }

    /// Facilities that received at least one move.
    pub fn targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.moves.iter().map(|m| m.target).collect();
        t.sort_unstable();
        t.dedup();
        t
    }
}

impl fmt::Display for RoundingTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.moves {
            writeln!(f, "move phase={} source={} target={} location={} mass={:?}", m.phase, m.source, m.target, m.location, m.mass)?;
        }
        for c in &self.certificates {
            writeln!(
                f,
                "cert phase={} source={} target={} distance={:?} bound={:?}",
                c.phase, c.source, c.target, c.max_distance, c.bound
            )?;
        }
        Ok(())
    }
}

impl FromStr for RoundingTrace {
    type Err = Error;

    fn from_str(s: &str) -> Result<RoundingTrace> {
        let mut trace = RoundingTrace::default();
        for (lineno, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("trace line {}: {what}", lineno + 1));
            let mut parts = line.split_whitespace();
            let kind = parts.next().ok_or_else(|| bad("empty"))?;
            let mut fields = std::collections::BTreeMap::new();
            for p in parts {
                let (k, v) = p.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                fields.insert(k, v);
            }
            let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing `{k}`")));
            let int = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(&format!("bad integer `{k}`")));
            let real = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad(&format!("bad number `{k}`")));
            match kind {
                "move" => trace.moves.push(Move {
                    phase: int("phase")? as u8,
                    source: int("source")?,
                    target: int("target")?,
                    location: int("location")?,
                    mass: real("mass")?,
                }),
                "cert" => trace.certificates.push(Certificate {
                    phase: int("phase")? as u8,
                    source: int("source")?,
                    target: int("target")?,
                    max_distance: real("distance")?,
                    bound: real("bound")?,
                }),
                other => return Err(bad(&format!("unknown record `{other}`"))),
            }
        }
        Ok(trace)
    }
}

fn is_active<B: Blocks + ?Sized>(sol: &B, b: usize) -> bool {
    sol.block_y(b) > 0.0 || (0..sol.num_nodes()).any(|j| sol.connected(b, j))
}

/// Farthest node connected to block `b`, measured from `location`.
fn reach<B: Blocks + ?Sized>(sol: &B, metric: &Metric, b: usize, location: usize) -> f64 {
    (0..sol.num_nodes())
        .filter(|&j| sol.connected(b, j))
        .map(|j| metric.distance(j, location))
        .fold(0.0, f64::max)
}

fn within(d: f64, bound: f64) -> bool {
    d <= bound * (1.0 + DIST_SLACK) + 1e-12
}

/// Phase 1: for each untouched, fully utilized node `j` (ascending), merge
/// every partially open facility that `j` is connected to on its saturated
/// side into one new facility located at `j`.
pub(crate) fn phase1<B: Blocks + ?Sized>(sol: &mut B, metric: &Metric, radius: f64, trace: &mut RoundingTrace) -> Result<()> {
    let n = sol.num_nodes();
    let mut open: Vec<bool> = vec![false; sol.num_blocks()];
    let is_touched = |sol: &B, open: &[bool], j: usize| (0..sol.num_blocks()).any(|b| open[b] && sol.connected(b, j));
    for j in 0..n {
        if is_touched(sol, &open, j) {
            continue;
        }
        let demand_full = sol.eta(j) >= 1.0 - FULL_TOL;
        let supply_full = sol.phi(j) >= 1.0 - FULL_TOL;
        if !demand_full && !supply_full {
            continue;
        }
        let group: Vec<usize> = (0..sol.num_blocks())
            .filter(|&b| {
                if demand_full {
                    sol.demand_mass(b, j) > ZERO_MASS
                } else {
                    sol.supply_mass(b, j) > ZERO_MASS
                }
            })
            .collect();
        if group.is_empty() {
            continue;
        }
        let id = sol.next_id();
        let target = sol.push_block(id, j);
        open.push(true);
        for b in group {
            let max_distance = reach(sol, metric, b, j);
            let (source, mass) = (sol.block_id(b), sol.block_y(b));
            if !within(max_distance, 2.0 * radius) {
                return Err(Error::InvariantBreach(format!(
                    "phase 1 move of facility {source} to node {j} reaches distance {max_distance}, above 2R"
                )));
            }
            sol.merge(target, b);
            trace.moves.push(Move { phase: 1, source, target: id, location: j, mass });
            trace.certificates.push(Certificate { phase: 1, source, target: id, max_distance, bound: 2.0 * radius });
        }
    }
    Ok(())
}

/// Phase 2: move every remaining partially open facility onto a completely
/// open facility reached through a touched, fully utilized node.
pub(crate) fn phase2<B: Blocks + ?Sized>(sol: &mut B, metric: &Metric, radius: f64, trace: &mut RoundingTrace) -> Result<()> {
    let targets = trace.targets();
    let completely_open =
        |sol: &B, b: usize| targets.contains(&sol.block_id(b)) || sol.block_y(b) >= 1.0 - FULL_TOL;
    let touched = |sol: &B, j: usize| {
        (0..sol.num_blocks()).any(|b| targets.contains(&sol.block_id(b)) && sol.connected(b, j))
    };
    let pending: Vec<usize> = (0..sol.num_blocks())
        .filter(|&b| !completely_open(sol, b) && is_active(sol, b))
        .collect();
    for b in pending {
        if !(0..sol.num_nodes()).any(|j| sol.connected(b, j)) {
            // Nothing is routed here; it never becomes part of the solution.
            continue;
        }
        let mut options: Vec<(f64, usize, usize)> = Vec::new();
        for j in 0..sol.num_nodes() {
            let via_demand = sol.demand_mass(b, j) > ZERO_MASS && sol.eta(j) >= 1.0 - FULL_TOL;
            let via_supply = sol.supply_mass(b, j) > ZERO_MASS && sol.phi(j) >= 1.0 - FULL_TOL;
            if !(via_demand || via_supply) || !touched(sol, j) {
                continue;
            }
            for t in 0..sol.num_blocks() {
                if t != b && completely_open(sol, t) && sol.connected(t, j) {
                    let d = metric.distance(j, sol.block_location(t));
                    options.push((d, j, t));
                }
            }
        }
        options.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let source = sol.block_id(b);
        let chosen = options.iter().map(|&(_, _, t)| t).find(|&t| {
            within(reach(sol, metric, b, sol.block_location(t)), 4.0 * radius)
        });
        let Some(t) = chosen else {
            return Err(Error::InvariantBreach(format!(
                "partially open facility {source} has no touched, fully utilized neighbor leading to an open facility within 4R"
            )));
        };
        let location = sol.block_location(t);
        let max_distance = reach(sol, metric, b, location);
        let mass = sol.block_y(b);
        let target = sol.block_id(t);
        sol.merge(t, b);
        trace.moves.push(Move { phase: 2, source, target, location, mass });
        trace.certificates.push(Certificate { phase: 2, source, target, max_distance, bound: 4.0 * radius });
    }
    Ok(())
}

/// Runs Phase 1 on a rescaled solution.
pub fn round_phase1(sol: &FractionalSolution, instance: &Instance) -> Result<(FractionalSolution, RoundingTrace)> {
    let mut out = sol.clone();
    let mut trace = RoundingTrace::default();
    phase1(&mut out, &instance.metric, instance.radius, &mut trace)?;
    Ok((out, trace))
}

/// Runs Phase 2 after [`round_phase1`], extending its trace.
pub fn round_phase2(
    sol: &FractionalSolution,
    instance: &Instance,
    trace: &RoundingTrace,
) -> Result<(FractionalSolution, RoundingTrace)> {
    let mut out = sol.clone();
    let mut trace = trace.clone();
    phase2(&mut out, &instance.metric, instance.radius, &mut trace)?;
    Ok((out, trace))
}

/// Both phases, then price consolidation into an integral solution.
pub fn round(sol: &FractionalSolution, instance: &Instance) -> Result<(IntegralSolution, RoundingTrace)> {
    let (p1, trace) = round_phase1(sol, instance)?;
    let (p2, trace) = round_phase2(&p1, instance, &trace)?;
    let integral = IntegralSolution::from_fractional(&p2, instance)?;
    Ok((integral, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenFacility {
    pub id: usize,
    pub location: usize,
    /// Merged opening mass; at least 1.
    pub y: f64,
    pub demand_flow: f64,
    pub supply_flow: f64,
    pub surplus: f64,
    pub profit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeAssignment {
    /// Participating buyer fraction `q̂_j`.
    pub demand_level: f64,
    pub price: f64,
    /// Participating seller fraction `r̂_j`.
    pub supply_level: f64,
    pub wage: f64,
    /// `(facility index, fraction)` pairs, fractions of the node's participants.
    pub demand_routes: Vec<(usize, f64)>,
    pub supply_routes: Vec<(usize, f64)>,
}

/// Integral facility openings with one price and wage per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegralSolution {
    pub objective: Objective,
    pub facilities: Vec<OpenFacility>,
    pub nodes: Vec<NodeAssignment>,
}

impl IntegralSolution {
    /// Nothing open: every node priced out.
    pub fn empty(instance: &Instance, objective: Objective) -> IntegralSolution {
        IntegralSolution {
            objective,
            facilities: Vec::new(),
            nodes: (0..instance.len())
                .map(|_| NodeAssignment {
                    demand_level: 0.0,
                    price: instance.p_max,
                    supply_level: 0.0,
                    wage: 0.0,
                    demand_routes: Vec::new(),
                    supply_routes: Vec::new(),
                })
                .collect(),
        }
    }

    /// Consolidates prices of a solution whose facilities are all closed or
    /// opened with `y >= 1`, and reads off the integral solution.
    pub fn from_fractional(sol: &FractionalSolution, instance: &Instance) -> Result<IntegralSolution> {
        let consolidated = consolidate_prices(sol, instance)?;
        let mut out = IntegralSolution::empty(instance, sol.objective);
        let mut index = Vec::new();
        for f in &consolidated.facilities {
            let active = (0..consolidated.num_nodes()).any(|j| f.is_connected(j));
            if f.y >= 1.0 - FULL_TOL {
                index.push(Some(out.facilities.len()));
                out.facilities.push(OpenFacility {
                    id: f.id,
                    location: f.location,
                    y: f.y,
                    demand_flow: consolidated.demand_flow(f),
                    supply_flow: consolidated.supply_flow(f),
                    surplus: consolidated.surplus(f),
                    profit: consolidated.profit(f),
                });
            } else if active {
                return Err(Error::InvariantBreach(format!(
                    "facility {} is still partially open (y = {})",
                    f.id, f.y
                )));
            } else {
                index.push(None);
            }
        }
        for (j, node) in instance.nodes.iter().enumerate() {
            let a = &mut out.nodes[j];
            let dl = &consolidated.demand_levels[j];
            let sl = &consolidated.supply_levels[j];
            if dl.len() > 1 {
                a.demand_level = dl[1].level;
                a.price = node.demand().marginal_at(a.demand_level);
            }
            if sl.len() > 1 {
                a.supply_level = sl[1].level;
                a.wage = node.supply().marginal_at(a.supply_level);
            }
            for (f, slot) in consolidated.facilities.iter().zip(&index) {
                if let Some(slot) = *slot {
                    if dl.len() > 1 && f.z_demand[j][1] > 0.0 {
                        a.demand_routes.push((slot, f.z_demand[j][1]));
                    }
                    if sl.len() > 1 && f.z_supply[j][1] > 0.0 {
                        a.supply_routes.push((slot, f.z_supply[j][1]));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn open_locations(&self) -> Vec<usize> {
        let mut locs: Vec<usize> = self.facilities.iter().map(|f| f.location).collect();
        locs.sort_unstable();
        locs
    }

    pub fn total_surplus(&self) -> f64 {
        self.facilities.iter().map(|f| f.surplus).sum()
    }

    pub fn total_profit(&self) -> f64 {
        self.facilities.iter().map(|f| f.profit).sum()
    }

    pub fn total_throughput(&self) -> f64 {
        self.facilities.iter().map(|f| f.demand_flow).sum()
    }

    pub fn objective_value(&self) -> f64 {
        contribution(self.objective, self.total_surplus(), self.total_profit(), self.total_throughput())
    }

    /// Largest routed distance divided by `R` (0 when nothing is routed).
    pub fn distance_factor(&self, instance: &Instance) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, a) in self.nodes.iter().enumerate() {
            for &(f, _) in a.demand_routes.iter().chain(&a.supply_routes) {
                let d = instance.metric.distance(j, self.facilities[f].location);
                worst = worst.max(if d == 0.0 { 0.0 } else { d / instance.radius });
            }
        }
        worst
    }
}

/// Constraint families checked by [`verify_feasibility`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckFamily {
    Distance,
    FlowBalance,
    FlowLowerBound,
    WeakBudgetBalance,
    RoutingSums,
    SinglePrice,
}

impl fmt::Display for CheckFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckFamily::Distance => "distance",
            CheckFamily::FlowBalance => "flow-balance",
            CheckFamily::FlowLowerBound => "flow-lower-bound",
            CheckFamily::WeakBudgetBalance => "weak-budget-balance",
            CheckFamily::RoutingSums => "routing-sums",
            CheckFamily::SinglePrice => "single-price",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub family: CheckFamily,
    pub passed: bool,
    /// Worst violation found (0 when none).
    pub worst: f64,
    pub detail: String,
}

/// Outcome of [`verify_feasibility`]; surplus, profit and flows are recomputed
/// from the curves, never copied from the solution.
#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
    pub surplus: f64,
    pub profit: f64,
    pub throughput: f64,
    pub facility_demand_flow: Vec<f64>,
    pub facility_supply_flow: Vec<f64>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, family: CheckFamily) -> &CheckResult {
        self.checks.iter().find(|c| c.family == family).expect("every family is checked")
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let verdict = if c.passed { "pass" } else { "FAIL" };
            write!(f, "{}: {verdict} (worst {:e})", c.family, c.worst)?;
            if !c.detail.is_empty() {
                write!(f, " {}", c.detail)?;
            }
            writeln!(f)?;
        }
        writeln!(f, "surplus: {:?}", self.surplus)?;
        writeln!(f, "profit: {:?}", self.profit)?;
        writeln!(f, "throughput: {:?}", self.throughput)
    }
}

/// Independent check of an integral solution against the problem's
/// constraints with routing distance relaxed to `factor * R`.
pub fn verify_feasibility(instance: &Instance, sol: &IntegralSolution, factor: f64) -> VerificationReport {
    const FLOW_TOL: f64 = 1e-6;
    let nf = sol.facilities.len();
    let mut demand_flow = vec![0.0; nf];
    let mut supply_flow = vec![0.0; nf];
    let mut surplus = 0.0;
    let mut profit = 0.0;
    let mut dist = (true, 0.0f64, String::new());
    let mut sums = (true, 0.0f64, String::new());
    let mut price = (true, 0.0f64, String::new());
    let bound = factor * instance.radius;

    if sol.nodes.len() != instance.len() {
        let fail = |family| CheckResult { family, passed: false, worst: f64::INFINITY, detail: "node count mismatch".into() };
        return VerificationReport {
            checks: [
                CheckFamily::Distance,
                CheckFamily::FlowBalance,
                CheckFamily::FlowLowerBound,
                CheckFamily::WeakBudgetBalance,
                CheckFamily::RoutingSums,
                CheckFamily::SinglePrice,
            ]
            .into_iter()
            .map(fail)
            .collect(),
            surplus: 0.0,
            profit: 0.0,
            throughput: 0.0,
            facility_demand_flow: demand_flow,
            facility_supply_flow: supply_flow,
        };
    }

    for (j, (node, a)) in instance.nodes.iter().zip(&sol.nodes).enumerate() {
        let (dc, sc) = (node.demand(), node.supply());
        let level_ok = (0.0..=1.0).contains(&a.demand_level) && (0.0..=1.0).contains(&a.supply_level);
        let expect_price = if a.demand_level > 0.0 { dc.marginal_at(a.demand_level.clamp(0.0, 1.0)) } else { instance.p_max };
        let expect_wage = if a.supply_level > 0.0 { sc.marginal_at(a.supply_level.clamp(0.0, 1.0)) } else { 0.0 };
        let gap = (a.price - expect_price).abs().max((a.wage - expect_wage).abs());
        if !level_ok || gap > 1e-9 * (1.0 + instance.p_max) {
            price.0 = false;
            price.1 = price.1.max(if level_ok { gap } else { f64::INFINITY });
            price.2 = format!("node {j}");
        }
        let q = a.demand_level.clamp(0.0, 1.0);
        let r = a.supply_level.clamp(0.0, 1.0);
        let (dflow, sflow) = (dc.volume() * q, sc.volume() * r);
        let (value, cost) = (dc.cumulative_at(q), sc.cumulative_at(r));
        let (paid_in, paid_out) = (dflow * a.price, sflow * a.wage);
        for (routes, demand) in [(&a.demand_routes, true), (&a.supply_routes, false)] {
            let total: f64 = routes.iter().map(|r| r.1).sum();
            if total > 1.0 + 1e-9 || routes.iter().any(|r| r.1 < 0.0) {
                sums.0 = false;
                sums.1 = sums.1.max(total - 1.0);
                sums.2 = format!("node {j}");
            }
            for &(f, x) in routes.iter() {
                if f >= nf {
                    sums.0 = false;
                    sums.1 = f64::INFINITY;
                    sums.2 = format!("node {j} routes to unknown facility {f}");
                    continue;
                }
                let d = instance.metric.distance(j, sol.facilities[f].location);
                if x > 0.0 && !within(d, bound) {
                    dist.0 = false;
                    dist.1 = dist.1.max(d - bound);
                    dist.2 = format!("node {j} -> facility {f} at distance {d}");
                }
                if demand {
                    demand_flow[f] += dflow * x;
                    surplus += value * x;
                    profit += paid_in * x;
                } else {
                    supply_flow[f] += sflow * x;
                    surplus -= cost * x;
                    profit -= paid_out * x;
                }
            }
        }
    }

    let mut balance = (true, 0.0f64, String::new());
    let mut lower = (true, 0.0f64, String::new());
    for f in 0..nf {
        let gap = (demand_flow[f] - supply_flow[f]).abs();
        if gap > FLOW_TOL * demand_flow[f].abs().max(1.0) {
            balance.0 = false;
            balance.2 = format!("facility {f}");
        }
        balance.1 = balance.1.max(gap);
        let short = instance.flow_lower_bound - demand_flow[f];
        if short > FLOW_TOL {
            lower.0 = false;
            lower.2 = format!("facility {f} carries {}", demand_flow[f]);
        }
        lower.1 = lower.1.max(short.max(0.0));
    }
    let wbb = (profit >= -FLOW_TOL, (-profit).max(0.0), String::new());
    let mk = |family, (passed, worst, detail): (bool, f64, String)| CheckResult { family, passed, worst, detail };
    VerificationReport {
        checks: vec![
            mk(CheckFamily::Distance, dist),
            mk(CheckFamily::FlowBalance, balance),
            mk(CheckFamily::FlowLowerBound, lower),
            mk(CheckFamily::WeakBudgetBalance, wbb),
            mk(CheckFamily::RoutingSums, sums),
            mk(CheckFamily::SinglePrice, price),
        ],
        surplus,
        profit,
        throughput: demand_flow.iter().sum(),
        facility_demand_flow: demand_flow,
        facility_supply_flow: supply_flow,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{Curve, Node};
    use crate::lp::{build_base_lp, solve_lp, MicroLpBackend, LP_TOL};

    fn line_instance(xs: &[f64], l: f64, r: f64, grid: usize) -> Instance {
        let nodes = xs
            .iter()
            .enumerate()
            .map(|(k, _)| {
                Node::new(
                    format!("n{k}"),
                    Curve::uniform_demand(1.0, 2.0, 3.0, grid, 3.0).unwrap(),
                    Curve::uniform_supply(1.0, 0.0, 1.0, grid).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let d = xs.iter().map(|a| xs.iter().map(|b| (a - b).abs()).collect()).collect();
        Instance::new(nodes, Metric::new(d, (0..xs.len()).collect()).unwrap(), l, r, 3.0).unwrap()
    }

    fn line_instance_with(xs: &[f64], grid: usize, supply_hi: f64) -> Instance {
        let nodes = (0..xs.len())
            .map(|k| {
                Node::new(
                    format!("n{k}"),
                    Curve::uniform_demand(1.0, 2.0, 3.0, grid, 3.0).unwrap(),
                    Curve::uniform_supply(1.0, 0.0, supply_hi, grid).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let d = xs.iter().map(|a| xs.iter().map(|b| (a - b).abs()).collect()).collect();
        Instance::new(nodes, Metric::new(d, (0..xs.len()).collect()).unwrap(), 0.0, 1.0, 3.0).unwrap()
    }

    fn blank(inst: &Instance) -> FractionalSolution {
        let demand_levels: Vec<_> = inst.nodes.iter().map(|v| LevelValue::grid(v.demand())).collect();
        let supply_levels: Vec<_> = inst.nodes.iter().map(|v| LevelValue::grid(v.supply())).collect();
        let facilities = inst
            .metric
            .candidates()
            .iter()
            .enumerate()
            .map(|(c, &s)| FacilityBlock::empty(c, s, &demand_levels, &supply_levels))
            .collect();
        FractionalSolution { objective: Objective::Surplus, demand_levels, supply_levels, facilities, lp_value: None }
    }

    #[test]
    fn consolidation_example() {
        // Uniform U[2,3], grid step 0.2: mass 1/2 each on levels 0.2 and 0.4.
        let inst = line_instance(&[0.0], 0.0, 1.0, 6);
        let mut sol = blank(&inst);
        sol.facilities[0].y = 1.0;
        sol.facilities[0].z_demand[0][1] = 0.5;
        sol.facilities[0].z_demand[0][2] = 0.5;
        sol.facilities[0].z_supply[0][1] = 0.5;
        sol.facilities[0].z_supply[0][2] = 0.5;
        let before = sol.demand_flow(&sol.facilities[0]);
        let c = consolidate_prices(&sol, &inst).unwrap();
        let lv = c.demand_levels[0][1];
        assert!((lv.level - 0.3).abs() < 1e-15);
        assert!((inst.nodes[0].demand().marginal_at(lv.level) - 2.7).abs() < 1e-12);
        assert!((lv.value - 0.855).abs() < 1e-12);
        assert!((c.demand_flow(&c.facilities[0]) - before).abs() < 1e-12);
        assert!((c.eta(0) - 1.0).abs() < 1e-12);
        assert!(c.total_surplus() >= sol.total_surplus() - 1e-12);
        assert!(c.total_profit() >= sol.total_profit() - 1e-12);
    }

    #[test]
    fn consolidation_fixpoint_on_single_level() {
        let inst = line_instance(&[0.0, 1.0], 0.0, 1.0, 5);
        let mut sol = blank(&inst);
        sol.facilities[0].y = 1.0;
        sol.facilities[0].z_demand[0][3] = 0.6;
        sol.facilities[1].y = 1.0;
        sol.facilities[1].z_demand[0][3] = 0.4;
        sol.facilities[0].z_supply[1][2] = 1.0;
        let c = consolidate_prices(&sol, &inst).unwrap();
        for f in 0..2 {
            assert_eq!(c.demand_flow(&c.facilities[f]), sol.demand_flow(&sol.facilities[f]));
            assert_eq!(c.supply_flow(&c.facilities[f]), sol.supply_flow(&sol.facilities[f]));
        }
        assert_eq!(c.demand_levels[0][1], sol.demand_levels[0][3]);
        assert_eq!(c.demand_levels[1].len(), 1);
    }

    #[test]
    fn rescale_leaves_integral_alone() {
        let inst = line_instance(&[0.0], 1.0, 1.0, 2);
        let sol = solve_lp(&build_base_lp(&inst, Objective::Surplus).unwrap(), &MicroLpBackend, LP_TOL).unwrap().unwrap();
        let (out, log) = rescale_structural(&sol, None);
        assert_eq!(out, sol);
        assert_eq!(log, RescaleLog::default());
    }

    #[test]
    fn rescale_grows_slack_facility() {
        // Node 0 and 1 both half-routed to facility 0 with y = 0.5.
        let inst = line_instance(&[0.0, 1.0], 0.0, 1.0, 2);
        let mut sol = blank(&inst);
        let f = &mut sol.facilities[0];
        f.y = 0.5;
        f.z_demand[0][1] = 0.5;
        f.z_supply[1][1] = 0.25;
        let w0 = sol.total_surplus();
        let (out, log) = rescale_structural(&sol, None);
        assert_eq!(log.scaled.len(), 1);
        let theta = log.scaled[0].1;
        assert!((theta - 2.0).abs() < 1e-12);
        assert!((out.total_surplus() - theta * w0).abs() < 1e-12);
        assert_eq!(out.facilities[0].y, 1.0);
        assert!(structural_violations(&out).is_empty());
    }

    #[test]
    fn rescale_stops_at_saturated_neighbor() {
        let inst = line_instance(&[0.0, 1.0], 0.0, 1.0, 2);
        let mut sol = blank(&inst);
        sol.facilities[0].y = 0.4;
        sol.facilities[0].z_demand[0][1] = 0.2;
        sol.facilities[0].z_supply[0][1] = 0.2;
        sol.facilities[1].y = 0.7;
        sol.facilities[1].z_demand[0][1] = 0.7;
        sol.facilities[1].z_supply[1][1] = 0.7;
        let (out, _) = rescale_structural(&sol, None);
        // Node 0 saturates at 0.3 / 0.2 = 1.5 growth of facility 0.
        assert!((out.facilities[0].y - 0.6).abs() < 1e-12);
        assert!((out.eta(0) - 1.0).abs() < 1e-12);
        assert!(structural_violations(&out).is_empty());
    }

    /// Two negative-profit facilities with slack: one exchange settles them.
    #[test]
    fn exchange_preserves_surplus_and_profit() {
        let inst = line_instance_with(&[0.0, 10.0, 20.0, 30.0], 3, 3.0);
        let mut sol = blank(&inst);
        // Demand at full participation (price 2) against wage 3: W/|R| = 1.
        let b = &mut sol.facilities[0];
        b.y = 0.3;
        b.z_demand[0][2] = 0.3;
        b.z_supply[0][2] = 0.3;
        // Demand at half participation (price 2.5): W/|R| = 2.5.
        let b = &mut sol.facilities[2];
        b.y = 0.3;
        b.z_demand[2][1] = 0.3;
        b.z_supply[2][2] = 0.15;
        let w = sol.total_surplus();
        let r = sol.total_profit();
        assert!(sol.facilities.iter().filter(|f| f.y > 0.0).all(|f| sol.profit(f) < 0.0));
        let (out, log) = rescale_structural(&sol, None);
        assert_eq!(log.exchanges.len(), 1);
        let (grow, shrink, delta) = log.exchanges[0];
        assert_eq!((grow, shrink), (2, 0));
        assert!((delta - 1.6).abs() < 1e-12);
        let (closed, lost, lost_profit) = log.closed_violator.unwrap();
        assert_eq!(closed, 2);
        assert!((lost - w).abs() < 1e-12, "exchange keeps total surplus");
        assert!(lost_profit >= r - 1e-12, "exchange does not lower profit");
        assert!(out.total_surplus().abs() < 1e-15);
        assert!(structural_violations(&out).is_empty());
    }

    #[test]
    fn phase1_merges_shared_node() {
        let inst = line_instance(&[0.0, 1.0, 2.0], 0.0, 1.0, 2);
        let mut sol = blank(&inst);
        for (f, share) in [(0usize, 0.5), (2, 0.5)] {
            let b = &mut sol.facilities[f];
            b.y = 0.5;
            b.z_demand[1][1] = share;
            b.z_supply[f][1] = share;
        }
        let (p1, trace) = round_phase1(&sol, &inst).unwrap();
        assert_eq!(trace.moves.len(), 2);
        let merged = p1.facilities.last().unwrap();
        assert_eq!(merged.location, 1);
        assert!((merged.y - 1.0).abs() < 1e-12);
        assert!((p1.demand_flow(merged) - 1.0).abs() < 1e-12);
        assert!(trace.certificates.iter().all(|c| c.max_distance <= c.bound));
        assert_eq!(trace.replay(&sol).unwrap(), p1);
        let text = trace.to_string();
        assert_eq!(text.parse::<RoundingTrace>().unwrap(), trace);
        let (p2, trace2) = round_phase2(&p1, &inst, &trace).unwrap();
        assert_eq!(trace2.moves.len(), 2);
        assert_eq!(p2, p1);
    }

    #[test]
    fn phase2_chain_within_four_r() {
        // i* forms at node 0, j = node 1 (touched, fully supply-utilized),
        // i = facility at node 2, j' = node 3.
        let inst = line_instance(&[0.0, 1.0, 2.0, 3.0], 0.0, 1.0, 2);
        let mut sol = blank(&inst);
        let b = &mut sol.facilities[0];
        b.y = 0.6;
        b.z_demand[0][1] = 0.6;
        b.z_supply[1][1] = 0.3;
        let b = &mut sol.facilities[1];
        b.y = 0.4;
        b.z_demand[0][1] = 0.4;
        b.z_supply[1][1] = 0.4;
        let b = &mut sol.facilities[2];
        b.y = 0.3;
        b.z_supply[1][1] = 0.3;
        b.z_demand[3][1] = 0.3;
        let (p1, t1) = round_phase1(&sol, &inst).unwrap();
        assert_eq!(t1.moves.len(), 2);
        assert!(t1.moves.iter().all(|m| m.location == 0));
        let (p2, t2) = round_phase2(&p1, &inst, &t1).unwrap();
        let last = t2.moves.last().unwrap();
        assert_eq!((last.phase, last.source, last.location), (2, 2, 0));
        let cert = t2.certificates.last().unwrap();
        assert_eq!(cert.max_distance, 3.0);
        assert_eq!(cert.bound, 4.0);
        assert_eq!(t2.replay(&sol).unwrap(), p2);
        let merged = p2.facilities.last().unwrap();
        assert!((merged.y - 1.3).abs() < 1e-12);
        assert!(p2.facilities[..3].iter().all(|f| f.y == 0.0));
    }

    #[test]
    fn phase2_breach_without_utilized_neighbor() {
        let inst = line_instance(&[0.0, 1.0], 0.0, 1.0, 2);
        let mut sol = blank(&inst);
        sol.facilities[0].y = 0.5;
        sol.facilities[0].z_demand[0][1] = 0.5;
        sol.facilities[0].z_supply[0][1] = 0.5;
        let (p1, t1) = round_phase1(&sol, &inst).unwrap();
        assert!(t1.moves.is_empty());
        assert!(matches!(round_phase2(&p1, &inst, &t1), Err(Error::InvariantBreach(_))));
    }

    #[test]
    fn verifier_examples() {
        let inst = line_instance(&[0.0, 1.0], 1.0, 1.0, 2);
        let empty = IntegralSolution::empty(&inst, Objective::Surplus);
        let rep = verify_feasibility(&inst, &empty, 1.0);
        assert!(rep.passed());
        assert_eq!(rep.surplus, 0.0);

        let mut far = IntegralSolution::empty(&inst, Objective::Surplus);
        far.facilities.push(OpenFacility {
            id: 0,
            location: 1,
            y: 1.0,
            demand_flow: 1.0,
            supply_flow: 1.0,
            surplus: 2.0,
            profit: 1.0,
        });
        far.nodes[0] = NodeAssignment {
            demand_level: 1.0,
            price: 2.0,
            supply_level: 1.0,
            wage: 1.0,
            demand_routes: vec![(0, 1.0)],
            supply_routes: vec![(0, 1.0)],
        };
        let rep = verify_feasibility(&inst, &far, 1.0);
        assert!(rep.passed(), "{rep}");
        assert!((rep.surplus - 2.0).abs() < 1e-12);
        assert!((rep.profit - 1.0).abs() < 1e-12);
        let rep = verify_feasibility(&inst, &far, 0.99);
        assert!(!rep.check(CheckFamily::Distance).passed);
        far.nodes[0].price = 2.5;
        assert!(!verify_feasibility(&inst, &far, 1.0).check(CheckFamily::SinglePrice).passed);
    }
}
