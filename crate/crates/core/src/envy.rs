//! Envy-free lottery pricing.
//!
//! Every node splits into subtypes (for instance advertised deadlines) that
//! may envy one another along a DAG. The platform routes an arriving agent to
//! a facility first and then shows a ladder of prices (wages), one per
//! subtype, drawn from a per-(facility, node) lottery. Along an edge
//! `(k, k')` the price for `k` is never below the price for `k'` and the wage
//! for `k` never above the wage for `k'`.
//!
//! An agent that declines every offered price is treated as a non-arrival:
//! it contributes no flow, which is exactly the LP accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{Distribution, Metric};
use crate::lp::{Cmp, LpBackend, LpProblem, LpStatus, RowTag, Sense, LP_TOL, ZERO_MASS};
use crate::rounding::{phase1, phase2, Blocks, RescaleLog, RoundingTrace, FULL_TOL};

const NOISE: f64 = 1e-10;

/// One subtype of a node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subtype {
    /// `G_jk`, e.g. the advertised deadline.
    pub weight: f64,
    pub demand_volume: f64,
    /// Buyer valuations; `F(p)` is the fraction valuing at least `p`.
    pub value: Distribution,
    pub supply_volume: f64,
    /// Seller costs; `H(w)` is the fraction with cost at most `w`.
    pub cost: Distribution,
}

impl Subtype {
    /// Buyer flow `d F(p)` at price `p`.
    pub fn demand_at(&self, p: f64) -> f64 {
        self.demand_volume * self.value.survival(p)
    }

    /// Seller flow `s H(w)` at wage `w`.
    pub fn supply_at(&self, w: f64) -> f64 {
        self.supply_volume * self.cost.cdf(w)
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(Error::InvalidInstance(format!("subtype weight must be positive, got {}", self.weight)));
        }
        if !ok(self.demand_volume) || !ok(self.supply_volume) {
            return Err(Error::InvalidInstance("subtype volumes must be finite and nonnegative".into()));
        }
        self.value.validate()?;
        self.cost.validate()
    }
}

/// A node with its subtypes and envy DAG.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvyNode {
    pub name: String,
    pub subtypes: Vec<Subtype>,
    /// `(k, k')`: `k` envies `k'`.
    pub edges: Vec<(usize, usize)>,
    order: Vec<usize>,
}

impl EnvyNode {
    pub fn new(name: impl Into<String>, subtypes: Vec<Subtype>, edges: Vec<(usize, usize)>) -> Result<EnvyNode> {
        let name = name.into();
        if subtypes.is_empty() {
            return Err(Error::InvalidInstance(format!("node {name}: no subtypes")));
        }
        for s in &subtypes {
            s.validate().map_err(|e| Error::InvalidInstance(format!("node {name}: {e}")))?;
        }
        let order = topological_order(subtypes.len(), &edges)
            .map_err(|msg| Error::InvalidInstance(format!("node {name}: {msg}")))?;
        Ok(EnvyNode { name, subtypes, edges, order })
    }

    /// Subtypes in a topological order of the envy DAG (smallest index first
    /// among ready subtypes).
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }
}

fn topological_order(n: usize, edges: &[(usize, usize)]) -> std::result::Result<Vec<usize>, String> {
    let mut indegree = vec![0usize; n];
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(format!("edge ({a}, {b}) names a missing subtype"));
        }
        if a == b {
            return Err(format!("self-loop on subtype {a}"));
        }
        indegree[b] += 1;
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&k| indegree[k] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(k) = ready.pop_first() {
        order.push(k);
        for &(a, b) in edges {
            if a == k {
                indegree[b] -= 1;
                if indegree[b] == 0 {
                    ready.insert(b);
                }
            }
        }
    }
    if order.len() < n {
        return Err("envy graph has a cycle".into());
    }
    Ok(order)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvyInstance {
    pub nodes: Vec<EnvyNode>,
    pub metric: Metric,
    /// `L`: minimum weighted flow at every open facility.
    pub flow_lower_bound: f64,
    pub radius: f64,
    pub p_max: f64,
    /// Candidate prices, strictly increasing.
    pub prices: Vec<f64>,
    /// Candidate wages, strictly increasing.
    pub wages: Vec<f64>,
    pub metadata: BTreeMap<String, f64>,
}

impl EnvyInstance {
    pub fn new(
        nodes: Vec<EnvyNode>,
        metric: Metric,
        flow_lower_bound: f64,
        radius: f64,
        p_max: f64,
        prices: Vec<f64>,
        wages: Vec<f64>,
    ) -> Result<EnvyInstance> {
        let bad = |msg: String| Err(Error::InvalidInstance(msg));
        if nodes.len() != metric.len() {
            return bad(format!("{} nodes but a {}x{} metric", nodes.len(), metric.len(), metric.len()));
        }
        if !(flow_lower_bound.is_finite() && flow_lower_bound >= 0.0) {
            return bad(format!("L must be finite and nonnegative, got {flow_lower_bound}"));
        }
        if !(radius >= 0.0) {
            return bad(format!("R must be nonnegative, got {radius}"));
        }
        if !(p_max.is_finite() && p_max > 0.0) {
            return bad(format!("p_max must be positive, got {p_max}"));
        }
        let increasing = |g: &[f64]| !g.is_empty() && g.iter().all(|v| v.is_finite() && *v >= 0.0) && g.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&prices) || prices[prices.len() - 1] > p_max {
            return bad("prices must be a nonempty, strictly increasing grid in [0, p_max]".into());
        }
        if !increasing(&wages) {
            return bad("wages must be a nonempty, strictly increasing nonnegative grid".into());
        }
        Ok(EnvyInstance { nodes, metric, flow_lower_bound, radius, p_max, prices, wages, metadata: BTreeMap::new() })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Weighted flow a block contributes through node `j`.
    fn weighted(&self, j: usize, zd: &[Vec<f64>], zs: &[Vec<f64>]) -> f64 {
        self.nodes[j]
            .subtypes
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let d: f64 = self.prices.iter().zip(&zd[k]).map(|(&p, z)| s.demand_at(p) * z).sum();
                let w: f64 = self.wages.iter().zip(&zs[k]).map(|(&w, z)| s.supply_at(w) * z).sum();
                s.weight * (d + w)
            })
            .sum()
    }

    fn demand_flow(&self, j: usize, zd: &[Vec<f64>]) -> f64 {
        let node = &self.nodes[j];
        (0..node.subtypes.len())
            .map(|k| self.prices.iter().zip(&zd[k]).map(|(&p, z)| node.subtypes[k].demand_at(p) * z).sum::<f64>())
            .sum()
    }

    fn supply_flow(&self, j: usize, zs: &[Vec<f64>]) -> f64 {
        let node = &self.nodes[j];
        (0..node.subtypes.len())
            .map(|k| self.wages.iter().zip(&zs[k]).map(|(&w, z)| node.subtypes[k].supply_at(w) * z).sum::<f64>())
            .sum()
    }

    fn profit(&self, j: usize, zd: &[Vec<f64>], zs: &[Vec<f64>]) -> f64 {
        let node = &self.nodes[j];
        (0..node.subtypes.len())
            .map(|k| {
                let s = &node.subtypes[k];
                let rev: f64 = self.prices.iter().zip(&zd[k]).map(|(&p, z)| p * s.demand_at(p) * z).sum();
                let pay: f64 = self.wages.iter().zip(&zs[k]).map(|(&w, z)| w * s.supply_at(w) * z).sum();
                rev - pay
            })
            .sum()
    }
}

/// Variables of one (facility, node) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvyArc {
    /// Position in `metric.candidates()`.
    pub site: usize,
    pub node: usize,
    pub xd: usize,
    pub xs: usize,
    /// `z_ijkp`, indexed `[k][p]`.
    pub zd: Vec<Vec<usize>>,
    /// `z_ijkw`, indexed `[k][w]`.
    pub zs: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvyModel {
    pub problem: LpProblem,
    /// `y_i` per candidate site.
    pub y: Vec<usize>,
    pub arcs: Vec<EnvyArc>,
}

/// Builds the envy-free lottery LP with `y` relaxed to `[0, 1]`.
pub fn build_envy_lp(inst: &EnvyInstance) -> Result<EnvyModel> {
    let sites = inst.metric.candidates().to_vec();
    let mut p = LpProblem::new(Sense::Maximize);
    let y: Vec<usize> = sites.iter().map(|&i| p.add_var(format!("y[{i}]"), 0.0, 0.0, 1.0)).collect();
    let mut arcs = Vec::new();
    for (c, &i) in sites.iter().enumerate() {
        for (j, node) in inst.nodes.iter().enumerate() {
            if !(inst.metric.distance(i, j) <= inst.radius) {
                continue;
            }
            let xd = p.add_var(format!("xd[{i},{j}]"), 0.0, 0.0, 1.0);
            let xs = p.add_var(format!("xs[{i},{j}]"), 0.0, 0.0, 1.0);
            let mut zd = Vec::new();
            let mut zs = Vec::new();
            for (k, s) in node.subtypes.iter().enumerate() {
                zd.push(
                    inst.prices
                        .iter()
                        .map(|&price| p.add_var(format!("zd[{i},{j},{k},{price}]"), price * s.demand_at(price), 0.0, 1.0))
                        .collect::<Vec<_>>(),
                );
                zs.push(
                    inst.wages
                        .iter()
                        .map(|&wage| p.add_var(format!("zs[{i},{j},{k},{wage}]"), -wage * s.supply_at(wage), 0.0, 1.0))
                        .collect::<Vec<_>>(),
                );
            }
            arcs.push(EnvyArc { site: c, node: j, xd, xs, zd, zs });
        }
    }
    for j in 0..inst.len() {
        let mine: Vec<&EnvyArc> = arcs.iter().filter(|a| a.node == j).collect();
        if mine.is_empty() {
            continue;
        }
        p.add_row(RowTag::Routing, mine.iter().map(|a| (a.xd, 1.0)).collect(), Cmp::Le, 1.0);
        p.add_row(RowTag::Routing, mine.iter().map(|a| (a.xs, 1.0)).collect(), Cmp::Le, 1.0);
    }
    for a in &arcs {
        for (x, zk) in [(a.xd, &a.zd), (a.xs, &a.zs)] {
            for z in zk.iter() {
                let mut coeffs: Vec<(usize, f64)> = z.iter().map(|&v| (v, 1.0)).collect();
                coeffs.push((x, -1.0));
                p.add_row(RowTag::PricePerEdge, coeffs, Cmp::Eq, 0.0);
            }
            p.add_row(RowTag::Open, vec![(x, 1.0), (y[a.site], -1.0)], Cmp::Le, 0.0);
        }
        // Prefix dominance; the full prefix is fixed by the per-edge rows.
        for &(k, kk) in &inst.nodes[a.node].edges {
            for (z, cmp) in [(&a.zd, Cmp::Le), (&a.zs, Cmp::Ge)] {
                for top in 0..z[k].len() - 1 {
                    let mut coeffs: Vec<(usize, f64)> = z[k][..=top].iter().map(|&v| (v, 1.0)).collect();
                    coeffs.extend(z[kk][..=top].iter().map(|&v| (v, -1.0)));
                    p.add_row(RowTag::Ladder, coeffs, cmp, 0.0);
                }
            }
        }
    }
    for (c, &yi) in y.iter().enumerate() {
        let mut balance = Vec::new();
        let mut weighted = Vec::new();
        for a in arcs.iter().filter(|a| a.site == c) {
            for (k, s) in inst.nodes[a.node].subtypes.iter().enumerate() {
                for (&v, &price) in a.zd[k].iter().zip(&inst.prices) {
                    balance.push((v, s.demand_at(price)));
                    weighted.push((v, s.weight * s.demand_at(price)));
                }
                for (&v, &wage) in a.zs[k].iter().zip(&inst.wages) {
                    balance.push((v, -s.supply_at(wage)));
                    weighted.push((v, s.weight * s.supply_at(wage)));
                }
            }
        }
        p.add_row(RowTag::FlowBalance, balance, Cmp::Eq, 0.0);
        weighted.push((yi, -inst.flow_lower_bound));
        p.add_row(RowTag::WeightedLower, weighted, Cmp::Ge, 0.0);
    }
    Ok(EnvyModel { problem: p, y, arcs })
}

/// One facility's share of an envy solution.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvyBlock {
    pub id: usize,
    pub location: usize,
    pub y: f64,
    /// Per node.
    pub xd: Vec<f64>,
    pub xs: Vec<f64>,
    /// Per node, `[k][p]`.
    pub zd: Vec<Vec<Vec<f64>>>,
    pub zs: Vec<Vec<Vec<f64>>>,
}

impl EnvyBlock {
    fn empty(id: usize, location: usize, inst: &EnvyInstance) -> EnvyBlock {
        let grid = |len: usize| -> Vec<Vec<Vec<f64>>> {
            inst.nodes.iter().map(|n| vec![vec![0.0; len]; n.subtypes.len()]).collect()
        };
        EnvyBlock {
            id,
            location,
            y: 0.0,
            xd: vec![0.0; inst.len()],
            xs: vec![0.0; inst.len()],
            zd: grid(inst.prices.len()),
            zs: grid(inst.wages.len()),
        }
    }

    fn for_each(&mut self, mut f: impl FnMut(&mut f64)) {
        f(&mut self.y);
        self.xd.iter_mut().chain(self.xs.iter_mut()).for_each(&mut f);
        for v in self.zd.iter_mut().chain(self.zs.iter_mut()).flatten().flatten() {
            f(v);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each(|v| *v *= factor);
    }

    pub fn clear(&mut self) {
        self.for_each(|v| *v = 0.0);
    }

    fn absorb(&mut self, other: &EnvyBlock) {
        self.y += other.y;
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.xd, &other.xd);
        add(&mut self.xs, &other.xs);
        for (a, b) in self.zd.iter_mut().zip(&other.zd).chain(self.zs.iter_mut().zip(&other.zs)) {
            for (ak, bk) in a.iter_mut().zip(b) {
                add(ak, bk);
            }
        }
    }

    pub fn is_connected(&self, j: usize) -> bool {
        self.xd[j] > ZERO_MASS || self.xs[j] > ZERO_MASS
    }
}

/// A (possibly fractional) solution of the envy LP, one block per facility.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvySolution {
    pub blocks: Vec<EnvyBlock>,
    pub lp_value: Option<f64>,
    template: EnvyBlock,
}

impl EnvyBlock {
    pub fn demand_flow(&self, inst: &EnvyInstance) -> f64 {
        (0..inst.len()).map(|j| inst.demand_flow(j, &self.zd[j])).sum()
    }

    pub fn supply_flow(&self, inst: &EnvyInstance) -> f64 {
        (0..inst.len()).map(|j| inst.supply_flow(j, &self.zs[j])).sum()
    }

    pub fn weighted_flow(&self, inst: &EnvyInstance) -> f64 {
        (0..inst.len()).map(|j| inst.weighted(j, &self.zd[j], &self.zs[j])).sum()
    }

    /// `R_i`.
    pub fn profit(&self, inst: &EnvyInstance) -> f64 {
        (0..inst.len()).map(|j| inst.profit(j, &self.zd[j], &self.zs[j])).sum()
    }
}

impl EnvySolution {
    pub fn total_profit(&self, inst: &EnvyInstance) -> f64 {
        self.blocks.iter().map(|b| b.profit(inst)).sum()
    }

    fn utilization(&self, j: usize) -> (f64, f64) {
        (self.blocks.iter().map(|b| b.xd[j]).sum(), self.blocks.iter().map(|b| b.xs[j]).sum())
    }

    fn is_compliant(&self, b: &EnvyBlock) -> bool {
        if b.y <= 0.0 || b.y >= 1.0 - FULL_TOL {
            return true;
        }
        (0..b.xd.len()).any(|j| {
            let (eta, phi) = self.utilization(j);
            (b.xd[j] > ZERO_MASS && eta >= 1.0 - FULL_TOL) || (b.xs[j] > ZERO_MASS && phi >= 1.0 - FULL_TOL)
        })
    }

    /// Partially open facilities without a fully utilized neighbor.
    pub fn violations(&self) -> Vec<usize> {
        self.blocks.iter().filter(|b| !self.is_compliant(b)).map(|b| b.id).collect()
    }
}

impl Blocks for EnvySolution {
    fn num_nodes(&self) -> usize {
        self.template.xd.len()
    }
    fn num_blocks(&self) -> usize {
        self.blocks.len()
    }
    fn block_id(&self, b: usize) -> usize {
        self.blocks[b].id
    }
    fn block_location(&self, b: usize) -> usize {
        self.blocks[b].location
    }
    fn block_y(&self, b: usize) -> f64 {
        self.blocks[b].y
    }
    fn demand_mass(&self, b: usize, j: usize) -> f64 {
        self.blocks[b].xd[j]
    }
    fn supply_mass(&self, b: usize, j: usize) -> f64 {
        self.blocks[b].xs[j]
    }
    fn push_block(&mut self, id: usize, location: usize) -> usize {
        self.blocks.push(EnvyBlock { id, location, ..self.template.clone() });
        self.blocks.len() - 1
    }
    fn merge(&mut self, into: usize, from: usize) {
        let source = self.blocks[from].clone();
        self.blocks[into].absorb(&source);
        self.blocks[from].clear();
    }
}

impl EnvyModel {
    /// Reads a primal vector into facility blocks, snapping solver noise.
    pub fn extract(&self, inst: &EnvyInstance, x: &[f64]) -> EnvySolution {
        let clean = |v: f64| if v.abs() <= NOISE { 0.0 } else { v.clamp(0.0, 1.0) };
        let template = EnvyBlock::empty(0, 0, inst);
        let sites = inst.metric.candidates();
        let mut blocks: Vec<EnvyBlock> = sites
            .iter()
            .enumerate()
            .map(|(c, &i)| EnvyBlock { id: c, location: i, y: clean(x[self.y[c]]), ..template.clone() })
            .collect();
        for a in &self.arcs {
            let b = &mut blocks[a.site];
            b.xd[a.node] = clean(x[a.xd]);
            b.xs[a.node] = clean(x[a.xs]);
            for (k, vars) in a.zd.iter().enumerate() {
                for (p, &v) in vars.iter().enumerate() {
                    b.zd[a.node][k][p] = clean(x[v]);
                }
            }
            for (k, vars) in a.zs.iter().enumerate() {
                for (w, &v) in vars.iter().enumerate() {
                    b.zs[a.node][k][w] = clean(x[v]);
                }
            }
        }
        for b in &mut blocks {
            if b.y == 0.0 {
                b.clear();
            }
        }
        EnvySolution { blocks, lp_value: None, template }
    }
}

/// Solves the envy LP. `Ok(None)` means infeasible; the all-zero point is
/// always feasible, so that only happens on solver trouble.
pub fn solve_envy_lp(model: &EnvyModel, inst: &EnvyInstance, backend: &dyn LpBackend) -> Result<Option<EnvySolution>> {
    let outcome = backend.solve(&model.problem);
    match outcome.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Ok(None),
        status => return Err(Error::Solver { status: status.to_string(), message: outcome.message }),
    }
    let violation = model.problem.max_violation(&outcome.primal);
    if violation > LP_TOL {
        return Err(Error::Solver {
            status: "residual".into(),
            message: format!("constraint residual {violation:e} exceeds tolerance {LP_TOL:e}"),
        });
    }
    let mut sol = model.extract(inst, &outcome.primal);
    sol.lp_value = Some(outcome.objective);
    Ok(Some(sol))
}

/// Closes facilities with negative profit, then scales every remaining
/// partially open facility up until it is fully open or one of its nodes is
/// fully utilized on the side it connects through.
pub fn rescale_envy(sol: &EnvySolution, inst: &EnvyInstance) -> (EnvySolution, RescaleLog) {
    let mut out = sol.clone();
    let mut log = RescaleLog::default();
    for b in 0..out.blocks.len() {
        let block = &out.blocks[b];
        let empty = block.y > 0.0 && !(0..inst.len()).any(|j| block.is_connected(j));
        if block.profit(inst) < 0.0 || empty {
            log.closed_nonpositive.push(block.id);
            out.blocks[b].clear();
        }
    }
    for b in 0..out.blocks.len() {
        if out.is_compliant(&out.blocks[b]) {
            continue;
        }
        let block = &out.blocks[b];
        let mut theta = 1.0 / block.y;
        for j in 0..inst.len() {
            let (eta, phi) = out.utilization(j);
            if block.xd[j] > ZERO_MASS {
                theta = theta.min((1.0 - (eta - block.xd[j])) / block.xd[j]);
            }
            if block.xs[j] > ZERO_MASS {
                theta = theta.min((1.0 - (phi - block.xs[j])) / block.xs[j]);
            }
        }
        let theta = theta.max(1.0);
        let id = block.id;
        out.blocks[b].scale(theta);
        log.scaled.push((id, theta));
    }
    (out, log)
}

/// Buyer or seller side of a lottery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buyer,
    Seller,
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Side> {
        match s {
            "buyer" | "buyers" | "demand" => Ok(Side::Buyer),
            "seller" | "sellers" | "supply" => Ok(Side::Seller),
            other => Err(Error::Domain(format!("unknown side `{other}` (expected buyer or seller)"))),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Buyer => "buyer",
            Side::Seller => "seller",
        })
    }
}

/// The lottery one node runs for one facility on one side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteLottery {
    /// Index into [`LotteryPolicy::facilities`].
    pub facility: usize,
    /// Probability of routing to the facility.
    pub mass: f64,
    /// Unnormalized price (wage) mass, `[k][grid index]`; each row sums to `mass`.
    pub ladder: Vec<Vec<f64>>,
}

impl RouteLottery {
    /// Cumulative distribution of subtype `k`, normalized by `mass`.
    pub fn cdf(&self, k: usize) -> Vec<f64> {
        let mut acc = 0.0;
        self.ladder[k]
            .iter()
            .map(|z| {
                acc += z;
                acc / self.mass
            })
            .collect()
    }

    /// Grid index the shared `alpha` selects for subtype `k`: the `p` with
    /// `CDF(p-) <= alpha < CDF(p)`.
    pub fn select(&self, k: usize, alpha: f64) -> usize {
        let target = alpha * self.mass;
        let mut acc = 0.0;
        let mut last = 0;
        for (idx, &z) in self.ladder[k].iter().enumerate() {
            if z > 0.0 {
                last = idx;
            }
            acc += z;
            if acc > target && z > 0.0 {
                return idx;
            }
        }
        last
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFacility {
    pub id: usize,
    pub location: usize,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodePolicy {
    pub subtypes: usize,
    pub edges: Vec<(usize, usize)>,
    pub buyers: Vec<RouteLottery>,
    pub sellers: Vec<RouteLottery>,
}

/// Routing and ladder lotteries for every node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LotteryPolicy {
    pub p_max: f64,
    pub prices: Vec<f64>,
    pub wages: Vec<f64>,
    pub facilities: Vec<PolicyFacility>,
    pub nodes: Vec<NodePolicy>,
}

/// One sampled offer.
#[derive(Clone, Debug, PartialEq)]
pub struct Ladder {
    /// Index into [`LotteryPolicy::facilities`], or `None` for no routing.
    pub facility: Option<usize>,
    /// Grid index per subtype; `None` when no facility was drawn.
    pub grid: Option<Vec<usize>>,
    /// Price (wage) per subtype.
    pub values: Vec<f64>,
}

impl LotteryPolicy {
    fn routes(&self, node: usize, side: Side) -> &[RouteLottery] {
        match side {
            Side::Buyer => &self.nodes[node].buyers,
            Side::Seller => &self.nodes[node].sellers,
        }
    }

    fn grid(&self, side: Side) -> &[f64] {
        match side {
            Side::Buyer => &self.prices,
            Side::Seller => &self.wages,
        }
    }

    pub fn open_locations(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.facilities.iter().map(|f| f.location).collect();
        v.sort_unstable();
        v
    }

    /// Expected profit recomputed from the subtype curves.
    pub fn expected_profit(&self, inst: &EnvyInstance) -> f64 {
        let mut total = 0.0;
        for (j, node) in self.nodes.iter().enumerate() {
            for r in &node.buyers {
                total += inst.profit(j, &r.ladder, &zero_like(&inst.nodes[j], inst.wages.len()));
            }
            for r in &node.sellers {
                total += inst.profit(j, &zero_like(&inst.nodes[j], inst.prices.len()), &r.ladder);
            }
        }
        total
    }

    /// Edges along which `ladder` is not monotone.
    pub fn ladder_violations(&self, node: usize, side: Side, ladder: &Ladder) -> usize {
        self.nodes[node]
            .edges
            .iter()
            .filter(|&&(k, kk)| match side {
                Side::Buyer => ladder.values[k] < ladder.values[kk],
                Side::Seller => ladder.values[k] > ladder.values[kk],
            })
            .count()
    }

    /// Draws a facility with probability equal to its routing mass, then one
    /// shared `alpha` and the inverse-CDF value of every subtype.
    pub fn sample_with<R: Rng + ?Sized>(&self, node: usize, side: Side, rng: &mut R) -> Ladder {
        let routes = self.routes(node, side);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let chosen = routes.iter().find(|r| {
            acc += r.mass;
            u < acc
        });
        let alpha: f64 = rng.gen();
        match chosen {
            None => {
                let none = match side {
                    Side::Buyer => self.p_max,
                    Side::Seller => 0.0,
                };
                Ladder { facility: None, grid: None, values: vec![none; self.nodes[node].subtypes] }
            }
            Some(r) => {
                let grid: Vec<usize> = (0..r.ladder.len()).map(|k| r.select(k, alpha)).collect();
                let values = grid.iter().map(|&g| self.grid(side)[g]).collect();
                Ladder { facility: Some(r.facility), grid: Some(grid), values }
            }
        }
    }

    /// Pure function of `(seed, index)`: draw `index` of the stream `seed`.
    pub fn sample_ladder(&self, node: usize, side: Side, seed: u64, index: u64) -> Ladder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        self.sample_with(node, side, &mut rng)
    }
}

fn zero_like(node: &EnvyNode, len: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; len]; node.subtypes.len()]
}

/// Result of rounding an envy solution.
#[derive(Clone, Debug)]
pub struct EnvyRounding {
    pub solution: EnvySolution,
    pub policy: LotteryPolicy,
    pub trace: RoundingTrace,
}

/// Phase 1 and Phase 2 merges, then the lottery policy of the merged
/// solution. Every facility ends up closed or with `y >= 1`.
pub fn round_envy(sol: &EnvySolution, inst: &EnvyInstance) -> Result<EnvyRounding> {
    let mut out = sol.clone();
    let mut trace = RoundingTrace::default();
    phase1(&mut out, &inst.metric, inst.radius, &mut trace)?;
    phase2(&mut out, &inst.metric, inst.radius, &mut trace)?;
    let mut facilities = Vec::new();
    let mut nodes: Vec<NodePolicy> =
        inst.nodes.iter().map(|n| NodePolicy { subtypes: n.subtypes.len(), edges: n.edges.clone(), buyers: Vec::new(), sellers: Vec::new() }).collect();
    for b in &out.blocks {
        let connected = (0..inst.len()).any(|j| b.is_connected(j));
        if !connected {
            continue;
        }
        if b.y < 1.0 - FULL_TOL {
            return Err(Error::InvariantBreach(format!("facility {} left partially open at y = {}", b.id, b.y)));
        }
        let f = facilities.len();
        facilities.push(PolicyFacility { id: b.id, location: b.location, y: b.y });
        for j in 0..inst.len() {
            if b.xd[j] > ZERO_MASS {
                nodes[j].buyers.push(RouteLottery { facility: f, mass: b.xd[j], ladder: b.zd[j].clone() });
            }
            if b.xs[j] > ZERO_MASS {
                nodes[j].sellers.push(RouteLottery { facility: f, mass: b.xs[j], ladder: b.zs[j].clone() });
            }
        }
    }
    let policy = LotteryPolicy { p_max: inst.p_max, prices: inst.prices.clone(), wages: inst.wages.clone(), facilities, nodes };
    Ok(EnvyRounding { solution: out, policy, trace })
}

/// Everything one end-to-end envy run produces.
#[derive(Clone, Debug)]
pub struct EnvyRun {
    pub lp_value: f64,
    pub lp: EnvySolution,
    pub rescaled: EnvySolution,
    pub rescale: RescaleLog,
    pub rounding: EnvyRounding,
    pub check: PolicyCheck,
}

/// Builds and solves the envy LP, rescales, rounds and checks the policy at
/// distance `4R`.
pub fn solve_envy(inst: &EnvyInstance, backend: &dyn LpBackend) -> Result<EnvyRun> {
    let model = build_envy_lp(inst)?;
    let lp = solve_envy_lp(&model, inst, backend)?
        .ok_or_else(|| Error::Solver { status: "infeasible".into(), message: "envy LP reported infeasible".into() })?;
    let (rescaled, rescale) = rescale_envy(&lp, inst);
    let rounding = round_envy(&rescaled, inst)?;
    let check = check_policy(inst, &rounding.policy, 4.0);
    Ok(EnvyRun { lp_value: lp.lp_value.unwrap_or(f64::NAN), lp, rescaled, rescale, rounding, check })
}

/// Independent audit of a lottery policy against its instance.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyCheck {
    pub distance_bound: f64,
    pub max_distance: f64,
    /// Largest `Σ_i x_ij - 1` over nodes and sides.
    pub routing_excess: f64,
    /// Largest `|Σ_p z - x|`, relative to `x`.
    pub price_mass_residual: f64,
    /// Largest prefix dominance shortfall along an envy edge.
    pub ladder_residual: f64,
    /// Largest `|demand - supply|` over open facilities.
    pub balance_residual: f64,
    /// Smallest weighted flow minus `L` over open facilities.
    pub weighted_slack: f64,
    pub profit: f64,
}

impl PolicyCheck {
    pub fn passed(&self) -> bool {
        let tol = 1e-6;
        self.max_distance <= self.distance_bound * (1.0 + 1e-12) + 1e-12
            && self.routing_excess <= tol
            && self.price_mass_residual <= tol
            && self.ladder_residual <= tol
            && self.balance_residual <= tol * (1.0 + self.profit.abs())
            && self.weighted_slack >= -tol
    }
}

impl fmt::Display for PolicyCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "passed: {}", self.passed())?;
        writeln!(f, "profit: {:?}", self.profit)?;
        writeln!(f, "max_distance: {:?} (bound {:?})", self.max_distance, self.distance_bound)?;
        writeln!(f, "routing_excess: {:e}", self.routing_excess)?;
        writeln!(f, "price_mass_residual: {:e}", self.price_mass_residual)?;
        writeln!(f, "ladder_residual: {:e}", self.ladder_residual)?;
        writeln!(f, "balance_residual: {:e}", self.balance_residual)?;
        writeln!(f, "weighted_slack: {:?}", self.weighted_slack)
    }
}

/// Checks a policy with every route within `factor * R`.
pub fn check_policy(inst: &EnvyInstance, policy: &LotteryPolicy, factor: f64) -> PolicyCheck {
    let mut c = PolicyCheck {
        distance_bound: factor * inst.radius,
        max_distance: 0.0,
        routing_excess: 0.0,
        price_mass_residual: 0.0,
        ladder_residual: 0.0,
        balance_residual: 0.0,
        weighted_slack: f64::INFINITY,
        profit: policy.expected_profit(inst),
    };
    let nf = policy.facilities.len();
    let mut demand = vec![0.0; nf];
    let mut supply = vec![0.0; nf];
    let mut weighted = vec![0.0; nf];
    for (j, node) in policy.nodes.iter().enumerate() {
        for side in [Side::Buyer, Side::Seller] {
            let routes = policy.routes(j, side);
            c.routing_excess = c.routing_excess.max(routes.iter().map(|r| r.mass).sum::<f64>() - 1.0);
            for r in routes {
                let loc = policy.facilities[r.facility].location;
                c.max_distance = c.max_distance.max(inst.metric.distance(loc, j));
                for row in &r.ladder {
                    let gap = (row.iter().sum::<f64>() - r.mass).abs() / r.mass.max(ZERO_MASS);
                    c.price_mass_residual = c.price_mass_residual.max(gap);
                }
                for &(k, kk) in &node.edges {
                    let (a, b) = (r.cdf(k), r.cdf(kk));
                    for (x, y) in a.iter().zip(&b) {
                        let short = match side {
                            Side::Buyer => x - y,
                            Side::Seller => y - x,
                        };
                        c.ladder_residual = c.ladder_residual.max(short);
                    }
                }
                let zeros = |len| zero_like(&inst.nodes[j], len);
                match side {
                    Side::Buyer => {
                        demand[r.facility] += inst.demand_flow(j, &r.ladder);
                        weighted[r.facility] += inst.weighted(j, &r.ladder, &zeros(inst.wages.len()));
                    }
                    Side::Seller => {
                        supply[r.facility] += inst.supply_flow(j, &r.ladder);
                        weighted[r.facility] += inst.weighted(j, &zeros(inst.prices.len()), &r.ladder);
                    }
                }
            }
        }
    }
    for f in 0..nf {
        c.balance_residual = c.balance_residual.max((demand[f] - supply[f]).abs());
        c.weighted_slack = c.weighted_slack.min(weighted[f] - inst.flow_lower_bound);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{random_envy_instance, EnvySpec};
    use crate::lp::MicroLpBackend;

    fn subtype(weight: f64, lo: f64, hi: f64) -> Subtype {
        Subtype {
            weight,
            demand_volume: 1.0,
            value: Distribution::Uniform { lo, hi },
            supply_volume: 1.0,
            cost: Distribution::Uniform { lo: 0.0, hi: 1.0 },
        }
    }

    fn single(subtypes: Vec<Subtype>, edges: Vec<(usize, usize)>, l: f64) -> EnvyInstance {
        let node = EnvyNode::new("v", subtypes, edges).unwrap();
        EnvyInstance::new(vec![node], Metric::new(vec![vec![0.0]], vec![0]).unwrap(), l, 1.0, 3.0, vec![1.0, 2.0], vec![0.5, 1.0])
            .unwrap()
    }

    #[test]
    fn cycles_are_rejected() {
        let s = || subtype(1.0, 0.0, 1.0);
        assert!(EnvyNode::new("v", vec![s(), s()], vec![(0, 1), (1, 0)]).is_err());
        assert!(EnvyNode::new("v", vec![s(), s()], vec![(0, 0)]).is_err());
        let n = EnvyNode::new("v", vec![s(), s(), s()], vec![(2, 0), (0, 1)]).unwrap();
        assert_eq!(n.topological_order(), &[2, 0, 1]);
    }

    #[test]
    fn dominance_rows_per_prefix() {
        let trivial = build_envy_lp(&single(vec![subtype(1.0, 1.0, 3.0)], vec![], 0.5)).unwrap();
        assert_eq!(trivial.problem.count_rows(RowTag::Ladder), 0);
        let two = build_envy_lp(&single(vec![subtype(1.0, 1.0, 3.0), subtype(2.0, 1.0, 3.0)], vec![(0, 1)], 0.5)).unwrap();
        // One price prefix and one wage prefix for the single (i, j) pair.
        assert_eq!(two.problem.count_rows(RowTag::Ladder), 2);
    }

    #[test]
    fn single_subtype_matches_hand_optimum() {
        // Values U[1,3]: price 1 sells 1.0 (revenue 1), price 2 sells 0.5 (revenue 1).
        // Costs U[0,1]: wage 0.5 buys 0.5 at 0.25, wage 1 buys 1.0 at 1.
        // Balance at 0.5 flow: price 2 with wage 0.5 gives 1 - 0.25 = 0.75.
        let inst = single(vec![subtype(1.0, 1.0, 3.0)], vec![], 1.0);
        let run = solve_envy(&inst, &MicroLpBackend).unwrap();
        assert!((run.lp_value - 0.75).abs() < 1e-7, "{}", run.lp_value);
        assert!((run.rounding.policy.expected_profit(&inst) - 0.75).abs() < 1e-7);
        assert!(run.check.passed(), "{}", run.check);
    }

    #[test]
    fn negative_profit_facility_is_closed() {
        let inst = single(vec![subtype(1.0, 1.0, 3.0)], vec![], 0.0);
        let model = build_envy_lp(&inst).unwrap();
        let mut x = vec![0.0; model.problem.num_vars()];
        let a = &model.arcs[0];
        // Sellers hired at wage 1 with no buyers: profit -1.
        for v in [model.y[0], a.xs, a.zs[0][1]] {
            x[v] = 1.0;
        }
        let sol = model.extract(&inst, &x);
        assert!((sol.total_profit(&inst) + 1.0).abs() < 1e-12);
        let (out, log) = rescale_envy(&sol, &inst);
        assert_eq!(log.closed_nonpositive, vec![0]);
        assert_eq!(out.total_profit(&inst), 0.0);
    }

    #[test]
    fn partial_facility_scaled_to_open() {
        let inst = single(vec![subtype(1.0, 1.0, 3.0)], vec![], 0.0);
        let model = build_envy_lp(&inst).unwrap();
        let mut x = vec![0.0; model.problem.num_vars()];
        let a = &model.arcs[0];
        for v in [model.y[0], a.xd, a.xs, a.zd[0][1], a.zs[0][0]] {
            x[v] = 0.4;
        }
        let sol = model.extract(&inst, &x);
        let (out, log) = rescale_envy(&sol, &inst);
        assert_eq!(log.scaled.len(), 1);
        assert!((log.scaled[0].1 - 2.5).abs() < 1e-12);
        assert!((out.blocks[0].y - 1.0).abs() < 1e-12);
        assert!(out.violations().is_empty());
        assert!(out.total_profit(&inst) >= sol.total_profit(&inst));
    }

    fn policy_with(ladders: Vec<Vec<f64>>, mass: f64, edges: Vec<(usize, usize)>) -> LotteryPolicy {
        LotteryPolicy {
            p_max: 9.0,
            prices: vec![1.0, 2.0, 3.0],
            wages: vec![0.5, 1.0, 1.5],
            facilities: vec![PolicyFacility { id: 0, location: 0, y: 1.0 }],
            nodes: vec![NodePolicy {
                subtypes: ladders.len(),
                edges,
                buyers: vec![RouteLottery { facility: 0, mass, ladder: ladders.clone() }],
                sellers: vec![RouteLottery { facility: 0, mass, ladder: ladders }],
            }],
        }
    }

    #[test]
    fn point_mass_policy_is_deterministic() {
        let p = policy_with(vec![vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]], 1.0, vec![(0, 1)]);
        for i in 0..50 {
            let l = p.sample_ladder(0, Side::Buyer, 3, i);
            assert_eq!(l.values, vec![3.0, 2.0]);
            assert_eq!(p.ladder_violations(0, Side::Buyer, &l), 0);
        }
    }

    #[test]
    fn residual_mass_posts_p_max() {
        let p = policy_with(vec![vec![0.0, 0.0, 0.25]], 0.25, vec![]);
        let none = (0..2000).map(|i| p.sample_ladder(0, Side::Buyer, 1, i)).filter(|l| l.facility.is_none()).collect::<Vec<_>>();
        assert!(!none.is_empty());
        assert!(none.iter().all(|l| l.values == vec![9.0]));
        let s = (0..2000).map(|i| p.sample_ladder(0, Side::Seller, 1, i)).find(|l| l.facility.is_none()).unwrap();
        assert_eq!(s.values, vec![0.0]);
    }

    #[test]
    fn two_price_split_is_even() {
        let p = policy_with(vec![vec![0.5, 0.5, 0.0]], 1.0, vec![]);
        let n = 10_000;
        let low = (0..n).filter(|&i| p.sample_ladder(0, Side::Buyer, 11, i).values[0] == 1.0).count() as f64 / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((low - 0.5).abs() <= 3.0 * se, "{low}");
    }

    #[test]
    fn shared_alpha_is_monotone_at_breakpoints() {
        // Subtype 0 dominates subtype 1 on prices.
        let r = RouteLottery { facility: 0, mass: 1.0, ladder: vec![vec![0.2, 0.3, 0.5], vec![0.5, 0.3, 0.2]] };
        let mut alphas: Vec<f64> = [r.cdf(0), r.cdf(1)].concat();
        alphas.extend([0.0, 0.999_999]);
        for a in alphas.into_iter().filter(|a| *a < 1.0) {
            for eps in [0.0, 1e-12] {
                let a = (a - eps).max(0.0);
                assert!(r.select(0, a) >= r.select(1, a), "alpha {a}");
            }
        }
    }

    #[test]
    fn random_instances_round_to_lp_optimum() {
        for seed in 0..4 {
            let inst = random_envy_instance(&EnvySpec { seed, ..EnvySpec::default() }).unwrap();
            let run = solve_envy(&inst, &MicroLpBackend).unwrap();
            let profit = run.rounding.policy.expected_profit(&inst);
            assert!((profit - run.lp_value).abs() <= 1e-6 * run.lp_value.abs().max(1.0), "seed {seed}: {profit} vs {}", run.lp_value);
            assert!(run.check.passed(), "seed {seed}: {}", run.check);
            assert!(run.rescaled.violations().is_empty());
        }
    }
}
