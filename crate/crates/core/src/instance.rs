//! Instances: the metric, per-node demand and supply curves, and the global
//! parameters `L` (flow lower bound), `R` (distance bound) and `p_max`.
//!
//! Curves live in level space. A demand curve maps the participating fraction
//! `q` of a node's buyers to the posted price `F^-1(q)` and to the total value
//! `V(q)` those buyers generate; a supply curve maps the participating
//! fraction `r` of sellers to the wage `H^-1(r)` and their total cost `C(r)`.
//! Cumulative values already include the node's volume (`d_j` or `s_j`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Default number of grid levels for parametric curves.
pub const DEFAULT_GRID_SIZE: usize = 17;

/// Probability mass cut from the tails of unbounded distributions.
pub const TAIL_MASS: f64 = 1e-6;

const SHAPE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveRole {
    Demand,
    Supply,
}

/// What the solver maximizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Gains from trade: buyer value minus seller cost.
    #[default]
    Surplus,
    /// Prices collected minus wages paid.
    Profit,
    /// Total matched demand flow.
    Throughput,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Surplus => "surplus",
            Objective::Profit => "profit",
            Objective::Throughput => "throughput",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surplus" => Ok(Objective::Surplus),
            "profit" => Ok(Objective::Profit),
            "throughput" => Ok(Objective::Throughput),
            other => Err(Error::Domain(format!("unknown objective `{other}`"))),
        }
    }
}

/// Valuation (demand) or cost (supply) distribution of individual agents.
///
/// Exponential and normal distributions are truncated to the central
/// `[TAIL_MASS, 1 - TAIL_MASS]` quantile range (normal) or to
/// `[0, Q(1 - TAIL_MASS)]` (exponential) and renormalized, so every
/// distribution has bounded support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Distribution {
    Uniform { lo: f64, hi: f64 },
    Exponential { rate: f64 },
    Normal { mean: f64, sd: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Distribution::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi,
            Distribution::Exponential { rate } => rate.is_finite() && rate > 0.0,
            Distribution::Normal { mean, sd } => {
                mean.is_finite() && sd.is_finite() && sd > 0.0 && self.support().1 > self.support().0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidCurve(format!("bad distribution parameters {self:?}")))
        }
    }

    /// Bounded support after truncation.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Distribution::Uniform { lo, hi } => (lo, hi),
            Distribution::Exponential { rate } => (0.0, -TAIL_MASS.ln() / rate),
            Distribution::Normal { mean, sd } => {
                let std = standard_normal();
                let lo = (mean + sd * std.inverse_cdf(TAIL_MASS)).max(0.0);
                let hi = mean + sd * std.inverse_cdf(1.0 - TAIL_MASS);
                (lo, hi)
            }
        }
    }

    fn raw_cdf(&self, x: f64) -> f64 {
        match *self {
            Distribution::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            Distribution::Exponential { rate } => {
                if x <= 0.0 {
                    0.0
                } else {
                    -(-rate * x).exp_m1()
                }
            }
            Distribution::Normal { mean, sd } => standard_normal().cdf((x - mean) / sd),
        }
    }

    fn raw_quantile(&self, p: f64) -> f64 {
        match *self {
            Distribution::Uniform { lo, hi } => lo + p * (hi - lo),
            Distribution::Exponential { rate } => -(-p).ln_1p() / rate,
            Distribution::Normal { mean, sd } => mean + sd * standard_normal().inverse_cdf(p),
        }
    }

    /// Antiderivative of `v * density(v)` (untruncated).
    fn raw_first_moment(&self, v: f64) -> f64 {
        match *self {
            Distribution::Uniform { lo, hi } => v * v / (2.0 * (hi - lo)),
            Distribution::Exponential { rate } => -(v + 1.0 / rate) * (-rate * v).exp(),
            Distribution::Normal { mean, sd } => {
                let z = (v - mean) / sd;
                let std = standard_normal();
                let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                mean * std.cdf(z) - sd * pdf
            }
        }
    }

    fn mass(&self) -> f64 {
        let (lo, hi) = self.support();
        self.raw_cdf(hi) - self.raw_cdf(lo)
    }

    /// CDF of the truncated distribution.
    pub fn cdf(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x <= lo {
            return 0.0;
        }
        if x >= hi {
            return 1.0;
        }
        ((self.raw_cdf(x) - self.raw_cdf(lo)) / self.mass()).clamp(0.0, 1.0)
    }

    /// Fraction of agents whose valuation is at least `x`.
    pub fn survival(&self, x: f64) -> f64 {
        1.0 - self.cdf(x)
    }

    /// Density of the truncated distribution.
    pub fn density(&self, x: f64) -> f64 {
        let (lo, hi) = self.support();
        if x < lo || x > hi {
            return 0.0;
        }
        let raw = match *self {
            Distribution::Uniform { lo, hi } => 1.0 / (hi - lo),
            Distribution::Exponential { rate } => rate * (-rate * x).exp(),
            Distribution::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
        };
        raw / self.mass()
    }

    /// Quantile of the truncated distribution.
    pub fn quantile(&self, u: f64) -> f64 {
        let (lo, hi) = self.support();
        let u = u.clamp(0.0, 1.0);
        if let Distribution::Uniform { .. } = self {
            return lo + u * (hi - lo);
        }
        let p = self.raw_cdf(lo) + u * self.mass();
        self.raw_quantile(p).clamp(lo, hi)
    }

    /// `∫ v f(v) dv` over `[from, to]` intersected with the support.
    pub fn partial_expectation(&self, from: f64, to: f64) -> f64 {
        let (lo, hi) = self.support();
        let a = from.max(lo);
        let b = to.min(hi);
        if b <= a {
            return 0.0;
        }
        (self.raw_first_moment(b) - self.raw_first_moment(a)) / self.mass()
    }

    /// Price at which a fraction `q` of buyers participates (`F^-1(q)`).
    pub fn demand_price(&self, q: f64) -> f64 {
        match *self {
            Distribution::Uniform { lo, hi } => hi - q * (hi - lo),
            _ => self.quantile(1.0 - q),
        }
    }

    /// Wage at which a fraction `r` of sellers participates (`H^-1(r)`).
    pub fn supply_wage(&self, r: f64) -> f64 {
        match *self {
            Distribution::Uniform { lo, hi } => lo + r * (hi - lo),
            _ => self.quantile(r),
        }
    }
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// One grid point of a curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Participating fraction in `[0, 1]`.
    pub level: f64,
    /// Price (demand) or wage (supply) producing this level.
    pub marginal: f64,
    /// Total value `V(level)` or total cost `C(level)`, volume included.
    pub cumulative: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CurveShape {
    Parametric { dist: Distribution, grid_size: usize },
    Grid,
}

/// Outcome of [`check_regularity`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularity {
    Regular,
    /// Index of the first point whose incoming slope breaks concavity
    /// (demand) or convexity (supply) of `level * marginal`.
    Violated(usize),
}

impl Regularity {
    pub fn is_regular(self) -> bool {
        matches!(self, Regularity::Regular)
    }
}

/// Discrete regularity test: `level * marginal` must have nonincreasing
/// (demand) or nondecreasing (supply) slopes across the grid.
pub fn check_regularity(role: CurveRole, points: &[CurvePoint]) -> Regularity {
    let mut prev_slope: Option<f64> = None;
    for k in 1..points.len() {
        let (a, b) = (&points[k - 1], &points[k]);
        let slope = (b.level * b.marginal - a.level * a.marginal) / (b.level - a.level);
        if let Some(prev) = prev_slope {
            let bad = match role {
                CurveRole::Demand => slope > prev + SHAPE_TOL,
                CurveRole::Supply => slope < prev - SHAPE_TOL,
            };
            if bad {
                return Regularity::Violated(k);
            }
        }
        prev_slope = Some(slope);
    }
    Regularity::Regular
}

/// A demand or supply curve on a finite grid of levels, with exact
/// evaluation between grid points for parametric curves and piecewise-linear
/// interpolation of value and revenue for explicit grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    role: CurveRole,
    volume: f64,
    p_max: f64,
    shape: CurveShape,
    points: Vec<CurvePoint>,
}

impl Curve {
    /// Demand curve for valuations `U[a, b]`.
    pub fn uniform_demand(volume: f64, a: f64, b: f64, grid_size: usize, p_max: f64) -> Result<Curve> {
        if !(a < b) {
            return Err(Error::InvalidCurve(format!("uniform demand needs a < b, got [{a}, {b}]")));
        }
        Curve::parametric(CurveRole::Demand, volume, Distribution::Uniform { lo: a, hi: b }, grid_size, p_max)
    }

    /// Supply curve for costs `U[a, b]`.
    pub fn uniform_supply(volume: f64, a: f64, b: f64, grid_size: usize) -> Result<Curve> {
        if !(a < b) {
            return Err(Error::InvalidCurve(format!("uniform supply needs a < b, got [{a}, {b}]")));
        }
        Curve::parametric(CurveRole::Supply, volume, Distribution::Uniform { lo: a, hi: b }, grid_size, f64::NAN)
    }

    pub fn exponential_demand(volume: f64, rate: f64, grid_size: usize, p_max: f64) -> Result<Curve> {
        Curve::parametric(CurveRole::Demand, volume, Distribution::Exponential { rate }, grid_size, p_max)
    }

    pub fn exponential_supply(volume: f64, rate: f64, grid_size: usize) -> Result<Curve> {
        Curve::parametric(CurveRole::Supply, volume, Distribution::Exponential { rate }, grid_size, f64::NAN)
    }

    pub fn normal_demand(volume: f64, mean: f64, sd: f64, grid_size: usize, p_max: f64) -> Result<Curve> {
        Curve::parametric(CurveRole::Demand, volume, Distribution::Normal { mean, sd }, grid_size, p_max)
    }

    pub fn normal_supply(volume: f64, mean: f64, sd: f64, grid_size: usize) -> Result<Curve> {
        Curve::parametric(CurveRole::Supply, volume, Distribution::Normal { mean, sd }, grid_size, f64::NAN)
    }

    /// Curve generated by `dist` on the uniform level grid `{0, 1/(g-1), ..., 1}`.
    /// `p_max` is ignored for supply curves.
    pub fn parametric(
        role: CurveRole,
        volume: f64,
        dist: Distribution,
        grid_size: usize,
        p_max: f64,
    ) -> Result<Curve> {
        dist.validate()?;
        if grid_size < 2 {
            return Err(Error::InvalidCurve(format!("grid_size must be at least 2, got {grid_size}")));
        }
        check_volume(volume)?;
        if role == CurveRole::Demand {
            let hi = dist.support().1;
            if !(p_max > 0.0) || hi > p_max * (1.0 + 1e-12) {
                return Err(Error::InvalidCurve(format!(
                    "valuation support reaches {hi}, above p_max = {p_max}"
                )));
            }
        }
        let mut curve = Curve {
            role,
            volume,
            p_max: if role == CurveRole::Demand { p_max } else { f64::NAN },
            shape: CurveShape::Parametric { dist, grid_size },
            points: Vec::with_capacity(grid_size),
        };
        let last = (grid_size - 1) as f64;
        for k in 0..grid_size {
            let level = if k + 1 == grid_size { 1.0 } else { k as f64 / last };
            curve.points.push(CurvePoint {
                level,
                marginal: curve.marginal_at(level),
                cumulative: curve.cumulative_at(level),
            });
        }
        curve.validate_points()?;
        Ok(curve)
    }

    /// Curve given as explicit grid points. The first point must sit at level 0.
    pub fn from_points(role: CurveRole, volume: f64, points: Vec<CurvePoint>, p_max: f64) -> Result<Curve> {
        check_volume(volume)?;
        let curve = Curve {
            role,
            volume,
            p_max: if role == CurveRole::Demand { p_max } else { f64::NAN },
            shape: CurveShape::Grid,
            points,
        };
        curve.validate_points()?;
        Ok(curve)
    }

    fn validate_points(&self) -> Result<()> {
        let pts = &self.points;
        let fail = |msg: String| Err(Error::InvalidCurve(format!("{:?} curve: {msg}", self.role)));
        if pts.len() < 2 {
            return fail("needs at least two grid points".into());
        }
        if pts.iter().any(|p| !(p.level.is_finite() && p.marginal.is_finite() && p.cumulative.is_finite())) {
            return fail("non-finite grid value".into());
        }
        if pts[0].level != 0.0 || pts[0].cumulative != 0.0 {
            return fail("level 0 with cumulative 0 must be the first grid point".into());
        }
        for w in pts.windows(2) {
            if !(w[1].level > w[0].level) || w[1].level > 1.0 {
                return fail("levels must increase strictly within [0, 1]".into());
            }
        }
        let scale = 1.0 + pts.iter().map(|p| p.cumulative.abs() + p.marginal.abs()).fold(0.0, f64::max);
        let tol = SHAPE_TOL * scale;
        match self.role {
            CurveRole::Demand => {
                if !(self.p_max > 0.0) || (pts[0].marginal - self.p_max).abs() > tol {
                    return fail(format!("level 0 must carry price p_max = {}", self.p_max));
                }
                if pts.windows(2).any(|w| !(w[1].marginal < w[0].marginal)) {
                    return fail("prices must decrease strictly in level".into());
                }
                if pts.iter().any(|p| p.marginal < 0.0) {
                    return fail("negative price".into());
                }
            }
            CurveRole::Supply => {
                if pts[0].marginal < 0.0 {
                    return fail("negative wage at level 0".into());
                }
                if pts.windows(2).any(|w| w[1].marginal < w[0].marginal - tol) {
                    return fail("wages must not decrease in level".into());
                }
            }
        }
        if pts.windows(2).any(|w| w[1].cumulative < w[0].cumulative - tol) {
            return fail("cumulative must be nondecreasing".into());
        }
        let slopes: Vec<f64> = pts
            .windows(2)
            .map(|w| (w[1].cumulative - w[0].cumulative) / (w[1].level - w[0].level))
            .collect();
        let slope_tol = tol / pts.windows(2).map(|w| w[1].level - w[0].level).fold(1.0, f64::min);
        for s in slopes.windows(2) {
            let bad = match self.role {
                CurveRole::Demand => s[1] > s[0] + slope_tol,
                CurveRole::Supply => s[1] < s[0] - slope_tol,
            };
            if bad {
                return fail("cumulative must be concave (demand) / convex (supply)".into());
            }
        }
        if let Regularity::Violated(k) = check_regularity(self.role, pts) {
            return fail(format!("level * marginal breaks regularity at grid index {k}"));
        }
        for p in pts {
            let revenue = self.volume * p.level * p.marginal;
            let bad = match self.role {
                CurveRole::Demand => p.cumulative < revenue - tol,
                CurveRole::Supply => p.cumulative > revenue + tol,
            };
            if bad {
                return fail(format!("value/revenue dominance fails at level {}", p.level));
            }
        }
        Ok(())
    }

    pub fn role(&self) -> CurveRole {
        self.role
    }

    /// `d_j` for demand curves, `s_j` for supply curves.
    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn shape(&self) -> &CurveShape {
        &self.shape
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    pub fn levels(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.level)
    }

    pub fn regularity(&self) -> Regularity {
        check_regularity(self.role, &self.points)
    }

    /// Price `F^-1(level)` or wage `H^-1(level)`.
    pub fn marginal_at(&self, level: f64) -> f64 {
        let level = clamp_level(level);
        match &self.shape {
            CurveShape::Parametric { dist, .. } => match self.role {
                CurveRole::Demand if level == 0.0 => self.p_max,
                CurveRole::Demand => dist.demand_price(level),
                CurveRole::Supply => dist.supply_wage(level),
            },
            CurveShape::Grid => {
                if level == 0.0 {
                    return self.points[0].marginal;
                }
                match self.locate(level) {
                    Ok(k) => self.points[k].marginal,
                    Err((a, b, t)) => {
                        let (pa, pb) = (&self.points[a], &self.points[b]);
                        let unit = (1.0 - t) * pa.level * pa.marginal + t * pb.level * pb.marginal;
                        unit / level
                    }
                }
            }
        }
    }

    /// Total value `V(level)` (demand) or total cost `C(level)` (supply).
    pub fn cumulative_at(&self, level: f64) -> f64 {
        let level = clamp_level(level);
        if level == 0.0 {
            return 0.0;
        }
        match &self.shape {
            CurveShape::Parametric { dist, .. } => {
                let (lo, hi) = dist.support();
                match self.role {
                    CurveRole::Demand => self.volume * dist.partial_expectation(dist.demand_price(level), hi),
                    CurveRole::Supply => self.volume * dist.partial_expectation(lo, dist.supply_wage(level)),
                }
            }
            CurveShape::Grid => match self.locate(level) {
                Ok(k) => self.points[k].cumulative,
                Err((a, b, t)) => (1.0 - t) * self.points[a].cumulative + t * self.points[b].cumulative,
            },
        }
    }

    /// Money flow at `level`: revenue `d q F^-1(q)` or payment `s r H^-1(r)`.
    pub fn revenue_at(&self, level: f64) -> f64 {
        let level = clamp_level(level);
        if level == 0.0 {
            return 0.0;
        }
        self.volume * level * self.marginal_at(level)
    }

    /// Flow generated at `level`.
    pub fn flow_at(&self, level: f64) -> f64 {
        self.volume * clamp_level(level)
    }

    fn locate(&self, level: f64) -> std::result::Result<usize, (usize, usize, f64)> {
        match self.points.binary_search_by(|p| p.level.partial_cmp(&level).expect("finite level")) {
            Ok(k) => Ok(k),
            Err(k) => {
                let b = k.min(self.points.len() - 1);
                let a = b.saturating_sub(1);
                if a == b {
                    return Ok(a);
                }
                let (la, lb) = (self.points[a].level, self.points[b].level);
                Err((a, b, (level - la) / (lb - la)))
            }
        }
    }

    /// Price ceiling of a demand curve (NaN for supply curves).
    pub fn p_max(&self) -> f64 {
        self.p_max
    }
}

fn clamp_level(level: f64) -> f64 {
    debug_assert!(level > -1e-9 && level < 1.0 + 1e-9, "level {level} outside [0, 1]");
    level.clamp(0.0, 1.0)
}

fn check_volume(volume: f64) -> Result<()> {
    if volume.is_finite() && volume >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidCurve(format!("volume must be finite and nonnegative, got {volume}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    demand: Curve,
    supply: Curve,
}

impl Node {
    pub fn new(name: impl Into<String>, demand: Curve, supply: Curve) -> Result<Node> {
        if demand.role() != CurveRole::Demand || supply.role() != CurveRole::Supply {
            return Err(Error::InvalidCurve("node needs one demand and one supply curve".into()));
        }
        Ok(Node { name: name.into(), demand, supply })
    }

    pub fn demand(&self) -> &Curve {
        &self.demand
    }

    pub fn supply(&self) -> &Curve {
        &self.supply
    }

    pub fn demand_volume(&self) -> f64 {
        self.demand.volume()
    }

    pub fn supply_volume(&self) -> f64 {
        self.supply.volume()
    }

    pub fn curve(&self, role: CurveRole) -> &Curve {
        match role {
            CurveRole::Demand => &self.demand,
            CurveRole::Supply => &self.supply,
        }
    }
}

/// Distance matrix over node indices plus the candidate facility sites.
/// Infinite distances are allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    distance: Vec<Vec<f64>>,
    candidates: Vec<usize>,
}

impl Metric {
    pub fn new(distance: Vec<Vec<f64>>, candidates: Vec<usize>) -> Result<Metric> {
        let n = distance.len();
        let bad = |msg: String| Err(Error::InvalidInstance(msg));
        if distance.iter().any(|row| row.len() != n) {
            return bad("distance matrix must be square".into());
        }
        for i in 0..n {
            if distance[i][i] != 0.0 {
                return bad(format!("d({i},{i}) must be 0"));
            }
            for j in 0..n {
                let d = distance[i][j];
                if d.is_nan() || d < 0.0 {
                    return bad(format!("d({i},{j}) = {d} is not a nonnegative length"));
                }
                if d != distance[j][i] && (d - distance[j][i]).abs() > 1e-9 {
                    return bad(format!("distance not symmetric at ({i},{j})"));
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let via = distance[i][k] + distance[k][j];
                    if distance[i][j] > via + 1e-9 {
                        return bad(format!("triangle inequality fails for ({i},{k},{j})"));
                    }
                }
            }
        }
        let mut sorted = candidates.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != candidates.len() || sorted.iter().any(|&c| c >= n) {
            return bad("facility candidates must be distinct node indices".into());
        }
        Ok(Metric { distance, candidates: sorted })
    }

    /// Euclidean metric over planar points; every node is a candidate.
    pub fn from_coordinates(coords: &[(f64, f64)]) -> Result<Metric> {
        let distance = coords
            .iter()
            .map(|a| coords.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).collect())
            .collect();
        Metric::new(distance, (0..coords.len()).collect())
    }

    pub fn len(&self) -> usize {
        self.distance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distance.is_empty()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.distance[a][b]
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.distance
    }

    /// Candidate facility sites, ascending.
    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    /// All nodes within `radius` of `center`, `center` included.
    pub fn ball(&self, center: usize, radius: f64) -> Result<Vec<usize>> {
        if center >= self.len() {
            return Err(Error::UnknownNode(center));
        }
        if !(radius >= 0.0) {
            return Err(Error::Domain(format!("radius must be nonnegative, got {radius}")));
        }
        Ok((0..self.len()).filter(|&j| self.distance[center][j] <= radius).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub nodes: Vec<Node>,
    pub metric: Metric,
    /// `L`: minimum demand (= supply) flow at every open facility.
    pub flow_lower_bound: f64,
    /// `R`: routing distance bound.
    pub radius: f64,
    pub p_max: f64,
    /// Free-form numeric annotations (e.g. known optima of generated families).
    pub metadata: BTreeMap<String, f64>,
}

impl Instance {
    pub fn new(nodes: Vec<Node>, metric: Metric, flow_lower_bound: f64, radius: f64, p_max: f64) -> Result<Instance> {
        let bad = |msg: String| Err(Error::InvalidInstance(msg));
        if nodes.len() != metric.len() {
            return bad(format!("{} nodes but a {}x{} metric", nodes.len(), metric.len(), metric.len()));
        }
        if !(flow_lower_bound >= 0.0 && flow_lower_bound.is_finite()) {
            return bad(format!("L must be finite and nonnegative, got {flow_lower_bound}"));
        }
        if !(radius >= 0.0) {
            return bad(format!("R must be nonnegative, got {radius}"));
        }
        if !(p_max > 0.0 && p_max.is_finite()) {
            return bad(format!("p_max must be positive, got {p_max}"));
        }
        for (j, node) in nodes.iter().enumerate() {
            let at_zero = node.demand.points()[0].marginal;
            if (at_zero - p_max).abs() > 1e-9 * p_max {
                return bad(format!("node {j}: demand curve level 0 price {at_zero} differs from p_max {p_max}"));
            }
        }
        Ok(Instance { nodes, metric, flow_lower_bound, radius, p_max, metadata: BTreeMap::new() })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ball(&self, center: usize, radius: f64) -> Result<Vec<usize>> {
        self.metric.ball(center, radius)
    }

    /// Positions (into `metric.candidates()`) of candidate sites within `R` of node `j`.
    pub fn candidates_near(&self, j: usize) -> Vec<usize> {
        self.metric
            .candidates()
            .iter()
            .enumerate()
            .filter(|&(_, &site)| self.metric.distance(site, j) <= self.radius)
            .map(|(c, _)| c)
            .collect()
    }

    /// `W_max = (Σ_j d_j) p_max`, an upper bound on any surplus.
    pub fn max_surplus(&self) -> f64 {
        self.nodes.iter().map(Node::demand_volume).sum::<f64>() * self.p_max
    }

    /// Copy with a different distance bound.
    pub fn with_radius(&self, radius: f64) -> Instance {
        Instance { radius, ..self.clone() }
    }

    pub fn with_flow_lower_bound(&self, flow_lower_bound: f64) -> Instance {
        Instance { flow_lower_bound, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Adaptive Simpson; independent of the closed forms under test.
    fn quad(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            let m = 0.5 * (a + b);
            (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
        }
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, eps: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (l, r) = (simpson(f, a, m), simpson(f, m, b));
            if depth == 0 || (l + r - whole).abs() <= 15.0 * eps {
                return l + r + (l + r - whole) / 15.0;
            }
            rec(f, a, m, l, eps / 2.0, depth - 1) + rec(f, m, b, r, eps / 2.0, depth - 1)
        }
        if b <= a {
            return 0.0;
        }
        rec(f, a, b, simpson(f, a, b), 1e-14, 50)
    }

    #[test]
    fn uniform_demand_points() {
        let c = Curve::uniform_demand(1.0, 2.0, 3.0, 11, 3.0).unwrap();
        let full = c.points().last().unwrap();
        assert_eq!(full.level, 1.0);
        assert_eq!(full.marginal, 2.0);
        assert!((full.cumulative - 2.5).abs() < 1e-12);
        assert_eq!(c.points()[0].marginal, 3.0);
        assert_eq!(c.points()[0].cumulative, 0.0);
        let p3 = c.points()[3];
        assert!((p3.level - 0.3).abs() < 1e-15);
        assert!((p3.marginal - 2.7).abs() < 1e-12);
        assert!((p3.cumulative - 0.855).abs() < 1e-12);
        let quadrature = quad(&|v| v, 2.7, 3.0);
        assert!((c.cumulative_at(0.3) - quadrature).abs() < 1e-12);
    }

    #[test]
    fn uniform_demand_level_zero_uses_p_max() {
        let c = Curve::uniform_demand(4.0, 1.0, 2.0, 5, 7.5).unwrap();
        assert_eq!(c.marginal_at(0.0), 7.5);
        assert_eq!(c.cumulative_at(0.0), 0.0);
    }

    #[test]
    fn uniform_supply_points() {
        let c = Curve::uniform_supply(1.0, 0.0, 1.0, 6).unwrap();
        let full = c.points().last().unwrap();
        assert_eq!(full.marginal, 1.0);
        assert!((full.cumulative - 0.5).abs() < 1e-12);
        assert!((c.marginal_at(0.4) - 0.4).abs() < 1e-15);
        assert!((c.cumulative_at(0.4) - 0.08).abs() < 1e-12);
        assert!((quad(&|x| x, 0.0, 0.4) - 0.08).abs() < 1e-12);
        let shifted = Curve::uniform_supply(2.0, 0.5, 1.5, 3).unwrap();
        assert_eq!(shifted.marginal_at(0.0), 0.5);
        assert_eq!(shifted.cumulative_at(0.0), 0.0);
    }

    #[test]
    fn constructor_errors() {
        assert!(Curve::uniform_demand(1.0, 3.0, 2.0, 5, 4.0).is_err());
        assert!(Curve::uniform_demand(1.0, 2.0, 3.0, 1, 4.0).is_err());
        assert!(Curve::uniform_demand(1.0, 2.0, 5.0, 5, 4.0).is_err());
        assert!(Curve::uniform_supply(1.0, 1.0, 1.0, 5).is_err());
        assert!(Curve::uniform_supply(1.0, 0.0, 1.0, 1).is_err());
        assert!(Curve::exponential_demand(1.0, 1.0, 5, 5.0).is_err(), "p_max below truncated support");
    }

    #[test]
    fn parametric_cumulative_matches_quadrature() {
        let cases: Vec<(Distribution, f64)> = vec![
            (Distribution::Uniform { lo: 0.5, hi: 2.5 }, 3.0),
            (Distribution::Exponential { rate: 2.0 }, 8.0),
            (Distribution::Normal { mean: 3.0, sd: 0.7 }, 7.0),
            (Distribution::Normal { mean: 0.5, sd: 1.0 }, 6.0),
        ];
        for (dist, p_max) in cases {
            let (lo, hi) = dist.support();
            let d = Curve::parametric(CurveRole::Demand, 1.7, dist.clone(), 9, p_max).unwrap();
            let s = Curve::parametric(CurveRole::Supply, 0.9, dist.clone(), 9, p_max).unwrap();
            for p in d.points().iter().skip(1) {
                let f = |v: f64| v * dist.density(v);
                let expect = 1.7 * quad(&f, p.marginal, hi);
                assert!(
                    (p.cumulative - expect).abs() <= 1e-8 * expect.abs().max(1e-12),
                    "{dist:?} demand level {}: {} vs {expect}",
                    p.level,
                    p.cumulative
                );
                let mass = quad(&|v| dist.density(v), p.marginal, hi);
                assert!((mass - p.level).abs() < 1e-8);
            }
            for p in s.points().iter().skip(1) {
                let f = |v: f64| v * dist.density(v);
                let expect = 0.9 * quad(&f, lo, p.marginal);
                assert!(
                    (p.cumulative - expect).abs() <= 1e-8 * expect.abs().max(1e-12),
                    "{dist:?} supply level {}: {} vs {expect}",
                    p.level,
                    p.cumulative
                );
            }
            assert!(d.regularity().is_regular());
            assert!(s.regularity().is_regular());
        }
    }

    #[test]
    fn value_dominates_revenue() {
        let d = Curve::normal_demand(2.0, 4.0, 1.0, 17, 10.0).unwrap();
        let s = Curve::exponential_supply(3.0, 0.5, 17).unwrap();
        for k in 0..=100 {
            let l = k as f64 / 100.0;
            assert!(d.cumulative_at(l) >= d.revenue_at(l) - 1e-12);
            assert!(s.cumulative_at(l) <= s.revenue_at(l) + 1e-12);
        }
    }

    #[test]
    fn regularity_examples() {
        let uniform = Curve::uniform_demand(1.0, 2.0, 3.0, 17, 3.0).unwrap();
        assert_eq!(uniform.regularity(), Regularity::Regular);
        let pt = |level, marginal| CurvePoint { level, marginal, cumulative: 0.0 };
        let bumpy = [pt(0.1, 10.0), pt(0.2, 1.0), pt(0.3, 5.0)];
        assert_eq!(check_regularity(CurveRole::Demand, &bumpy), Regularity::Violated(2));
        let two = [pt(0.0, 5.0), pt(1.0, 1.0)];
        assert!(check_regularity(CurveRole::Demand, &two).is_regular());
        assert!(check_regularity(CurveRole::Supply, &two).is_regular());
    }

    #[test]
    fn explicit_grid_validation() {
        let pts = vec![
            CurvePoint { level: 0.0, marginal: 2.0, cumulative: 0.0 },
            CurvePoint { level: 1.0, marginal: 1.0, cumulative: 1.0 },
        ];
        assert!(Curve::from_points(CurveRole::Demand, 1.0, pts.clone(), 2.0).is_ok());
        assert!(Curve::from_points(CurveRole::Demand, 1.0, pts.clone(), 3.0).is_err());
        let mut convex = pts.clone();
        convex.insert(1, CurvePoint { level: 0.5, marginal: 1.5, cumulative: 0.2 });
        assert!(Curve::from_points(CurveRole::Demand, 1.0, convex, 2.0).is_err());
        let no_zero = vec![
            CurvePoint { level: 0.5, marginal: 2.0, cumulative: 0.5 },
            CurvePoint { level: 1.0, marginal: 1.0, cumulative: 1.0 },
        ];
        assert!(Curve::from_points(CurveRole::Demand, 1.0, no_zero, 2.0).is_err());
    }

    #[test]
    fn grid_interpolation_is_exact_at_points_and_concave_between() {
        let pts = vec![
            CurvePoint { level: 0.0, marginal: 5.0, cumulative: 0.0 },
            CurvePoint { level: 0.5, marginal: 3.0, cumulative: 1.8 },
            CurvePoint { level: 1.0, marginal: 1.0, cumulative: 2.5 },
        ];
        let c = Curve::from_points(CurveRole::Demand, 1.0, pts, 5.0).unwrap();
        assert_eq!(c.marginal_at(0.5), 3.0);
        assert_eq!(c.cumulative_at(1.0), 2.5);
        assert!((c.cumulative_at(0.75) - 2.15).abs() < 1e-12);
        assert!((c.revenue_at(0.75) - 0.5 * (1.5 + 1.0)).abs() < 1e-12);
    }

    fn line_metric(xs: &[f64]) -> Metric {
        let d = xs.iter().map(|a| xs.iter().map(|b| (a - b).abs()).collect()).collect();
        Metric::new(d, (0..xs.len()).collect()).unwrap()
    }

    #[test]
    fn ball_examples() {
        let m = line_metric(&[0.0, 1.0, 2.0]);
        assert_eq!(m.ball(1, 0.0).unwrap(), vec![1]);
        assert_eq!(m.ball(1, 1.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(m.ball(0, 1.0).unwrap(), vec![0, 1]);
        assert!(matches!(m.ball(7, 1.0), Err(Error::UnknownNode(7))));
        let far = Metric::new(vec![vec![0.0, f64::INFINITY], vec![f64::INFINITY, 0.0]], vec![0, 1]).unwrap();
        assert_eq!(far.ball(0, 1e300).unwrap(), vec![0]);
    }

    #[test]
    fn metric_rejects_non_metrics() {
        assert!(Metric::new(vec![vec![0.0, 1.0], vec![2.0, 0.0]], vec![0]).is_err());
        let tri = vec![vec![0.0, 1.0, 5.0], vec![1.0, 0.0, 1.0], vec![5.0, 1.0, 0.0]];
        assert!(Metric::new(tri, vec![0]).is_err());
        let inf_break = vec![
            vec![0.0, 1.0, f64::INFINITY],
            vec![1.0, 0.0, 1.0],
            vec![f64::INFINITY, 1.0, 0.0],
        ];
        assert!(Metric::new(inf_break, vec![0]).is_err());
        assert!(Metric::new(vec![vec![0.0]], vec![1]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn ball_monotone_in_radius(xs in proptest::collection::vec(-5.0f64..5.0, 1..8), r1 in 0.0f64..4.0, dr in 0.0f64..4.0) {
            let m = line_metric(&xs);
            for c in 0..xs.len() {
                let small = m.ball(c, r1).unwrap();
                let big = m.ball(c, r1 + dr).unwrap();
                proptest::prop_assert!(small.iter().all(|v| big.contains(v)));
                proptest::prop_assert!(small.contains(&c));
            }
        }
    }
}
