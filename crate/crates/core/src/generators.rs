//! Instance families: the two-node integrality-gap example, the
//! independent-set reduction, and seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envy::{EnvyInstance, EnvyNode, Subtype};
use crate::error::{Error, Result};
use crate::instance::{Curve, CurvePoint, CurveRole, Distribution, Instance, Metric, Node, DEFAULT_GRID_SIZE};

/// Two far-apart nodes where the budget-balance row lets the relaxation
/// open the loss-making node partially.
///
/// Node `v` has values `U[2,3]` and costs `U[0,1]`; node `v'` has values
/// `U[c'-1-ε, 2c'+1+ε]` and costs `U[0,c']` with `c' = 2c/(1-c)`. Both
/// have volume `L`. Metadata records the integer optimum and the value of
/// the fractional solution that opens `v'` to `1/(1+ε)`.
pub fn gap_instance(l: f64, c: f64, eps: f64, grid_size: usize) -> Result<Instance> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::Domain(format!("c must lie in (0, 1), got {c}")));
    }
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::Domain(format!("L must be positive, got {l}")));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("eps must be nonnegative, got {eps}")));
    }
    let cp = 2.0 * c / (1.0 - c);
    let (lo, hi) = (cp - 1.0 - eps, 2.0 * cp + 1.0 + eps);
    if lo < 0.0 {
        return Err(Error::Domain(format!("c = {c} puts buyer values below zero")));
    }
    let p_max = hi.max(3.0);
    let v = Node::new(
        "v",
        Curve::uniform_demand(l, 2.0, 3.0, grid_size, p_max)?,
        Curve::uniform_supply(l, 0.0, 1.0, grid_size)?,
    )?;
    let w = Node::new(
        "v'",
        Curve::uniform_demand(l, lo, hi, grid_size, p_max)?,
        Curve::uniform_supply(l, 0.0, cp, grid_size)?,
    )?;
    let inf = f64::INFINITY;
    let metric = Metric::new(vec![vec![0.0, inf], vec![inf, 0.0]], vec![0, 1])?;
    let mut inst = Instance::new(vec![v, w], metric, l, 1.0, p_max)?;
    let integer_opt = if eps > 0.0 { 2.0 * l } else { (2.0 + cp) * l };
    inst.metadata.insert("c".into(), c);
    inst.metadata.insert("c_prime".into(), cp);
    inst.metadata.insert("eps".into(), eps);
    inst.metadata.insert("integer_opt".into(), integer_opt);
    inst.metadata.insert("lp_value".into(), (2.0 + cp / (1.0 + eps)) * l);
    inst.metadata.insert("gap".into(), (2.0 + cp / (1.0 + eps)) * l / integer_opt);
    Ok(inst)
}

/// Undirected simple graph on `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Graph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<Graph> {
        let mut seen = std::collections::BTreeSet::new();
        for &(a, b) in &edges {
            if a >= n || b >= n || a == b {
                return Err(Error::Domain(format!("bad edge ({a}, {b}) on {n} vertices")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Domain(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Graph { n, edges })
    }

    /// Circulant `k`-regular graph: `i ~ i±1, …, i±k/2`, plus the antipode
    /// when `k` is odd. Needs `k·n` even and `k < n`.
    pub fn circulant(k: usize, n: usize) -> Result<Graph> {
        if k == 0 || k >= n || (k * n) % 2 == 1 || (k % 2 == 1 && n % 2 == 1) {
            return Err(Error::Domain(format!("no circulant {k}-regular graph on {n} vertices")));
        }
        let mut edges = Vec::new();
        for i in 0..n {
            for step in 1..=k / 2 {
                let j = (i + step) % n;
                if !edges.contains(&(j.min(i), j.max(i))) {
                    edges.push((i.min(j), i.max(j)));
                }
            }
            if k % 2 == 1 && i < n / 2 {
                edges.push((i, i + n / 2));
            }
        }
        Graph::new(n, edges)
    }

    /// The `d`-dimensional hypercube.
    pub fn hypercube(d: u32) -> Graph {
        let n = 1usize << d;
        let edges = (0..n)
            .flat_map(|i| (0..d).map(move |b| (i, i ^ (1 << b))).filter(|(a, b)| a < b))
            .collect();
        Graph { n, edges }
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == v || b == v).count()
    }

    /// Maximum independent set size by exhaustive search (small graphs only).
    pub fn max_independent_set(&self) -> usize {
        assert!(self.n < 32, "exhaustive search needs fewer than 32 vertices");
        let adj: Vec<u32> = (0..self.n)
            .map(|v| {
                self.edges.iter().fold(0u32, |m, &(a, b)| {
                    if a == v {
                        m | 1 << b
                    } else if b == v {
                        m | 1 << a
                    } else {
                        m
                    }
                })
            })
            .collect();
        (0u32..1 << self.n)
            .filter(|&set| (0..self.n).all(|v| set >> v & 1 == 0 || adj[v] & set == 0))
            .map(|set| set.count_ones() as usize)
            .max()
            .unwrap_or(0)
    }
}

/// Independent-set reduction on a `k`-regular graph: a supply node with
/// `s = k` and wage `1-δ` at every vertex, a demand node with `d = 1` and
/// value 1 at every edge midpoint, edges of length `2R`, `L = k`. Only
/// vertices are facility candidates. Nodes `0..n` are the vertices, the
/// rest follow the edge order.
pub fn hardness_instance(graph: &Graph, radius: f64, delta: f64) -> Result<Instance> {
    let k = graph.degree(0);
    if graph.n == 0 || (0..graph.n).any(|v| graph.degree(v) != k) || k == 0 {
        return Err(Error::Domain("graph must be k-regular with k >= 1".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Domain(format!("R must be positive, got {radius}")));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::Domain(format!("delta must lie in [0, 1), got {delta}")));
    }
    let kf = k as f64;
    let p_max = 2.0;
    let m = graph.edges.len();
    let total = graph.n + m;

    // Subdivided graph: vertex -- midpoint edges of length R.
    let mut dist = vec![vec![f64::INFINITY; total]; total];
    for (i, row) in dist.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for (e, &(a, b)) in graph.edges.iter().enumerate() {
        let mid = graph.n + e;
        for v in [a, b] {
            dist[v][mid] = radius;
            dist[mid][v] = radius;
        }
    }
    for via in 0..total {
        for i in 0..total {
            for j in 0..total {
                let d = dist[i][via] + dist[via][j];
                if d < dist[i][j] {
                    dist[i][j] = d;
                }
            }
        }
    }
    let metric = Metric::new(dist, (0..graph.n).collect())?;

    let none_demand = |vol: f64| {
        let pts = vec![CurvePoint { level: 0.0, marginal: p_max, cumulative: 0.0 }, CurvePoint {
            level: 1.0,
            marginal: p_max - 1e-9,
            cumulative: 0.0,
        }];
        Curve::from_points(CurveRole::Demand, vol, pts, p_max)
    };
    let none_supply = || {
        let pts = vec![CurvePoint { level: 0.0, marginal: 0.0, cumulative: 0.0 }, CurvePoint {
            level: 1.0,
            marginal: 0.0,
            cumulative: 0.0,
        }];
        Curve::from_points(CurveRole::Supply, 0.0, pts, p_max)
    };
    let mut nodes = Vec::with_capacity(total);
    for v in 0..graph.n {
        let supply = Curve::from_points(
            CurveRole::Supply,
            kf,
            vec![CurvePoint { level: 0.0, marginal: 0.0, cumulative: 0.0 }, CurvePoint {
                level: 1.0,
                marginal: 1.0 - delta,
                cumulative: kf * (1.0 - delta),
            }],
            p_max,
        )?;
        nodes.push(Node::new(format!("vertex{v}"), none_demand(0.0)?, supply)?);
    }
    for (e, &(a, b)) in graph.edges.iter().enumerate() {
        let demand = Curve::from_points(
            CurveRole::Demand,
            1.0,
            vec![CurvePoint { level: 0.0, marginal: p_max, cumulative: 0.0 }, CurvePoint {
                level: 1.0,
                marginal: 1.0,
                cumulative: 1.0,
            }],
            p_max,
        )?;
        nodes.push(Node::new(format!("edge{e}:{a}-{b}"), demand, none_supply()?)?);
    }
    let mut inst = Instance::new(nodes, metric, kf, radius, p_max)?;
    inst.metadata.insert("k".into(), kf);
    inst.metadata.insert("delta".into(), delta);
    inst.metadata.insert("surplus_per_facility".into(), kf * delta);
    if graph.n < 32 {
        let mis = graph.max_independent_set() as f64;
        inst.metadata.insert("mis".into(), mis);
        inst.metadata.insert("integer_opt".into(), kf * delta * mis);
    }
    Ok(inst)
}

/// Distribution family for random curves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CurveFamily {
    #[default]
    Uniform,
    Exponential,
    Normal,
    /// Each node draws one of the three.
    Mixed,
}

impl std::str::FromStr for CurveFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(CurveFamily::Uniform),
            "exponential" => Ok(CurveFamily::Exponential),
            "normal" => Ok(CurveFamily::Normal),
            "mixed" => Ok(CurveFamily::Mixed),
            other => Err(Error::Parse(format!("unknown curve family {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomSpec {
    pub n: usize,
    pub seed: u64,
    pub family: CurveFamily,
    /// Side of the square holding the nodes.
    pub scale: f64,
    pub flow_lower_bound: f64,
    pub radius: f64,
    pub grid_size: usize,
}

impl Default for RandomSpec {
    fn default() -> Self {
        RandomSpec {
            n: 6,
            seed: 0,
            family: CurveFamily::Uniform,
            scale: 1.0,
            flow_lower_bound: 1.0,
            radius: 0.3,
            grid_size: DEFAULT_GRID_SIZE,
        }
    }
}

/// Seeded random instance: nodes uniform in a square, volumes in
/// `[0.5, 2]`, buyer values above seller costs on average.
pub fn random_instance(spec: &RandomSpec) -> Result<Instance> {
    if spec.n == 0 {
        return Err(Error::Domain("need at least one node".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coords: Vec<(f64, f64)> =
        (0..spec.n).map(|_| (rng.gen::<f64>() * spec.scale, rng.gen::<f64>() * spec.scale)).collect();
    let mut drawn = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let d = rng.gen_range(0.5..2.0);
        let s = rng.gen_range(0.5..2.0);
        let family = match spec.family {
            CurveFamily::Mixed => [CurveFamily::Uniform, CurveFamily::Exponential, CurveFamily::Normal][rng.gen_range(0..3)],
            f => f,
        };
        let (value, cost) = match family {
            CurveFamily::Exponential => (
                Distribution::Exponential { rate: rng.gen_range(0.6..1.2) },
                Distribution::Exponential { rate: rng.gen_range(1.5..3.0) },
            ),
            CurveFamily::Normal => (
                Distribution::Normal { mean: rng.gen_range(2.2..2.8), sd: rng.gen_range(0.2..0.4) },
                Distribution::Normal { mean: rng.gen_range(0.8..1.4), sd: rng.gen_range(0.2..0.4) },
            ),
            _ => {
                let a = rng.gen_range(0.5..2.0);
                let b = a + rng.gen_range(0.5..2.0);
                let lo = rng.gen_range(0.0..1.0);
                let hi = lo + rng.gen_range(0.5..1.5);
                (Distribution::Uniform { lo: a, hi: b }, Distribution::Uniform { lo, hi })
            }
        };
        drawn.push((d, s, value, cost));
    }
    // Smallest integer ceiling covering every buyer's value support.
    let p_max = drawn.iter().map(|(_, _, v, _)| v.support().1).fold(1.0, f64::max).ceil();
    let mut nodes = Vec::with_capacity(spec.n);
    for (j, (d, s, value, cost)) in drawn.into_iter().enumerate() {
        let g = spec.grid_size;
        let demand = Curve::parametric(CurveRole::Demand, d, value, g, p_max)?;
        let supply = Curve::parametric(CurveRole::Supply, s, cost, g, p_max)?;
        nodes.push(Node::new(format!("n{j}"), demand, supply)?);
    }
    let mut inst = Instance::new(nodes, Metric::from_coordinates(&coords)?, spec.flow_lower_bound, spec.radius, p_max)?;
    inst.metadata.insert("seed".into(), spec.seed as f64);
    Ok(inst)
}

/// Parameters of [`random_envy_instance`].
#[derive(Clone, Debug, PartialEq)]
pub struct EnvySpec {
    pub n: usize,
    pub seed: u64,
    /// Subtypes per node.
    pub subtypes: usize,
    /// Size of the price grid and of the wage grid.
    pub grid: usize,
    pub flow_lower_bound: f64,
    pub radius: f64,
}

impl Default for EnvySpec {
    fn default() -> Self {
        EnvySpec { n: 4, seed: 0, subtypes: 3, grid: 4, flow_lower_bound: 1.0, radius: 0.4 }
    }
}

/// Seeded envy-free instance in the unit square. Subtype `k` has the `k`-th
/// shortest deadline as its weight and the DAG is the chain `k -> k + 1`, so
/// shorter deadlines are offered higher prices and lower wages.
pub fn random_envy_instance(spec: &EnvySpec) -> Result<EnvyInstance> {
    if spec.n == 0 || spec.subtypes == 0 || spec.grid == 0 {
        return Err(Error::Domain("need at least one node, subtype and grid point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coords: Vec<(f64, f64)> = (0..spec.n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    let p_max = 4.0;
    let step = p_max / (spec.grid + 1) as f64;
    let prices: Vec<f64> = (1..=spec.grid).map(|t| t as f64 * step).collect();
    let wages: Vec<f64> = (1..=spec.grid).map(|t| t as f64 * 2.0 / (spec.grid + 1) as f64).collect();
    let mut nodes = Vec::with_capacity(spec.n);
    for j in 0..spec.n {
        let mut deadlines: Vec<f64> = (0..spec.subtypes).map(|_| rng.gen_range(0.5..3.0)).collect();
        deadlines.sort_by(f64::total_cmp);
        let subtypes = deadlines
            .into_iter()
            .map(|weight| {
                let lo = rng.gen_range(0.0..1.5);
                let hi = lo + rng.gen_range(1.0..2.5);
                let cost_hi = rng.gen_range(1.0..2.0);
                Subtype {
                    weight,
                    demand_volume: rng.gen_range(0.3..1.0),
                    value: Distribution::Uniform { lo, hi },
                    supply_volume: rng.gen_range(0.3..1.0),
                    cost: Distribution::Uniform { lo: 0.0, hi: cost_hi },
                }
            })
            .collect();
        let edges = (1..spec.subtypes).map(|k| (k - 1, k)).collect();
        nodes.push(EnvyNode::new(format!("v{j}"), subtypes, edges)?);
    }
    let metric = Metric::from_coordinates(&coords)?;
    let mut inst = EnvyInstance::new(nodes, metric, spec.flow_lower_bound, spec.radius, p_max, prices, wages)?;
    inst.metadata.insert("seed".into(), spec.seed as f64);
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::Regularity;

    #[test]
    fn gap_metadata() {
        let inst = gap_instance(10.0, 0.5, 0.0, 5).unwrap();
        assert_eq!(inst.metadata["c_prime"], 2.0);
        assert_eq!(inst.metadata["integer_opt"], 40.0);
        let inst = gap_instance(10.0, 0.5, 0.01, 5).unwrap();
        assert_eq!(inst.metadata["integer_opt"], 20.0);
        assert!((inst.metadata["lp_value"] - (2.0 / 1.01 + 2.0) * 10.0).abs() < 1e-12);
        let tight = gap_instance(10.0, 0.99, 0.01, 5).unwrap();
        assert!(tight.metadata["gap"] > 50.0);
        assert!(gap_instance(10.0, 0.1, 0.0, 5).is_err());
    }

    #[test]
    fn graphs() {
        let c4 = Graph::circulant(2, 4).unwrap();
        assert_eq!(c4.edges.len(), 4);
        assert_eq!(c4.max_independent_set(), 2);
        let tri = Graph::circulant(2, 3).unwrap();
        assert_eq!(tri.max_independent_set(), 1);
        let cube = Graph::hypercube(3);
        assert_eq!(cube.edges.len(), 12);
        assert!((0..8).all(|v| cube.degree(v) == 3));
        assert_eq!(cube.max_independent_set(), 4);
        let k33 = Graph::circulant(3, 6).unwrap();
        assert!((0..6).all(|v| k33.degree(v) == 3));
        assert!(Graph::circulant(3, 5).is_err());
    }

    #[test]
    fn hardness_layout() {
        let inst = hardness_instance(&Graph::circulant(2, 4).unwrap(), 1.0, 0.1).unwrap();
        assert_eq!(inst.len(), 8);
        assert_eq!(inst.metric.candidates(), &[0, 1, 2, 3]);
        assert_eq!(inst.metric.distance(0, 1), 2.0);
        assert_eq!(inst.metric.distance(0, 4), 1.0);
        assert_eq!(inst.ball(4, 1.0).unwrap().len(), 3);
        assert!((inst.metadata["integer_opt"] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn random_is_reproducible_and_regular() {
        for family in [CurveFamily::Uniform, CurveFamily::Exponential, CurveFamily::Normal, CurveFamily::Mixed] {
            let spec = RandomSpec { seed: 7, family, ..RandomSpec::default() };
            let a = random_instance(&spec).unwrap();
            let b = random_instance(&spec).unwrap();
            assert_eq!(format!("{:?}", a.nodes), format!("{:?}", b.nodes));
            for node in &a.nodes {
                assert_eq!(node.demand().regularity(), Regularity::Regular);
                assert_eq!(node.supply().regularity(), Regularity::Regular);
            }
        }
    }
}
