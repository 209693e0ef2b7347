//! File formats.
//!
//! Instances, solutions and lottery policies are JSON documents whose
//! `format` field names the document kind and version. Infinite distances
//! (and any non-finite metadata value) are written as the strings `"inf"`,
//! `"-inf"` or `"nan"`. Reports are plain `key: value` text.
//!
//! ```
//! use tsfl_core::generators::gap_instance;
//! use tsfl_core::io::{instance_to_string, parse_instance};
//!
//! let inst = gap_instance(10.0, 0.5, 0.0, 5).unwrap();
//! let text = instance_to_string(&inst);
//! assert_eq!(instance_to_string(&parse_instance(&text).unwrap()), text);
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::envy::{EnvyInstance, EnvyNode, LotteryPolicy, Subtype};
use crate::error::{Error, Result};
use crate::instance::{Curve, CurvePoint, CurveRole, CurveShape, Distribution, Instance, Metric, Node};
use crate::rounding::IntegralSolution;

pub const INSTANCE_FORMAT: &str = "tsfl-instance/1";
pub const SOLUTION_FORMAT: &str = "tsfl-solution/1";
pub const POLICY_FORMAT: &str = "tsfl-policy/1";

/// A real number that may be infinite.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Real(f64);

impl Serialize for Real {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Real, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Real(v)),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(Real(f64::INFINITY)),
                "-inf" => Ok(Real(f64::NEG_INFINITY)),
                "nan" => Ok(Real(f64::NAN)),
                other => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got \"{other}\""))),
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    format: String,
    p_max: f64,
    flow_lower_bound: f64,
    radius: Real,
    metric: MetricFile,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    nodes: Vec<NodeFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    envy: Option<EnvyFile>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, Real>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distances: Option<Vec<Vec<Real>>>,
    /// Planar points; the metric is Euclidean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coordinates: Option<Vec<[f64; 2]>>,
    /// Facility sites; all nodes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    candidates: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    name: String,
    demand: CurveFile,
    supply: CurveFile,
}

/// Either a parametric curve (`distribution` and `grid_size`) or an
/// explicit grid (`points`).
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CurveFile {
    volume: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distribution: Option<Distribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points: Option<Vec<CurvePoint>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvyFile {
    prices: Vec<f64>,
    wages: Vec<f64>,
    nodes: Vec<EnvyNodeFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvyNodeFile {
    name: String,
    subtypes: Vec<Subtype>,
    #[serde(default)]
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct Tagged<T> {
    format: String,
    #[serde(flatten)]
    body: T,
}

fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("in-memory documents serialize");
    s.push('\n');
    s
}

fn check_format(found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::Parse(format!("field `format`: expected \"{expected}\", found \"{found}\"")))
    }
}

fn at(path: impl fmt::Display) -> impl Fn(Error) -> Error {
    move |e| Error::Parse(format!("{path}: {e}"))
}

fn curve_from_file(file: CurveFile, role: CurveRole, p_max: f64) -> Result<Curve> {
    match (file.distribution, file.grid_size, file.points) {
        (Some(dist), Some(grid), None) => Curve::parametric(role, file.volume, dist, grid, p_max),
        (None, None, Some(points)) => Curve::from_points(role, file.volume, points, p_max),
        _ => Err(Error::Parse("give either `distribution` with `grid_size`, or `points`".into())),
    }
}

fn curve_to_file(curve: &Curve) -> CurveFile {
    match curve.shape() {
        CurveShape::Parametric { dist, grid_size } => CurveFile {
            volume: curve.volume(),
            distribution: Some(dist.clone()),
            grid_size: Some(*grid_size),
            points: None,
        },
        CurveShape::Grid => {
            CurveFile { volume: curve.volume(), distribution: None, grid_size: None, points: Some(curve.points().to_vec()) }
        }
    }
}

fn metric_from_file(file: MetricFile) -> Result<Metric> {
    let metric = match (file.distances, file.coordinates) {
        (Some(d), None) => {
            let n = d.len();
            Metric::new(d.into_iter().map(|row| row.into_iter().map(|r| r.0).collect()).collect(), (0..n).collect())
        }
        (None, Some(c)) => Metric::from_coordinates(&c.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>()),
        _ => Err(Error::Parse("give exactly one of `distances` or `coordinates`".into())),
    }
    .map_err(at("metric"))?;
    match file.candidates {
        None => Ok(metric),
        Some(c) => Metric::new(metric.matrix().to_vec(), c).map_err(at("metric.candidates")),
    }
}

fn metric_to_file(metric: &Metric) -> MetricFile {
    let all = metric.candidates().len() == metric.len();
    MetricFile {
        distances: Some(metric.matrix().iter().map(|row| row.iter().map(|&v| Real(v)).collect()).collect()),
        coordinates: None,
        candidates: if all { None } else { Some(metric.candidates().to_vec()) },
    }
}

fn parse_file(text: &str) -> Result<InstanceFile> {
    let file: InstanceFile = from_json(text)?;
    check_format(&file.format, INSTANCE_FORMAT)?;
    Ok(file)
}

/// Parses an instance document. Errors name the offending line and column
/// (syntax and missing fields) or the field path (invalid values).
pub fn parse_instance(text: &str) -> Result<Instance> {
    let file = parse_file(text)?;
    if file.nodes.is_empty() {
        return Err(Error::Parse("field `nodes`: an instance needs at least one node".into()));
    }
    let metric = metric_from_file(file.metric)?;
    let mut nodes = Vec::with_capacity(file.nodes.len());
    for (j, n) in file.nodes.into_iter().enumerate() {
        let demand = curve_from_file(n.demand, CurveRole::Demand, file.p_max).map_err(at(format!("nodes[{j}].demand")))?;
        let supply = curve_from_file(n.supply, CurveRole::Supply, file.p_max).map_err(at(format!("nodes[{j}].supply")))?;
        nodes.push(Node::new(n.name, demand, supply).map_err(at(format!("nodes[{j}]")))?);
    }
    let mut inst = Instance::new(nodes, metric, file.flow_lower_bound, file.radius.0, file.p_max)?;
    inst.metadata = file.metadata.into_iter().map(|(k, v)| (k, v.0)).collect();
    Ok(inst)
}

/// Canonical text of an instance.
pub fn instance_to_string(inst: &Instance) -> String {
    to_json(&InstanceFile {
        format: INSTANCE_FORMAT.into(),
        p_max: inst.p_max,
        flow_lower_bound: inst.flow_lower_bound,
        radius: Real(inst.radius),
        metric: metric_to_file(&inst.metric),
        nodes: inst
            .nodes
            .iter()
            .map(|n| NodeFile { name: n.name.clone(), demand: curve_to_file(n.demand()), supply: curve_to_file(n.supply()) })
            .collect(),
        envy: None,
        metadata: inst.metadata.iter().map(|(k, &v)| (k.clone(), Real(v))).collect(),
    })
}

/// Parses an instance document carrying an `envy` block.
pub fn parse_envy_instance(text: &str) -> Result<EnvyInstance> {
    let file = parse_file(text)?;
    let envy = file.envy.ok_or_else(|| Error::Parse("missing field `envy`".into()))?;
    let metric = metric_from_file(file.metric)?;
    let mut nodes = Vec::with_capacity(envy.nodes.len());
    for (j, n) in envy.nodes.into_iter().enumerate() {
        nodes.push(EnvyNode::new(n.name, n.subtypes, n.edges).map_err(at(format!("envy.nodes[{j}]")))?);
    }
    let mut inst =
        EnvyInstance::new(nodes, metric, file.flow_lower_bound, file.radius.0, file.p_max, envy.prices, envy.wages)?;
    inst.metadata = file.metadata.into_iter().map(|(k, v)| (k, v.0)).collect();
    Ok(inst)
}

pub fn envy_instance_to_string(inst: &EnvyInstance) -> String {
    to_json(&InstanceFile {
        format: INSTANCE_FORMAT.into(),
        p_max: inst.p_max,
        flow_lower_bound: inst.flow_lower_bound,
        radius: Real(inst.radius),
        metric: metric_to_file(&inst.metric),
        nodes: Vec::new(),
        envy: Some(EnvyFile {
            prices: inst.prices.clone(),
            wages: inst.wages.clone(),
            nodes: inst
                .nodes
                .iter()
                .map(|n| EnvyNodeFile { name: n.name.clone(), subtypes: n.subtypes.clone(), edges: n.edges.clone() })
                .collect(),
        }),
        metadata: inst.metadata.iter().map(|(k, &v)| (k.clone(), Real(v))).collect(),
    })
}

pub fn parse_solution(text: &str) -> Result<IntegralSolution> {
    let doc: Tagged<IntegralSolution> = from_json(text)?;
    check_format(&doc.format, SOLUTION_FORMAT)?;
    Ok(doc.body)
}

pub fn solution_to_string(sol: &IntegralSolution) -> String {
    to_json(&Tagged { format: SOLUTION_FORMAT.into(), body: sol })
}

pub fn parse_policy(text: &str) -> Result<LotteryPolicy> {
    let doc: Tagged<LotteryPolicy> = from_json(text)?;
    check_format(&doc.format, POLICY_FORMAT)?;
    Ok(doc.body)
}

pub fn policy_to_string(policy: &LotteryPolicy) -> String {
    to_json(&Tagged { format: POLICY_FORMAT.into(), body: policy })
}

/// Reads a file into a string, naming the path on failure.
pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_instance(path: &Path) -> Result<Instance> {
    parse_instance(&read_text(path)?).map_err(at(path.display()))
}

pub fn read_envy_instance(path: &Path) -> Result<EnvyInstance> {
    parse_envy_instance(&read_text(path)?).map_err(at(path.display()))
}

/// A `key: value` report, optionally followed by free-form record lines
/// (for instance one line per guess).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextReport {
    pub fields: Vec<(String, String)>,
    pub records: Vec<String>,
}

impl TextReport {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Numeric field; `none` reads as `None`.
    pub fn number(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Err(Error::Parse(format!("report has no field `{key}`"))),
            Some("none") => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::Parse(format!("field `{key}`: `{v}` is not a number"))),
        }
    }
}

impl FromStr for TextReport {
    type Err = Error;

    fn from_str(s: &str) -> Result<TextReport> {
        let mut report = TextReport::default();
        for (lineno, line) in s.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match line.split_once(": ") {
                Some((k, v)) if report.records.is_empty() && !k.contains(' ') => {
                    report.fields.push((k.to_string(), v.to_string()));
                }
                _ if !report.fields.is_empty() => report.records.push(line.to_string()),
                _ => return Err(Error::Parse(format!("report line {}: expected `key: value`", lineno + 1))),
            }
        }
        Ok(report)
    }
}

impl fmt::Display for TextReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines = self.fields.iter().map(|(k, v)| format!("{k}: {v}")).chain(self.records.iter().cloned());
        for (i, line) in lines.enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            f.write_str(&line)?;
        }
        Ok(())
    }
}
